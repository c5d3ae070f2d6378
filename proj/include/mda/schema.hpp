#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mda/composition.hpp"
#include "mda/errors.hpp"
#include "mda/util.hpp"

namespace mda::schema {

using Json = nlohmann::ordered_json;

enum class DatasetKind { meltpoolnet, hea_cca };

inline const char* dataset_name(DatasetKind k) {
  return k == DatasetKind::meltpoolnet ? "meltpoolnet" : "hea_cca";
}

inline DatasetKind dataset_from_name(std::string_view name) {
  if (name == "meltpoolnet") return DatasetKind::meltpoolnet;
  if (name == "hea_cca" || name == "hea") return DatasetKind::hea_cca;
  throw Error(errc::config_error, "unknown dataset: " + std::string(name));
}

/// The wt% element columns, in schema declaration order.
inline const std::array<const char*, 19>& composition_elements() {
  static const std::array<const char*, 19> kElements = {
      "Y",  "Zn", "Mg", "Si", "Al", "Sn", "Zr", "W",  "Ti", "V",
      "Co", "Cu", "Ta", "Nb", "Ni", "Cr", "Fe", "Mn", "Mo"};
  return kElements;
}

struct Experiment {
  std::optional<std::string> sample_id;
  std::optional<double> power_W;
  std::optional<double> velocity_mm_per_s;
  std::optional<double> powder_flowrate_g_per_min;
  std::optional<double> layer_thickness_um;
  std::optional<double> beam_diameter_um;
  std::optional<double> hatch_spacing_um;
  std::optional<double> depth_um;
  std::optional<double> width_um;
  std::optional<double> length_um;
  std::optional<double> depth_to_width;
  std::optional<double> length_to_width;
  std::map<std::string, double> other_ratios;
  std::optional<double> linear_energy_J_per_mm;
  std::optional<double> volumetric_energy_J_per_mm3;

  bool operator==(const Experiment&) const = default;
};

struct MeltpoolRecord {
  std::optional<std::string> material;
  std::optional<std::string> process_type;
  std::optional<std::string> sub_process;
  std::vector<Experiment> experiments;
  std::optional<double> density_kg_per_m3;
  std::optional<double> specific_heat_Cp_J_per_kgK;
  std::optional<double> thermal_conductivity_k_W_per_mK;
  std::optional<double> melting_temperature_K;
  std::optional<double> minimum_absorptivity;
  std::array<std::optional<double>, 19> composition_wt_percent{};
  std::optional<double> d10;
  std::optional<double> d50;
  std::optional<double> d90;
  std::optional<std::string> paper_id;
  std::optional<std::string> paper_title;
  std::optional<std::string> paper_doi;

  bool operator==(const MeltpoolRecord&) const = default;
};

struct AlloyRecord {
  std::string composition_atomic;
  std::optional<std::string> phases;
  std::optional<double> rho_g_per_cm3;
  std::optional<double> HV;
  std::optional<std::string> test_type;  // "C" or "T"
  std::optional<double> sigma_Y_MPa;
  std::optional<double> sigma_max_MPa;
  std::optional<double> epsilon_pct;
  std::optional<double> E_GPa;

  bool operator==(const AlloyRecord&) const = default;
};

struct Violation {
  std::string path;
  std::string reason;
  bool operator==(const Violation&) const = default;
};

struct Coercion {
  std::string path;
  std::string from;
  std::string to;
};

struct ValidationReport {
  std::vector<Violation> violations;
  std::vector<Coercion> coerced;

  bool ok() const { return violations.empty(); }

  std::string describe() const {
    std::string out;
    for (const auto& v : violations) {
      if (!out.empty()) out += "; ";
      out += v.path + ": " + v.reason;
    }
    return out;
  }
};

class ValidationError : public Error {
 public:
  ValidationError(ValidationReport report, std::string context = {})
      : Error(errc::validation_error, report.describe(), std::move(context)),
        report_(std::move(report)) {}

  const ValidationReport& report() const noexcept { return report_; }

 private:
  ValidationReport report_;
};

enum class ValidationMode { strict, lenient };

/// Prefix of the violation reason recorded when an alloy entry is discarded
/// for naming fewer than three distinct elements. Callers that tolerate such
/// drops match on it; keep it stable.
inline constexpr std::string_view kTooFewElementsReason = "fewer than three distinct elements";

/// "100-200", "1.5 - 2.5" and similar two-number spans. Reported alongside
/// single values they can silently replace, so both modes reject them.
inline bool is_numeric_range(std::string_view raw) {
  std::string s = util::trim(raw);
  std::size_t i = 0;
  auto eat_number = [&]() -> bool {
    std::size_t start = i;
    if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
    std::size_t digits = 0;
    while (i < s.size() && util::is_digit(s[i])) ++i, ++digits;
    if (i < s.size() && s[i] == '.') {
      ++i;
      while (i < s.size() && util::is_digit(s[i])) ++i, ++digits;
    }
    return digits > 0 && i > start;
  };
  if (!eat_number()) return false;
  while (i < s.size() && s[i] == ' ') ++i;
  static const std::string_view seps = "-~";
  bool has_sep = false;
  if (i < s.size() && seps.find(s[i]) != std::string_view::npos) {
    has_sep = true;
    ++i;
  } else if (i + 2 < s.size() && s.compare(i, 2, "to") == 0) {
    has_sep = true;
    i += 2;
  }
  if (!has_sep) return false;
  while (i < s.size() && s[i] == ' ') ++i;
  if (!eat_number()) return false;
  return i == s.size();
}

namespace detail {

struct Ctx {
  ValidationMode mode;
  ValidationReport report;

  void violate(std::string path, std::string reason) {
    report.violations.push_back({std::move(path), std::move(reason)});
  }
  void coerce(std::string path, std::string from, std::string to) {
    report.coerced.push_back({std::move(path), std::move(from), std::move(to)});
  }
};

inline std::optional<double> take_number(const Json& v, const std::string& path, Ctx& ctx) {
  if (v.is_null()) return std::nullopt;
  if (v.is_number()) {
    double d = v.get<double>();
    if (!std::isfinite(d)) {
      ctx.violate(path, "number is not finite");
      return std::nullopt;
    }
    return d;
  }
  if (v.is_string()) {
    std::string s = v.get<std::string>();
    if (is_numeric_range(s)) {
      ctx.violate(path, "numeric range \"" + s + "\" not allowed; report a single value");
      return std::nullopt;
    }
    if (ctx.mode == ValidationMode::lenient) {
      if (auto n = util::parse_number(s)) {
        ctx.coerce(path, "\"" + s + "\"", util::format_decimal(*n));
        return n;
      }
    }
    ctx.violate(path, "expected number, got string \"" + s + "\"");
    return std::nullopt;
  }
  ctx.violate(path, "expected number");
  return std::nullopt;
}

inline std::optional<std::string> take_string(const Json& v, const std::string& path, Ctx& ctx) {
  if (v.is_null()) return std::nullopt;
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number() && ctx.mode == ValidationMode::lenient) {
    std::string s = v.is_number_float() ? util::format_decimal(v.get<double>())
                                        : Json(v).dump();
    ctx.coerce(path, Json(v).dump(), "\"" + s + "\"");
    return s;
  }
  ctx.violate(path, "expected string");
  return std::nullopt;
}

inline void check_known_keys(const Json& obj, const std::vector<std::string_view>& known,
                             const std::string& path, Ctx& ctx) {
  if (ctx.mode != ValidationMode::strict) return;
  for (const auto& [key, value] : obj.items()) {
    bool found = false;
    for (auto k : known)
      if (k == key) {
        found = true;
        break;
      }
    if (!found) ctx.violate(path.empty() ? key : path + "." + key, "unknown key");
  }
}

inline std::optional<double> take_nonnegative(const Json& v, const std::string& path, Ctx& ctx) {
  auto n = take_number(v, path, ctx);
  if (n && *n < 0.0) {
    ctx.violate(path, "must be >= 0");
    return std::nullopt;
  }
  return n;
}

inline const Json* get_key(const Json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

inline Experiment parse_experiment(const Json& e, const std::string& path, Ctx& ctx) {
  Experiment out;
  if (!e.is_object()) {
    ctx.violate(path, "expected object");
    return out;
  }
  check_known_keys(e, {"sample_id", "process", "meltpool_geometry", "ratios", "energy"}, path,
                   ctx);
  if (auto* v = get_key(e, "sample_id")) out.sample_id = take_string(*v, path + ".sample_id", ctx);

  if (auto* proc = get_key(e, "process"); proc && proc->is_object()) {
    const std::string p = path + ".process";
    check_known_keys(*proc,
                     {"power_W", "velocity_mm_per_s", "powder_flowrate_g_per_min",
                      "layer_thickness_um", "beam_diameter_um", "hatch_spacing_um"},
                     p, ctx);
    if (auto* v = get_key(*proc, "power_W")) out.power_W = take_nonnegative(*v, p + ".power_W", ctx);
    if (auto* v = get_key(*proc, "velocity_mm_per_s"))
      out.velocity_mm_per_s = take_nonnegative(*v, p + ".velocity_mm_per_s", ctx);
    if (auto* v = get_key(*proc, "powder_flowrate_g_per_min"))
      out.powder_flowrate_g_per_min = take_nonnegative(*v, p + ".powder_flowrate_g_per_min", ctx);
    if (auto* v = get_key(*proc, "layer_thickness_um"))
      out.layer_thickness_um = take_nonnegative(*v, p + ".layer_thickness_um", ctx);
    if (auto* v = get_key(*proc, "beam_diameter_um"))
      out.beam_diameter_um = take_nonnegative(*v, p + ".beam_diameter_um", ctx);
    if (auto* v = get_key(*proc, "hatch_spacing_um"))
      out.hatch_spacing_um = take_nonnegative(*v, p + ".hatch_spacing_um", ctx);
  } else if (proc && !proc->is_null()) {
    ctx.violate(path + ".process", "expected object");
  }

  if (auto* geo = get_key(e, "meltpool_geometry"); geo && geo->is_object()) {
    const std::string p = path + ".meltpool_geometry";
    check_known_keys(*geo, {"depth_um", "width_um", "length_um"}, p, ctx);
    if (auto* v = get_key(*geo, "depth_um")) out.depth_um = take_nonnegative(*v, p + ".depth_um", ctx);
    if (auto* v = get_key(*geo, "width_um")) out.width_um = take_nonnegative(*v, p + ".width_um", ctx);
    if (auto* v = get_key(*geo, "length_um"))
      out.length_um = take_nonnegative(*v, p + ".length_um", ctx);
  } else if (geo && !geo->is_null()) {
    ctx.violate(path + ".meltpool_geometry", "expected object");
  }

  if (auto* ratios = get_key(e, "ratios"); ratios && ratios->is_object()) {
    const std::string p = path + ".ratios";
    check_known_keys(*ratios, {"depth_to_width", "length_to_width", "other"}, p, ctx);
    if (auto* v = get_key(*ratios, "depth_to_width"))
      out.depth_to_width = take_nonnegative(*v, p + ".depth_to_width", ctx);
    if (auto* v = get_key(*ratios, "length_to_width"))
      out.length_to_width = take_nonnegative(*v, p + ".length_to_width", ctx);
    if (auto* other = get_key(*ratios, "other"); other && other->is_object()) {
      for (const auto& [key, value] : other->items()) {
        if (auto n = take_number(value, p + ".other." + key, ctx)) out.other_ratios[key] = *n;
      }
    } else if (other && !other->is_null()) {
      ctx.violate(p + ".other", "expected object");
    }
  } else if (ratios && !ratios->is_null()) {
    ctx.violate(path + ".ratios", "expected object");
  }

  if (auto* energy = get_key(e, "energy"); energy && energy->is_object()) {
    const std::string p = path + ".energy";
    check_known_keys(*energy, {"linear_energy_J_per_mm", "volumetric_energy_J_per_mm3"}, p, ctx);
    if (auto* v = get_key(*energy, "linear_energy_J_per_mm"))
      out.linear_energy_J_per_mm = take_nonnegative(*v, p + ".linear_energy_J_per_mm", ctx);
    if (auto* v = get_key(*energy, "volumetric_energy_J_per_mm3"))
      out.volumetric_energy_J_per_mm3 = take_nonnegative(*v, p + ".volumetric_energy_J_per_mm3", ctx);
  } else if (energy && !energy->is_null()) {
    ctx.violate(path + ".energy", "expected object");
  }

  // A reported d/w that disagrees with the reported depth and width is a
  // transcription defect, not a unit issue.
  if (out.depth_to_width && out.depth_um && out.width_um && *out.width_um > 0.0) {
    double expected = *out.depth_um / *out.width_um;
    if (std::abs(*out.depth_to_width - expected) > 0.01 * std::abs(expected)) {
      ctx.violate(path + ".ratios.depth_to_width",
                  "inconsistent with depth_um/width_um (" + util::format_decimal(expected) + ")");
    }
  }
  return out;
}

}  // namespace detail

inline Json parse_json_bytes(std::string_view bytes, const std::string& context = {}) {
  try {
    return Json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(errc::syntax_error,
                "invalid JSON at byte " + std::to_string(e.byte) + ": " + e.what(), context);
  }
}

inline std::pair<MeltpoolRecord, ValidationReport> validate_meltpool(std::string_view bytes,
                                                                     ValidationMode mode) {
  detail::Ctx ctx{mode, {}};
  MeltpoolRecord rec;
  Json j = parse_json_bytes(bytes);
  if (!j.is_object()) {
    ctx.violate("$", "expected top-level object");
  } else {
    detail::check_known_keys(j,
                             {"material", "process_type", "sub_process", "experiments",
                              "thermophysical_properties", "optical_properties",
                              "composition_wt_percent", "powder_particle_size_um", "paper"},
                             "", ctx);
    if (auto* v = detail::get_key(j, "material")) rec.material = detail::take_string(*v, "material", ctx);
    if (auto* v = detail::get_key(j, "process_type"))
      rec.process_type = detail::take_string(*v, "process_type", ctx);
    if (auto* v = detail::get_key(j, "sub_process"))
      rec.sub_process = detail::take_string(*v, "sub_process", ctx);

    if (auto* exps = detail::get_key(j, "experiments")) {
      if (exps->is_array()) {
        for (std::size_t i = 0; i < exps->size(); ++i) {
          rec.experiments.push_back(detail::parse_experiment(
              (*exps)[i], "experiments[" + std::to_string(i) + "]", ctx));
        }
      } else {
        ctx.violate("experiments", "expected array");
      }
    } else {
      ctx.violate("experiments", "missing required key");
    }

    if (auto* tp = detail::get_key(j, "thermophysical_properties"); tp && tp->is_object()) {
      detail::check_known_keys(*tp,
                               {"density_kg_per_m3", "specific_heat_Cp_J_per_kgK",
                                "thermal_conductivity_k_W_per_mK", "melting_temperature_K"},
                               "thermophysical_properties", ctx);
      if (auto* v = detail::get_key(*tp, "density_kg_per_m3"))
        rec.density_kg_per_m3 =
            detail::take_number(*v, "thermophysical_properties.density_kg_per_m3", ctx);
      if (auto* v = detail::get_key(*tp, "specific_heat_Cp_J_per_kgK"))
        rec.specific_heat_Cp_J_per_kgK =
            detail::take_number(*v, "thermophysical_properties.specific_heat_Cp_J_per_kgK", ctx);
      if (auto* v = detail::get_key(*tp, "thermal_conductivity_k_W_per_mK"))
        rec.thermal_conductivity_k_W_per_mK = detail::take_number(
            *v, "thermophysical_properties.thermal_conductivity_k_W_per_mK", ctx);
      if (auto* v = detail::get_key(*tp, "melting_temperature_K"))
        rec.melting_temperature_K =
            detail::take_number(*v, "thermophysical_properties.melting_temperature_K", ctx);
    } else if (tp && !tp->is_null()) {
      ctx.violate("thermophysical_properties", "expected object");
    }

    if (auto* op = detail::get_key(j, "optical_properties"); op && op->is_object()) {
      detail::check_known_keys(*op, {"minimum_absorptivity"}, "optical_properties", ctx);
      if (auto* v = detail::get_key(*op, "minimum_absorptivity"))
        rec.minimum_absorptivity =
            detail::take_number(*v, "optical_properties.minimum_absorptivity", ctx);
    } else if (op && !op->is_null()) {
      ctx.violate("optical_properties", "expected object");
    }

    if (auto* comp = detail::get_key(j, "composition_wt_percent"); comp && comp->is_object()) {
      const auto& elements = composition_elements();
      std::vector<std::string_view> known(elements.begin(), elements.end());
      detail::check_known_keys(*comp, known, "composition_wt_percent", ctx);
      for (std::size_t i = 0; i < elements.size(); ++i) {
        if (auto* v = detail::get_key(*comp, elements[i])) {
          std::string path = std::string("composition_wt_percent.") + elements[i];
          auto n = detail::take_number(*v, path, ctx);
          if (n && (*n < 0.0 || *n > 100.0)) {
            ctx.violate(path, "wt% must lie in [0,100]");
            n = std::nullopt;
          }
          rec.composition_wt_percent[i] = n;
        }
      }
    } else if (comp && !comp->is_null()) {
      ctx.violate("composition_wt_percent", "expected object");
    }

    if (auto* ps = detail::get_key(j, "powder_particle_size_um"); ps && ps->is_object()) {
      detail::check_known_keys(*ps, {"d10", "d50", "d90"}, "powder_particle_size_um", ctx);
      if (auto* v = detail::get_key(*ps, "d10"))
        rec.d10 = detail::take_nonnegative(*v, "powder_particle_size_um.d10", ctx);
      if (auto* v = detail::get_key(*ps, "d50"))
        rec.d50 = detail::take_nonnegative(*v, "powder_particle_size_um.d50", ctx);
      if (auto* v = detail::get_key(*ps, "d90"))
        rec.d90 = detail::take_nonnegative(*v, "powder_particle_size_um.d90", ctx);
    } else if (ps && !ps->is_null()) {
      ctx.violate("powder_particle_size_um", "expected object");
    }

    if (auto* paper = detail::get_key(j, "paper"); paper && paper->is_object()) {
      detail::check_known_keys(*paper, {"paper_id", "title", "doi"}, "paper", ctx);
      if (auto* v = detail::get_key(*paper, "paper_id"))
        rec.paper_id = detail::take_string(*v, "paper.paper_id", ctx);
      if (auto* v = detail::get_key(*paper, "title"))
        rec.paper_title = detail::take_string(*v, "paper.title", ctx);
      if (auto* v = detail::get_key(*paper, "doi"))
        rec.paper_doi = detail::take_string(*v, "paper.doi", ctx);
    } else if (paper && !paper->is_null()) {
      ctx.violate("paper", "expected object");
    }
  }

  if (mode == ValidationMode::strict && !ctx.report.ok()) throw ValidationError(ctx.report);
  return {std::move(rec), std::move(ctx.report)};
}

inline std::pair<std::vector<AlloyRecord>, ValidationReport> validate_alloys(
    std::string_view bytes) {
  detail::Ctx ctx{ValidationMode::lenient, {}};
  Json j = parse_json_bytes(bytes);
  if (!j.is_array()) {
    ctx.violate("$", "expected top-level array of alloy entries");
    throw ValidationError(ctx.report);
  }

  std::vector<AlloyRecord> kept;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string path = "[" + std::to_string(i) + "]";
    const Json& e = j[i];
    if (!e.is_object()) {
      ctx.violate(path, "expected object");
      continue;
    }
    std::size_t violations_before = ctx.report.violations.size();
    AlloyRecord rec;

    if (auto* v = detail::get_key(e, "composition_atomic"); v && v->is_string()) {
      rec.composition_atomic = util::trim(v->get<std::string>());
    }
    if (rec.composition_atomic.empty()) {
      ctx.violate(path + ".composition_atomic", "missing composition");
    } else {
      try {
        CompositionKey key = parse_composition(rec.composition_atomic);
        std::size_t n = key.distinct_elements();
        if (n < 3)
          ctx.violate(path + ".composition_atomic", std::string(kTooFewElementsReason) +
                                                        " (found " + std::to_string(n) + ")");
      } catch (const Error& err) {
        ctx.violate(path + ".composition_atomic", err.what());
      }
    }

    if (auto* v = detail::get_key(e, "phases")) rec.phases = detail::take_string(*v, path + ".phases", ctx);
    if (auto* v = detail::get_key(e, "rho_g_per_cm3"))
      rec.rho_g_per_cm3 = detail::take_nonnegative(*v, path + ".rho_g_per_cm3", ctx);
    if (auto* v = detail::get_key(e, "HV")) rec.HV = detail::take_nonnegative(*v, path + ".HV", ctx);

    if (auto* v = detail::get_key(e, "test_type"); v && !v->is_null()) {
      std::string raw = v->is_string() ? util::trim(v->get<std::string>()) : v->dump();
      std::string upper = raw;
      std::transform(upper.begin(), upper.end(), upper.begin(),
                     [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
      if (upper == "C" || upper == "T") {
        if (upper != raw) ctx.coerce(path + ".test_type", "\"" + raw + "\"", "\"" + upper + "\"");
        rec.test_type = upper;
      } else {
        ctx.violate(path + ".test_type", "expected \"C\" or \"T\", got \"" + raw + "\"");
      }
    }

    if (auto* v = detail::get_key(e, "sigma_Y_MPa"))
      rec.sigma_Y_MPa = detail::take_nonnegative(*v, path + ".sigma_Y_MPa", ctx);
    if (auto* v = detail::get_key(e, "sigma_max_MPa"))
      rec.sigma_max_MPa = detail::take_nonnegative(*v, path + ".sigma_max_MPa", ctx);
    if (auto* v = detail::get_key(e, "epsilon_pct"))
      rec.epsilon_pct = detail::take_nonnegative(*v, path + ".epsilon_pct", ctx);
    if (auto* v = detail::get_key(e, "E_GPa"))
      rec.E_GPa = detail::take_nonnegative(*v, path + ".E_GPa", ctx);

    if (ctx.report.violations.size() == violations_before) kept.push_back(std::move(rec));
  }
  return {std::move(kept), std::move(ctx.report)};
}

namespace detail {

inline Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }
inline Json opt_json(const std::optional<std::string>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace detail

inline Json to_json(const Experiment& e) {
  Json j = Json::object();
  j["sample_id"] = detail::opt_json(e.sample_id);
  Json process = Json::object();
  process["power_W"] = detail::opt_json(e.power_W);
  process["velocity_mm_per_s"] = detail::opt_json(e.velocity_mm_per_s);
  process["powder_flowrate_g_per_min"] = detail::opt_json(e.powder_flowrate_g_per_min);
  process["layer_thickness_um"] = detail::opt_json(e.layer_thickness_um);
  process["beam_diameter_um"] = detail::opt_json(e.beam_diameter_um);
  process["hatch_spacing_um"] = detail::opt_json(e.hatch_spacing_um);
  j["process"] = std::move(process);
  Json geometry = Json::object();
  geometry["depth_um"] = detail::opt_json(e.depth_um);
  geometry["width_um"] = detail::opt_json(e.width_um);
  geometry["length_um"] = detail::opt_json(e.length_um);
  j["meltpool_geometry"] = std::move(geometry);
  Json ratios = Json::object();
  ratios["depth_to_width"] = detail::opt_json(e.depth_to_width);
  ratios["length_to_width"] = detail::opt_json(e.length_to_width);
  Json other = Json::object();
  for (const auto& [key, value] : e.other_ratios) other[key] = value;
  ratios["other"] = std::move(other);
  j["ratios"] = std::move(ratios);
  Json energy = Json::object();
  energy["linear_energy_J_per_mm"] = detail::opt_json(e.linear_energy_J_per_mm);
  energy["volumetric_energy_J_per_mm3"] = detail::opt_json(e.volumetric_energy_J_per_mm3);
  j["energy"] = std::move(energy);
  return j;
}

inline Json to_json(const MeltpoolRecord& r) {
  Json j = Json::object();
  j["material"] = detail::opt_json(r.material);
  j["process_type"] = detail::opt_json(r.process_type);
  j["sub_process"] = detail::opt_json(r.sub_process);
  Json exps = Json::array();
  for (const auto& e : r.experiments) exps.push_back(to_json(e));
  j["experiments"] = std::move(exps);
  Json tp = Json::object();
  tp["density_kg_per_m3"] = detail::opt_json(r.density_kg_per_m3);
  tp["specific_heat_Cp_J_per_kgK"] = detail::opt_json(r.specific_heat_Cp_J_per_kgK);
  tp["thermal_conductivity_k_W_per_mK"] = detail::opt_json(r.thermal_conductivity_k_W_per_mK);
  tp["melting_temperature_K"] = detail::opt_json(r.melting_temperature_K);
  j["thermophysical_properties"] = std::move(tp);
  Json op = Json::object();
  op["minimum_absorptivity"] = detail::opt_json(r.minimum_absorptivity);
  j["optical_properties"] = std::move(op);
  Json comp = Json::object();
  const auto& elements = composition_elements();
  for (std::size_t i = 0; i < elements.size(); ++i)
    comp[elements[i]] = detail::opt_json(r.composition_wt_percent[i]);
  j["composition_wt_percent"] = std::move(comp);
  Json ps = Json::object();
  ps["d10"] = detail::opt_json(r.d10);
  ps["d50"] = detail::opt_json(r.d50);
  ps["d90"] = detail::opt_json(r.d90);
  j["powder_particle_size_um"] = std::move(ps);
  Json paper = Json::object();
  paper["paper_id"] = detail::opt_json(r.paper_id);
  paper["title"] = detail::opt_json(r.paper_title);
  paper["doi"] = detail::opt_json(r.paper_doi);
  j["paper"] = std::move(paper);
  return j;
}

inline Json to_json(const AlloyRecord& r) {
  Json j = Json::object();
  j["composition_atomic"] = r.composition_atomic;
  j["phases"] = detail::opt_json(r.phases);
  j["rho_g_per_cm3"] = detail::opt_json(r.rho_g_per_cm3);
  j["HV"] = detail::opt_json(r.HV);
  j["test_type"] = detail::opt_json(r.test_type);
  j["sigma_Y_MPa"] = detail::opt_json(r.sigma_Y_MPa);
  j["sigma_max_MPa"] = detail::opt_json(r.sigma_max_MPa);
  j["epsilon_pct"] = detail::opt_json(r.epsilon_pct);
  j["E_GPa"] = detail::opt_json(r.E_GPa);
  return j;
}

/// Deterministic serialization: schema-declaration key order, nulls kept,
/// two-space indent, trailing newline.
inline std::string canonical_json(const MeltpoolRecord& r) { return to_json(r).dump(2) + "\n"; }

inline std::string canonical_json(const std::vector<AlloyRecord>& records) {
  Json arr = Json::array();
  for (const auto& r : records) arr.push_back(to_json(r));
  return arr.dump(2) + "\n";
}

}  // namespace mda::schema
