#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mda/composition.hpp"
#include "mda/csv.hpp"
#include "mda/errors.hpp"
#include "mda/schema.hpp"
#include "mda/util.hpp"

namespace mda::eval {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

enum class RuleKind { exact_numeric, relative_tol, mae_only, exact_text };

inline const char* rule_name(RuleKind k) {
  switch (k) {
    case RuleKind::exact_numeric: return "exact_numeric";
    case RuleKind::relative_tol: return "relative_tol";
    case RuleKind::mae_only: return "mae_only";
    case RuleKind::exact_text: return "exact_text";
  }
  return "?";
}

inline RuleKind rule_from_name(std::string_view s) {
  if (s == "exact_numeric") return RuleKind::exact_numeric;
  if (s == "relative_tol") return RuleKind::relative_tol;
  if (s == "mae_only") return RuleKind::mae_only;
  if (s == "exact_text") return RuleKind::exact_text;
  throw Error(errc::config_error, "unknown field rule kind: " + std::string(s));
}

struct FieldRule {
  std::string column;
  RuleKind kind = RuleKind::exact_numeric;
  double tolerance = 0.0;   // fraction of the ground-truth magnitude, relative_tol only
  double unit_scale = 1.0;  // applied to the extracted side before comparison
};

enum class KeyKind { exact, text_ci, composition };

inline const char* key_kind_name(KeyKind k) {
  switch (k) {
    case KeyKind::exact: return "exact";
    case KeyKind::text_ci: return "text_ci";
    case KeyKind::composition: return "composition";
  }
  return "?";
}

inline KeyKind key_kind_from_name(std::string_view s) {
  if (s == "exact") return KeyKind::exact;
  if (s == "text_ci") return KeyKind::text_ci;
  if (s == "composition") return KeyKind::composition;
  throw Error(errc::config_error, "unknown key comparator: " + std::string(s));
}

struct KeyColumn {
  std::string column;
  KeyKind kind = KeyKind::exact;
};

struct MappingKey {
  schema::DatasetKind dataset = schema::DatasetKind::meltpoolnet;
  std::vector<KeyColumn> columns;
};

enum class Verdict { TP, FP, FN, excluded };

struct CellVerdict {
  std::string column;
  Verdict verdict = Verdict::excluded;
  std::string gt_value;
  std::string ex_value;
  bool flagged_non_numeric = false;
};

struct Prf {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
};

struct FieldMetrics {
  std::string column;
  RuleKind kind = RuleKind::exact_numeric;
  long long tp = 0, fp = 0, fn = 0, excluded = 0;
  long long flagged_non_numeric = 0;
  std::optional<double> precision, recall, f1;
  std::optional<double> mae;
  std::size_t mae_pairs = 0;
};

struct MetricsReport {
  std::size_t gt_rows = 0;
  std::size_t ex_rows = 0;
  std::size_t mapped_pairs = 0;  // pairs actually scored (after sampling)
  std::size_t unmapped_gt = 0;
  std::size_t unmapped_ex = 0;
  std::vector<FieldMetrics> fields;
};

struct EvalConfig {
  MappingKey key;
  std::vector<FieldRule> fields;
  std::optional<std::size_t> sample;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// key comparison

/// Numbers compare numerically when both sides parse ("350" == "350.0"),
/// otherwise trimmed text equality.
inline bool key_cells_match(std::string_view gt, std::string_view ex, KeyKind kind) {
  std::string g = util::trim(gt);
  std::string e = util::trim(ex);
  switch (kind) {
    case KeyKind::exact: {
      auto gn = util::parse_number(g);
      auto en = util::parse_number(e);
      if (gn && en) return *gn == *en;
      return g == e;
    }
    case KeyKind::text_ci:
      return util::to_lower(g) == util::to_lower(e);
    case KeyKind::composition: {
      try {
        schema::CompositionKey gk = schema::parse_composition(g);
        schema::CompositionKey ek = schema::parse_composition(e);
        return gk == ek;
      } catch (const Error&) {
        return util::to_lower(g) == util::to_lower(e);
      }
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// row mapping

/// Greedy one-to-one mapping: ground-truth rows in order, each taking the
/// lowest-index unconsumed extracted row whose every key cell matches.
inline std::vector<std::pair<std::size_t, std::size_t>> full_mapping(const csv::Table& gt,
                                                                     const csv::Table& ex,
                                                                     const MappingKey& key) {
  if (key.columns.empty()) throw Error(errc::config_error, "mapping key has no columns");
  std::vector<std::size_t> gt_idx, ex_idx;
  for (const auto& kc : key.columns) {
    if (!gt.has_column(kc.column))
      throw Error(errc::config_error, "ground-truth table lacks key column \"" + kc.column + "\"");
    if (!ex.has_column(kc.column))
      throw Error(errc::config_error, "extracted table lacks key column \"" + kc.column + "\"");
    gt_idx.push_back(gt.column(kc.column));
    ex_idx.push_back(ex.column(kc.column));
  }

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<bool> consumed(ex.rows.size(), false);
  for (std::size_t g = 0; g < gt.rows.size(); ++g) {
    for (std::size_t e = 0; e < ex.rows.size(); ++e) {
      if (consumed[e]) continue;
      bool all = true;
      for (std::size_t k = 0; k < key.columns.size(); ++k) {
        if (!key_cells_match(gt.cell(g, gt_idx[k]), ex.cell(e, ex_idx[k]), key.columns[k].kind)) {
          all = false;
          break;
        }
      }
      if (all) {
        pairs.emplace_back(g, e);
        consumed[e] = true;
        break;
      }
    }
  }
  return pairs;
}

/// Seeded uniform sample without replacement (partial Fisher-Yates over the
/// pair list, then re-sorted by ground-truth index). std::mt19937 plus modulo
/// keeps the draw identical across platforms.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(
    std::vector<std::pair<std::size_t, std::size_t>> pairs, std::size_t sample,
    std::uint64_t seed) {
  if (sample >= pairs.size()) return pairs;
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  for (std::size_t i = 0; i < sample; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng() % (pairs.size() - i));
    std::swap(pairs[i], pairs[j]);
  }
  pairs.resize(sample);
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

inline std::vector<std::pair<std::size_t, std::size_t>> map_rows(
    const csv::Table& gt, const csv::Table& ex, const MappingKey& key,
    std::optional<std::size_t> sample = std::nullopt, std::uint64_t seed = 0) {
  auto pairs = full_mapping(gt, ex, key);
  if (sample) return sample_pairs(std::move(pairs), *sample, seed);
  return pairs;
}

// ---------------------------------------------------------------------------
// cell classification

inline CellVerdict classify_cell(const FieldRule& rule, std::string_view gt_cell,
                                 std::string_view ex_cell) {
  CellVerdict v;
  v.column = rule.column;
  v.gt_value = util::trim(gt_cell);
  v.ex_value = util::trim(ex_cell);
  const bool g_empty = v.gt_value.empty();
  const bool e_empty = v.ex_value.empty();
  if (g_empty && e_empty) {
    v.verdict = Verdict::excluded;
    return v;
  }
  if (!g_empty && e_empty) {
    v.verdict = Verdict::FN;
    return v;
  }
  if (g_empty && !e_empty) {
    v.verdict = Verdict::FP;
    return v;
  }

  if (rule.kind == RuleKind::exact_text) {
    v.verdict = v.gt_value == v.ex_value ? Verdict::TP : Verdict::FP;
    return v;
  }

  auto g = util::parse_number(v.gt_value);
  auto e = util::parse_number(v.ex_value);
  if (!g || !e) {
    v.verdict = Verdict::FP;
    v.flagged_non_numeric = true;
    return v;
  }
  double scaled = *e * rule.unit_scale;
  switch (rule.kind) {
    case RuleKind::exact_numeric:
      v.verdict = (*g == scaled) ? Verdict::TP : Verdict::FP;
      break;
    case RuleKind::relative_tol:
      v.verdict = (std::abs(*g - scaled) <= rule.tolerance * std::abs(*g)) ? Verdict::TP
                                                                           : Verdict::FP;
      break;
    case RuleKind::mae_only:
      // presence-based verdict; closeness is what mae() measures
      v.verdict = Verdict::TP;
      break;
    case RuleKind::exact_text:
      break;
  }
  return v;
}

// ---------------------------------------------------------------------------
// metrics

inline Prf prf(long long tp, long long fp, long long fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw Error(errc::undefined_metric, "negative counts");
  Prf out;
  if (tp + fp > 0) out.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) out.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (out.precision && out.recall && *out.precision + *out.recall > 0.0)
    out.f1 = 2.0 * *out.precision * *out.recall / (*out.precision + *out.recall);
  return out;
}

inline double mae(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.empty()) throw Error(errc::undefined_metric, "MAE over zero pairs");
  double sum = 0.0;
  for (const auto& [g, e] : pairs) sum += std::abs(g - e);
  return sum / static_cast<double>(pairs.size());
}

struct ChartPoint {
  double pressure = 0.0;
  double value = 0.0;
};

/// Both series must cover pressures 100,200,300,400,500 exactly once.
inline double chart_task(const std::vector<ChartPoint>& reference,
                         const std::vector<ChartPoint>& extracted) {
  static const double kPressures[5] = {100.0, 200.0, 300.0, 400.0, 500.0};
  auto index_series = [](const std::vector<ChartPoint>& pts, const char* side) {
    if (pts.size() != 5)
      throw Error(errc::task_error,
                  std::string(side) + " series has " + std::to_string(pts.size()) +
                      " points, expected 5");
    std::map<double, double> by_pressure;
    for (const auto& p : pts) by_pressure[p.pressure] = p.value;
    std::string missing;
    for (double want : kPressures) {
      if (!by_pressure.count(want)) {
        if (!missing.empty()) missing += ", ";
        missing += util::format_decimal(want);
      }
    }
    if (!missing.empty())
      throw Error(errc::task_error, std::string(side) + " series missing pressures: " + missing);
    return by_pressure;
  };
  auto ref = index_series(reference, "reference");
  auto ext = index_series(extracted, "extracted");
  std::vector<std::pair<double, double>> pairs;
  for (double p : kPressures) pairs.emplace_back(ref[p], ext[p]);
  return mae(pairs);
}

// ---------------------------------------------------------------------------
// evaluation

inline MetricsReport evaluate(const csv::Table& gt, const csv::Table& ex,
                              const EvalConfig& config) {
  MetricsReport report;
  report.gt_rows = gt.rows.size();
  report.ex_rows = ex.rows.size();

  auto all_pairs = full_mapping(gt, ex, config.key);
  report.unmapped_gt = report.gt_rows - all_pairs.size();
  report.unmapped_ex = report.ex_rows - all_pairs.size();
  auto pairs = config.sample ? sample_pairs(all_pairs, *config.sample, config.seed)
                             : std::move(all_pairs);
  report.mapped_pairs = pairs.size();

  for (const FieldRule& rule : config.fields) {
    FieldMetrics fm;
    fm.column = rule.column;
    fm.kind = rule.kind;
    if (!gt.has_column(rule.column))
      throw Error(errc::config_error, "ground-truth table lacks column \"" + rule.column + "\"");
    if (!ex.has_column(rule.column))
      throw Error(errc::config_error, "extracted table lacks column \"" + rule.column + "\"");
    std::size_t gcol = gt.column(rule.column);
    std::size_t ecol = ex.column(rule.column);

    std::vector<std::pair<double, double>> mae_pairs;
    for (const auto& [g, e] : pairs) {
      CellVerdict v = classify_cell(rule, gt.cell(g, gcol), ex.cell(e, ecol));
      switch (v.verdict) {
        case Verdict::TP: ++fm.tp; break;
        case Verdict::FP: ++fm.fp; break;
        case Verdict::FN: ++fm.fn; break;
        case Verdict::excluded: ++fm.excluded; break;
      }
      if (v.flagged_non_numeric) ++fm.flagged_non_numeric;
      if (rule.kind == RuleKind::mae_only) {
        auto gn = util::parse_number(v.gt_value);
        auto en = util::parse_number(v.ex_value);
        if (gn && en) mae_pairs.emplace_back(*gn, *en * rule.unit_scale);
      }
    }
    Prf p = prf(fm.tp, fm.fp, fm.fn);
    fm.precision = p.precision;
    fm.recall = p.recall;
    fm.f1 = p.f1;
    if (rule.kind == RuleKind::mae_only && !mae_pairs.empty()) {
      fm.mae = mae(mae_pairs);
      fm.mae_pairs = mae_pairs.size();
    }
    report.fields.push_back(std::move(fm));
  }
  return report;
}

// ---------------------------------------------------------------------------
// reporting

inline std::string format_pct(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

inline Json report_to_json(const MetricsReport& r) {
  Json j = Json::object();
  j["row_counts"] = {{"ground_truth", r.gt_rows}, {"extracted", r.ex_rows}};
  j["mapped_pairs"] = r.mapped_pairs;
  j["unmapped_gt"] = r.unmapped_gt;
  j["unmapped_ex"] = r.unmapped_ex;
  Json fields = Json::array();
  for (const auto& f : r.fields) {
    Json fj = Json::object();
    fj["column"] = f.column;
    fj["rule"] = rule_name(f.kind);
    fj["tp"] = f.tp;
    fj["fp"] = f.fp;
    fj["fn"] = f.fn;
    fj["excluded"] = f.excluded;
    fj["flagged_non_numeric"] = f.flagged_non_numeric;
    fj["precision"] = f.precision ? Json(*f.precision) : Json(nullptr);
    fj["recall"] = f.recall ? Json(*f.recall) : Json(nullptr);
    fj["f1"] = f.f1 ? Json(*f.f1) : Json(nullptr);
    fj["precision_pct"] = f.precision ? Json(format_pct(*f.precision)) : Json(nullptr);
    fj["recall_pct"] = f.recall ? Json(format_pct(*f.recall)) : Json(nullptr);
    fj["f1_pct"] = f.f1 ? Json(format_pct(*f.f1)) : Json(nullptr);
    fj["mae"] = f.mae ? Json(*f.mae) : Json(nullptr);
    fj["mae_pairs"] = f.mae_pairs;
    fields.push_back(std::move(fj));
  }
  j["fields"] = std::move(fields);
  return j;
}

inline std::string format_report_table(const MetricsReport& r) {
  std::string out;
  out += "rows: gt=" + std::to_string(r.gt_rows) + " ex=" + std::to_string(r.ex_rows) +
         " mapped=" + std::to_string(r.mapped_pairs) + " unmapped_gt=" +
         std::to_string(r.unmapped_gt) + " unmapped_ex=" + std::to_string(r.unmapped_ex) + "\n";
  for (const auto& f : r.fields) {
    out += f.column;
    out += " [";
    out += rule_name(f.kind);
    out += "]";
    out += " TP=" + std::to_string(f.tp) + " FP=" + std::to_string(f.fp) +
           " FN=" + std::to_string(f.fn) + " excl=" + std::to_string(f.excluded);
    if (f.precision) out += " P=" + format_pct(*f.precision);
    if (f.recall) out += " R=" + format_pct(*f.recall);
    if (f.f1) out += " F1=" + format_pct(*f.f1);
    if (f.mae)
      out += " MAE=" + util::format_decimal(*f.mae) + " (n=" + std::to_string(f.mae_pairs) + ")";
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// distribution emission

/// Shared equal-width bins over the pooled numeric range; the last bin is
/// closed so the pooled maximum lands inside it.
inline fs::path emit_distribution(
    const csv::Table& gt,
    const std::vector<std::pair<std::string, const csv::Table*>>& ex_sources,
    const std::string& column, int bins, const fs::path& out) {
  if (bins < 1) throw Error(errc::config_error, "bins must be >= 1");

  std::vector<std::pair<std::string, const csv::Table*>> sources;
  sources.emplace_back("ground_truth", &gt);
  sources.insert(sources.end(), ex_sources.begin(), ex_sources.end());

  std::vector<std::vector<double>> values(sources.size());
  std::vector<std::size_t> skipped(sources.size(), 0);
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const csv::Table& t = *sources[s].second;
    if (!t.has_column(column))
      throw Error(errc::config_error,
                  "table \"" + sources[s].first + "\" lacks column \"" + column + "\"");
    std::size_t c = t.column(column);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      std::string cell = util::trim(t.cell(r, c));
      if (cell.empty()) continue;
      auto n = util::parse_number(cell);
      if (!n) {
        ++skipped[s];
        continue;
      }
      values[s].push_back(*n);
      if (!any) {
        lo = hi = *n;
        any = true;
      } else {
        lo = std::min(lo, *n);
        hi = std::max(hi, *n);
      }
    }
  }
  if (!any) throw Error(errc::undefined_metric, "no numeric values in column \"" + column + "\"");

  double span = hi - lo;
  if (span == 0.0) span = 1.0;  // degenerate range: everything lands in bin 0
  double width = span / bins;

  std::vector<std::vector<std::size_t>> counts(sources.size(),
                                               std::vector<std::size_t>(bins, 0));
  for (std::size_t s = 0; s < sources.size(); ++s) {
    for (double v : values[s]) {
      int b = static_cast<int>((v - lo) / width);
      if (b >= bins) b = bins - 1;
      if (b < 0) b = 0;
      ++counts[s][b];
    }
  }

  std::vector<std::string> header = {"bin_start", "bin_end"};
  for (const auto& s : sources) header.push_back(s.first);
  std::string text = csv::encode_row(header);
  for (int b = 0; b < bins; ++b) {
    std::vector<std::string> row = {util::format_decimal(lo + b * width),
                                    util::format_decimal(b + 1 == bins ? lo + span
                                                                       : lo + (b + 1) * width)};
    for (std::size_t s = 0; s < sources.size(); ++s)
      row.push_back(std::to_string(counts[s][b]));
    text += csv::encode_row(row);
  }
  std::string footer = "# skipped_non_numeric:";
  for (std::size_t s = 0; s < sources.size(); ++s)
    footer += " " + sources[s].first + "=" + std::to_string(skipped[s]);
  text += footer + "\n";
  util::atomic_write_file(out, text);
  return out;
}

// ---------------------------------------------------------------------------
// configuration

inline EvalConfig default_eval_config(schema::DatasetKind kind) {
  EvalConfig cfg;
  cfg.key.dataset = kind;
  if (kind == schema::DatasetKind::meltpoolnet) {
    cfg.key.columns = {{"Material", KeyKind::composition},
                       {"Power", KeyKind::exact},
                       {"Velocity", KeyKind::exact},
                       {"layer thickness", KeyKind::exact},
                       {"DOIs", KeyKind::text_ci}};
    cfg.fields = {{"beam D", RuleKind::exact_numeric, 0.0, 1.0},
                  {"Hatch spacing", RuleKind::exact_numeric, 0.0, 1.0},
                  {"depth of meltpool", RuleKind::exact_numeric, 0.0, 1.0},
                  {"d/w", RuleKind::relative_tol, 0.01, 1.0},
                  {"E (J/mm)", RuleKind::relative_tol, 0.01, 1.0},
                  {"melting T", RuleKind::mae_only, 0.0, 1.0}};
  } else {
    cfg.key.columns = {{"Composition (atomic)", KeyKind::composition},
                       {"paper number", KeyKind::exact},
                       {"HV", KeyKind::exact}};
    cfg.fields = {{"sigma_Y", RuleKind::mae_only, 0.0, 1.0},
                  {"sigma_max", RuleKind::mae_only, 0.0, 1.0},
                  {"epsilon", RuleKind::mae_only, 0.0, 1.0},
                  {"E", RuleKind::mae_only, 0.0, 1.0}};
  }
  return cfg;
}

inline EvalConfig parse_eval_config(std::string_view text) {
  Json j = schema::parse_json_bytes(text, "eval config");
  if (!j.is_object()) throw Error(errc::config_error, "eval config must be a JSON object");
  EvalConfig cfg;
  if (j.contains("dataset")) cfg.key.dataset = schema::dataset_from_name(j["dataset"].get<std::string>());
  if (j.contains("key")) {
    if (!j["key"].is_array()) throw Error(errc::config_error, "\"key\" must be an array");
    for (const auto& kc : j["key"]) {
      KeyColumn col;
      col.column = kc.at("column").get<std::string>();
      if (kc.contains("comparator")) col.kind = key_kind_from_name(kc["comparator"].get<std::string>());
      cfg.key.columns.push_back(std::move(col));
    }
  }
  if (j.contains("fields")) {
    if (!j["fields"].is_array()) throw Error(errc::config_error, "\"fields\" must be an array");
    for (const auto& fr : j["fields"]) {
      FieldRule rule;
      rule.column = fr.at("column").get<std::string>();
      if (fr.contains("kind")) rule.kind = rule_from_name(fr["kind"].get<std::string>());
      if (fr.contains("tolerance")) rule.tolerance = fr["tolerance"].get<double>();
      if (fr.contains("unit_scale")) rule.unit_scale = fr["unit_scale"].get<double>();
      if (rule.kind == RuleKind::relative_tol && !(rule.tolerance > 0.0 && rule.tolerance < 1.0))
        throw Error(errc::config_error,
                    "relative_tol tolerance must lie in (0,1) for column \"" + rule.column + "\"");
      if (!(rule.unit_scale > 0.0))
        throw Error(errc::config_error, "unit_scale must be > 0 for column \"" + rule.column + "\"");
      cfg.fields.push_back(std::move(rule));
    }
  }
  if (j.contains("sample")) cfg.sample = j["sample"].get<std::size_t>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (cfg.key.columns.empty() || cfg.fields.empty()) {
    EvalConfig defaults = default_eval_config(cfg.key.dataset);
    if (cfg.key.columns.empty()) cfg.key = defaults.key;
    if (cfg.fields.empty()) cfg.fields = defaults.fields;
  }
  return cfg;
}

}  // namespace mda::eval
