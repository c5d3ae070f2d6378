#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mda/csv.hpp"
#include "mda/errors.hpp"
#include "mda/schema.hpp"
#include "mda/util.hpp"
#include "mda/workspace.hpp"

namespace mda::agg {

namespace fs = std::filesystem;

struct CsvSchema {
  schema::DatasetKind kind;
  std::vector<std::string> columns;
};

struct MaterialRow {
  std::vector<std::pair<std::string, std::string>> cells;  // (column, value)
};

inline std::string render_cell(const std::optional<double>& v) {
  return v ? util::format_decimal(*v) : std::string();
}

inline std::string render_cell(const std::optional<std::string>& v) {
  return v ? *v : std::string();
}

/// Union of ratios.other keys across the corpus; these become columns between
/// l/w and E (J/mm), alphabetical.
inline std::vector<std::string> collect_extra_ratio_columns(
    const std::vector<schema::MeltpoolRecord>& records) {
  std::set<std::string> keys;
  for (const auto& r : records)
    for (const auto& e : r.experiments)
      for (const auto& [key, value] : e.other_ratios) keys.insert(key);
  return {keys.begin(), keys.end()};
}

inline CsvSchema meltpool_schema(const std::vector<std::string>& extra_ratio_columns = {}) {
  CsvSchema s;
  s.kind = schema::DatasetKind::meltpoolnet;
  s.columns = {"Material",
               "Process",
               "Sub-process",
               "Power",
               "Velocity",
               "powder flowrate",
               "layer thickness",
               "beam D",
               "Hatch spacing",
               "depth of meltpool",
               "width of melt pool",
               "length of melt pool",
               "d/w",
               "l/w"};
  s.columns.insert(s.columns.end(), extra_ratio_columns.begin(), extra_ratio_columns.end());
  s.columns.insert(s.columns.end(), {"E (J/mm)", "E (J/mm3)", "density", "Cp", "k", "melting T",
                                     "minimum absorptivity"});
  for (const char* el : schema::composition_elements())
    s.columns.push_back(std::string(el) + " (wt%)");
  s.columns.insert(s.columns.end(), {"paper ID", "paper", "DOIs"});
  return s;
}

inline CsvSchema hea_schema() {
  return {schema::DatasetKind::hea_cca,
          {"Composition (atomic)", "Type of phases", "rho", "HV", "Type of tests", "sigma_Y",
           "sigma_max", "epsilon", "E"}};
}

/// One row per experiment; a record with no experiments contributes nothing.
inline std::vector<MaterialRow> flatten_meltpool(const schema::MeltpoolRecord& r,
                                                 const CsvSchema& sch) {
  std::vector<MaterialRow> rows;
  for (const auto& e : r.experiments) {
    MaterialRow row;
    row.cells.reserve(sch.columns.size());
    auto put = [&](const std::string& column, std::string value) {
      row.cells.emplace_back(column, std::move(value));
    };
    for (const std::string& col : sch.columns) {
      if (col == "Material")
        put(col, render_cell(r.material));
      else if (col == "Process")
        put(col, render_cell(r.process_type));
      else if (col == "Sub-process")
        put(col, render_cell(r.sub_process));
      else if (col == "Power")
        put(col, render_cell(e.power_W));
      else if (col == "Velocity")
        put(col, render_cell(e.velocity_mm_per_s));
      else if (col == "powder flowrate")
        put(col, render_cell(e.powder_flowrate_g_per_min));
      else if (col == "layer thickness")
        put(col, render_cell(e.layer_thickness_um));
      else if (col == "beam D")
        put(col, render_cell(e.beam_diameter_um));
      else if (col == "Hatch spacing")
        put(col, render_cell(e.hatch_spacing_um));
      else if (col == "depth of meltpool")
        put(col, render_cell(e.depth_um));
      else if (col == "width of melt pool")
        put(col, render_cell(e.width_um));
      else if (col == "length of melt pool")
        put(col, render_cell(e.length_um));
      else if (col == "d/w")
        put(col, render_cell(e.depth_to_width));
      else if (col == "l/w")
        put(col, render_cell(e.length_to_width));
      else if (col == "E (J/mm)")
        put(col, render_cell(e.linear_energy_J_per_mm));
      else if (col == "E (J/mm3)")
        put(col, render_cell(e.volumetric_energy_J_per_mm3));
      else if (col == "density")
        put(col, render_cell(r.density_kg_per_m3));
      else if (col == "Cp")
        put(col, render_cell(r.specific_heat_Cp_J_per_kgK));
      else if (col == "k")
        put(col, render_cell(r.thermal_conductivity_k_W_per_mK));
      else if (col == "melting T")
        put(col, render_cell(r.melting_temperature_K));
      else if (col == "minimum absorptivity")
        put(col, render_cell(r.minimum_absorptivity));
      else if (col == "paper ID")
        put(col, render_cell(r.paper_id));
      else if (col == "paper")
        put(col, render_cell(r.paper_title));
      else if (col == "DOIs")
        put(col, render_cell(r.paper_doi));
      else if (col.size() > 6 && col.compare(col.size() - 6, 6, " (wt%)") == 0) {
        std::string el = col.substr(0, col.size() - 6);
        const auto& elements = schema::composition_elements();
        std::string value;
        for (std::size_t i = 0; i < elements.size(); ++i)
          if (el == elements[i]) {
            value = render_cell(r.composition_wt_percent[i]);
            break;
          }
        put(col, std::move(value));
      } else {
        auto it = e.other_ratios.find(col);
        put(col, it != e.other_ratios.end() ? util::format_decimal(it->second) : std::string());
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<MaterialRow> flatten_alloys(const std::vector<schema::AlloyRecord>& records,
                                               const std::string& /*bundle_id*/) {
  const CsvSchema sch = hea_schema();
  std::vector<MaterialRow> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    MaterialRow row;
    row.cells = {{sch.columns[0], r.composition_atomic},
                 {sch.columns[1], render_cell(r.phases)},
                 {sch.columns[2], render_cell(r.rho_g_per_cm3)},
                 {sch.columns[3], render_cell(r.HV)},
                 {sch.columns[4], render_cell(r.test_type)},
                 {sch.columns[5], render_cell(r.sigma_Y_MPa)},
                 {sch.columns[6], render_cell(r.sigma_max_MPa)},
                 {sch.columns[7], render_cell(r.epsilon_pct)},
                 {sch.columns[8], render_cell(r.E_GPa)}};
    rows.push_back(std::move(row));
  }
  return rows;
}

inline fs::path write_csv(const std::vector<MaterialRow>& rows, const CsvSchema& sch,
                          const fs::path& out) {
  std::string text = csv::encode_row(sch.columns);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const MaterialRow& row = rows[i];
    if (row.cells.size() != sch.columns.size())
      throw Error(errc::aggregation_error,
                  "row " + std::to_string(i) + " has " + std::to_string(row.cells.size()) +
                      " cells, schema has " + std::to_string(sch.columns.size()));
    std::vector<std::string> cells;
    cells.reserve(row.cells.size());
    for (std::size_t c = 0; c < row.cells.size(); ++c) {
      if (row.cells[c].first != sch.columns[c])
        throw Error(errc::aggregation_error, "row " + std::to_string(i) + " column " +
                                                 std::to_string(c) + " is \"" +
                                                 row.cells[c].first + "\", schema expects \"" +
                                                 sch.columns[c] + "\"");
      cells.push_back(row.cells[c].second);
    }
    text += csv::encode_row(cells);
  }
  util::atomic_write_file(out, text);
  return out;
}

inline std::string csv_filename(schema::DatasetKind kind, const std::string& model_name) {
  std::string model = util::sanitize_token(model_name);
  if (kind == schema::DatasetKind::meltpoolnet) return "extracted_data_" + model + ".csv";
  return "refractory_hea_data_" + model + ".csv";
}

struct AggregateResult {
  fs::path csv_path;
  std::size_t inference_files = 0;
  std::size_t rows = 0;
  std::vector<ws::MissingInference> missing;
};

/// Consolidates every bundle's inference file under the workspace root into
/// one CSV at the root.
inline AggregateResult aggregate_workspace(const fs::path& root, schema::DatasetKind kind,
                                           const std::string& model_name) {
  ws::InferenceCollection collection = ws::collect_inferences(root);
  AggregateResult result;
  result.inference_files = collection.records.size();
  result.missing = std::move(collection.missing);

  std::vector<MaterialRow> rows;
  CsvSchema sch;
  if (kind == schema::DatasetKind::meltpoolnet) {
    std::vector<schema::MeltpoolRecord> records;
    records.reserve(collection.records.size());
    for (const auto& f : collection.records) {
      try {
        records.push_back(schema::validate_meltpool(f.content, schema::ValidationMode::strict).first);
      } catch (const Error& e) {
        throw Error(e.code(), e.raw_message(), f.bundle_id + "/" + ws::kInferenceFileName);
      }
    }
    sch = meltpool_schema(collect_extra_ratio_columns(records));
    for (const auto& r : records) {
      auto flat = flatten_meltpool(r, sch);
      rows.insert(rows.end(), flat.begin(), flat.end());
    }
  } else {
    sch = hea_schema();
    for (const auto& f : collection.records) {
      try {
        auto [records, report] = schema::validate_alloys(f.content);
        // element-count drops are data policy; anything else means a damaged file
        for (const auto& v : report.violations)
          if (!v.reason.starts_with(schema::kTooFewElementsReason))
            throw schema::ValidationError(report);
        auto flat = flatten_alloys(records, f.bundle_id);
        rows.insert(rows.end(), flat.begin(), flat.end());
      } catch (const Error& e) {
        throw Error(e.code(), e.raw_message(), f.bundle_id + "/" + ws::kInferenceFileName);
      }
    }
  }
  result.rows = rows.size();
  result.csv_path = write_csv(rows, sch, root / csv_filename(kind, model_name));
  return result;
}

}  // namespace mda::agg
