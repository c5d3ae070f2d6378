#pragma once

#include <string>

#include "mda/schema.hpp"

namespace mda::prompts {

/// System turn for every doc-writer job.
inline constexpr const char* kDocWriterSystem =
    R"PROMPT(You are an expert document processing and data extraction specialist with deep expertise in parsing material documentation, reading mixed media formats (Markdown and JPEG images), and producing clean, structured JSON output. You have extensive experience in materials science terminology, product specification formats, and data normalization.

## Core Mission

Your primary task is to read Markdown (.md) and JPEG (.jpeg/.jpg) files, extract material data and structured information from them, and output the results as well-formed JSON saved in .txt documents.)PROMPT";

/// The empty MeltpoolNet extraction skeleton, exactly as the task prompt
/// presents it.
inline constexpr const char* kMeltpoolSkeletonJson = R"PROMPT({
  "material": "",
  "process_type": "",
  "sub_process": "",
  "experiments": [
    {
      "sample_id": null,
      "process": {
        "power_W": null,
        "velocity_mm_per_s": null,
        "powder_flowrate_g_per_min": null,
        "layer_thickness_um": null,
        "beam_diameter_um": null,
        "hatch_spacing_um": null
      },
      "meltpool_geometry": {
        "depth_um": null,
        "width_um": null,
        "length_um": null
      },
      "ratios": {
        "depth_to_width": null,
        "length_to_width": null,
        "other": {}
      },
      "energy": {
        "linear_energy_J_per_mm": null,
        "volumetric_energy_J_per_mm3": null
      }
    }
  ],
  "thermophysical_properties": {
    "density_kg_per_m3": null,
    "specific_heat_Cp_J_per_kgK": null,
    "thermal_conductivity_k_W_per_mK": null,
    "melting_temperature_K": null
  },
  "optical_properties": {
    "minimum_absorptivity": null
  },
  "composition_wt_percent": {
    "Y":  null, "Zn": null, "Mg": null, "Si": null, "Al": null,
    "Sn": null, "Zr": null, "W":  null, "Ti": null, "V":  null,
    "Co": null, "Cu": null, "Ta": null, "Nb": null, "Ni": null,
    "Cr": null, "Fe": null, "Mn": null, "Mo": null
  },
  "powder_particle_size_um": {
    "d10": null, "d50": null, "d90": null
  },
  "paper": {
    "paper_id": null,
    "title":    null,
    "doi":      null
  }
})PROMPT";

inline constexpr const char* kMeltpoolTaskHeader =
    R"PROMPT(Use the doc-writer sub-agent to read every .md and .jpeg file in each
numbered paper subfolder of the working directory (subfolders named
filexx and/or suppxx). For each subfolder:
  - list the files first,
  - read and re-read them together because they are related,
  - launch a separate sub-agent call per subfolder,
  - avoid extracting numeric ranges whenever a single value is reported,
  - emit ONE inference.txt file per subfolder in the JSON schema below.

There may be multiple experimental rows per paper (different processing
conditions); include one entry per row inside "experiments".

)PROMPT";

inline constexpr const char* kHeaTask =
    R"PROMPT(Use the doc-writer sub-agent to read every .md and .jpeg file in
each numbered subfolder (1..79) of the working directory. For each
subfolder:
  - list the files first,
  - read and re-read them together because they are related,
  - launch a separate sub-agent call per subfolder,
  - emit ONE inference.txt file per subfolder as a JSON array with
    one entry per reported alloy composition,
  - keep ONLY alloy compositions containing three or more elements,
  - one JSON entry corresponds to one mechanical test on one alloy.

Fields to extract per entry:
  1. Composition (atomic)        -- e.g. Al0.25CoFeNi
  2. Type of phases
  3. rho                         -- density (g/cm^3)
  4. HV                          -- Vickers hardness
  5. Type of tests               -- C (compression) or T (tension)
  6. sigma_Y                     -- yield strength (MPa)
  7. sigma_max                   -- ultimate strength (MPa)
  8. epsilon                     -- elongation (%)
  9. E                           -- Young's modulus (GPa)

Emit the array using these JSON keys per entry: composition_atomic,
phases, rho_g_per_cm3, HV, test_type, sigma_Y_MPa, sigma_max_MPa,
epsilon_pct, E_GPa. Use null for anything the paper does not report.)PROMPT";

inline constexpr const char* kChatExtractTask =
    R"PROMPT(Using ten independent sub-agents, read each row of the "passage" column in this CSV file, grouped by shared paper DOI values in the DOI column, and extract the unique material and bulk modulus values for each row.)PROMPT";

inline std::string task_prompt(schema::DatasetKind kind) {
  if (kind == schema::DatasetKind::meltpoolnet)
    return std::string(kMeltpoolTaskHeader) + kMeltpoolSkeletonJson;
  return kHeaTask;
}

}  // namespace mda::prompts
