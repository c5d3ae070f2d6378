#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "mda/errors.hpp"
#include "mda/util.hpp"

namespace mda::ws {

namespace fs = std::filesystem;

inline constexpr const char* kInferenceFileName = "inference.txt";

struct PaperBundle {
  std::string id;  // directory name
  fs::path dir;
  std::vector<fs::path> markdown_files;
  std::vector<fs::path> image_files;
};

struct Workspace {
  fs::path root;
  std::vector<PaperBundle> bundles;
  std::vector<std::string> warnings;
};

struct InferenceFile {
  std::string bundle_id;
  std::string content;
};

struct MissingInference {
  std::string bundle_id;
  std::string reason;
};

struct InferenceCollection {
  std::vector<InferenceFile> records;
  std::vector<MissingInference> missing;
};

namespace detail {

inline std::string lower_extension(const fs::path& p) {
  return util::to_lower(p.extension().string());
}

inline bool natural_path_less(const fs::path& a, const fs::path& b) {
  return util::natural_less(a.filename().string(), b.filename().string());
}

inline std::vector<fs::path> sorted_subdirectories(const fs::path& root) {
  std::vector<fs::path> dirs;
  std::error_code ec;
  for (fs::directory_iterator it(root, ec), end; !ec && it != end; it.increment(ec)) {
    const fs::path& p = it->path();
    std::string name = p.filename().string();
    if (name.empty() || name.front() == '.') continue;
    if (it->is_directory(ec)) dirs.push_back(p);
  }
  if (ec)
    throw Error(errc::io_error, "cannot enumerate " + root.string() + ": " + ec.message());
  std::sort(dirs.begin(), dirs.end(), natural_path_less);
  return dirs;
}

}  // namespace detail

/// Bundles are subdirectories holding at least one markdown file. Ordering is
/// natural: digit runs compare numerically, so "2" precedes "10".
inline Workspace scan_workspace(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec))
    throw Error(errc::workspace_not_found, "workspace root is not a directory", root.string());

  Workspace out;
  out.root = root;
  for (const fs::path& dir : detail::sorted_subdirectories(root)) {
    PaperBundle bundle;
    bundle.id = dir.filename().string();
    bundle.dir = dir;
    for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
      if (!it->is_regular_file(ec)) continue;
      const fs::path& p = it->path();
      std::string name = p.filename().string();
      if (name.empty() || name.front() == '.') continue;
      std::string ext = detail::lower_extension(p);
      if (ext == ".md")
        bundle.markdown_files.push_back(p);
      else if (ext == ".jpg" || ext == ".jpeg")
        bundle.image_files.push_back(p);
    }
    if (ec)
      throw Error(errc::io_error, "cannot enumerate " + dir.string() + ": " + ec.message());
    if (bundle.markdown_files.empty()) {
      out.warnings.push_back("skipping " + bundle.id + ": no markdown files");
      continue;
    }
    std::sort(bundle.markdown_files.begin(), bundle.markdown_files.end(),
              detail::natural_path_less);
    std::sort(bundle.image_files.begin(), bundle.image_files.end(), detail::natural_path_less);
    out.bundles.push_back(std::move(bundle));
  }
  return out;
}

inline fs::path inference_path(const fs::path& root, const std::string& bundle_id) {
  return root / bundle_id / kInferenceFileName;
}

inline void write_inference(const fs::path& root, const std::string& bundle_id,
                            std::string_view content) {
  fs::path dir = root / bundle_id;
  std::error_code ec;
  if (!fs::is_directory(dir, ec))
    throw Error(errc::workspace_not_found, "bundle directory missing", dir.string());
  util::atomic_write_file(inference_path(root, bundle_id), content);
}

/// Reads whatever is on disk at call time, bundle by bundle; bundles without
/// a readable inference file land in `missing` and never abort the sweep.
inline InferenceCollection collect_inferences(const Workspace& ws) {
  InferenceCollection out;
  std::error_code ec;
  for (const PaperBundle& b : ws.bundles) {
    fs::path file = b.dir / kInferenceFileName;
    if (!fs::is_regular_file(file, ec)) {
      out.missing.push_back({b.id, "no inference file"});
      continue;
    }
    try {
      out.records.push_back({b.id, util::read_file(file)});
    } catch (const Error& e) {
      out.missing.push_back({b.id, e.raw_message()});
    }
  }
  return out;
}

inline InferenceCollection collect_inferences(const fs::path& root) {
  return collect_inferences(scan_workspace(root));
}

}  // namespace mda::ws
