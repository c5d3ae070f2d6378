#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mda/aggregate.hpp"
#include "mda/chat.hpp"
#include "mda/chat_http.hpp"
#include "mda/errors.hpp"
#include "mda/prompts.hpp"
#include "mda/schema.hpp"
#include "mda/util.hpp"
#include "mda/workspace.hpp"

namespace mda::runtime {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// prompt assembly

/// System turn, then one user turn: task prompt, every markdown file behind a
/// filename header line, every image. All in natural filename order.
inline std::vector<chat::ChatTurn> build_doc_writer_prompt(const ws::PaperBundle& bundle,
                                                           schema::DatasetKind kind) {
  std::vector<chat::ChatTurn> turns;
  turns.push_back(chat::ChatTurn::text_turn(chat::Role::system, prompts::kDocWriterSystem));

  chat::ChatTurn user;
  user.role = chat::Role::user;
  user.parts.push_back(chat::Part::make_text(prompts::task_prompt(kind)));
  for (const auto& md : bundle.markdown_files) {
    std::string content;
    try {
      content = util::read_file(md);
    } catch (const Error& e) {
      throw Error(errc::prompt_build_error, e.raw_message(), md.string());
    }
    user.parts.push_back(
        chat::Part::make_text("## FILE: " + md.filename().string() + "\n\n" + content));
  }
  for (const auto& img : bundle.image_files) {
    std::string bytes;
    try {
      bytes = util::read_file(img);
    } catch (const Error& e) {
      throw Error(errc::prompt_build_error, e.raw_message(), img.string());
    }
    user.parts.push_back(chat::Part::make_image("image/jpeg", std::move(bytes)));
  }
  turns.push_back(std::move(user));
  return turns;
}

// ---------------------------------------------------------------------------
// reply handling

/// First syntactically complete JSON object or array in the text; models often
/// wrap output in prose or code fences.
inline std::optional<std::string> extract_first_json(std::string_view text) {
  for (std::size_t start = 0; start < text.size(); ++start) {
    char c = text[start];
    if (c != '{' && c != '[') continue;
    int depth = 0;
    bool in_string = false;
    bool escape = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      char ch = text[i];
      if (in_string) {
        if (escape)
          escape = false;
        else if (ch == '\\')
          escape = true;
        else if (ch == '"')
          in_string = false;
      } else if (ch == '"') {
        in_string = true;
      } else if (ch == '{' || ch == '[') {
        ++depth;
      } else if (ch == '}' || ch == ']') {
        if (--depth == 0) {
          std::string candidate(text.substr(start, i - start + 1));
          if (Json::accept(candidate)) return candidate;
          break;  // mismatched brackets; try the next opener
        }
      }
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// doc-writer job

struct DocWriterOutcome {
  std::string bundle_id;
  bool ok = false;
  int attempts = 0;
  std::string canonical;  // inference bytes, set when ok
  chat::Usage usage;      // summed over every attempt's call
  schema::ValidationReport last_report;
  std::string error;  // terminal failure description, empty when ok
};

namespace detail {

inline bool only_element_count_drops(const schema::ValidationReport& report) {
  for (const auto& v : report.violations)
    if (!v.reason.starts_with(schema::kTooFewElementsReason)) return false;
  return true;
}

inline std::string corrective_feedback(const schema::ValidationReport& report) {
  std::string msg = "The previous JSON failed validation:\n";
  for (const auto& v : report.violations) msg += "- " + v.path + ": " + v.reason + "\n";
  msg += "Reply with exactly one corrected JSON value conforming to the schema.";
  return msg;
}

}  // namespace detail

/// Corrective-feedback retry on validation failure, plain retry on transport
/// failure, both bounded by max_attempts. For the alloy schema, entries the
/// element-count rule discards do not fail the job as long as something
/// conforming remains.
inline DocWriterOutcome run_doc_writer(const ws::PaperBundle& bundle, schema::DatasetKind kind,
                                       chat::ChatBackend& backend, int max_attempts) {
  DocWriterOutcome out;
  out.bundle_id = bundle.id;
  std::vector<chat::ChatTurn> turns = build_doc_writer_prompt(bundle, kind);

  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    out.attempts = attempt;
    chat::ChatResult res;
    try {
      res = backend.complete(turns, bundle.id, attempt);
    } catch (const Error& e) {
      out.error = e.what();
      continue;
    }
    out.usage += res.usage;

    std::optional<std::string> json_text = extract_first_json(res.text);
    if (!json_text) {
      out.error = "no JSON value in reply";
      out.last_report = {};
      turns.push_back(chat::ChatTurn::text_turn(chat::Role::assistant, res.text));
      turns.push_back(chat::ChatTurn::text_turn(
          chat::Role::user,
          std::string("Your reply contained no JSON value. Reply with exactly one JSON ") +
              (kind == schema::DatasetKind::meltpoolnet ? "object" : "array") +
              " in the required schema."));
      continue;
    }

    schema::ValidationReport report;
    std::string canonical;
    bool acceptable = false;
    if (kind == schema::DatasetKind::meltpoolnet) {
      auto [rec, rep] = schema::validate_meltpool(*json_text, schema::ValidationMode::lenient);
      report = std::move(rep);
      if (report.ok()) {
        canonical = schema::canonical_json(rec);
        acceptable = true;
      }
    } else {
      try {
        auto [records, rep] = schema::validate_alloys(*json_text);
        report = std::move(rep);
        if (report.ok() ||
            (!records.empty() && detail::only_element_count_drops(report))) {
          canonical = schema::canonical_json(records);
          acceptable = true;
        }
      } catch (const schema::ValidationError& e) {
        report = e.report();
      }
    }

    out.last_report = report;
    if (acceptable) {
      out.ok = true;
      out.canonical = std::move(canonical);
      out.error.clear();
      return out;
    }
    out.error = "validation failed: " + report.describe();
    turns.push_back(chat::ChatTurn::text_turn(chat::Role::assistant, res.text));
    turns.push_back(
        chat::ChatTurn::text_turn(chat::Role::user, detail::corrective_feedback(report)));
  }
  out.ok = false;
  if (out.error.empty()) out.error = "attempts exhausted";
  return out;
}

// ---------------------------------------------------------------------------
// pipeline

struct BundleOutcome {
  std::string bundle_id;
  bool ok = false;
  int attempts = 0;
  chat::Usage usage;
  std::size_t violations_recorded = 0;
  std::string error;
};

struct PipelineReport {
  std::vector<BundleOutcome> bundles;  // workspace order
  std::size_t ok_count = 0;
  std::size_t failed_count = 0;
  chat::Usage total_usage;
  std::map<std::string, chat::Usage> usage_by_model;
  std::int64_t wall_ms = 0;
  std::optional<agg::AggregateResult> aggregate;
  std::string aggregation_error;  // nonempty iff the aggregation step failed
};

/// One doc-writer job per bundle over a worker pool of width `parallelism`;
/// inference files are written as jobs succeed; aggregation runs exactly once
/// after every job has finished.
inline PipelineReport run_pipeline(const ws::Workspace& workspace, schema::DatasetKind kind,
                                   chat::ChatBackend& backend, int parallelism, int max_attempts,
                                   bool aggregate = true) {
  if (parallelism < 1) throw Error(errc::config_error, "parallelism must be >= 1");
  if (max_attempts < 1) throw Error(errc::config_error, "max_attempts must be >= 1");
  auto t0 = std::chrono::steady_clock::now();

  const auto& bundles = workspace.bundles;
  std::vector<DocWriterOutcome> outcomes(bundles.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= bundles.size()) return;
      DocWriterOutcome outcome;
      try {
        outcome = run_doc_writer(bundles[i], kind, backend, max_attempts);
      } catch (const Error& e) {
        outcome.bundle_id = bundles[i].id;
        outcome.ok = false;
        outcome.error = e.what();
      }
      if (outcome.ok) {
        try {
          ws::write_inference(workspace.root, bundles[i].id, outcome.canonical);
        } catch (const Error& e) {
          outcome.ok = false;
          outcome.error = e.what();
        }
      }
      outcomes[i] = std::move(outcome);
    }
  };

  std::size_t width = std::min<std::size_t>(static_cast<std::size_t>(parallelism), bundles.size());
  std::vector<std::thread> pool;
  pool.reserve(width);
  for (std::size_t i = 0; i < width; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();  // barrier: aggregation must see every outcome

  PipelineReport report;
  for (auto& o : outcomes) {
    BundleOutcome b;
    b.bundle_id = o.bundle_id;
    b.ok = o.ok;
    b.attempts = o.attempts;
    b.usage = o.usage;
    b.violations_recorded = o.last_report.violations.size();
    b.error = o.error;
    report.total_usage += o.usage;
    if (o.ok)
      ++report.ok_count;
    else
      ++report.failed_count;
    report.bundles.push_back(std::move(b));
  }
  report.usage_by_model[backend.model_name()] = report.total_usage;

  if (aggregate) {
    try {
      report.aggregate = agg::aggregate_workspace(workspace.root, kind, backend.model_name());
    } catch (const Error& e) {
      report.aggregation_error = std::string(errc_name(errc::pipeline_error)) +
                                 ": aggregation failed: " + e.what();
    }
  }
  report.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - t0)
                       .count();
  return report;
}

inline Json report_to_json(const PipelineReport& r) {
  Json j = Json::object();
  Json bundles = Json::array();
  for (const auto& b : r.bundles) {
    Json bj = Json::object();
    bj["bundle_id"] = b.bundle_id;
    bj["ok"] = b.ok;
    bj["attempts"] = b.attempts;
    bj["prompt_tokens"] = b.usage.prompt_tokens;
    bj["completion_tokens"] = b.usage.completion_tokens;
    bj["total_tokens"] = b.usage.total_tokens;
    bj["violations_recorded"] = b.violations_recorded;
    bj["error"] = b.error;
    bundles.push_back(std::move(bj));
  }
  j["bundles"] = std::move(bundles);
  j["ok_count"] = r.ok_count;
  j["failed_count"] = r.failed_count;
  Json usage = Json::object();
  usage["prompt_tokens"] = r.total_usage.prompt_tokens;
  usage["completion_tokens"] = r.total_usage.completion_tokens;
  usage["total_tokens"] = r.total_usage.total_tokens;
  j["total_usage"] = std::move(usage);
  Json by_model = Json::object();
  for (const auto& [model, u] : r.usage_by_model)
    by_model[model] = Json{{"prompt_tokens", u.prompt_tokens},
                           {"completion_tokens", u.completion_tokens},
                           {"total_tokens", u.total_tokens}};
  j["usage_by_model"] = std::move(by_model);
  j["wall_ms"] = r.wall_ms;
  if (r.aggregate) {
    Json aj = Json::object();
    aj["csv_path"] = r.aggregate->csv_path.string();
    aj["inference_files"] = r.aggregate->inference_files;
    aj["rows"] = r.aggregate->rows;
    j["aggregate"] = std::move(aj);
  }
  if (!r.aggregation_error.empty()) j["aggregation_error"] = r.aggregation_error;
  return j;
}

// ---------------------------------------------------------------------------
// grouped passage extraction

struct Passage {
  std::string doi;
  std::string text;
};

struct ChatExtractRow {
  std::string material;
  double bulk_modulus = 0.0;
  std::string doi;
};

struct ChatExtractReport {
  std::vector<ChatExtractRow> rows;
  std::vector<std::pair<std::string, std::string>> failures;  // (doi, error)
  chat::Usage total_usage;
};

/// Groups passages by DOI (first-appearance order) and runs one sub-agent job
/// per group over the same kind of worker pool the pipeline uses.
inline ChatExtractReport run_chat_extract(const std::vector<Passage>& passages,
                                          chat::ChatBackend& backend, int parallelism,
                                          int max_attempts = 3) {
  if (passages.empty()) throw Error(errc::input_error, "no passages");
  if (parallelism < 1) throw Error(errc::config_error, "parallelism must be >= 1");

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& p : passages) {
    if (!groups.count(p.doi)) order.push_back(p.doi);
    groups[p.doi].push_back(p.text);
  }

  struct GroupOutcome {
    std::vector<ChatExtractRow> rows;
    chat::Usage usage;
    std::string error;
  };
  std::vector<GroupOutcome> outcomes(order.size());
  std::atomic<std::size_t> next{0};

  auto run_group = [&](std::size_t gi) {
    const std::string& doi = order[gi];
    const auto& texts = groups[doi];
    GroupOutcome out;

    std::string prompt = std::string(prompts::kChatExtractTask) + "\n\nDOI: " + doi +
                         "\n\nPassages:\n";
    for (std::size_t i = 0; i < texts.size(); ++i)
      prompt += std::to_string(i + 1) + ". " + texts[i] + "\n";
    prompt +=
        "\nReply with a JSON array holding one object per passage, in passage order, with "
        "keys \"material\", \"bulk_modulus\", \"doi\".";
    std::vector<chat::ChatTurn> turns;
    turns.push_back(chat::ChatTurn::text_turn(chat::Role::user, prompt));

    std::string key = util::sanitize_token(doi);
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
      chat::ChatResult res;
      try {
        res = backend.complete(turns, key, attempt);
      } catch (const Error& e) {
        out.error = e.what();
        continue;
      }
      out.usage += res.usage;
      auto json_text = extract_first_json(res.text);
      std::string problem;
      std::vector<ChatExtractRow> rows;
      if (!json_text) {
        problem = "no JSON value in reply";
      } else {
        Json j = Json::parse(*json_text);
        if (!j.is_array()) {
          problem = "expected a JSON array";
        } else {
          for (const auto& entry : j) {
            if (problem.size()) break;
            if (!entry.is_object() || !entry.contains("material") ||
                !entry["material"].is_string()) {
              problem = "every entry needs a string \"material\"";
              break;
            }
            ChatExtractRow row;
            row.material = entry["material"].get<std::string>();
            const Json& bm = entry.contains("bulk_modulus") ? entry["bulk_modulus"] : Json();
            if (bm.is_number()) {
              row.bulk_modulus = bm.get<double>();
            } else if (bm.is_string() && util::parse_number(bm.get<std::string>())) {
              row.bulk_modulus = *util::parse_number(bm.get<std::string>());
            } else {
              problem = "every entry needs a numeric \"bulk_modulus\"";
              break;
            }
            row.doi = entry.contains("doi") && entry["doi"].is_string()
                          ? entry["doi"].get<std::string>()
                          : doi;
            rows.push_back(std::move(row));
          }
        }
      }
      if (problem.empty()) {
        out.rows = std::move(rows);
        out.error.clear();
        return out;
      }
      out.error = problem;
      turns.push_back(chat::ChatTurn::text_turn(chat::Role::assistant, res.text));
      turns.push_back(chat::ChatTurn::text_turn(
          chat::Role::user, problem + ". Reply with exactly one corrected JSON array."));
    }
    return out;
  };

  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= order.size()) return;
      outcomes[i] = run_group(i);
    }
  };
  std::size_t width = std::min<std::size_t>(static_cast<std::size_t>(parallelism), order.size());
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < width; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  ChatExtractReport report;
  for (std::size_t gi = 0; gi < order.size(); ++gi) {
    report.total_usage += outcomes[gi].usage;
    if (!outcomes[gi].error.empty()) {
      report.failures.emplace_back(order[gi], outcomes[gi].error);
      continue;
    }
    for (auto& row : outcomes[gi].rows) report.rows.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// backend configuration

inline chat::BackendConfig parse_backend_config(std::string_view text) {
  Json j = schema::parse_json_bytes(text, "backend config");
  if (!j.is_object()) throw Error(errc::config_error, "backend config must be a JSON object");
  chat::BackendConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "kind")
      cfg.kind = value.get<std::string>();
    else if (key == "endpoint")
      cfg.endpoint = value.get<std::string>();
    else if (key == "model_name")
      cfg.model_name = value.get<std::string>();
    else if (key == "api_key_env")
      cfg.api_key_env = value.get<std::string>();
    else if (key == "timeout_s")
      cfg.timeout_s = value.get<double>();
    else if (key == "max_parallel")
      cfg.max_parallel = value.get<int>();
    else if (key == "max_attempts")
      cfg.max_attempts = value.get<int>();
    else if (key == "fixture_dir")
      cfg.fixture_dir = value.get<std::string>();
    else if (key == "max_image_bytes")
      cfg.max_image_bytes = value.get<std::size_t>();
    else
      throw Error(errc::config_error, "unknown backend config key: " + key);
  }
  if (cfg.kind != "http" && cfg.kind != "fixture")
    throw Error(errc::config_error, "backend kind must be \"http\" or \"fixture\"");
  if (cfg.max_parallel < 1) throw Error(errc::config_error, "max_parallel must be >= 1");
  if (cfg.max_attempts < 1) throw Error(errc::config_error, "max_attempts must be >= 1");
  return cfg;
}

inline std::unique_ptr<chat::ChatBackend> make_chat_backend(const chat::BackendConfig& cfg) {
  if (cfg.kind == "fixture") {
    if (cfg.fixture_dir.empty())
      throw Error(errc::config_error, "fixture backend needs fixture_dir");
    return std::make_unique<chat::FixtureReplayBackend>(cfg.fixture_dir, cfg.model_name);
  }
  return std::make_unique<chat::HttpBackend>(cfg);
}

}  // namespace mda::runtime
