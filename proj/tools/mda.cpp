// mda: materials literature extraction pipeline.
//
// Subcommands: parse (PDF bundles via the tool server), extract (doc-writer
// agents over a workspace), aggregate (inference files into one CSV),
// evaluate (extracted CSV against a reference CSV), serve (the stdio tool
// server itself).
//
// Exit codes: 0 success, 1 usage/config/input error, 2 partial failure.
// Logs go to stderr as "level key=value" lines; stdout carries data only.

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mda/aggregate.hpp"
#include "mda/chat.hpp"
#include "mda/csv.hpp"
#include "mda/errors.hpp"
#include "mda/eval.hpp"
#include "mda/mcp.hpp"
#include "mda/runtime.hpp"
#include "mda/schema.hpp"
#include "mda/subprocess.hpp"
#include "mda/util.hpp"
#include "mda/workspace.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

std::string log_value(std::string v) {
  for (char& c : v)
    if (c == '\n' || c == '\r') c = ' ';
  if (v.find(' ') != std::string::npos || v.find('=') != std::string::npos || v.empty())
    return "\"" + v + "\"";
  return v;
}

void log_line(const char* level,
              const std::vector<std::pair<std::string, std::string>>& fields) {
  std::cerr << level;
  for (const auto& [k, v] : fields) std::cerr << ' ' << k << '=' << log_value(v);
  std::cerr << '\n';
}

std::string self_executable(const char* argv0) {
  std::error_code ec;
  fs::path link = fs::read_symlink("/proc/self/exe", ec);
  if (!ec && !link.empty()) return link.string();
  return argv0 ? argv0 : "mda";
}

// ---------------------------------------------------------------------------
// serve

struct ServeOpts {
  std::string backend = "passthrough";
  std::string command;
  std::string log_path;
};

int cmd_serve(const ServeOpts& o) {
  std::shared_ptr<mda::mcp::ParserBackend> backend =
      mda::mcp::make_parser_backend(o.backend, o.command);
  mda::mcp::ToolRegistry registry = mda::mcp::make_parse_registry(std::move(backend));
  std::optional<mda::mcp::CallLog> log;
  if (!o.log_path.empty()) log.emplace(o.log_path);
  std::size_t handled = mda::mcp::serve(std::cin, std::cout, registry, log ? &*log : nullptr);
  log_line("info", {{"event", "serve_done"}, {"requests", std::to_string(handled)}});
  return 0;
}

// ---------------------------------------------------------------------------
// parse

struct ParseOpts {
  std::string pdf_dir;
  std::string out_root;
  std::string backend = "passthrough";
  std::string command;
  std::string server;  // full server command override
  std::string log_path;
};

int cmd_parse(const ParseOpts& o, const std::string& self_exe) {
  fs::path dir(o.pdf_dir);
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    log_line("error", {{"event", "bad_input_dir"}, {"dir", o.pdf_dir}});
    return 1;
  }
  if (o.backend != "passthrough" && o.backend != "external") {
    log_line("error", {{"event", "bad_backend"}, {"backend", o.backend}});
    return 1;
  }

  std::vector<fs::path> pdfs;
  for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
    if (!it->is_regular_file(ec)) continue;
    if (mda::util::to_lower(it->path().extension().string()) == ".pdf")
      pdfs.push_back(it->path());
  }
  std::sort(pdfs.begin(), pdfs.end(), [](const fs::path& a, const fs::path& b) {
    return mda::util::natural_less(a.filename().string(), b.filename().string());
  });
  if (pdfs.empty()) {
    log_line("error", {{"event", "no_pdfs"}, {"dir", o.pdf_dir}});
    return 1;
  }

  fs::create_directories(o.out_root, ec);
  if (ec) {
    log_line("error", {{"event", "cannot_create"}, {"dir", o.out_root}, {"reason", ec.message()}});
    return 1;
  }

  std::string server_cmd = o.server;
  if (server_cmd.empty()) {
    server_cmd = mda::proc::shell_quote(self_exe) + " serve --backend " + o.backend;
    if (!o.command.empty()) server_cmd += " --command " + mda::proc::shell_quote(o.command);
    if (!o.log_path.empty()) server_cmd += " --log " + mda::proc::shell_quote(o.log_path);
  }
  log_line("info", {{"event", "server_spawn"}, {"command", server_cmd}});
  mda::mcp::McpClient client(server_cmd);

  Json tools = client.list_tools();
  bool has_parse = false;
  if (tools.is_object() && tools.contains("tools"))
    for (const auto& t : tools["tools"])
      if (t.is_object() && t.value("name", "") == "parse_pdf") has_parse = true;
  if (!has_parse) {
    log_line("error", {{"event", "missing_tool"}, {"tool", "parse_pdf"}});
    client.shutdown();
    return 1;
  }

  std::size_t ok = 0;
  for (const fs::path& pdf : pdfs) {
    std::string stem = pdf.stem().string();
    fs::path out_dir = fs::path(o.out_root) / stem;
    try {
      Json args = Json::object();
      args["pdf_path"] = pdf.string();
      args["out_dir"] = out_dir.string();
      Json result = client.call_tool("parse_pdf", std::move(args));
      std::size_t md = result.contains("markdown_paths") ? result["markdown_paths"].size() : 0;
      std::size_t im = result.contains("image_paths") ? result["image_paths"].size() : 0;
      std::cout << stem << ": ok markdown=" << md << " images=" << im << "\n";
      ++ok;
    } catch (const mda::Error& e) {
      std::cout << stem << ": failed " << e.what() << "\n";
      log_line("error", {{"event", "parse_failed"}, {"bundle", stem}, {"reason", e.what()}});
      if (e.code() == mda::errc::connection_lost) break;  // server gone; stop early
    }
  }
  client.shutdown();
  std::cout << "parsed " << ok << "/" << pdfs.size() << "\n";
  if (ok == pdfs.size()) return 0;
  return 2;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractOpts {
  std::string root;
  std::string dataset = "meltpoolnet";
  std::string backend;  // overrides config kind when set
  std::string model;    // overrides config model_name when set
  std::string config_path;
  std::string fixture_dir;  // overrides config fixture_dir when set
  int parallelism = 4;
  int max_attempts = 0;  // 0: take the config's value
  bool no_aggregate = false;
};

int cmd_extract(const ExtractOpts& o) {
  mda::schema::DatasetKind kind = mda::schema::dataset_from_name(o.dataset);
  mda::chat::BackendConfig cfg;
  if (!o.config_path.empty())
    cfg = mda::runtime::parse_backend_config(mda::util::read_file(o.config_path));
  if (!o.backend.empty()) cfg.kind = o.backend;
  if (!o.model.empty()) cfg.model_name = o.model;
  if (!o.fixture_dir.empty()) cfg.fixture_dir = o.fixture_dir;
  if (o.max_attempts > 0) cfg.max_attempts = o.max_attempts;
  if (cfg.kind != "http" && cfg.kind != "fixture") {
    log_line("error", {{"event", "bad_backend"}, {"backend", cfg.kind}});
    return 1;
  }

  // everything above must fail before any backend call
  mda::ws::Workspace workspace = mda::ws::scan_workspace(o.root);
  for (const auto& w : workspace.warnings)
    log_line("warn", {{"event", "workspace"}, {"detail", w}});
  if (workspace.bundles.empty()) {
    log_line("error", {{"event", "no_bundles"}, {"root", o.root}});
    return 1;
  }
  std::unique_ptr<mda::chat::ChatBackend> backend = mda::runtime::make_chat_backend(cfg);

  log_line("info", {{"event", "extract_start"},
                    {"bundles", std::to_string(workspace.bundles.size())},
                    {"dataset", mda::schema::dataset_name(kind)},
                    {"backend", cfg.kind},
                    {"model", backend->model_name()},
                    {"parallelism", std::to_string(o.parallelism)}});

  mda::runtime::PipelineReport report = mda::runtime::run_pipeline(
      workspace, kind, *backend, o.parallelism, cfg.max_attempts, !o.no_aggregate);

  for (const auto& b : report.bundles) {
    if (b.ok)
      log_line("info", {{"event", "bundle_done"},
                        {"bundle", b.bundle_id},
                        {"attempts", std::to_string(b.attempts)}});
    else
      log_line("error",
               {{"event", "bundle_failed"}, {"bundle", b.bundle_id}, {"reason", b.error}});
  }
  if (!report.aggregation_error.empty())
    log_line("error", {{"event", "aggregate_failed"}, {"reason", report.aggregation_error}});
  else if (report.aggregate)
    log_line("info", {{"event", "aggregated"},
                      {"csv", report.aggregate->csv_path.string()},
                      {"rows", std::to_string(report.aggregate->rows)}});

  Json run_report = mda::runtime::report_to_json(report);
  mda::util::atomic_write_file(fs::path(o.root) / "run_report.json",
                               run_report.dump(2) + "\n");
  std::cout << run_report.dump(2) << "\n";

  if (report.failed_count > 0 || !report.aggregation_error.empty()) return 2;
  return 0;
}

// ---------------------------------------------------------------------------
// aggregate

struct AggregateOpts {
  std::string root;
  std::string dataset = "meltpoolnet";
  std::string model = "fixture-model";
};

int cmd_aggregate(const AggregateOpts& o) {
  mda::schema::DatasetKind kind = mda::schema::dataset_from_name(o.dataset);
  mda::agg::AggregateResult result = mda::agg::aggregate_workspace(o.root, kind, o.model);
  for (const auto& m : result.missing)
    log_line("warn", {{"event", "missing_inference"}, {"bundle", m.bundle_id},
                      {"reason", m.reason}});
  if (result.inference_files == 0) {
    log_line("error", {{"event", "no_inferences"}, {"root", o.root}});
    return 1;
  }
  log_line("info", {{"event", "aggregated"},
                    {"csv", result.csv_path.string()},
                    {"inference_files", std::to_string(result.inference_files)}});
  std::cout << result.rows << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOpts {
  std::string gt_csv;
  std::string ex_csv;
  std::string dataset = "meltpoolnet";
  std::string config_path;
  std::string report_path;
  std::uint64_t seed = 0;
  long long sample = -1;
  bool seed_set = false;
  bool sample_set = false;
  bool table = false;
  std::string dist_column;
  std::string dist_out;
  int dist_bins = 10;
};

int cmd_evaluate(const EvaluateOpts& o) {
  mda::csv::Table gt = mda::csv::Table::from_text(mda::util::read_file(o.gt_csv));
  mda::csv::Table ex = mda::csv::Table::from_text(mda::util::read_file(o.ex_csv));

  mda::eval::EvalConfig cfg;
  if (!o.config_path.empty())
    cfg = mda::eval::parse_eval_config(mda::util::read_file(o.config_path));
  else
    cfg = mda::eval::default_eval_config(mda::schema::dataset_from_name(o.dataset));
  if (o.seed_set) cfg.seed = o.seed;
  if (o.sample_set) {
    if (o.sample < 0) {
      log_line("error", {{"event", "bad_sample"}});
      return 1;
    }
    cfg.sample = static_cast<std::size_t>(o.sample);
  }

  mda::eval::MetricsReport report = mda::eval::evaluate(gt, ex, cfg);
  Json j = mda::eval::report_to_json(report);
  if (!o.report_path.empty())
    mda::util::atomic_write_file(o.report_path, j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  if (o.table) std::cerr << mda::eval::format_report_table(report);

  if (!o.dist_column.empty()) {
    if (o.dist_out.empty()) {
      log_line("error", {{"event", "missing_flag"}, {"flag", "--dist-out"}});
      return 1;
    }
    std::vector<std::pair<std::string, const mda::csv::Table*>> sources;
    sources.emplace_back("extracted", &ex);
    mda::eval::emit_distribution(gt, sources, o.dist_column, o.dist_bins, o.dist_out);
    log_line("info", {{"event", "distribution"}, {"column", o.dist_column},
                      {"out", o.dist_out}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::string self_exe = self_executable(argc > 0 ? argv[0] : nullptr);

  CLI::App app{"materials literature extraction pipeline"};
  app.require_subcommand(1);

  ParseOpts parse_opts;
  CLI::App* parse = app.add_subcommand("parse", "Convert PDFs into document bundles");
  parse->add_option("pdf_dir", parse_opts.pdf_dir, "Directory holding source PDFs")->required();
  parse->add_option("out_root", parse_opts.out_root, "Workspace root for bundles")->required();
  parse->add_option("--backend", parse_opts.backend, "Parser backend: passthrough or external")
      ->check(CLI::IsMember({"passthrough", "external"}));
  parse->add_option("--command", parse_opts.command,
                    "External converter template with {pdf} and {out} placeholders");
  parse->add_option("--server", parse_opts.server,
                    "Full tool-server command (default: this binary's serve subcommand)");
  parse->add_option("--log", parse_opts.log_path, "Tool-server call log path (JSON lines)");

  ExtractOpts extract_opts;
  CLI::App* extract = app.add_subcommand("extract", "Run doc-writer agents over a workspace");
  extract->add_option("--root", extract_opts.root, "Workspace root")->required();
  extract->add_option("--dataset", extract_opts.dataset, "Dataset: meltpoolnet or hea")
      ->check(CLI::IsMember({"meltpoolnet", "hea"}));
  extract->add_option("--backend", extract_opts.backend, "Chat backend: http or fixture");
  extract->add_option("--model", extract_opts.model, "Model name (labels outputs)");
  extract->add_option("--config", extract_opts.config_path, "Backend config JSON path");
  extract->add_option("--fixture-dir", extract_opts.fixture_dir,
                      "Fixture response directory (fixture backend)");
  extract->add_option("--parallelism", extract_opts.parallelism, "Concurrent doc-writer jobs")
      ->check(CLI::PositiveNumber);
  extract->add_option("--max-attempts", extract_opts.max_attempts,
                      "Attempts per bundle before giving up")
      ->check(CLI::PositiveNumber);
  extract->add_flag("--no-aggregate", extract_opts.no_aggregate,
                    "Stop after writing inference files");

  AggregateOpts agg_opts;
  CLI::App* aggregate =
      app.add_subcommand("aggregate", "Consolidate inference files into one CSV");
  aggregate->add_option("--root", agg_opts.root, "Workspace root")->required();
  aggregate->add_option("--dataset", agg_opts.dataset, "Dataset: meltpoolnet or hea")
      ->check(CLI::IsMember({"meltpoolnet", "hea"}));
  aggregate->add_option("--model", agg_opts.model, "Model name (CSV filename suffix)");

  EvaluateOpts eval_opts;
  CLI::App* evaluate = app.add_subcommand("evaluate", "Score an extracted CSV against a reference");
  evaluate->add_option("gt_csv", eval_opts.gt_csv, "Reference CSV")->required();
  evaluate->add_option("ex_csv", eval_opts.ex_csv, "Extracted CSV")->required();
  evaluate->add_option("--dataset", eval_opts.dataset,
                       "Dataset defaults when no config is given: meltpoolnet or hea")
      ->check(CLI::IsMember({"meltpoolnet", "hea"}));
  evaluate->add_option("--config", eval_opts.config_path, "Eval config JSON path");
  evaluate->add_option("--report", eval_opts.report_path, "Also write the report JSON here");
  evaluate->add_option("--seed", eval_opts.seed, "Sampling seed")
      ->trigger_on_parse()
      ->each([&](const std::string&) { eval_opts.seed_set = true; });
  evaluate->add_option("--sample", eval_opts.sample, "Sample size for mapped pairs")
      ->trigger_on_parse()
      ->each([&](const std::string&) { eval_opts.sample_set = true; });
  evaluate->add_flag("--table", eval_opts.table, "Print a human-readable table to stderr");
  evaluate->add_option("--dist-column", eval_opts.dist_column,
                       "Also write a histogram CSV for this column");
  evaluate->add_option("--dist-bins", eval_opts.dist_bins, "Histogram bin count")
      ->check(CLI::PositiveNumber);
  evaluate->add_option("--dist-out", eval_opts.dist_out, "Histogram CSV path");

  ServeOpts serve_opts;
  CLI::App* serve = app.add_subcommand("serve", "Run the document tool server on stdio");
  serve->add_option("--backend", serve_opts.backend, "Parser backend: passthrough or external")
      ->check(CLI::IsMember({"passthrough", "external"}));
  serve->add_option("--command", serve_opts.command,
                    "External converter template with {pdf} and {out} placeholders");
  serve->add_option("--log", serve_opts.log_path, "Call log path (JSON lines)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // usage errors land on the config/input exit code
  }

  try {
    if (app.got_subcommand(parse)) return cmd_parse(parse_opts, self_exe);
    if (app.got_subcommand(extract)) return cmd_extract(extract_opts);
    if (app.got_subcommand(aggregate)) return cmd_aggregate(agg_opts);
    if (app.got_subcommand(evaluate)) return cmd_evaluate(eval_opts);
    if (app.got_subcommand(serve)) return cmd_serve(serve_opts);
  } catch (const mda::Error& e) {
    log_line("error", {{"event", "fatal"}, {"reason", e.what()}});
    return 1;
  } catch (const std::exception& e) {
    log_line("error", {{"event", "fatal"}, {"reason", e.what()}});
    return 1;
  }
  return 1;
}
