#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "mda/runtime.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
namespace chat = mda::chat;
namespace rt = mda::runtime;
namespace schema = mda::schema;
namespace ws = mda::ws;
using mda::Error;
using mda::errc;

namespace {

void touch(const fs::path& p, const std::string& content) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << content;
}

ws::PaperBundle make_bundle(const fs::path& dir, const std::string& id,
                            const std::vector<std::pair<std::string, std::string>>& md,
                            const std::vector<std::pair<std::string, std::string>>& img = {}) {
  ws::PaperBundle b;
  b.id = id;
  b.dir = dir / id;
  for (const auto& [name, content] : md) {
    touch(b.dir / name, content);
    b.markdown_files.push_back(b.dir / name);
  }
  for (const auto& [name, content] : img) {
    touch(b.dir / name, content);
    b.image_files.push_back(b.dir / name);
  }
  return b;
}

// Plays back a fixed reply sequence and records every call it sees.
struct ScriptedBackend : chat::ChatBackend {
  std::string model = "scripted";
  std::vector<std::string> replies;
  std::vector<bool> throw_transport;  // parallel to replies
  std::vector<std::vector<chat::ChatTurn>> seen;
  std::vector<int> attempts_seen;

  const std::string& model_name() const override { return model; }

  chat::ChatResult complete(const std::vector<chat::ChatTurn>& turns,
                            const std::string& bundle_id, int attempt) override {
    std::size_t i = seen.size();
    seen.push_back(turns);
    attempts_seen.push_back(attempt);
    if (i < throw_transport.size() && throw_transport[i])
      throw Error(errc::backend_error, "socket reset", bundle_id);
    chat::ChatResult r;
    r.text = replies.at(i);
    r.usage = chat::Usage{10, 5, 15};
    return r;
  }
};

constexpr const char* kEmptyRecord = R"({"experiments": []})";

ws::Workspace single_bundle_workspace(const fs::path& root) {
  ws::Workspace w;
  w.root = root;
  w.bundles.push_back(make_bundle(root, "b1", {{"doc.md", "hello\n"}}));
  return w;
}

std::string meltpool_canonical(const std::string& json_text) {
  auto [rec, rep] = schema::validate_meltpool(json_text, schema::ValidationMode::lenient);
  REQUIRE(rep.ok());
  return schema::canonical_json(rec);
}

}  // namespace

// ---------------------------------------------------------------------------
// extract_first_json

TEST_CASE("extract_first_json finds a bare object") {
  auto got = rt::extract_first_json(R"({"a": 1})");
  REQUIRE(got.has_value());
  CHECK(*got == R"({"a": 1})");
}

TEST_CASE("extract_first_json strips surrounding prose and fences") {
  auto fenced = rt::extract_first_json("Sure, here you go:\n```json\n{\"a\": [1, 2]}\n```\nDone.");
  REQUIRE(fenced.has_value());
  CHECK(*fenced == "{\"a\": [1, 2]}");

  auto prose = rt::extract_first_json("The answer is [1, 2, 3], as requested.");
  REQUIRE(prose.has_value());
  CHECK(*prose == "[1, 2, 3]");
}

TEST_CASE("extract_first_json returns the first complete value") {
  auto got = rt::extract_first_json(R"({"a": 1} {"b": 2})");
  REQUIRE(got.has_value());
  CHECK(*got == R"({"a": 1})");
}

TEST_CASE("extract_first_json ignores brackets inside strings") {
  auto got = rt::extract_first_json(R"({"a": "b } c", "d": "e ] f"})");
  REQUIRE(got.has_value());
  CHECK(*got == R"({"a": "b } c", "d": "e ] f"})");

  auto escaped = rt::extract_first_json(R"({"a": "say \" } done"})");
  REQUIRE(escaped.has_value());
  CHECK(*escaped == R"({"a": "say \" } done"})");
}

TEST_CASE("extract_first_json skips mismatched openers") {
  // The first opener closes with the wrong bracket; the scan moves on.
  auto got = rt::extract_first_json(R"(weird {oops ] text {"a": 1} tail)");
  REQUIRE(got.has_value());
  CHECK(*got == R"({"a": 1})");

  // An unterminated object must not swallow the array nested inside it.
  auto nested = rt::extract_first_json(R"({"a": [1, 2])");
  REQUIRE(nested.has_value());
  CHECK(*nested == "[1, 2]");
}

TEST_CASE("extract_first_json reports absence") {
  CHECK_FALSE(rt::extract_first_json("no structured data here").has_value());
  CHECK_FALSE(rt::extract_first_json("42").has_value());
  CHECK_FALSE(rt::extract_first_json("\"quoted\"").has_value());
  CHECK_FALSE(rt::extract_first_json("{truncated").has_value());
  CHECK_FALSE(rt::extract_first_json("").has_value());
}

// ---------------------------------------------------------------------------
// build_doc_writer_prompt

TEST_CASE("doc writer prompt carries system turn, task, files, images in order") {
  testsupport::TempDir tmp;
  ws::PaperBundle bundle = make_bundle(tmp.path, "p1",
                                       {{"01_intro.md", "alpha\n"}, {"02_body.md", "beta\n"}},
                                       {{"fig1.jpg", "JPEGBYTES"}});

  auto turns = rt::build_doc_writer_prompt(bundle, schema::DatasetKind::meltpoolnet);
  REQUIRE(turns.size() == 2);

  CHECK(turns[0].role == chat::Role::system);
  REQUIRE(turns[0].parts.size() == 1);
  CHECK(turns[0].parts[0].kind == chat::Part::Kind::text);
  CHECK(turns[0].parts[0].text == mda::prompts::kDocWriterSystem);

  CHECK(turns[1].role == chat::Role::user);
  REQUIRE(turns[1].parts.size() == 4);
  CHECK(turns[1].parts[0].text == mda::prompts::task_prompt(schema::DatasetKind::meltpoolnet));
  CHECK(turns[1].parts[1].text == "## FILE: 01_intro.md\n\nalpha\n");
  CHECK(turns[1].parts[2].text == "## FILE: 02_body.md\n\nbeta\n");
  CHECK(turns[1].parts[3].kind == chat::Part::Kind::image);
  CHECK(turns[1].parts[3].media_type == "image/jpeg");
  CHECK(turns[1].parts[3].bytes == "JPEGBYTES");
}

TEST_CASE("doc writer prompt picks the task for the dataset") {
  testsupport::TempDir tmp;
  ws::PaperBundle bundle = make_bundle(tmp.path, "p1", {{"a.md", "x"}});
  auto turns = rt::build_doc_writer_prompt(bundle, schema::DatasetKind::hea_cca);
  CHECK(turns[1].parts[0].text == mda::prompts::task_prompt(schema::DatasetKind::hea_cca));
  CHECK(mda::prompts::task_prompt(schema::DatasetKind::hea_cca) !=
        mda::prompts::task_prompt(schema::DatasetKind::meltpoolnet));
}

TEST_CASE("doc writer prompt reports unreadable bundle files") {
  testsupport::TempDir tmp;
  ws::PaperBundle bundle = make_bundle(tmp.path, "p1", {{"a.md", "x"}});
  bundle.image_files.push_back(bundle.dir / "missing.jpg");
  try {
    rt::build_doc_writer_prompt(bundle, schema::DatasetKind::meltpoolnet);
    FAIL("expected prompt_build_error");
  } catch (const Error& e) {
    CHECK(e.code() == errc::prompt_build_error);
    CHECK(e.context() == (bundle.dir / "missing.jpg").string());
  }

  ws::PaperBundle gone = make_bundle(tmp.path, "p2", {});
  gone.markdown_files.push_back(gone.dir / "never.md");
  try {
    rt::build_doc_writer_prompt(gone, schema::DatasetKind::meltpoolnet);
    FAIL("expected prompt_build_error");
  } catch (const Error& e) {
    CHECK(e.code() == errc::prompt_build_error);
    CHECK(e.context() == (gone.dir / "never.md").string());
  }
}

// ---------------------------------------------------------------------------
// run_doc_writer

TEST_CASE("doc writer accepts a clean reply on the first attempt") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {std::string("Here is the record.\n```json\n") + kEmptyRecord + "\n```"};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::meltpoolnet, backend, 3);
  CHECK(out.ok);
  CHECK(out.bundle_id == "b1");
  CHECK(out.attempts == 1);
  CHECK(out.error.empty());
  CHECK(out.canonical == meltpool_canonical(kEmptyRecord));
  CHECK(out.last_report.violations.empty());
  CHECK(out.usage.prompt_tokens == 10);
  CHECK(out.usage.completion_tokens == 5);
  CHECK(out.usage.total_tokens == 15);
  REQUIRE(backend.seen.size() == 1);
  CHECK(backend.seen[0].size() == 2);
  CHECK(backend.attempts_seen == std::vector<int>{1});
}

TEST_CASE("doc writer keeps lenient coercions without failing the job") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {R"({"experiments": [{"process": {"power_W": "350"}}]})"};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::meltpoolnet, backend, 3);
  CHECK(out.ok);
  CHECK(out.attempts == 1);
  REQUIRE(out.last_report.coerced.size() == 1);
  CHECK(out.last_report.coerced[0].path == "experiments[0].process.power_W");
  CHECK(out.canonical.find("350") != std::string::npos);
}

TEST_CASE("doc writer retries a reply with no JSON in it") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {"I could not find any data in these documents.",
                     std::string(kEmptyRecord)};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::meltpoolnet, backend, 3);
  CHECK(out.ok);
  CHECK(out.attempts == 2);
  REQUIRE(backend.seen.size() == 2);
  REQUIRE(backend.seen[1].size() == 4);
  CHECK(backend.seen[1][2].role == chat::Role::assistant);
  CHECK(backend.seen[1][2].parts[0].text == backend.replies[0]);
  CHECK(backend.seen[1][3].role == chat::Role::user);
  CHECK(backend.seen[1][3].parts[0].text ==
        "Your reply contained no JSON value. Reply with exactly one JSON object in the "
        "required schema.");
  CHECK(out.usage.total_tokens == 30);
}

TEST_CASE("doc writer sends violation details back as corrective feedback") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {R"({"experiments": [{"process": {"power_W": "100-200"}}]})",
                     std::string(kEmptyRecord)};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::meltpoolnet, backend, 3);
  CHECK(out.ok);
  CHECK(out.attempts == 2);
  REQUIRE(backend.seen.size() == 2);
  REQUIRE(backend.seen[1].size() == 4);
  CHECK(backend.seen[1][3].parts[0].text ==
        "The previous JSON failed validation:\n"
        "- experiments[0].process.power_W: numeric range \"100-200\" not allowed; report a "
        "single value\n"
        "Reply with exactly one corrected JSON value conforming to the schema.");
  CHECK(out.last_report.ok());
}

TEST_CASE("doc writer retries transport failures without inventing feedback") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {"", std::string(kEmptyRecord)};
  backend.throw_transport = {true, false};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::meltpoolnet, backend, 3);
  CHECK(out.ok);
  CHECK(out.attempts == 2);
  REQUIRE(backend.seen.size() == 2);
  CHECK(backend.seen[1].size() == backend.seen[0].size());
  CHECK(out.usage.total_tokens == 15);  // the failed call contributes nothing
}

TEST_CASE("doc writer gives up after max_attempts") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);

  SECTION("persistent prose") {
    ScriptedBackend backend;
    backend.replies = {"nothing", "still nothing"};
    auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::meltpoolnet, backend, 2);
    CHECK_FALSE(out.ok);
    CHECK(out.attempts == 2);
    CHECK(out.error == "no JSON value in reply");
    CHECK(out.canonical.empty());
    CHECK(backend.seen.size() == 2);
  }

  SECTION("persistent transport failure") {
    ScriptedBackend backend;
    backend.replies = {"", ""};
    backend.throw_transport = {true, true};
    auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::meltpoolnet, backend, 2);
    CHECK_FALSE(out.ok);
    CHECK(out.attempts == 2);
    CHECK(out.error == "backend-error: socket reset [b1]");
    CHECK(out.usage.total_tokens == 0);
  }

  SECTION("persistent validation failure") {
    ScriptedBackend backend;
    backend.replies = {R"({"experiments": "nope"})", R"({"experiments": "nope"})"};
    auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::meltpoolnet, backend, 2);
    CHECK_FALSE(out.ok);
    CHECK(out.attempts == 2);
    CHECK(out.error.rfind("validation failed: ", 0) == 0);
    CHECK(out.error.find("experiments") != std::string::npos);
    CHECK_FALSE(out.last_report.ok());
  }
}

TEST_CASE("doc writer tolerates element-count drops when alloys remain") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {R"([
    {"composition_atomic": "MoNbTaW", "HV": 450},
    {"composition_atomic": "NbTi", "HV": 300}
  ])"};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::hea_cca, backend, 3);
  CHECK(out.ok);
  CHECK(out.attempts == 1);
  REQUIRE(out.last_report.violations.size() == 1);
  CHECK(out.last_report.violations[0].path == "[1].composition_atomic");
  CHECK(out.canonical.find("MoNbTaW") != std::string::npos);
  CHECK(out.canonical.find("NbTi") == std::string::npos);

  auto [records, rep] = schema::validate_alloys(backend.replies[0]);
  CHECK(out.canonical == schema::canonical_json(records));
}

TEST_CASE("doc writer rejects an alloy reply with nothing left after drops") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {R"([{"composition_atomic": "NbTi"}])"};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::hea_cca, backend, 1);
  CHECK_FALSE(out.ok);
  CHECK(out.error.rfind("validation failed: ", 0) == 0);
  CHECK(out.error.find("fewer than three distinct elements") != std::string::npos);
}

TEST_CASE("doc writer rejects alloy replies with non-count violations") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {R"([
    {"composition_atomic": "MoNbTaW", "rho_g_per_cm3": -1},
    {"composition_atomic": "HfNbTiZr"}
  ])",
                     R"([{"composition_atomic": "HfNbTiZr"}])"};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::hea_cca, backend, 3);
  CHECK(out.ok);
  CHECK(out.attempts == 2);
  REQUIRE(backend.seen.size() == 2);
  auto feedback = backend.seen[1][3].parts[0].text;
  CHECK(feedback.find("[0].rho_g_per_cm3: must be >= 0") != std::string::npos);
}

TEST_CASE("doc writer asks for an array when the alloy reply has no JSON") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {"prose only", R"([{"composition_atomic": "MoNbTaW"}])"};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::hea_cca, backend, 3);
  CHECK(out.ok);
  CHECK(backend.seen[1][3].parts[0].text ==
        "Your reply contained no JSON value. Reply with exactly one JSON array in the "
        "required schema.");
}

TEST_CASE("doc writer survives a top-level alloy shape error") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  backend.replies = {R"({"alloys": []})", R"([{"composition_atomic": "MoNbTaW"}])"};

  auto out = rt::run_doc_writer(w.bundles[0], schema::DatasetKind::hea_cca, backend, 3);
  CHECK(out.ok);
  CHECK(out.attempts == 2);
  CHECK(backend.seen[1][3].parts[0].text.find("$: expected top-level array of alloy entries") !=
        std::string::npos);
}

// ---------------------------------------------------------------------------
// run_pipeline

TEST_CASE("pipeline runs the corpus end to end") {
  testsupport::TempDir tmp;
  testsupport::copy_tree(testsupport::fixture_dir() / "corpus_meltpool", tmp.path);
  ws::Workspace w = ws::scan_workspace(tmp.path);
  chat::FixtureReplayBackend backend(testsupport::fixture_dir() / "responses_meltpool");

  auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 2, 3);

  REQUIRE(report.bundles.size() == 4);
  CHECK(report.bundles[0].bundle_id == "paper1");
  CHECK(report.bundles[1].bundle_id == "paper2");
  CHECK(report.bundles[2].bundle_id == "paper3");
  CHECK(report.bundles[3].bundle_id == "paper10");
  for (const auto& b : report.bundles) CHECK(b.ok);
  CHECK(report.bundles[0].attempts == 1);
  CHECK(report.bundles[2].attempts == 2);  // first response is rejected, second accepted
  CHECK(report.ok_count == 4);
  CHECK(report.failed_count == 0);
  CHECK(report.wall_ms >= 0);

  chat::Usage summed;
  for (const auto& b : report.bundles) summed += b.usage;
  CHECK(report.total_usage.total_tokens == summed.total_tokens);
  CHECK(report.total_usage.prompt_tokens == summed.prompt_tokens);
  CHECK(report.total_usage.total_tokens > 0);
  REQUIRE(report.usage_by_model.count("fixture-model") == 1);
  CHECK(report.usage_by_model.at("fixture-model").total_tokens ==
        report.total_usage.total_tokens);

  for (const char* id : {"paper1", "paper2", "paper3", "paper10"})
    CHECK(fs::is_regular_file(tmp.path / id / "inference.txt"));

  REQUIRE(report.aggregate.has_value());
  CHECK(report.aggregate->inference_files == 4);
  CHECK(report.aggregate->rows == 4);
  CHECK(report.aggregation_error.empty());
  CHECK(mda::util::read_file(report.aggregate->csv_path) ==
        mda::util::read_file(testsupport::golden_dir() / "extracted_data_fixture-model.csv"));
}

TEST_CASE("pipeline runs the alloy corpus end to end") {
  testsupport::TempDir tmp;
  testsupport::copy_tree(testsupport::fixture_dir() / "corpus_hea", tmp.path);
  ws::Workspace w = ws::scan_workspace(tmp.path);
  chat::FixtureReplayBackend backend(testsupport::fixture_dir() / "responses_hea");

  auto report = rt::run_pipeline(w, schema::DatasetKind::hea_cca, backend, 2, 3);

  REQUIRE(report.bundles.size() == 2);
  CHECK(report.ok_count == 2);
  CHECK(report.bundles[0].bundle_id == "alloy1");
  CHECK(report.bundles[0].violations_recorded == 1);  // one entry dropped by element count
  CHECK(report.bundles[1].violations_recorded == 0);
  REQUIRE(report.aggregate.has_value());
  CHECK(report.aggregate->rows == 3);
  CHECK(mda::util::read_file(report.aggregate->csv_path) ==
        mda::util::read_file(testsupport::golden_dir() / "refractory_hea_data_fixture-model.csv"));
}

TEST_CASE("pipeline reruns are deterministic") {
  auto run_once = [] {
    testsupport::TempDir tmp;
    testsupport::copy_tree(testsupport::fixture_dir() / "corpus_meltpool", tmp.path);
    ws::Workspace w = ws::scan_workspace(tmp.path);
    chat::FixtureReplayBackend backend(testsupport::fixture_dir() / "responses_meltpool");
    auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 4, 3);
    REQUIRE(report.aggregate.has_value());
    std::string bytes = mda::util::read_file(report.aggregate->csv_path);
    std::string inferences;
    for (const auto& b : w.bundles)
      inferences += mda::util::read_file(tmp.path / b.id / "inference.txt");
    return bytes + "\x1f" + inferences;
  };
  std::string first = run_once();
  CHECK(run_once() == first);
  CHECK(run_once() == first);
}

TEST_CASE("pipeline keeps going when one bundle fails") {
  testsupport::TempDir responses;
  testsupport::copy_tree(testsupport::fixture_dir() / "responses_meltpool", responses.path);
  fs::remove(responses.path / "paper2.txt");

  testsupport::TempDir tmp;
  testsupport::copy_tree(testsupport::fixture_dir() / "corpus_meltpool", tmp.path);
  ws::Workspace w = ws::scan_workspace(tmp.path);
  chat::FixtureReplayBackend backend(responses.path);

  auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 2, 3);

  CHECK(report.ok_count == 3);
  CHECK(report.failed_count == 1);
  const auto& failed = report.bundles[1];
  CHECK(failed.bundle_id == "paper2");
  CHECK_FALSE(failed.ok);
  CHECK(failed.attempts == 3);
  CHECK(failed.error.find("no fixture response") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp.path / "paper2" / "inference.txt"));

  // the survivors still aggregate
  REQUIRE(report.aggregate.has_value());
  CHECK(report.aggregate->inference_files == 3);
  CHECK(report.aggregate->rows == 2);
  CHECK(report.aggregation_error.empty());
}

TEST_CASE("pipeline reports an aggregation failure without throwing") {
  testsupport::TempDir responses;
  testsupport::copy_tree(testsupport::fixture_dir() / "responses_meltpool", responses.path);
  fs::remove(responses.path / "paper2.txt");

  testsupport::TempDir tmp;
  testsupport::copy_tree(testsupport::fixture_dir() / "corpus_meltpool", tmp.path);
  // A stale damaged inference survives because the doc-writer job for its
  // bundle fails and never rewrites it.
  ws::write_inference(tmp.path, "paper2", "{this is not json");
  ws::Workspace w = ws::scan_workspace(tmp.path);
  chat::FixtureReplayBackend backend(responses.path);

  auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 2, 3);

  CHECK(report.ok_count == 3);
  CHECK(report.failed_count == 1);
  CHECK_FALSE(report.aggregate.has_value());
  CHECK(report.aggregation_error.rfind("pipeline-error: aggregation failed: ", 0) == 0);
  CHECK(report.aggregation_error.find("paper2/inference.txt") != std::string::npos);
}

TEST_CASE("pipeline can skip aggregation") {
  testsupport::TempDir tmp;
  testsupport::copy_tree(testsupport::fixture_dir() / "corpus_meltpool", tmp.path);
  ws::Workspace w = ws::scan_workspace(tmp.path);
  chat::FixtureReplayBackend backend(testsupport::fixture_dir() / "responses_meltpool");

  auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 2, 3, false);
  CHECK(report.ok_count == 4);
  CHECK_FALSE(report.aggregate.has_value());
  CHECK(report.aggregation_error.empty());
  CHECK_FALSE(fs::exists(tmp.path / "extracted_data_fixture-model.csv"));
  CHECK(fs::is_regular_file(tmp.path / "paper1" / "inference.txt"));
}

TEST_CASE("pipeline validates its knobs") {
  testsupport::TempDir tmp;
  ws::Workspace w = single_bundle_workspace(tmp.path);
  ScriptedBackend backend;
  CHECK_THROWS_MATCHES(rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 0, 3),
                       Error, Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                                  "parallelism must be >= 1")));
  CHECK_THROWS_MATCHES(rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 1, 0),
                       Error, Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                                  "max_attempts must be >= 1")));
}

namespace {

// Counts concurrent complete() calls so tests can pin the pool width.
struct GaugeBackend : chat::ChatBackend {
  std::string model = "gauge";
  std::atomic<int> in_flight{0};
  std::atomic<int> peak{0};

  const std::string& model_name() const override { return model; }

  chat::ChatResult complete(const std::vector<chat::ChatTurn>& turns, const std::string&,
                            int) override {
    int now = ++in_flight;
    int prev = peak.load();
    while (prev < now && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    --in_flight;
    chat::ChatResult r;
    r.text = kEmptyRecord;
    r.usage = chat::estimate_usage(turns, r.text);
    return r;
  }
};

ws::Workspace six_bundle_workspace(const fs::path& root) {
  ws::Workspace w;
  w.root = root;
  for (int i = 1; i <= 6; ++i)
    w.bundles.push_back(make_bundle(root, "b" + std::to_string(i), {{"doc.md", "text\n"}}));
  return w;
}

}  // namespace

TEST_CASE("pipeline honors the parallelism bound") {
  testsupport::TempDir tmp;
  ws::Workspace w = six_bundle_workspace(tmp.path);

  SECTION("sequential") {
    GaugeBackend backend;
    auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 1, 1, false);
    CHECK(report.ok_count == 6);
    CHECK(backend.peak.load() == 1);
  }

  SECTION("two workers") {
    GaugeBackend backend;
    auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 2, 1, false);
    CHECK(report.ok_count == 6);
    CHECK(backend.peak.load() == 2);
  }

  SECTION("worker count is capped by the bundle count") {
    GaugeBackend backend;
    auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 16, 1, false);
    CHECK(report.ok_count == 6);
    CHECK(backend.peak.load() <= 6);
  }
}

TEST_CASE("pipeline report serializes every field") {
  testsupport::TempDir tmp;
  testsupport::copy_tree(testsupport::fixture_dir() / "corpus_meltpool", tmp.path);
  ws::Workspace w = ws::scan_workspace(tmp.path);
  chat::FixtureReplayBackend backend(testsupport::fixture_dir() / "responses_meltpool");
  auto report = rt::run_pipeline(w, schema::DatasetKind::meltpoolnet, backend, 2, 3);

  rt::Json j = rt::report_to_json(report);
  REQUIRE(j["bundles"].is_array());
  REQUIRE(j["bundles"].size() == 4);
  const auto& b0 = j["bundles"][0];
  CHECK(b0["bundle_id"] == "paper1");
  CHECK(b0["ok"] == true);
  CHECK(b0["attempts"] == 1);
  CHECK(b0.contains("prompt_tokens"));
  CHECK(b0.contains("completion_tokens"));
  CHECK(b0.contains("total_tokens"));
  CHECK(b0.contains("violations_recorded"));
  CHECK(b0["error"] == "");
  CHECK(j["ok_count"] == 4);
  CHECK(j["failed_count"] == 0);
  CHECK(j["total_usage"]["total_tokens"] == report.total_usage.total_tokens);
  CHECK(j["usage_by_model"].contains("fixture-model"));
  CHECK(j["wall_ms"].is_number());
  REQUIRE(j.contains("aggregate"));
  CHECK(j["aggregate"]["rows"] == 4);
  CHECK(j["aggregate"]["inference_files"] == 4);
  CHECK(j["aggregate"]["csv_path"] ==
        (tmp.path / "extracted_data_fixture-model.csv").string());
  CHECK_FALSE(j.contains("aggregation_error"));
}

TEST_CASE("pipeline report carries the aggregation error when there is one") {
  rt::PipelineReport report;
  report.aggregation_error = "pipeline-error: aggregation failed: boom";
  rt::Json j = rt::report_to_json(report);
  CHECK(j["aggregation_error"] == "pipeline-error: aggregation failed: boom");
  CHECK_FALSE(j.contains("aggregate"));
}

// ---------------------------------------------------------------------------
// run_chat_extract

namespace {

// Scripted per-group replies addressed by the job key.
struct KeyedBackend : chat::ChatBackend {
  std::string model = "keyed";
  std::map<std::string, std::vector<std::string>> scripts;
  std::map<std::string, std::vector<std::vector<chat::ChatTurn>>> seen;
  std::mutex mu;

  const std::string& model_name() const override { return model; }

  chat::ChatResult complete(const std::vector<chat::ChatTurn>& turns, const std::string& key,
                            int) override {
    std::lock_guard<std::mutex> lock(mu);
    auto& calls = seen[key];
    calls.push_back(turns);
    const auto& script = scripts.at(key);
    std::size_t i = std::min(calls.size() - 1, script.size() - 1);
    chat::ChatResult r;
    r.text = script[i];
    r.usage = chat::estimate_usage(turns, r.text);
    return r;
  }
};

}  // namespace

TEST_CASE("chat extract groups passages by DOI and keeps group order") {
  std::vector<rt::Passage> passages = {
      {"10.1/a", "First passage about NbTi."},
      {"10.2/b", "A molybdenum paragraph."},
      {"10.1/a", "Second passage about W."},
  };
  std::string key_a = mda::util::sanitize_token("10.1/a");
  std::string key_b = mda::util::sanitize_token("10.2/b");

  KeyedBackend backend;
  backend.scripts[key_a] = {R"([
    {"material": "NbTi", "bulk_modulus": 120.5, "doi": "10.1/a-suppl"},
    {"material": "W", "bulk_modulus": "310"}
  ])"};
  backend.scripts[key_b] = {R"([{"material": "Mo", "bulk_modulus": 230}])"};

  auto report = rt::run_chat_extract(passages, backend, 1);
  CHECK(report.failures.empty());
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].material == "NbTi");
  CHECK(report.rows[0].bulk_modulus == 120.5);
  CHECK(report.rows[0].doi == "10.1/a-suppl");
  CHECK(report.rows[1].material == "W");
  CHECK(report.rows[1].bulk_modulus == 310.0);
  CHECK(report.rows[1].doi == "10.1/a");  // defaults to the group DOI
  CHECK(report.rows[2].material == "Mo");
  CHECK(report.total_usage.total_tokens > 0);

  REQUIRE(backend.seen[key_a].size() == 1);
  const auto& turns = backend.seen[key_a][0];
  REQUIRE(turns.size() == 1);
  CHECK(turns[0].role == chat::Role::user);
  std::string expected = std::string(mda::prompts::kChatExtractTask) +
                         "\n\nDOI: 10.1/a\n\nPassages:\n"
                         "1. First passage about NbTi.\n"
                         "2. Second passage about W.\n"
                         "\nReply with a JSON array holding one object per passage, in passage "
                         "order, with keys \"material\", \"bulk_modulus\", \"doi\".";
  CHECK(turns[0].parts[0].text == expected);
}

TEST_CASE("chat extract retries with corrective feedback") {
  std::vector<rt::Passage> passages = {{"10.3/c", "text"}};
  std::string key = mda::util::sanitize_token("10.3/c");
  KeyedBackend backend;
  backend.scripts[key] = {"no structured reply",
                          R"([{"material": "V", "bulk_modulus": 160}])"};

  auto report = rt::run_chat_extract(passages, backend, 1, 3);
  CHECK(report.failures.empty());
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].material == "V");

  REQUIRE(backend.seen[key].size() == 2);
  const auto& retry = backend.seen[key][1];
  REQUIRE(retry.size() == 3);
  CHECK(retry[1].role == chat::Role::assistant);
  CHECK(retry[1].parts[0].text == "no structured reply");
  CHECK(retry[2].parts[0].text ==
        "no JSON value in reply. Reply with exactly one corrected JSON array.");
}

TEST_CASE("chat extract records one failure per exhausted group") {
  std::vector<rt::Passage> passages = {
      {"10.4/d", "good text"},
      {"10.5/e", "bad text"},
  };
  std::string key_d = mda::util::sanitize_token("10.4/d");
  std::string key_e = mda::util::sanitize_token("10.5/e");
  KeyedBackend backend;
  backend.scripts[key_d] = {R"([{"material": "Cr", "bulk_modulus": 190}])"};
  backend.scripts[key_e] = {"never json"};

  auto report = rt::run_chat_extract(passages, backend, 1, 2);
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].material == "Cr");
  REQUIRE(report.failures.size() == 1);
  CHECK(report.failures[0].first == "10.5/e");
  CHECK(report.failures[0].second == "no JSON value in reply");
  CHECK(backend.seen[key_e].size() == 2);
}

TEST_CASE("chat extract rejects malformed entries") {
  auto run_with = [](const std::string& reply) {
    std::vector<rt::Passage> passages = {{"10.6/f", "text"}};
    std::string key = mda::util::sanitize_token("10.6/f");
    KeyedBackend backend;
    backend.scripts[key] = {reply};
    auto report = rt::run_chat_extract(passages, backend, 1, 1);
    REQUIRE(report.failures.size() == 1);
    return report.failures[0].second;
  };

  CHECK(run_with(R"({"material": "X", "bulk_modulus": 1})") == "expected a JSON array");
  CHECK(run_with(R"([{"bulk_modulus": 1}])") == "every entry needs a string \"material\"");
  CHECK(run_with(R"([{"material": 7, "bulk_modulus": 1}])") ==
        "every entry needs a string \"material\"");
  CHECK(run_with(R"([{"material": "X", "bulk_modulus": "12-14"}])") ==
        "every entry needs a numeric \"bulk_modulus\"");
  CHECK(run_with(R"([{"material": "X"}])") ==
        "every entry needs a numeric \"bulk_modulus\"");
}

TEST_CASE("chat extract keeps group order under parallelism") {
  std::vector<rt::Passage> passages = {
      {"10.7/g", "one"}, {"10.8/h", "two"}, {"10.9/i", "three"}};
  KeyedBackend backend;
  backend.scripts[mda::util::sanitize_token("10.7/g")] = {
      R"([{"material": "first", "bulk_modulus": 1}])"};
  backend.scripts[mda::util::sanitize_token("10.8/h")] = {
      R"([{"material": "second", "bulk_modulus": 2}])"};
  backend.scripts[mda::util::sanitize_token("10.9/i")] = {
      R"([{"material": "third", "bulk_modulus": 3}])"};

  auto report = rt::run_chat_extract(passages, backend, 3);
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].material == "first");
  CHECK(report.rows[1].material == "second");
  CHECK(report.rows[2].material == "third");
}

TEST_CASE("chat extract validates its inputs") {
  KeyedBackend backend;
  CHECK_THROWS_MATCHES(rt::run_chat_extract({}, backend, 1), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("no passages")));
  std::vector<rt::Passage> passages = {{"10.0/x", "text"}};
  CHECK_THROWS_MATCHES(rt::run_chat_extract(passages, backend, 0), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("parallelism must be >= 1")));
}

// ---------------------------------------------------------------------------
// backend configuration

TEST_CASE("backend config defaults") {
  auto cfg = rt::parse_backend_config("{}");
  CHECK(cfg.kind == "fixture");
  CHECK(cfg.model_name == "fixture-model");
  CHECK(cfg.endpoint.empty());
  CHECK(cfg.api_key_env.empty());
  CHECK(cfg.timeout_s == 120.0);
  CHECK(cfg.max_parallel == 4);
  CHECK(cfg.max_attempts == 3);
  CHECK(cfg.fixture_dir.empty());
  CHECK(cfg.max_image_bytes == 4u * 1024u * 1024u);
}

TEST_CASE("backend config round-trips every key") {
  auto cfg = rt::parse_backend_config(R"({
    "kind": "http",
    "endpoint": "http://127.0.0.1:9000/v1/chat/completions",
    "model_name": "prod-model",
    "api_key_env": "EXTRACT_KEY",
    "timeout_s": 33.5,
    "max_parallel": 8,
    "max_attempts": 5,
    "fixture_dir": "/tmp/fixtures",
    "max_image_bytes": 1024
  })");
  CHECK(cfg.kind == "http");
  CHECK(cfg.endpoint == "http://127.0.0.1:9000/v1/chat/completions");
  CHECK(cfg.model_name == "prod-model");
  CHECK(cfg.api_key_env == "EXTRACT_KEY");
  CHECK(cfg.timeout_s == 33.5);
  CHECK(cfg.max_parallel == 8);
  CHECK(cfg.max_attempts == 5);
  CHECK(cfg.fixture_dir == "/tmp/fixtures");
  CHECK(cfg.max_image_bytes == 1024);
}

TEST_CASE("backend config rejects bad input") {
  auto message_of = [](const std::string& text) {
    try {
      rt::parse_backend_config(text);
      return std::string("no error");
    } catch (const Error& e) {
      return std::string(e.what());
    }
  };
  CHECK(message_of(R"({"proxy": "x"})").find("unknown backend config key: proxy") !=
        std::string::npos);
  CHECK(message_of(R"({"kind": "grpc"})").find("backend kind must be") != std::string::npos);
  CHECK(message_of(R"({"max_parallel": 0})").find("max_parallel must be >= 1") !=
        std::string::npos);
  CHECK(message_of(R"({"max_attempts": 0})").find("max_attempts must be >= 1") !=
        std::string::npos);
  CHECK(message_of("[]").find("backend config must be a JSON object") != std::string::npos);
  try {
    rt::parse_backend_config("{nope");
    FAIL("expected syntax_error");
  } catch (const Error& e) {
    CHECK(e.code() == errc::syntax_error);
    CHECK(e.context() == "backend config");
  }
}

TEST_CASE("make_chat_backend builds the configured backend") {
  chat::BackendConfig fixture;
  fixture.kind = "fixture";
  fixture.fixture_dir = (testsupport::fixture_dir() / "responses_meltpool").string();
  fixture.model_name = "replay-7";
  auto backend = rt::make_chat_backend(fixture);
  CHECK(backend->model_name() == "replay-7");
  auto res = backend->complete({}, "paper1", 1);
  CHECK(res.text ==
        mda::util::read_file(testsupport::fixture_dir() / "responses_meltpool" / "paper1.txt"));

  chat::BackendConfig no_dir;
  no_dir.kind = "fixture";
  CHECK_THROWS_MATCHES(rt::make_chat_backend(no_dir), Error,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                           "fixture backend needs fixture_dir")));

  chat::BackendConfig http;
  http.kind = "http";
  CHECK_THROWS_MATCHES(rt::make_chat_backend(http), Error,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                           "http backend needs an endpoint")));

  ::setenv("MDA_TEST_API_KEY", "sekret-123", 1);
  http.endpoint = "http://127.0.0.1:9/v1";
  http.api_key_env = "MDA_TEST_API_KEY";
  http.model_name = "wire-model";
  auto built = rt::make_chat_backend(http);
  CHECK(built->model_name() == "wire-model");
}

TEST_CASE("fixture replay prefers per-attempt files") {
  testsupport::TempDir tmp;
  touch(tmp.path / "b.txt", "generic");
  touch(tmp.path / "b.attempt2.txt", "second try");
  chat::FixtureReplayBackend backend(tmp.path, "m");
  CHECK(backend.complete({}, "b", 1).text == "generic");
  CHECK(backend.complete({}, "b", 2).text == "second try");
  try {
    backend.complete({}, "missing", 1);
    FAIL("expected backend_error");
  } catch (const Error& e) {
    CHECK(e.code() == errc::backend_error);
    CHECK(e.raw_message().find("no fixture response for bundle \"missing\" attempt 1") !=
          std::string::npos);
  }
  CHECK_THROWS_AS(chat::FixtureReplayBackend(tmp.path / "absent"), Error);
}

TEST_CASE("usage estimate is proportional to payload size") {
  std::vector<chat::ChatTurn> turns;
  turns.push_back(chat::ChatTurn::text_turn(chat::Role::user, "abcd"));  // 4 chars
  chat::Usage u = chat::estimate_usage(turns, "0123456789");             // 10 chars
  CHECK(u.prompt_tokens == 1);
  CHECK(u.completion_tokens == 3);
  CHECK(u.total_tokens == 4);

  chat::ChatTurn with_image;
  with_image.role = chat::Role::user;
  with_image.parts.push_back(chat::Part::make_text("abcde"));  // rounds up
  with_image.parts.push_back(chat::Part::make_image("image/jpeg", "xxxxxxxx"));
  chat::Usage v = chat::estimate_usage({with_image}, "");
  CHECK(v.prompt_tokens == 2 + 256);
  CHECK(v.completion_tokens == 0);
}

// ---------------------------------------------------------------------------
// HTTP backend wire format

TEST_CASE("base64 encoding matches the reference vectors") {
  using chat::detail::base64_encode;
  CHECK(base64_encode("") == "");
  CHECK(base64_encode("f") == "Zg==");
  CHECK(base64_encode("fo") == "Zm8=");
  CHECK(base64_encode("foo") == "Zm9v");
  CHECK(base64_encode("foob") == "Zm9vYg==");
  CHECK(base64_encode("fooba") == "Zm9vYmE=");
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
  std::string binary("\x00\xff\x10", 3);
  CHECK(base64_encode(binary) == "AP8Q");
}

TEST_CASE("endpoint parsing") {
  using chat::detail::parse_url;
  auto u = parse_url("http://example.test/v1/chat");
  CHECK_FALSE(u.https);
  CHECK(u.host == "example.test");
  CHECK(u.port == 80);
  CHECK(u.path == "/v1/chat");

  auto with_port = parse_url("http://127.0.0.1:8080");
  CHECK(with_port.port == 8080);
  CHECK(with_port.path == "/");

  auto https = parse_url("https://secure.test/x");
  CHECK(https.https);
  CHECK(https.port == 443);

  CHECK_THROWS_MATCHES(parse_url("ftp://x/"), Error,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                           "endpoint must start with http:// or https://")));
  CHECK_THROWS_MATCHES(parse_url("http:///path"), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("endpoint has no host")));
  CHECK_THROWS_MATCHES(parse_url("http://h:0/"), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("bad port in endpoint")));
  CHECK_THROWS_MATCHES(parse_url("http://h:70000/"), Error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("bad port in endpoint")));
}

TEST_CASE("http backend constructor validates its configuration") {
  chat::BackendConfig cfg;
  cfg.kind = "http";
  CHECK_THROWS_MATCHES(chat::HttpBackend(cfg), Error,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                           "http backend needs an endpoint")));

  cfg.endpoint = "http://127.0.0.1:9/v1";
  CHECK_THROWS_MATCHES(chat::HttpBackend(cfg), Error,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                           "http backend needs api_key_env")));

  cfg.api_key_env = "MDA_TEST_KEY_THAT_IS_UNSET";
  ::unsetenv("MDA_TEST_KEY_THAT_IS_UNSET");
  CHECK_THROWS_MATCHES(chat::HttpBackend(cfg), Error,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                           "environment variable MDA_TEST_KEY_THAT_IS_UNSET is not set")));

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  ::setenv("MDA_TEST_API_KEY", "sekret-123", 1);
  cfg.api_key_env = "MDA_TEST_API_KEY";
  cfg.endpoint = "https://127.0.0.1:9/v1";
  CHECK_THROWS_MATCHES(chat::HttpBackend(cfg), Error,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                           "requires a TLS-enabled build")));
#endif
}

namespace {

struct WireServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;
  std::string last_body;
  std::string last_auth;

  WireServer() {
    server.Post("/text", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      res.set_content(
          R"({"choices": [{"message": {"content": "All good."}}],)"
          R"( "usage": {"prompt_tokens": 7, "completion_tokens": 3}})",
          "application/json");
    });
    server.Post("/estimate", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      res.set_content(R"({"choices": [{"message": {"content": "Est reply."}}]})",
                      "application/json");
    });
    server.Post("/parts", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      res.set_content(
          R"({"choices": [{"message": {"content":)"
          R"( [{"type": "text", "text": "Hello "}, {"type": "text", "text": "world"}]}}],)"
          R"( "usage": {"prompt_tokens": 1, "completion_tokens": 2, "total_tokens": 3}})",
          "application/json");
    });
    server.Post("/boom", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      res.status = 500;
      res.set_content("kaboom", "text/plain");
    });
    server.Post("/empty_choices", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      res.set_content(R"({"choices": []})", "application/json");
    });
    server.Post("/not_json", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      res.set_content("garbage", "text/plain");
    });
    port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~WireServer() {
    server.stop();
    thread.join();
  }

  void record(const httplib::Request& req) {
    last_body = req.body;
    last_auth = req.get_header_value("Authorization");
  }

  chat::BackendConfig config(const std::string& path) const {
    chat::BackendConfig cfg;
    cfg.kind = "http";
    cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + path;
    cfg.model_name = "wire-model";
    cfg.api_key_env = "MDA_TEST_API_KEY";
    cfg.timeout_s = 5.0;
    return cfg;
  }
};

}  // namespace

TEST_CASE("http backend speaks the chat completions wire format") {
  ::setenv("MDA_TEST_API_KEY", "sekret-123", 1);
  WireServer wire;

  SECTION("text turns become plain string content") {
    chat::HttpBackend backend(wire.config("/text"));
    std::vector<chat::ChatTurn> turns = {
        chat::ChatTurn::text_turn(chat::Role::system, "You are terse."),
        chat::ChatTurn::text_turn(chat::Role::user, "Hi")};
    auto res = backend.complete(turns, "bundle-x", 1);
    CHECK(res.text == "All good.");
    CHECK(res.usage.prompt_tokens == 7);
    CHECK(res.usage.completion_tokens == 3);
    CHECK(res.usage.total_tokens == 10);  // summed when the server omits a total
    CHECK(wire.last_auth == "Bearer sekret-123");

    rt::Json body = rt::Json::parse(wire.last_body);
    CHECK(body["model"] == "wire-model");
    REQUIRE(body["messages"].size() == 2);
    CHECK(body["messages"][0]["role"] == "system");
    CHECK(body["messages"][0]["content"] == "You are terse.");
    CHECK(body["messages"][1]["role"] == "user");
    CHECK(body["messages"][1]["content"] == "Hi");
  }

  SECTION("image turns become typed part arrays") {
    chat::HttpBackend backend(wire.config("/estimate"));
    chat::ChatTurn turn;
    turn.role = chat::Role::user;
    turn.parts.push_back(chat::Part::make_text("Look"));
    turn.parts.push_back(chat::Part::make_image("image/jpeg", "abc"));
    auto res = backend.complete({turn}, "bundle-x", 1);
    CHECK(res.text == "Est reply.");
    // no usage in the response, so the estimate kicks in
    chat::Usage expected = chat::estimate_usage({turn}, res.text);
    CHECK(res.usage.prompt_tokens == expected.prompt_tokens);
    CHECK(res.usage.completion_tokens == expected.completion_tokens);

    rt::Json body = rt::Json::parse(wire.last_body);
    const auto& content = body["messages"][0]["content"];
    REQUIRE(content.is_array());
    REQUIRE(content.size() == 2);
    CHECK(content[0]["type"] == "text");
    CHECK(content[0]["text"] == "Look");
    CHECK(content[1]["type"] == "image_url");
    CHECK(content[1]["image_url"]["url"] == "data:image/jpeg;base64,YWJj");
  }

  SECTION("oversized images are dropped from the request") {
    auto cfg = wire.config("/estimate");
    cfg.max_image_bytes = 4;
    chat::HttpBackend backend(cfg);
    chat::ChatTurn turn;
    turn.role = chat::Role::user;
    turn.parts.push_back(chat::Part::make_text("Look"));
    turn.parts.push_back(chat::Part::make_image("image/jpeg", "abcde"));
    backend.complete({turn}, "bundle-x", 1);

    rt::Json body = rt::Json::parse(wire.last_body);
    const auto& content = body["messages"][0]["content"];
    REQUIRE(content.is_array());
    REQUIRE(content.size() == 1);
    CHECK(content[0]["type"] == "text");
  }

  SECTION("part-array response content is concatenated") {
    chat::HttpBackend backend(wire.config("/parts"));
    auto res = backend.complete({chat::ChatTurn::text_turn(chat::Role::user, "q")}, "b", 1);
    CHECK(res.text == "Hello world");
    CHECK(res.usage.total_tokens == 3);
  }

  SECTION("non-200 statuses surface as backend errors") {
    chat::HttpBackend backend(wire.config("/boom"));
    try {
      backend.complete({chat::ChatTurn::text_turn(chat::Role::user, "q")}, "bundle-x", 1);
      FAIL("expected backend_error");
    } catch (const Error& e) {
      CHECK(e.code() == errc::backend_error);
      CHECK(e.raw_message().find("http status 500") != std::string::npos);
      CHECK(e.raw_message().find("kaboom") != std::string::npos);
      CHECK(e.context() == "bundle-x");
    }
  }

  SECTION("malformed response bodies surface as backend errors") {
    chat::HttpBackend no_choices(wire.config("/empty_choices"));
    CHECK_THROWS_MATCHES(
        no_choices.complete({chat::ChatTurn::text_turn(chat::Role::user, "q")}, "b", 1), Error,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("response has no choices")));

    chat::HttpBackend garbage(wire.config("/not_json"));
    CHECK_THROWS_MATCHES(
        garbage.complete({chat::ChatTurn::text_turn(chat::Role::user, "q")}, "b", 1), Error,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("unparseable response body")));
  }
}

TEST_CASE("http backend reports unreachable endpoints") {
  ::setenv("MDA_TEST_API_KEY", "sekret-123", 1);
  int dead_port;
  {
    httplib::Server probe;
    dead_port = probe.bind_to_any_port("127.0.0.1");
    // the socket closes when probe goes out of scope without listening
  }
  chat::BackendConfig cfg;
  cfg.kind = "http";
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(dead_port) + "/v1";
  cfg.api_key_env = "MDA_TEST_API_KEY";
  cfg.timeout_s = 2.0;
  chat::HttpBackend backend(cfg);
  try {
    backend.complete({chat::ChatTurn::text_turn(chat::Role::user, "q")}, "b", 1);
    FAIL("expected backend_error");
  } catch (const Error& e) {
    CHECK(e.code() == errc::backend_error);
    CHECK(e.raw_message().find("http request failed") != std::string::npos);
  }
}
