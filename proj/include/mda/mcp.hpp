#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mda/errors.hpp"
#include "mda/subprocess.hpp"
#include "mda/util.hpp"

namespace mda::mcp {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// JSON-RPC 2.0 error codes
inline constexpr int kParseError = -32700;
inline constexpr int kInvalidRequest = -32600;
inline constexpr int kMethodNotFound = -32601;
inline constexpr int kInvalidParams = -32602;
inline constexpr int kToolFailed = -32000;

struct ToolDescriptor {
  std::string name;
  std::string description;
  Json input_schema;
};

using ToolHandler = std::function<Json(const Json& arguments)>;

struct Tool {
  ToolDescriptor descriptor;
  ToolHandler handler;
};

class ToolRegistry {
 public:
  void add(ToolDescriptor descriptor, ToolHandler handler) {
    if (find(descriptor.name))
      throw Error(errc::config_error, "duplicate tool name: " + descriptor.name);
    tools_.push_back({std::move(descriptor), std::move(handler)});
  }

  const Tool* find(std::string_view name) const {
    for (const auto& t : tools_)
      if (t.descriptor.name == name) return &t;
    return nullptr;
  }

  Json list_json() const {
    Json tools = Json::array();
    for (const auto& t : tools_) {
      Json d = Json::object();
      d["name"] = t.descriptor.name;
      d["description"] = t.descriptor.description;
      d["input_schema"] = t.descriptor.input_schema;
      tools.push_back(std::move(d));
    }
    Json out = Json::object();
    out["tools"] = std::move(tools);
    return out;
  }

 private:
  std::vector<Tool> tools_;
};

struct CallLogEntry {
  std::string timestamp;      // ISO-8601 UTC
  std::string method;         // empty when the request line never parsed
  std::string params_digest;  // content hash, never raw params
  std::string outcome;        // "ok" | "error"
  std::int64_t duration_ms = 0;
};

inline Json to_json(const CallLogEntry& e) {
  Json j = Json::object();
  j["timestamp"] = e.timestamp;
  j["method"] = e.method;
  j["params_digest"] = e.params_digest;
  j["outcome"] = e.outcome;
  j["duration_ms"] = e.duration_ms;
  return j;
}

/// Append-only JSON-lines sink, one entry per handled request.
class CallLog {
 public:
  explicit CallLog(const fs::path& path) : out_(path, std::ios::app) {
    if (!out_) throw Error(errc::io_error, "cannot open call log", path.string());
  }

  void append(const CallLogEntry& e) {
    out_ << to_json(e).dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

namespace detail {

inline std::string iso8601_now() {
  using namespace std::chrono;
  auto now = system_clock::now();
  std::time_t secs = system_clock::to_time_t(now);
  auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  std::size_t n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char tail[8];
  std::snprintf(tail, sizeof tail, ".%03dZ", static_cast<int>(ms));
  return std::string(buf, n) + tail;
}

inline Json error_response(const Json& id, int code, const std::string& message) {
  Json resp = Json::object();
  resp["jsonrpc"] = "2.0";
  resp["id"] = id;
  Json err = Json::object();
  err["code"] = code;
  err["message"] = message;
  resp["error"] = std::move(err);
  return resp;
}

inline Json result_response(const Json& id, Json result) {
  Json resp = Json::object();
  resp["jsonrpc"] = "2.0";
  resp["id"] = id;
  resp["result"] = std::move(result);
  return resp;
}

/// Presence of required arguments plus string typing; just enough schema to
/// make -32602 deterministic.
inline std::optional<std::string> check_arguments(const Json& schema, const Json& arguments) {
  if (schema.contains("required"))
    for (const auto& req : schema["required"]) {
      std::string name = req.get<std::string>();
      if (!arguments.contains(name)) return "missing required argument: " + name;
    }
  if (schema.contains("properties"))
    for (const auto& [name, prop] : schema["properties"].items()) {
      if (!arguments.contains(name)) continue;
      if (prop.contains("type") && prop["type"] == "string" && !arguments[name].is_string())
        return "argument " + name + " must be a string";
    }
  return std::nullopt;
}

}  // namespace detail

/// Newline-delimited JSON-RPC loop; every input line gets exactly one
/// response line and one log entry. Returns the handled-request count.
inline std::size_t serve(std::istream& in, std::ostream& out, const ToolRegistry& registry,
                         CallLog* log = nullptr) {
  std::size_t handled = 0;
  std::string line;
  while (std::getline(in, line)) {
    auto start = std::chrono::steady_clock::now();
    CallLogEntry entry;
    entry.timestamp = detail::iso8601_now();
    entry.params_digest = util::fnv1a_hex(line);
    entry.outcome = "error";

    Json response;
    Json req;
    bool parsed = true;
    try {
      req = Json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      parsed = false;
      response = detail::error_response(nullptr, kParseError,
                                        std::string("parse error: ") + e.what());
    }

    if (parsed) {
      Json id = req.is_object() && req.contains("id") ? req["id"] : Json(nullptr);
      if (!req.is_object() || !req.contains("method") || !req["method"].is_string()) {
        response = detail::error_response(id, kInvalidRequest, "invalid request");
      } else {
        std::string method = req["method"].get<std::string>();
        entry.method = method;
        if (method == "tools/list") {
          response = detail::result_response(id, registry.list_json());
          entry.outcome = "ok";
        } else if (method == "tools/call") {
          const Json params = req.contains("params") ? req["params"] : Json(nullptr);
          if (!params.is_object() || !params.contains("name") || !params["name"].is_string()) {
            response = detail::error_response(id, kInvalidParams,
                                              "params must carry a tool name");
          } else {
            std::string name = params["name"].get<std::string>();
            Json arguments =
                params.contains("arguments") ? params["arguments"] : Json::object();
            const Tool* tool = registry.find(name);
            if (!tool) {
              response = detail::error_response(id, kMethodNotFound, "unknown tool: " + name);
            } else if (!arguments.is_object()) {
              response = detail::error_response(id, kInvalidParams, "arguments must be an object");
            } else if (auto problem =
                           detail::check_arguments(tool->descriptor.input_schema, arguments)) {
              response = detail::error_response(id, kInvalidParams, *problem);
            } else {
              entry.params_digest = util::fnv1a_hex(params.dump());
              try {
                response = detail::result_response(id, tool->handler(arguments));
                entry.outcome = "ok";
              } catch (const std::exception& e) {
                response = detail::error_response(id, kToolFailed, e.what());
              }
            }
          }
        } else {
          response = detail::error_response(id, kMethodNotFound, "unknown method: " + method);
        }
      }
    }

    entry.duration_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - start)
                            .count();
    out << response.dump() << '\n';
    out.flush();
    if (log) log->append(entry);
    ++handled;
  }
  return handled;
}

/// Client side: spawns the server command and speaks the same framing.
class McpClient {
 public:
  explicit McpClient(const std::string& server_command) : child_(server_command) {}

  Json request(const std::string& method, const Json& params) {
    Json req = Json::object();
    req["jsonrpc"] = "2.0";
    req["id"] = next_id_++;
    req["method"] = method;
    if (!params.is_null()) req["params"] = params;
    child_.write_line(req.dump());
    std::optional<std::string> line = child_.read_line();
    if (!line) throw Error(errc::connection_lost, "server closed the stream", method);
    Json resp;
    try {
      resp = Json::parse(*line);
    } catch (const nlohmann::json::parse_error&) {
      throw Error(errc::connection_lost, "unparseable server response", method);
    }
    if (resp.is_object() && resp.contains("error")) {
      const Json& err = resp["error"];
      int code = err.is_object() && err.contains("code") ? err["code"].get<int>() : 0;
      std::string message =
          err.is_object() && err.contains("message") ? err["message"].get<std::string>() : "";
      throw Error(errc::tool_error, "server error " + std::to_string(code) + ": " + message,
                  method);
    }
    return resp.is_object() && resp.contains("result") ? resp["result"] : Json(nullptr);
  }

  Json list_tools() { return request("tools/list", Json(nullptr)); }

  Json call_tool(const std::string& name, Json arguments) {
    Json params = Json::object();
    params["name"] = name;
    params["arguments"] = std::move(arguments);
    return request("tools/call", params);
  }

  int shutdown() {
    child_.close_stdin();
    return child_.wait();
  }

 private:
  proc::DuplexChild child_;
  std::int64_t next_id_ = 1;
};

// ---------------------------------------------------------------------------
// parser backends

struct ParseResult {
  std::string bundle_id;
  std::vector<std::string> markdown_paths;
  std::vector<std::string> image_paths;
  std::string backend_name;
  std::int64_t duration_ms = 0;
};

inline Json to_json(const ParseResult& r) {
  Json j = Json::object();
  j["bundle_id"] = r.bundle_id;
  j["markdown_paths"] = r.markdown_paths;
  j["image_paths"] = r.image_paths;
  j["backend_name"] = r.backend_name;
  j["duration_ms"] = r.duration_ms;
  return j;
}

class ParserBackend {
 public:
  virtual ~ParserBackend() = default;
  virtual const char* name() const = 0;
  virtual void parse(const fs::path& input, const fs::path& out_dir) = 0;
};

/// Reference backend over pre-parsed sources: for input `x.pdf` the sibling
/// directory `x/` must already hold the converted files; a directory input is
/// used directly.
class PassthroughBackend : public ParserBackend {
 public:
  const char* name() const override { return "passthrough"; }

  void parse(const fs::path& input, const fs::path& out_dir) override {
    std::error_code ec;
    fs::path src;
    if (fs::is_directory(input, ec))
      src = input;
    else
      src = input.parent_path() / input.stem();
    if (!fs::is_directory(src, ec))
      throw Error(errc::input_error, "no pre-parsed directory for " + input.string(),
                  src.string());

    for (fs::directory_iterator it(src, ec), end; !ec && it != end; it.increment(ec)) {
      if (!it->is_regular_file(ec)) continue;
      const fs::path& p = it->path();
      std::string name = p.filename().string();
      if (name.empty() || name.front() == '.') continue;
      std::string ext = util::to_lower(p.extension().string());
      if (ext == ".md" || ext == ".jpg" || ext == ".jpeg") {
        std::error_code copy_ec;
        fs::copy_file(p, out_dir / p.filename(), fs::copy_options::overwrite_existing, copy_ec);
        if (copy_ec)
          throw Error(errc::io_error, "copy failed: " + copy_ec.message(), p.string());
      } else if (ext == ".png" || ext == ".gif" || ext == ".bmp" || ext == ".webp" ||
                 ext == ".tif" || ext == ".tiff" || ext == ".svg") {
        throw Error(errc::parse_failed, "source holds a non-JPEG image: " + name, src.string());
      }
    }
    if (ec) throw Error(errc::io_error, "cannot enumerate " + src.string() + ": " + ec.message());
  }
};

/// Spawns a configured command; `{pdf}` and `{out}` in the template are
/// replaced with quoted paths.
class ExternalBackend : public ParserBackend {
 public:
  explicit ExternalBackend(std::string command_template)
      : template_(std::move(command_template)) {
    if (template_.find("{pdf}") == std::string::npos ||
        template_.find("{out}") == std::string::npos)
      throw Error(errc::config_error, "command template needs {pdf} and {out} placeholders",
                  template_);
  }

  const char* name() const override { return "external"; }

  void parse(const fs::path& input, const fs::path& out_dir) override {
    std::string cmd = template_;
    replace_all(cmd, "{pdf}", proc::shell_quote(input.string()));
    replace_all(cmd, "{out}", proc::shell_quote(out_dir.string()));
    proc::CommandResult res = proc::run_command(cmd);
    if (res.exit_code != 0) {
      std::string output = res.output.size() > 2000 ? res.output.substr(0, 2000) + "..."
                                                    : res.output;
      throw Error(errc::parse_failed,
                  "parser command exited " + std::to_string(res.exit_code) + ": " + output,
                  input.string());
    }
  }

 private:
  static void replace_all(std::string& s, std::string_view from, const std::string& to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
      s.replace(pos, from.size(), to);
      pos += to.size();
    }
  }

  std::string template_;
};

inline std::unique_ptr<ParserBackend> make_parser_backend(std::string_view kind,
                                                          const std::string& command_template) {
  if (kind == "passthrough") return std::make_unique<PassthroughBackend>();
  if (kind == "external") {
    if (command_template.empty())
      throw Error(errc::config_error, "external backend needs a command template");
    return std::make_unique<ExternalBackend>(command_template);
  }
  throw Error(errc::config_error, "unknown parser backend: " + std::string(kind));
}

/// Runs one conversion and checks the contract: at least one markdown file,
/// images in JPEG only.
inline ParseResult parse_document(ParserBackend& backend, const fs::path& pdf_path,
                                  const fs::path& out_dir) {
  std::error_code ec;
  if (!fs::exists(pdf_path, ec))
    throw Error(errc::input_error, "input does not exist", pdf_path.string());
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(errc::io_error, "cannot create " + out_dir.string() + ": " + ec.message());

  auto start = std::chrono::steady_clock::now();
  backend.parse(pdf_path, out_dir);

  std::vector<fs::path> markdown, images;
  for (fs::directory_iterator it(out_dir, ec), end; !ec && it != end; it.increment(ec)) {
    if (!it->is_regular_file(ec)) continue;
    const fs::path& p = it->path();
    std::string name = p.filename().string();
    if (name.empty() || name.front() == '.') continue;
    std::string ext = util::to_lower(p.extension().string());
    if (ext == ".md")
      markdown.push_back(p);
    else if (ext == ".jpg" || ext == ".jpeg")
      images.push_back(p);
    else if (ext == ".png" || ext == ".gif" || ext == ".bmp" || ext == ".webp" ||
             ext == ".tif" || ext == ".tiff" || ext == ".svg")
      throw Error(errc::parse_failed, "backend emitted a non-JPEG image: " + name,
                  out_dir.string());
  }
  if (ec)
    throw Error(errc::io_error, "cannot enumerate " + out_dir.string() + ": " + ec.message());
  if (markdown.empty())
    throw Error(errc::parse_failed, "backend produced no markdown", out_dir.string());

  auto natural = [](const fs::path& a, const fs::path& b) {
    return util::natural_less(a.filename().string(), b.filename().string());
  };
  std::sort(markdown.begin(), markdown.end(), natural);
  std::sort(images.begin(), images.end(), natural);

  ParseResult result;
  result.bundle_id = out_dir.filename().string();
  for (const auto& p : markdown) result.markdown_paths.push_back(p.string());
  for (const auto& p : images) result.image_paths.push_back(p.string());
  result.backend_name = backend.name();
  result.duration_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - start)
                           .count();
  return result;
}

inline ToolRegistry make_parse_registry(std::shared_ptr<ParserBackend> backend) {
  ToolRegistry registry;
  Json schema = Json::object();
  schema["type"] = "object";
  Json props = Json::object();
  props["pdf_path"] = Json{{"type", "string"}};
  props["out_dir"] = Json{{"type", "string"}};
  schema["properties"] = std::move(props);
  schema["required"] = Json::array({"pdf_path", "out_dir"});
  registry.add(
      {"parse_pdf", "Convert one source PDF into a bundle of markdown and JPEG images.",
       std::move(schema)},
      [backend](const Json& arguments) -> Json {
        ParseResult r = parse_document(*backend, arguments["pdf_path"].get<std::string>(),
                                       arguments["out_dir"].get<std::string>());
        return to_json(r);
      });
  return registry;
}

}  // namespace mda::mcp
