#pragma once

#include <stdexcept>
#include <string>

namespace mda {

enum class errc {
  workspace_not_found,
  io_error,
  syntax_error,
  validation_error,
  parse_error,
  config_error,
  connection_lost,
  tool_error,
  parse_failed,
  input_error,
  prompt_build_error,
  backend_error,
  extraction_failed,
  aggregation_error,
  undefined_metric,
  task_error,
  pipeline_error,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::workspace_not_found: return "workspace-not-found";
    case errc::io_error: return "io-error";
    case errc::syntax_error: return "syntax-error";
    case errc::validation_error: return "validation-error";
    case errc::parse_error: return "parse-error";
    case errc::config_error: return "config-error";
    case errc::connection_lost: return "connection-lost";
    case errc::tool_error: return "tool-error";
    case errc::parse_failed: return "parse-failed";
    case errc::input_error: return "input-error";
    case errc::prompt_build_error: return "prompt-build-error";
    case errc::backend_error: return "backend-error";
    case errc::extraction_failed: return "extraction-failed";
    case errc::aggregation_error: return "aggregation-error";
    case errc::undefined_metric: return "undefined-metric";
    case errc::task_error: return "task-error";
    case errc::pipeline_error: return "pipeline-error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(errc code, std::string message, std::string context = {})
      : std::runtime_error(std::string(errc_name(code)) + ": " + message +
                           (context.empty() ? "" : " [" + context + "]")),
        code_(code),
        message_(std::move(message)),
        context_(std::move(context)) {}

  errc code() const noexcept { return code_; }
  const std::string& raw_message() const noexcept { return message_; }
  const std::string& context() const noexcept { return context_; }

 private:
  errc code_;
  std::string message_;
  std::string context_;
};

}  // namespace mda
