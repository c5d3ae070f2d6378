#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mda/errors.hpp"
#include "mda/util.hpp"

namespace mda::chat {

namespace fs = std::filesystem;

enum class Role { system, user, assistant };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "?";
}

struct Part {
  enum class Kind { text, image };
  Kind kind = Kind::text;
  std::string text;        // text parts
  std::string media_type;  // image parts
  std::string bytes;       // image parts, raw

  static Part make_text(std::string t) {
    Part p;
    p.kind = Kind::text;
    p.text = std::move(t);
    return p;
  }
  static Part make_image(std::string media_type, std::string bytes) {
    Part p;
    p.kind = Kind::image;
    p.media_type = std::move(media_type);
    p.bytes = std::move(bytes);
    return p;
  }
};

struct ChatTurn {
  Role role = Role::user;
  std::vector<Part> parts;

  static ChatTurn text_turn(Role role, std::string text) {
    ChatTurn t;
    t.role = role;
    t.parts.push_back(Part::make_text(std::move(text)));
    return t;
  }
};

struct Usage {
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  std::uint64_t total_tokens = 0;

  Usage& operator+=(const Usage& o) {
    prompt_tokens += o.prompt_tokens;
    completion_tokens += o.completion_tokens;
    total_tokens += o.total_tokens;
    return *this;
  }
};

struct ChatResult {
  std::string text;
  Usage usage;
};

struct BackendConfig {
  std::string kind = "fixture";  // "http" | "fixture"
  std::string endpoint;          // http only
  std::string model_name = "fixture-model";
  std::string api_key_env;  // http only; the key itself is read from the environment
  double timeout_s = 120.0;
  int max_parallel = 4;
  int max_attempts = 3;
  std::string fixture_dir;  // fixture only
  std::size_t max_image_bytes = 4u * 1024u * 1024u;
};

/// Implementations must tolerate concurrent complete() calls from multiple
/// workers.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual const std::string& model_name() const = 0;
  virtual ChatResult complete(const std::vector<ChatTurn>& turns, const std::string& bundle_id,
                              int attempt) = 0;
};

/// chars/4 rounded up, plus a flat charge per image; keeps fixture runs
/// byte-reproducible.
inline Usage estimate_usage(const std::vector<ChatTurn>& turns, const std::string& reply) {
  Usage u;
  std::uint64_t prompt_chars = 0;
  std::uint64_t images = 0;
  for (const auto& t : turns)
    for (const auto& p : t.parts) {
      if (p.kind == Part::Kind::text)
        prompt_chars += p.text.size();
      else
        ++images;
    }
  u.prompt_tokens = (prompt_chars + 3) / 4 + images * 256;
  u.completion_tokens = (reply.size() + 3) / 4;
  u.total_tokens = u.prompt_tokens + u.completion_tokens;
  return u;
}

/// Replays recorded assistant texts: `<bundle_id>.attempt<N>.txt` wins over
/// the attempt-agnostic `<bundle_id>.txt`.
class FixtureReplayBackend : public ChatBackend {
 public:
  explicit FixtureReplayBackend(fs::path fixture_dir, std::string model_name = "fixture-model")
      : dir_(std::move(fixture_dir)), model_(std::move(model_name)) {
    std::error_code ec;
    if (!fs::is_directory(dir_, ec))
      throw Error(errc::config_error, "fixture directory missing", dir_.string());
  }

  const std::string& model_name() const override { return model_; }

  ChatResult complete(const std::vector<ChatTurn>& turns, const std::string& bundle_id,
                      int attempt) override {
    fs::path per_attempt = dir_ / (bundle_id + ".attempt" + std::to_string(attempt) + ".txt");
    fs::path fallback = dir_ / (bundle_id + ".txt");
    std::error_code ec;
    fs::path chosen;
    if (fs::is_regular_file(per_attempt, ec))
      chosen = per_attempt;
    else if (fs::is_regular_file(fallback, ec))
      chosen = fallback;
    else
      throw Error(errc::backend_error,
                  "no fixture response for bundle \"" + bundle_id + "\" attempt " +
                      std::to_string(attempt),
                  dir_.string());
    ChatResult result;
    result.text = util::read_file(chosen);
    result.usage = estimate_usage(turns, result.text);
    return result;
  }

 private:
  fs::path dir_;
  std::string model_;
};

}  // namespace mda::chat
