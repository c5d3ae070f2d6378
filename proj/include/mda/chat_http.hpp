#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>
#include <utility>

#include <httplib.h>
#include <json.hpp>

#include "mda/chat.hpp"
#include "mda/errors.hpp"

namespace mda::chat {

using Json = nlohmann::ordered_json;

namespace detail {

inline std::string base64_encode(std::string_view in) {
  static const char* kAlphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= in.size()) {
    unsigned v = (static_cast<unsigned char>(in[i]) << 16) |
                 (static_cast<unsigned char>(in[i + 1]) << 8) |
                 static_cast<unsigned char>(in[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
    i += 3;
  }
  if (i + 1 == in.size()) {
    unsigned v = static_cast<unsigned char>(in[i]) << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    unsigned v = (static_cast<unsigned char>(in[i]) << 16) |
                 (static_cast<unsigned char>(in[i + 1]) << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

struct ParsedUrl {
  bool https = false;
  std::string host;
  int port = 80;
  std::string path = "/";
};

inline ParsedUrl parse_url(const std::string& url) {
  ParsedUrl out;
  std::string rest;
  if (url.rfind("http://", 0) == 0) {
    out.https = false;
    out.port = 80;
    rest = url.substr(7);
  } else if (url.rfind("https://", 0) == 0) {
    out.https = true;
    out.port = 443;
    rest = url.substr(8);
  } else {
    throw Error(errc::config_error, "endpoint must start with http:// or https://", url);
  }
  std::size_t slash = rest.find('/');
  std::string authority = slash == std::string::npos ? rest : rest.substr(0, slash);
  out.path = slash == std::string::npos ? "/" : rest.substr(slash);
  std::size_t colon = authority.rfind(':');
  if (colon != std::string::npos) {
    out.host = authority.substr(0, colon);
    auto port = util::parse_number(authority.substr(colon + 1));
    if (!port || *port <= 0 || *port > 65535)
      throw Error(errc::config_error, "bad port in endpoint", url);
    out.port = static_cast<int>(*port);
  } else {
    out.host = authority;
  }
  if (out.host.empty()) throw Error(errc::config_error, "endpoint has no host", url);
  return out;
}

}  // namespace detail

/// Chat-completions-style HTTP client. A fresh connection per call keeps the
/// backend safe for concurrent workers.
class HttpBackend : public ChatBackend {
 public:
  explicit HttpBackend(BackendConfig config) : config_(std::move(config)) {
    if (config_.endpoint.empty())
      throw Error(errc::config_error, "http backend needs an endpoint");
    if (config_.api_key_env.empty())
      throw Error(errc::config_error, "http backend needs api_key_env");
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (!key || !*key)
      throw Error(errc::config_error,
                  "environment variable " + config_.api_key_env + " is not set");
    api_key_ = key;
    url_ = detail::parse_url(config_.endpoint);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (url_.https)
      throw Error(errc::config_error, "https endpoint requires a TLS-enabled build",
                  config_.endpoint);
#endif
  }

  const std::string& model_name() const override { return config_.model_name; }

  ChatResult complete(const std::vector<ChatTurn>& turns, const std::string& bundle_id,
                      int /*attempt*/) override {
    Json body = build_body(turns, bundle_id);

    httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
    auto seconds = static_cast<time_t>(config_.timeout_s);
    auto micros = static_cast<time_t>((config_.timeout_s - static_cast<double>(seconds)) * 1e6);

    httplib::Result res = [&] {
#ifdef CPPHTTPLIB_OPENSSL_SUPPORT
      if (url_.https) {
        httplib::SSLClient cli(url_.host, url_.port);
        cli.set_connection_timeout(seconds, micros);
        cli.set_read_timeout(seconds, micros);
        cli.set_write_timeout(seconds, micros);
        return cli.Post(url_.path, headers, body.dump(), "application/json");
      }
#endif
      httplib::Client cli(url_.host, url_.port);
      cli.set_connection_timeout(seconds, micros);
      cli.set_read_timeout(seconds, micros);
      cli.set_write_timeout(seconds, micros);
      return cli.Post(url_.path, headers, body.dump(), "application/json");
    }();

    if (!res)
      throw Error(errc::backend_error,
                  "http request failed: " + httplib::to_string(res.error()), bundle_id);
    if (res->status != 200) {
      std::string excerpt =
          res->body.size() > 500 ? res->body.substr(0, 500) + "..." : res->body;
      throw Error(errc::backend_error,
                  "http status " + std::to_string(res->status) + ": " + excerpt, bundle_id);
    }

    Json j;
    try {
      j = Json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(errc::backend_error, std::string("unparseable response body: ") + e.what(),
                  bundle_id);
    }

    ChatResult result;
    result.text = extract_text(j);
    result.usage = extract_usage(j, turns, result.text);
    return result;
  }

 private:
  Json build_body(const std::vector<ChatTurn>& turns, const std::string& bundle_id) const {
    Json body = Json::object();
    body["model"] = config_.model_name;
    Json messages = Json::array();
    for (const auto& turn : turns) {
      Json msg = Json::object();
      msg["role"] = role_name(turn.role);
      if (turn.parts.size() == 1 && turn.parts[0].kind == Part::Kind::text) {
        msg["content"] = turn.parts[0].text;
      } else {
        Json content = Json::array();
        for (const auto& part : turn.parts) {
          if (part.kind == Part::Kind::text) {
            content.push_back(Json{{"type", "text"}, {"text", part.text}});
          } else {
            if (part.bytes.size() > config_.max_image_bytes) {
              std::cerr << "warn event=image_dropped bundle=" << bundle_id
                        << " bytes=" << part.bytes.size()
                        << " cap=" << config_.max_image_bytes << "\n";
              continue;
            }
            Json image = Json::object();
            image["url"] =
                "data:" + part.media_type + ";base64," + detail::base64_encode(part.bytes);
            content.push_back(Json{{"type", "image_url"}, {"image_url", image}});
          }
        }
        msg["content"] = std::move(content);
      }
      messages.push_back(std::move(msg));
    }
    body["messages"] = std::move(messages);
    return body;
  }

  static std::string extract_text(const Json& j) {
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
      throw Error(errc::backend_error, "response has no choices");
    const Json& msg = j["choices"][0].contains("message") ? j["choices"][0]["message"]
                                                          : j["choices"][0];
    if (!msg.contains("content")) throw Error(errc::backend_error, "response has no content");
    const Json& content = msg["content"];
    if (content.is_string()) return content.get<std::string>();
    if (content.is_array()) {
      std::string text;
      for (const auto& part : content)
        if (part.is_object() && part.contains("text") && part["text"].is_string())
          text += part["text"].get<std::string>();
      return text;
    }
    throw Error(errc::backend_error, "response content has unexpected shape");
  }

  Usage extract_usage(const Json& j, const std::vector<ChatTurn>& turns,
                      const std::string& reply) const {
    if (j.contains("usage") && j["usage"].is_object()) {
      const Json& u = j["usage"];
      Usage out;
      out.prompt_tokens = u.value("prompt_tokens", std::uint64_t{0});
      out.completion_tokens = u.value("completion_tokens", std::uint64_t{0});
      out.total_tokens = u.value("total_tokens", out.prompt_tokens + out.completion_tokens);
      return out;
    }
    return estimate_usage(turns, reply);
  }

  BackendConfig config_;
  std::string api_key_;
  detail::ParsedUrl url_;
};

}  // namespace mda::chat
