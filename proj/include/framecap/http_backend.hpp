#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <utility>

#include <httplib.h>

#include "framecap/gateway.hpp"

namespace framecap {

// Chat-completion style HTTP adapter.
//
// Request (POST <endpoint>, "Authorization: Bearer $<api_key_env>"):
//   {"model": ..., "messages": [{"role": "user", "content": CONTENT}],
//    "temperature": t, "max_tokens": n, "seed": s}
// CONTENT is the prompt string for text-only requests, otherwise an array
//   [{"type": "text", "text": prompt},
//    {"type": "image_url", "image_url": {"url": "data:<mime>;base64,..."}}, ...]
// with images in request order (remote URLs are passed through unchanged).
// Reply text is choices[0].message.content.
//
// 401/403 map to AuthError; 408, 429, 5xx and connection failures are
// retryable TransportErrors; other statuses are permanent GatewayErrors.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(BackendConfig config) : config_(std::move(config)) {
    auto scheme_end = config_.endpoint.find("://");
    if (scheme_end == std::string::npos) {
      throw ValidationError("backend '" + config_.id + "': endpoint must be an absolute URL");
    }
    auto path_start = config_.endpoint.find('/', scheme_end + 3);
    base_ = config_.endpoint.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);
  }

  static Json build_body(const BackendConfig& config, const ModelRequest& request,
                         const ImageStore& images) {
    Json message;
    message["role"] = "user";
    if (request.images.empty()) {
      message["content"] = request.prompt;
    } else {
      Json content = Json::array();
      content.push_back({{"type", "text"}, {"text", request.prompt}});
      for (const auto& img : request.images) {
        std::string url = ImageStore::is_remote(img.uri)
                              ? img.uri
                              : "data:" + mime_for(img.uri) + ";base64," +
                                    base64_encode(images.bytes(img));
        content.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
      }
      message["content"] = std::move(content);
    }
    Json body;
    body["model"] = config.model.empty() ? config.id : config.model;
    body["messages"] = Json::array({message});
    body["temperature"] = request.decode.temperature;
    body["max_tokens"] = request.decode.max_tokens;
    body["seed"] = request.decode.seed;
    return body;
  }

  static std::string parse_reply(const std::string& body) {
    try {
      auto j = Json::parse(body);
      const auto& content = j.at("choices").at(0).at("message").at("content");
      if (content.is_null()) return {};
      return content.get<std::string>();
    } catch (const std::exception& e) {
      throw GatewayError(std::string("malformed chat-completion reply: ") + e.what());
    }
  }

  std::string call(const ModelRequest& request, const CallContext& ctx) override {
    httplib::Client client(base_);
    client.set_connection_timeout(config_.timeout_s, 0);
    client.set_read_timeout(config_.timeout_s, 0);
    httplib::Headers headers;
    if (!config_.api_key_env.empty()) {
      const char* key = std::getenv(config_.api_key_env.c_str());
      if (!key || !*key) {
        throw AuthError("backend '" + config_.id + "': environment variable " +
                        config_.api_key_env + " is not set");
      }
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto body = build_body(config_, request, *ctx.images).dump();
    auto res = client.Post(path_, headers, body, "application/json");
    if (!res) {
      throw TransportError("backend '" + config_.id + "': " + httplib::to_string(res.error()));
    }
    const int status = res->status;
    if (status == 401 || status == 403) {
      throw AuthError("backend '" + config_.id + "': HTTP " + std::to_string(status));
    }
    if (status == 408 || status == 429 || status >= 500) {
      throw TransportError("backend '" + config_.id + "': HTTP " + std::to_string(status));
    }
    if (status != 200) {
      throw GatewayError("backend '" + config_.id + "': HTTP " + std::to_string(status) + ": " +
                         res->body.substr(0, 200));
    }
    return parse_reply(res->body);
  }

 private:
  static std::string mime_for(const std::string& uri) {
    auto ext = std::filesystem::path(uri).extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".png") return "image/png";
    if (ext == ".webp") return "image/webp";
    if (ext == ".gif") return "image/gif";
    return "image/jpeg";
  }

  BackendConfig config_;
  std::string base_;
  std::string path_;
};

}  // namespace framecap
