#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <semaphore>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>

#include "framecap/core.hpp"
#include "framecap/digest.hpp"
#include "framecap/error.hpp"
#include "framecap/json_io.hpp"

namespace framecap {

enum class Role { captioner, text_judge, vision_judge };

inline constexpr EnumNames<Role, 3> kRoleNames{{
    {Role::captioner, "captioner"},
    {Role::text_judge, "text_judge"},
    {Role::vision_judge, "vision_judge"},
}};

struct DecodeParams {
  double temperature = 0.0;
  int max_tokens = 1024;
  std::uint64_t seed = 0;

  bool operator==(const DecodeParams&) const = default;
};

struct ModelRequest {
  std::string backend_id;
  Role role = Role::text_judge;
  std::string prompt;
  std::vector<FrameRef> images;
  DecodeParams decode;

  bool operator==(const ModelRequest&) const = default;
};

struct ModelReply {
  std::string text;
  std::string backend_id;
  std::int64_t latency_ms = 0;
  bool cached = false;
};

inline void validate_request(const ModelRequest& r) {
  if (r.prompt.empty()) throw ValidationError("model request: empty prompt");
  if (r.decode.temperature < 0) throw ValidationError("model request: negative temperature");
  if (r.decode.max_tokens <= 0) throw ValidationError("model request: max_tokens must be > 0");
  const bool text_only = r.role == Role::text_judge;
  if (text_only != r.images.empty()) {
    throw ValidationError(text_only ? "model request: text judge given images"
                                    : "model request: images required for role " +
                                          std::string(kRoleNames.name(r.role)));
  }
}

// ---------------------------------------------------------------------------
// Clock

class Clock {
 public:
  using time_point = std::chrono::steady_clock::time_point;
  using duration = std::chrono::steady_clock::duration;

  virtual ~Clock() = default;
  virtual time_point now() = 0;
  virtual void sleep_for(duration d) = 0;
};

class SystemClock final : public Clock {
 public:
  time_point now() override { return std::chrono::steady_clock::now(); }
  void sleep_for(duration d) override { std::this_thread::sleep_for(d); }
};

// Test clock: sleeping advances time instantly.
class ManualClock final : public Clock {
 public:
  time_point now() override {
    std::lock_guard lock(mu_);
    return now_;
  }
  void sleep_for(duration d) override {
    std::lock_guard lock(mu_);
    now_ += d;
    slept_ += d;
  }
  duration total_slept() const {
    std::lock_guard lock(mu_);
    return slept_;
  }

 private:
  mutable std::mutex mu_;
  time_point now_{};
  duration slept_{};
};

// ---------------------------------------------------------------------------
// Image content

// Resolves frame locators to bytes and content hashes. Relative paths are
// taken against `media_root`. Remote URLs are not fetched: their hash is the
// hash of the URL itself and backends forward the URL as-is.
class ImageStore {
 public:
  explicit ImageStore(std::filesystem::path media_root = {}) : root_(std::move(media_root)) {}

  static bool is_remote(const std::string& uri) {
    return uri.starts_with("http://") || uri.starts_with("https://") ||
           uri.starts_with("data:");
  }

  std::filesystem::path resolve(const FrameRef& f) const {
    std::filesystem::path p(f.uri);
    if (p.is_relative() && !root_.empty()) p = root_ / p;
    return p;
  }

  std::string bytes(const FrameRef& f) const {
    auto b = read_file_bytes(resolve(f).string());
    if (!b) throw GatewayError(fmt::format("unreadable image for frame {}#{} ('{}')",
                                           f.video_id, f.index, f.uri));
    return *b;
  }

  std::string content_hash(const FrameRef& f) const {
    if (is_remote(f.uri)) return sha256_hex("url:" + f.uri);
    const std::string key = resolve(f).string();
    {
      std::shared_lock lock(mu_);
      auto it = memo_.find(key);
      if (it != memo_.end()) return it->second;
    }
    std::string h = sha256_hex(bytes(f));
    std::unique_lock lock(mu_);
    memo_.emplace(key, h);
    return h;
  }

 private:
  std::filesystem::path root_;
  mutable std::shared_mutex mu_;
  mutable std::unordered_map<std::string, std::string> memo_;
};

// Stable 64-hex-digit digest over every field that can change a reply.
inline std::string cache_key(const ModelRequest& r, const ImageStore& images) {
  Sha256 h;
  h.field("framecap-request-v1");
  h.field(r.backend_id);
  h.field(kRoleNames.name(r.role));
  h.field(r.prompt);
  h.field(std::to_string(r.images.size()));
  for (const auto& img : r.images) h.field(images.content_hash(img));
  h.field(fmt::format("{:.6f}", r.decode.temperature));
  h.field(std::to_string(r.decode.max_tokens));
  h.field(std::to_string(r.decode.seed));
  return h.finish_hex();
}

// ---------------------------------------------------------------------------
// Backends

struct CallContext {
  std::string digest;
  const ImageStore* images = nullptr;
  int attempt = 1;
};

class Backend {
 public:
  virtual ~Backend() = default;
  // Returns the reply text. Throws TransportError for retryable failures,
  // AuthError or GatewayError for permanent ones.
  virtual std::string call(const ModelRequest& request, const CallContext& ctx) = 0;
};

enum class MockDefault { error, echo };

// Deterministic scripted replies. Rules are tried in insertion order; the
// first one that yields a reply wins.
class MockScript {
 public:
  using Responder = std::function<std::optional<std::string>(const ModelRequest&)>;

  MockScript& on_digest(std::string digest, std::string reply) {
    rules_.push_back({std::move(digest), nullptr, std::move(reply)});
    return *this;
  }

  MockScript& on(Responder responder) {
    rules_.push_back({{}, std::move(responder), {}});
    return *this;
  }

  MockScript& on_contains(std::string needle, std::string reply) {
    return on([needle = std::move(needle), reply = std::move(reply)](const ModelRequest& r)
                  -> std::optional<std::string> {
      if (r.prompt.find(needle) != std::string::npos) return reply;
      return std::nullopt;
    });
  }

  MockScript& on_regex(const std::string& pattern, std::string reply) {
    return on([re = std::regex(pattern), reply = std::move(reply)](const ModelRequest& r)
                  -> std::optional<std::string> {
      if (std::regex_search(r.prompt, re)) return reply;
      return std::nullopt;
    });
  }

  MockScript& otherwise(MockDefault policy) {
    default_ = policy;
    return *this;
  }

  std::optional<std::string> match(const ModelRequest& r, const std::string& digest) const {
    for (const auto& rule : rules_) {
      if (!rule.digest.empty()) {
        if (rule.digest == digest) return rule.reply;
      } else if (auto reply = rule.responder(r)) {
        return reply;
      }
    }
    return std::nullopt;
  }

  MockDefault default_policy() const { return default_; }

  // JSONL, one rule per line:
  //   {"digest": "<64 hex>", "reply": "..."}
  //   {"contains": "<substring of prompt>", "reply": "..."}
  //   {"regex": "<ECMAScript regex over prompt>", "reply": "..."}
  static MockScript load(const std::string& path, MockDefault policy) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open mock script '" + path + "'");
    MockScript s;
    s.otherwise(policy);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      try {
        Json j = Json::parse(line);
        FieldReader r(j, "mock rule");
        auto reply = r.req<std::string>("reply");
        if (r.has("digest")) {
          s.on_digest(r.req<std::string>("digest"), reply);
        } else if (r.has("contains")) {
          s.on_contains(r.req<std::string>("contains"), reply);
        } else if (r.has("regex")) {
          s.on_regex(r.req<std::string>("regex"), reply);
        } else {
          throw ParseError("mock rule needs digest, contains or regex");
        }
        r.finish();
      } catch (const std::exception& e) {
        throw ParseError(fmt::format("{}: line {}: {}", path, lineno, e.what()));
      }
    }
    return s;
  }

 private:
  struct Rule {
    std::string digest;
    Responder responder;
    std::string reply;
  };
  std::vector<Rule> rules_;
  MockDefault default_ = MockDefault::error;
};

struct MockCall {
  std::string backend_id;
  std::string digest;
  int attempt = 1;
  Clock::time_point at{};
};

class MockBackend final : public Backend {
 public:
  MockBackend(std::string id, MockScript script, Clock* clock = nullptr)
      : id_(std::move(id)), script_(std::move(script)), clock_(clock) {}

  std::string call(const ModelRequest& request, const CallContext& ctx) override {
    {
      std::lock_guard lock(mu_);
      log_.push_back({id_, ctx.digest, ctx.attempt, clock_ ? clock_->now() : Clock::time_point{}});
    }
    if (auto reply = script_.match(request, ctx.digest)) return *reply;
    if (script_.default_policy() == MockDefault::echo) return request.prompt;
    throw TransportError("mock '" + id_ + "': no scripted reply for " + ctx.digest);
  }

  std::vector<MockCall> calls() const {
    std::lock_guard lock(mu_);
    return log_;
  }

 private:
  std::string id_;
  MockScript script_;
  Clock* clock_;
  mutable std::mutex mu_;
  std::vector<MockCall> log_;
};

// ---------------------------------------------------------------------------
// Registry configuration

enum class BackendKind { mock, http };

struct BackendConfig {
  std::string id;
  BackendKind kind = BackendKind::mock;
  std::string endpoint;     // http: full chat-completions URL
  std::string model;        // http: model name sent on the wire
  std::string api_key_env;  // http: environment variable holding the key
  std::set<Role> roles{Role::captioner, Role::text_judge, Role::vision_judge};
  int max_concurrency = 4;
  int requests_per_minute = 0;  // 0 = unlimited
  int max_attempts = 3;
  int backoff_ms = 500;
  int timeout_s = 120;
  std::optional<double> temperature;  // captioner decode temperature
  std::string mock_script;            // mock: JSONL rules file
  MockDefault mock_default = MockDefault::error;
};

// ---------------------------------------------------------------------------
// Disk cache: <dir>/<d[0:2]>/<digest>.txt holds the raw reply text.

class DiskCache {
 public:
  explicit DiskCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::optional<std::string> get(const std::string& digest) const {
    return read_file_bytes(path_for(digest).string());
  }

  void put(const std::string& digest, const std::string& text) const {
    auto final_path = path_for(digest);
    std::filesystem::create_directories(final_path.parent_path());
    static std::atomic<std::uint64_t> counter{0};
    auto tmp = final_path;
    tmp += fmt::format(".tmp{}.{}", std::hash<std::thread::id>{}(std::this_thread::get_id()),
                       counter++);
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << text;
      if (!out) throw Error("cache write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, final_path);
  }

 private:
  std::filesystem::path path_for(const std::string& digest) const {
    return dir_ / digest.substr(0, 2) / (digest + ".txt");
  }
  std::filesystem::path dir_;
};

// Sliding one-minute window limiter.
class RateLimiter {
 public:
  RateLimiter(int per_minute, Clock& clock) : per_minute_(per_minute), clock_(clock) {}

  void acquire() {
    if (per_minute_ <= 0) return;
    const auto window = std::chrono::minutes(1);
    std::unique_lock lock(mu_);
    for (;;) {
      auto now = clock_.now();
      while (!issued_.empty() && issued_.front() + window <= now) issued_.pop_front();
      if (static_cast<int>(issued_.size()) < per_minute_) {
        issued_.push_back(now);
        return;
      }
      auto wait = issued_.front() + window - now;
      lock.unlock();
      clock_.sleep_for(wait);
      lock.lock();
    }
  }

 private:
  int per_minute_;
  Clock& clock_;
  std::mutex mu_;
  std::deque<Clock::time_point> issued_;
};

struct GatewayOptions {
  std::optional<std::filesystem::path> cache_dir;  // caching off when unset
  std::filesystem::path media_root;
};

// Uniform, thread-safe access to every registered model backend.
class Gateway {
 public:
  explicit Gateway(GatewayOptions options = {}, Clock* clock = nullptr)
      : images_(options.media_root), clock_(clock ? clock : &system_clock_) {
    if (options.cache_dir) cache_.emplace(*options.cache_dir);
  }

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  void add_backend(BackendConfig config, std::unique_ptr<Backend> backend) {
    if (config.id.empty()) throw ValidationError("backend id must be non-empty");
    if (config.max_attempts < 1) throw ValidationError("backend '" + config.id + "': max_attempts < 1");
    if (config.max_concurrency < 1) throw ValidationError("backend '" + config.id + "': max_concurrency < 1");
    auto entry = std::make_unique<Entry>(std::move(config), std::move(backend), *clock_);
    std::string id = entry->config.id;
    if (!entries_.emplace(id, std::move(entry)).second) {
      throw ValidationError("duplicate backend '" + id + "'");
    }
  }

  // Registers a mock and returns a handle for inspecting its call log.
  MockBackend& add_mock(BackendConfig config, MockScript script) {
    auto mock = std::make_unique<MockBackend>(config.id, std::move(script), clock_);
    MockBackend& ref = *mock;
    add_backend(std::move(config), std::move(mock));
    return ref;
  }

  MockBackend& add_mock(const std::string& id, MockScript script) {
    BackendConfig c;
    c.id = id;
    return add_mock(std::move(c), std::move(script));
  }

  bool has_backend(const std::string& id) const { return entries_.count(id) > 0; }

  const BackendConfig& backend_config(const std::string& id) const { return entry(id).config; }

  std::string cache_key(const ModelRequest& r) const { return framecap::cache_key(r, images_); }

  const ImageStore& images() const { return images_; }

  // Default decode parameters for a role on a backend: judges decode at
  // temperature 0, captioners at the backend's configured temperature.
  DecodeParams decode_for(const std::string& backend_id, Role role, std::uint64_t seed) const {
    DecodeParams d;
    d.seed = seed;
    if (role == Role::captioner) d.temperature = entry(backend_id).config.temperature.value_or(0.0);
    return d;
  }

  ModelReply complete(const ModelRequest& request) {
    Entry& e = entry(request.backend_id);
    validate_request(request);
    if (!e.config.roles.count(request.role)) {
      throw ValidationError(fmt::format("backend '{}' lacks role {}", request.backend_id,
                                        kRoleNames.name(request.role)));
    }
    const std::string digest = cache_key(request);
    const auto started = clock_->now();
    if (cache_) {
      if (auto hit = cache_->get(digest)) {
        ++cache_hits_;
        return {*hit, request.backend_id, 0, true};
      }
    }

    std::string last_error;
    for (int attempt = 1; attempt <= e.config.max_attempts; ++attempt) {
      if (attempt > 1) {
        clock_->sleep_for(std::chrono::milliseconds(
            static_cast<std::int64_t>(e.config.backoff_ms) << (attempt - 2)));
      }
      e.limiter.acquire();
      try {
        e.slots.acquire();
        struct Release {
          std::counting_semaphore<1024>& s;
          ~Release() { s.release(); }
        } release{e.slots};
        ++calls_;
        std::string text = e.backend->call(request, {digest, &images_, attempt});
        if (cache_) cache_->put(digest, text);
        auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(clock_->now() - started);
        return {std::move(text), request.backend_id, latency.count(), false};
      } catch (const TransportError& err) {
        last_error = err.what();
      }
    }
    throw RetriesExhaustedError(request.backend_id, e.config.max_attempts, last_error);
  }

  // Backend invocations (attempts), excluding cache hits.
  std::uint64_t call_count() const { return calls_; }
  std::uint64_t cache_hits() const { return cache_hits_; }

 private:
  struct Entry {
    Entry(BackendConfig c, std::unique_ptr<Backend> b, Clock& clock)
        : config(std::move(c)),
          backend(std::move(b)),
          slots(config.max_concurrency),
          limiter(config.requests_per_minute, clock) {}
    BackendConfig config;
    std::unique_ptr<Backend> backend;
    std::counting_semaphore<1024> slots;
    RateLimiter limiter;
  };

  Entry& entry(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw UnknownBackendError(id);
    return *it->second;
  }

  ImageStore images_;
  SystemClock system_clock_;
  Clock* clock_;
  std::optional<DiskCache> cache_;
  std::map<std::string, std::unique_ptr<Entry>> entries_;
  std::atomic<std::uint64_t> calls_{0};
  std::atomic<std::uint64_t> cache_hits_{0};
};

// Convenience for single-turn calls used across the pipeline.
inline std::string ask(Gateway& gw, const std::string& backend, Role role, std::string prompt,
                       std::vector<FrameRef> images, std::uint64_t seed) {
  ModelRequest req;
  req.backend_id = backend;
  req.role = role;
  req.prompt = std::move(prompt);
  req.images = std::move(images);
  req.decode = gw.decode_for(backend, role, seed);
  return gw.complete(req).text;
}

}  // namespace framecap
