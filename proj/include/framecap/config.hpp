#pragma once

#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "framecap/curate.hpp"
#include "framecap/gateway.hpp"
#include "framecap/http_backend.hpp"

// Run configuration, read from an INI file:
//
//   [gateway]
//   cache_dir = cache            ; optional, relative to the config file
//   media_root = frames          ; base for relative frame uris
//
//   [backend:<id>]
//   kind = mock | http
//   roles = captioner, text_judge, vision_judge
//   endpoint = https://host/v1/chat/completions   ; http
//   model = <wire model name>                      ; http
//   api_key_env = OPENAI_API_KEY                   ; http
//   mock_script = mocks/<id>.jsonl                 ; mock
//   mock_default = error | echo                    ; mock
//   max_concurrency, requests_per_minute, max_attempts, backoff_ms,
//   timeout_s, temperature
//
//   [run]
//   seed = 0
//   workers = 4
//
//   [curate]
//   captioners, progression_judges, matching_judge, primary_captioner,
//   dpo_cap, aggregation = pooled | per_judge_first, shuffle
//
//   [judges]
//   text = <id>      ; default progression judge for progress/bench/apps
//   vision = <id>    ; default matching judge for match/bench
namespace framecap {

struct RunConfig {
  std::filesystem::path source;  // config file path
  std::vector<BackendConfig> backends;
  std::optional<std::filesystem::path> cache_dir;
  std::filesystem::path media_root;
  std::uint64_t seed = 0;
  std::size_t workers = 4;
  CurationConfig curate;
  std::string text_judge;
  std::string vision_judge;

  const BackendConfig* find(const std::string& id) const {
    for (const auto& b : backends) {
      if (b.id == id) return &b;
    }
    return nullptr;
  }
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

namespace detail {

template <typename T>
T ini_get(const boost::property_tree::ptree& section, const std::string& key, T fallback,
          const std::string& where) {
  auto v = section.get_optional<std::string>(key);
  if (!v) return fallback;
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      return trim(*v);
    } else if constexpr (std::is_same_v<T, bool>) {
      const auto t = trim(*v);
      if (t == "true" || t == "1" || t == "yes") return true;
      if (t == "false" || t == "0" || t == "no") return false;
      throw std::invalid_argument(t);
    } else {
      std::size_t used = 0;
      const auto t = trim(*v);
      T out{};
      if constexpr (std::is_floating_point_v<T>) {
        out = static_cast<T>(std::stod(t, &used));
      } else if constexpr (std::is_unsigned_v<T>) {
        if (t.starts_with("-")) throw std::invalid_argument(t);
        out = static_cast<T>(std::stoull(t, &used));
      } else {
        out = static_cast<T>(std::stoll(t, &used));
      }
      if (used != t.size()) throw std::invalid_argument(t);
      return out;
    }
  } catch (const std::exception&) {
    throw ValidationError(fmt::format("{}: bad value '{}' for {}", where, *v, key));
  }
}

inline void reject_unknown(const boost::property_tree::ptree& section, std::initializer_list<const char*> known,
                           const std::string& where) {
  for (const auto& [key, value] : section) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ValidationError(fmt::format("{}: unknown key '{}'", where, key));
  }
}

}  // namespace detail

inline RunConfig load_config(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  cfg.source = path;
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) { return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p; };

  try {
    for (const auto& [name, section] : tree) {
      const std::string where = fmt::format("{} [{}]", path.string(), name);
      if (name.starts_with("backend:")) {
        detail::reject_unknown(section,
                               {"kind", "roles", "endpoint", "model", "api_key_env", "mock_script", "mock_default",
                                "max_concurrency", "requests_per_minute", "max_attempts", "backoff_ms", "timeout_s",
                                "temperature"},
                               where);
        BackendConfig b;
        b.id = trim(name.substr(8));
        if (b.id.empty()) throw ValidationError(where + ": empty backend id");
        const auto kind = detail::ini_get<std::string>(section, "kind", "mock", where);
        if (kind == "mock") b.kind = BackendKind::mock;
        else if (kind == "http") b.kind = BackendKind::http;
        else throw ValidationError(where + ": kind must be mock or http");
        if (auto roles = section.get_optional<std::string>("roles")) {
          b.roles.clear();
          for (const auto& r : split_list(*roles)) b.roles.insert(kRoleNames.parse(r, "roles"));
        }
        b.endpoint = detail::ini_get<std::string>(section, "endpoint", "", where);
        b.model = detail::ini_get<std::string>(section, "model", "", where);
        b.api_key_env = detail::ini_get<std::string>(section, "api_key_env", "", where);
        if (auto s = section.get_optional<std::string>("mock_script")) b.mock_script = resolve(trim(*s)).string();
        const auto def = detail::ini_get<std::string>(section, "mock_default", "error", where);
        if (def == "error") b.mock_default = MockDefault::error;
        else if (def == "echo") b.mock_default = MockDefault::echo;
        else throw ValidationError(where + ": mock_default must be error or echo");
        b.max_concurrency = detail::ini_get<int>(section, "max_concurrency", b.max_concurrency, where);
        b.requests_per_minute = detail::ini_get<int>(section, "requests_per_minute", b.requests_per_minute, where);
        b.max_attempts = detail::ini_get<int>(section, "max_attempts", b.max_attempts, where);
        b.backoff_ms = detail::ini_get<int>(section, "backoff_ms", b.backoff_ms, where);
        b.timeout_s = detail::ini_get<int>(section, "timeout_s", b.timeout_s, where);
        if (section.get_optional<std::string>("temperature")) {
          b.temperature = detail::ini_get<double>(section, "temperature", 0.0, where);
          if (*b.temperature < 0) throw ValidationError(where + ": temperature must be >= 0");
        }
        if (b.kind == BackendKind::http && b.endpoint.empty()) throw ValidationError(where + ": http backend needs endpoint");
        if (cfg.find(b.id)) throw ValidationError(where + ": duplicate backend");
        cfg.backends.push_back(std::move(b));
      } else if (name == "gateway") {
        detail::reject_unknown(section, {"cache_dir", "media_root"}, where);
        if (auto s = section.get_optional<std::string>("cache_dir")) cfg.cache_dir = resolve(trim(*s));
        cfg.media_root = resolve(detail::ini_get<std::string>(section, "media_root", ".", where));
      } else if (name == "run") {
        detail::reject_unknown(section, {"seed", "workers"}, where);
        cfg.seed = detail::ini_get<std::uint64_t>(section, "seed", 0, where);
        cfg.workers = detail::ini_get<std::size_t>(section, "workers", 4, where);
      } else if (name == "curate") {
        detail::reject_unknown(section,
                               {"captioners", "progression_judges", "matching_judge", "primary_captioner", "dpo_cap",
                                "aggregation", "shuffle"},
                               where);
        auto& c = cfg.curate;
        c.captioners = split_list(detail::ini_get<std::string>(section, "captioners", "", where));
        c.progression_judges = split_list(detail::ini_get<std::string>(section, "progression_judges", "", where));
        c.matching_judge = detail::ini_get<std::string>(section, "matching_judge", "", where);
        c.primary_captioner = detail::ini_get<std::string>(section, "primary_captioner", "", where);
        c.dpo_cap = detail::ini_get<std::size_t>(section, "dpo_cap", 3, where);
        c.aggregation = kAggregationNames.parse(detail::ini_get<std::string>(section, "aggregation", "pooled", where),
                                                "aggregation");
        c.shuffle = detail::ini_get<bool>(section, "shuffle", true, where);
      } else if (name == "judges") {
        detail::reject_unknown(section, {"text", "vision"}, where);
        cfg.text_judge = detail::ini_get<std::string>(section, "text", "", where);
        cfg.vision_judge = detail::ini_get<std::string>(section, "vision", "", where);
      } else {
        throw ValidationError(fmt::format("{}: unknown section [{}]", path.string(), name));
      }
    }
  } catch (const ParseError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
  if (cfg.media_root.empty()) cfg.media_root = base.empty() ? std::filesystem::path(".") : base;
  cfg.curate.seed = cfg.seed;
  cfg.curate.workers = cfg.workers;
  if (cfg.text_judge.empty() && !cfg.curate.progression_judges.empty()) cfg.text_judge = cfg.curate.progression_judges.front();
  if (cfg.vision_judge.empty()) cfg.vision_judge = cfg.curate.matching_judge;
  return cfg;
}

// Explicit path, else $FRAMECAP_CONFIG.
inline std::filesystem::path resolve_config_path(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FRAMECAP_CONFIG"); env && *env) return env;
  throw ValidationError("no config file: pass --config or set FRAMECAP_CONFIG");
}

inline std::unique_ptr<Gateway> build_gateway(const RunConfig& cfg, Clock* clock = nullptr) {
  auto gw = std::make_unique<Gateway>(GatewayOptions{cfg.cache_dir, cfg.media_root}, clock);
  for (const auto& b : cfg.backends) {
    if (b.kind == BackendKind::mock) {
      MockScript script = b.mock_script.empty() ? MockScript{}.otherwise(b.mock_default)
                                                : MockScript::load(b.mock_script, b.mock_default);
      gw->add_mock(b, std::move(script));
    } else {
      gw->add_backend(b, std::make_unique<HttpBackend>(b));
    }
  }
  return gw;
}

}  // namespace framecap
