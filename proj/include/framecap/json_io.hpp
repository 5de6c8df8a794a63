#pragma once

#include <cmath>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "framecap/error.hpp"

namespace framecap {

// Insertion-ordered JSON: keys are emitted in the order the encoder adds
// them, which is what makes record files byte-stable.
using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

// Reals are written rounded to 6 decimal places.
inline double quantize6(double x) { return std::round(x * 1e6) / 1e6; }

// Reads fields out of a JSON object and rejects keys nobody asked for.
class FieldReader {
 public:
  FieldReader(const Json& obj, std::string what) : obj_(obj), what_(std::move(what)) {
    if (!obj_.is_object()) throw ParseError(what_ + ": expected an object");
  }

  template <typename T>
  T req(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) throw ParseError(what_ + ": missing field '" + key + "'");
    try {
      return it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(what_ + ": field '" + key + "': " + e.what());
    }
  }

  template <typename T>
  T opt(const std::string& key, T fallback) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return fallback;
    try {
      return it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(what_ + ": field '" + key + "': " + e.what());
    }
  }

  const Json& sub(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) throw ParseError(what_ + ": missing field '" + key + "'");
    return *it;
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  void expect_version() {
    int v = req<int>("version");
    if (v != kSchemaVersion) {
      throw ParseError(what_ + ": unsupported version " + std::to_string(v));
    }
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ParseError(what_ + ": unknown field '" + it.key() + "'");
      }
    }
  }

 private:
  const Json& obj_;
  std::string what_;
  std::set<std::string> seen_;
};

// Two-way mapping between an enum and its wire names.
template <typename E, std::size_t N>
struct EnumNames {
  std::pair<E, std::string_view> table[N];

  std::string_view name(E e) const {
    for (const auto& [v, s] : table) {
      if (v == e) return s;
    }
    throw Error("enum value without a name");
  }

  E parse(std::string_view s, std::string_view what) const {
    for (const auto& [v, n] : table) {
      if (n == s) return v;
    }
    throw ParseError(std::string(what) + ": invalid value '" + std::string(s) + "'");
  }
};

// Record codec customization point: a type T is storable in JSONL when
// `Json to_record(const T&)` and `T from_record(const Json&, std::type_identity<T>)`
// are findable by ADL.
template <typename T>
void write_jsonl(const std::string& path, const std::vector<T>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  for (const auto& r : records) {
    out << to_record(r).dump() << '\n';
  }
  if (!out) throw Error("write failed: '" + path + "'");
}

template <typename T>
std::vector<T> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = "line " + std::to_string(lineno);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": parse failure (" + e.what() + ")");
    }
    try {
      out.push_back(from_record(j, std::type_identity<T>{}));
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace framecap
