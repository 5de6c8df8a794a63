#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "framecap/error.hpp"
#include "framecap/json_io.hpp"

// Canonical data model shared by every pipeline stage.
//
// Frame identity is (video_id, index). Sequences sampled from a clip sit on
// the 1 FPS grid, so timestamp_s == index for them; subsets built later
// (distinct frames, benchmark selections) keep the original index and
// timestamp of each frame.
namespace framecap {

enum class Split { train, eval };
enum class ContextMode { pair_window, full_sequence, isolated };
enum class Stage { pair, sequence };

inline constexpr EnumNames<Split, 2> kSplitNames{{{Split::train, "train"}, {Split::eval, "eval"}}};
inline constexpr EnumNames<ContextMode, 3> kContextModeNames{{
    {ContextMode::pair_window, "pair_window"},
    {ContextMode::full_sequence, "full_sequence"},
    {ContextMode::isolated, "isolated"},
}};
inline constexpr EnumNames<Stage, 2> kStageNames{{{Stage::pair, "pair"}, {Stage::sequence, "sequence"}}};

struct FrameRef {
  std::string video_id;
  int index = 0;
  int timestamp_s = 0;
  std::string uri;
  std::optional<std::vector<double>> embedding;

  bool operator==(const FrameRef&) const = default;
};

struct FrameSequence {
  std::string id;
  std::string source;  // dataset tag, e.g. "HTC"; empty when untagged
  Split split = Split::train;
  std::string action;
  std::vector<FrameRef> frames;

  std::size_t length() const { return frames.size(); }
  bool operator==(const FrameSequence&) const = default;
};

struct CaptionSequence {
  std::string sequence_id;
  std::string backend;
  ContextMode context_mode = ContextMode::full_sequence;
  std::uint64_t generation_seed = 0;
  std::vector<std::string> captions;

  bool operator==(const CaptionSequence&) const = default;
};

struct CandidateSet {
  FrameSequence sequence;
  std::vector<CaptionSequence> candidates;

  std::size_t k() const { return candidates.size(); }
};

struct SftRecord {
  Stage stage = Stage::pair;
  FrameSequence frames;
  CaptionSequence target;
  bool gates_passed = true;
  std::vector<std::string> provenance;

  bool operator==(const SftRecord&) const = default;
};

struct PreferenceRecord {
  Stage stage = Stage::pair;
  FrameSequence frames;
  CaptionSequence chosen;
  CaptionSequence rejected;
  std::vector<std::string> provenance;

  bool operator==(const PreferenceRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string field;
  std::string rule;

  std::string message() const { return field + ": " + rule; }
  bool operator==(const Violation&) const = default;
};

struct SequenceRules {
  std::size_t min_length = 2;
  std::size_t max_length = 6;
  // Indices must be exactly 0..T-1. Off for subsets that keep original indices.
  bool require_contiguous = true;
};

inline std::string trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<Violation> validate_sequence(const FrameSequence& seq,
                                                const SequenceRules& rules = {}) {
  std::vector<Violation> out;
  const std::size_t t = seq.length();
  if (t > rules.max_length) {
    out.push_back({"frames", "T=" + std::to_string(t) + " exceeds max " +
                                 std::to_string(rules.max_length)});
  }
  if (t < rules.min_length) {
    out.push_back({"frames", "T=" + std::to_string(t) + " below min " +
                                 std::to_string(rules.min_length)});
  }
  if (trim(seq.action).empty()) out.push_back({"action", "empty action label"});

  bool increasing = true;
  bool times_increasing = true;
  for (std::size_t i = 1; i < t; ++i) {
    increasing = increasing && seq.frames[i].index > seq.frames[i - 1].index;
    times_increasing = times_increasing && seq.frames[i].timestamp_s > seq.frames[i - 1].timestamp_s;
  }
  if (!increasing) {
    out.push_back({"frames.index", "indices not strictly increasing"});
  } else if (rules.require_contiguous) {
    for (std::size_t i = 0; i < t; ++i) {
      if (seq.frames[i].index != static_cast<int>(i)) {
        out.push_back({"frames.index", "indices not contiguous from 0"});
        break;
      }
    }
  }
  if (!times_increasing) {
    out.push_back({"frames.timestamp_s", "timestamps not strictly increasing"});
  }

  std::optional<std::size_t> dim;
  for (std::size_t i = 0; i < t; ++i) {
    const auto& f = seq.frames[i];
    const std::string where = "frames[" + std::to_string(i) + "]";
    if (f.uri.empty()) out.push_back({where + ".uri", "empty uri"});
    if (f.video_id.empty()) out.push_back({where + ".video_id", "empty video_id"});
    if (f.embedding) {
      if (!dim) dim = f.embedding->size();
      if (f.embedding->size() != *dim || f.embedding->empty()) {
        out.push_back({where + ".embedding", "embedding dimension mismatch"});
      }
    }
  }
  return out;
}

inline std::vector<Violation> validate_captions(const CaptionSequence& caps,
                                                const FrameSequence& seq) {
  std::vector<Violation> out;
  if (caps.captions.size() != seq.length()) {
    out.push_back({"captions", std::to_string(caps.captions.size()) + " captions for " +
                                   std::to_string(seq.length()) + " frames"});
  }
  for (std::size_t i = 0; i < caps.captions.size(); ++i) {
    const auto& c = caps.captions[i];
    if (c.empty() || trim(c) != c) {
      out.push_back({"captions[" + std::to_string(i) + "]", "caption must be non-empty trimmed text"});
    }
  }
  return out;
}

// Throws ValidationError listing every violation.
inline void require_valid(const std::vector<Violation>& v, std::string_view what) {
  if (v.empty()) return;
  std::string msg(what);
  for (const auto& x : v) msg += "; " + x.message();
  throw ValidationError(msg);
}

// Copy of a sequence reduced to the given positions (not frame indices).
inline FrameSequence subset(const FrameSequence& seq, const std::vector<std::size_t>& positions) {
  FrameSequence out = seq;
  out.frames.clear();
  for (auto p : positions) out.frames.push_back(seq.frames.at(p));
  return out;
}

inline FrameSequence without_embeddings(FrameSequence seq) {
  for (auto& f : seq.frames) f.embedding.reset();
  return seq;
}

// ---------------------------------------------------------------------------
// Record codecs. Key order below is the on-disk order.

inline Json to_record(const FrameRef& f) {
  Json j;
  j["video_id"] = f.video_id;
  j["index"] = f.index;
  j["timestamp_s"] = f.timestamp_s;
  j["uri"] = f.uri;
  if (f.embedding) {
    Json e = Json::array();
    for (double x : *f.embedding) e.push_back(quantize6(x));
    j["embedding"] = std::move(e);
  }
  return j;
}

inline FrameRef from_record(const Json& j, std::type_identity<FrameRef>) {
  FieldReader r(j, "frame");
  FrameRef f;
  f.video_id = r.req<std::string>("video_id");
  f.index = r.req<int>("index");
  f.timestamp_s = r.req<int>("timestamp_s");
  f.uri = r.req<std::string>("uri");
  if (r.has("embedding")) f.embedding = r.req<std::vector<double>>("embedding");
  r.finish();
  return f;
}

namespace detail {

inline Json sequence_body(const FrameSequence& s) {
  Json j;
  j["id"] = s.id;
  j["source"] = s.source;
  j["split"] = kSplitNames.name(s.split);
  j["action"] = s.action;
  Json frames = Json::array();
  for (const auto& f : s.frames) frames.push_back(to_record(f));
  j["frames"] = std::move(frames);
  return j;
}

inline void read_sequence_body(FieldReader& r, FrameSequence& s) {
  s.id = r.req<std::string>("id");
  s.source = r.req<std::string>("source");
  s.split = kSplitNames.parse(r.req<std::string>("split"), "split");
  s.action = r.req<std::string>("action");
  const Json& frames = r.sub("frames");
  if (!frames.is_array()) throw ParseError("frames: expected an array");
  for (const auto& f : frames) s.frames.push_back(from_record(f, std::type_identity<FrameRef>{}));
}

inline Json captions_body(const CaptionSequence& c) {
  Json j;
  j["sequence_id"] = c.sequence_id;
  j["backend"] = c.backend;
  j["context_mode"] = kContextModeNames.name(c.context_mode);
  j["generation_seed"] = c.generation_seed;
  j["captions"] = c.captions;
  return j;
}

inline void read_captions_body(FieldReader& r, CaptionSequence& c) {
  c.sequence_id = r.req<std::string>("sequence_id");
  c.backend = r.req<std::string>("backend");
  c.context_mode = kContextModeNames.parse(r.req<std::string>("context_mode"), "context_mode");
  c.generation_seed = r.req<std::uint64_t>("generation_seed");
  c.captions = r.req<std::vector<std::string>>("captions");
}

inline FrameSequence nested_sequence(const Json& j) {
  FieldReader r(j, "frames");
  FrameSequence s;
  read_sequence_body(r, s);
  r.finish();
  return s;
}

inline CaptionSequence nested_captions(const Json& j, const std::string& what) {
  FieldReader r(j, what);
  CaptionSequence c;
  read_captions_body(r, c);
  r.finish();
  return c;
}

}  // namespace detail

inline Json to_record(const FrameSequence& s) {
  Json j;
  j["version"] = kSchemaVersion;
  j.update(detail::sequence_body(s));
  return j;
}

inline FrameSequence from_record(const Json& j, std::type_identity<FrameSequence>) {
  FieldReader r(j, "frame_sequence");
  r.expect_version();
  FrameSequence s;
  detail::read_sequence_body(r, s);
  r.finish();
  return s;
}

inline Json to_record(const CaptionSequence& c) {
  Json j;
  j["version"] = kSchemaVersion;
  j.update(detail::captions_body(c));
  return j;
}

inline CaptionSequence from_record(const Json& j, std::type_identity<CaptionSequence>) {
  FieldReader r(j, "caption_sequence");
  r.expect_version();
  CaptionSequence c;
  detail::read_captions_body(r, c);
  r.finish();
  return c;
}

inline Json to_record(const SftRecord& s) {
  Json j;
  j["version"] = kSchemaVersion;
  j["stage"] = kStageNames.name(s.stage);
  j["frames"] = detail::sequence_body(s.frames);
  j["target"] = detail::captions_body(s.target);
  j["gates_passed"] = s.gates_passed;
  j["provenance"] = s.provenance;
  return j;
}

inline SftRecord from_record(const Json& j, std::type_identity<SftRecord>) {
  FieldReader r(j, "sft_record");
  r.expect_version();
  SftRecord s;
  s.stage = kStageNames.parse(r.req<std::string>("stage"), "stage");
  s.frames = detail::nested_sequence(r.sub("frames"));
  s.target = detail::nested_captions(r.sub("target"), "target");
  s.gates_passed = r.req<bool>("gates_passed");
  s.provenance = r.req<std::vector<std::string>>("provenance");
  r.finish();
  return s;
}

inline Json to_record(const PreferenceRecord& p) {
  Json j;
  j["version"] = kSchemaVersion;
  j["stage"] = kStageNames.name(p.stage);
  j["frames"] = detail::sequence_body(p.frames);
  j["chosen"] = detail::captions_body(p.chosen);
  j["rejected"] = detail::captions_body(p.rejected);
  j["provenance"] = p.provenance;
  return j;
}

inline PreferenceRecord from_record(const Json& j, std::type_identity<PreferenceRecord>) {
  FieldReader r(j, "preference_record");
  r.expect_version();
  PreferenceRecord p;
  p.stage = kStageNames.parse(r.req<std::string>("stage"), "stage");
  p.frames = detail::nested_sequence(r.sub("frames"));
  p.chosen = detail::nested_captions(r.sub("chosen"), "chosen");
  p.rejected = detail::nested_captions(r.sub("rejected"), "rejected");
  p.provenance = r.req<std::vector<std::string>>("provenance");
  r.finish();
  return p;
}

// Writes `records` to `path` and reads them back.
template <typename T>
std::vector<T> roundtrip_records(const std::string& path, const std::vector<T>& records) {
  write_jsonl(path, records);
  return read_jsonl<T>(path);
}

}  // namespace framecap
