#pragma once

#include <algorithm>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "framecap/core.hpp"
#include "framecap/curate.hpp"
#include "framecap/gateway.hpp"
#include "framecap/progression.hpp"
#include "framecap/protocol.hpp"
#include "framecap/rng.hpp"

namespace framecap {

// ---------------------------------------------------------------------------
// Dynamic keyframe selection

struct KeyframeStep {
  std::size_t t = 0;  // window (v_{t-1}, v_t)
  ChangeLabel label = ChangeLabel::unsure;
  std::array<std::string, 2> captions;
  std::string reply;
  bool selected = false;
};

struct KeyframeResult {
  std::string sequence_id;
  std::vector<std::size_t> selected;  // positions, ascending, always starts at 0
  std::vector<KeyframeStep> log;
};

// v_t is kept iff the eval judge reads progression between the two captions
// of window (v_{t-1}, v_t). The window advances by one frame whether or not
// v_t was kept; abstains skip.
inline KeyframeResult select_keyframes_from_windows(Gateway& gw, const FrameSequence& seq,
                                                    const std::vector<std::array<std::string, 2>>& windows,
                                                    const std::string& judge, std::uint64_t seed) {
  if (windows.size() + 1 != seq.length()) throw ValidationError("one caption window per adjacent pair expected");
  KeyframeResult r;
  r.sequence_id = seq.id;
  r.selected.push_back(0);
  for (std::size_t t = 1; t < seq.length(); ++t) {
    PairJudgment j;
    j.judge_id = judge;
    j.caption1 = windows[t - 1][0];
    j.caption2 = windows[t - 1][1];
    j.mode = ProgressionMode::eval;
    j.action = seq.action;
    j.pair = PairRef::of(seq.frames[t - 1], seq.frames[t]);
    j.seed = derive_seed(seed, fmt::format("keyframes/{}/{}", seq.id, t));
    auto v = judge_pair_change(gw, j);
    KeyframeStep step{t, v.label, windows[t - 1], v.reply, v.label == ChangeLabel::change};
    if (step.selected) r.selected.push_back(t);
    r.log.push_back(std::move(step));
  }
  return r;
}

inline KeyframeResult select_keyframes(Gateway& gw, const FrameSequence& seq, const std::string& captioner,
                                       const std::string& judge, std::uint64_t seed) {
  if (seq.length() < 2) throw ValidationError("keyframe selection needs T >= 2");
  auto windows = caption_pair_windows(gw, captioner, seq, derive_seed(seed, "keyframes/caption/" + seq.id));
  return select_keyframes_from_windows(gw, seq, windows, judge, seed);
}

// ---------------------------------------------------------------------------
// Fixed-N selection

// Reads 1-based frame numbers; returns sorted 0-based positions.
inline std::vector<std::size_t> parse_frame_numbers(const std::string& reply, std::size_t n, std::size_t num_frames) {
  static const std::regex int_re(R"(\d+)");
  std::vector<unsigned long> nums;
  for (std::sregex_iterator it(reply.begin(), reply.end(), int_re), end; it != end; ++it) {
    const auto& s = it->str();
    nums.push_back(s.size() > 9 ? 0 : std::stoul(s));
  }
  std::set<unsigned long> seen;
  for (auto v : nums) {
    if (!seen.insert(v).second) throw ParseError("indices not distinct");
  }
  for (auto v : nums) {
    if (v < 1 || v > num_frames) throw ParseError(fmt::format("frame number {} outside 1..{}", v, num_frames));
  }
  if (nums.size() != n) throw ParseError(fmt::format("expected {} frame numbers, got {}", n, nums.size()));
  std::vector<std::size_t> out;
  for (auto v : nums) out.push_back(v - 1);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::size_t> select_n_keyframes(Gateway& gw, const CaptionSequence& captions, std::size_t n,
                                                   const std::string& judge, const std::string& action,
                                                   std::uint64_t seed) {
  const std::size_t t = captions.captions.size();
  if (n < 1 || n > t) throw ValidationError(fmt::format("n={} outside 1..T={}", n, t));
  if (n == t) {
    std::vector<std::size_t> all(t);
    for (std::size_t i = 0; i < t; ++i) all[i] = i;
    return all;
  }
  const std::string prompt = render_prompt(PromptKind::keyframe_selection,
                                           PromptParams{}
                                               .set("action", action.empty() ? std::string("an action") : action)
                                               .set("N", static_cast<long long>(n))
                                               .list("captions", captions.captions));
  const std::string reply = ask(gw, judge, Role::text_judge, prompt, {},
                                derive_seed(seed, "select_n/" + captions.sequence_id));
  return parse_frame_numbers(reply, n, t);
}

// ---------------------------------------------------------------------------
// Zero-shot frame classification

struct FrameLabelResult {
  std::vector<std::optional<std::size_t>> labels;  // empty = abstain
  std::vector<std::string> replies;

  std::size_t abstains() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::nullopt));
  }
};

// Per-frame text for classification from pair-window captions: interior
// frames join the caption from the window ending at them with the one from
// the window starting at them.
inline std::vector<std::string> concat_window_captions(const std::vector<std::array<std::string, 2>>& windows) {
  std::vector<std::string> out;
  if (windows.empty()) return out;
  out.push_back(windows.front()[0]);
  for (std::size_t t = 1; t < windows.size(); ++t) out.push_back(windows[t - 1][1] + " " + windows[t][0]);
  out.push_back(windows.back()[1]);
  return out;
}

inline FrameLabelResult classify_frames(Gateway& gw, const std::vector<std::string>& captions,
                                        const std::vector<std::string>& labels, const std::string& judge,
                                        std::uint64_t seed) {
  McqOptions options(labels, /*includes_unsure=*/false);
  FrameLabelResult r;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    const std::string caption = trim(captions[i]);
    if (caption.empty()) {
      r.labels.push_back(std::nullopt);
      r.replies.emplace_back();
      continue;
    }
    const std::string prompt = render_prompt(PromptKind::frame_classification,
                                             PromptParams{}.set("caption", caption).list("options", options.texts()));
    std::string reply;
    try {
      reply = ask(gw, judge, Role::text_judge, prompt, {}, derive_seed(seed, fmt::format("classify/{}", i)));
      r.labels.push_back(try_parse_choice(reply, options.size()));
    } catch (const GatewayError& e) {
      reply = std::string("error: ") + e.what();
      r.labels.push_back(std::nullopt);
    }
    r.replies.push_back(std::move(reply));
  }
  return r;
}

// ---------------------------------------------------------------------------
// QA over frame-wise captions

inline std::optional<std::size_t> qa_over_captions(Gateway& gw, const CaptionSequence& captions,
                                                   const std::string& question,
                                                   const std::vector<std::string>& options,
                                                   const std::string& judge, std::uint64_t seed) {
  McqOptions mcq(options, /*includes_unsure=*/false);
  if (captions.captions.empty()) throw ValidationError("qa_over_captions: no captions");
  const std::string prompt = render_prompt(PromptKind::caption_qa, PromptParams{}
                                                                       .list("captions", captions.captions)
                                                                       .set("question", question)
                                                                       .list("options", mcq.texts()));
  try {
    const std::string reply = ask(gw, judge, Role::text_judge, prompt, {},
                                  derive_seed(seed, "qa/" + captions.sequence_id + "/" + question));
    return try_parse_choice(reply, mcq.size());
  } catch (const GatewayError&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Result records

inline Json to_record(const KeyframeResult& r) {
  Json j;
  j["version"] = kSchemaVersion;
  j["sequence_id"] = r.sequence_id;
  j["selected"] = r.selected;
  Json log = Json::array();
  for (const auto& s : r.log) {
    Json x;
    x["t"] = s.t;
    x["label"] = kChangeLabelNames.name(s.label);
    x["captions"] = std::vector<std::string>(s.captions.begin(), s.captions.end());
    x["reply"] = s.reply;
    x["selected"] = s.selected;
    log.push_back(std::move(x));
  }
  j["log"] = std::move(log);
  return j;
}

}  // namespace framecap
