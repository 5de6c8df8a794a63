#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "framecap/core.hpp"
#include "framecap/gateway.hpp"
#include "framecap/protocol.hpp"
#include "framecap/rng.hpp"

// Caption matching: a vision judge is shown one frame and every caption of
// the sequence (shuffled) plus an "unsure" option, and must pick the frame's
// own caption.
namespace framecap {

enum class MatchVerdict { accepted, rejected, indeterminate };

inline constexpr EnumNames<MatchVerdict, 3> kMatchVerdictNames{{
    {MatchVerdict::accepted, "accepted"},
    {MatchVerdict::rejected, "rejected"},
    {MatchVerdict::indeterminate, "indeterminate"},
}};

struct MatchRound {
  FrameRef frame;
  std::size_t frame_position = 0;
  std::vector<std::string> options;       // shown order; unsure text last
  std::vector<std::size_t> permutation;   // option i shows caption permutation[i]
  std::size_t correct_index = 0;
  std::optional<std::size_t> reply_index;  // empty: unparseable or failed call
  std::string reply;

  bool correct() const { return reply_index && *reply_index == correct_index; }
  bool abstained() const { return !reply_index || *reply_index + 1 == options.size(); }
  bool operator==(const MatchRound&) const = default;
};

struct MatchOutcome {
  std::string id;
  std::vector<MatchRound> rounds;
  MatchVerdict verdict = MatchVerdict::indeterminate;
  int n_correct = 0;
  int n_wrong = 0;    // includes abstentions
  int n_abstain = 0;

  bool operator==(const MatchOutcome&) const = default;
};

struct MatchSettings {
  std::string judge;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::string label = "match";  // seed-derivation namespace, e.g. the item id
};

// Sequence rule: accepted iff every frame is matched, rejected iff more
// than half are wrong, indeterminate otherwise.
inline MatchVerdict sequence_verdict(int num_frames, int n_correct, int n_wrong) {
  if (n_correct == num_frames && n_wrong == 0) return MatchVerdict::accepted;
  if (2 * n_wrong > num_frames) return MatchVerdict::rejected;
  return MatchVerdict::indeterminate;
}

inline MatchVerdict pair_verdict(int n_correct) {
  return n_correct == 2 ? MatchVerdict::accepted : MatchVerdict::rejected;
}

namespace detail {

inline MatchOutcome run_match_rounds(Gateway& gw, const std::vector<FrameRef>& frames,
                                     const std::vector<std::string>& captions,
                                     const MatchSettings& s) {
  if (frames.size() != captions.size()) {
    throw ValidationError(fmt::format("matching: {} frames but {} captions", frames.size(),
                                      captions.size()));
  }
  if (std::set<std::string>(captions.begin(), captions.end()).size() != captions.size()) {
    throw ValidationError("matching: duplicate caption texts cannot be told apart");
  }
  if (!gw.has_backend(s.judge)) throw UnknownBackendError(s.judge);

  MatchOutcome out;
  const std::size_t m = captions.size();
  for (std::size_t i = 0; i < m; ++i) {
    MatchRound round;
    round.frame = frames[i];
    round.frame_position = i;
    // Fresh shuffle per round so positions do not leak across the sequence.
    if (s.shuffle) {
      round.permutation = seeded_permutation(m, derive_seed(s.seed, fmt::format("{}/round{}", s.label, i)));
    } else {
      for (std::size_t k = 0; k < m; ++k) round.permutation.push_back(k);
    }
    std::vector<std::string> shown;
    for (std::size_t k = 0; k < m; ++k) {
      shown.push_back(captions[round.permutation[k]]);
      if (round.permutation[k] == i) round.correct_index = k;
    }
    McqOptions options(shown, /*includes_unsure=*/true);
    round.options = options.texts();
    try {
      round.reply = ask(gw, s.judge, Role::vision_judge, render_caption_matching(options, i + 1),
                        {frames[i]}, derive_seed(s.seed, fmt::format("{}/judge{}", s.label, i)));
      round.reply_index = try_parse_choice(round.reply, options.size());
    } catch (const GatewayError& e) {
      round.reply = std::string("error: ") + e.what();
      round.reply_index.reset();
    }
    if (round.correct()) {
      ++out.n_correct;
    } else {
      ++out.n_wrong;
      if (round.abstained()) ++out.n_abstain;
    }
    out.rounds.push_back(std::move(round));
  }
  return out;
}

}  // namespace detail

// Two rounds over (c1, c2) + unsure; accepted iff both are answered
// correctly. There is no indeterminate band for pairs.
inline MatchOutcome evaluate_pair_matching(Gateway& gw, const std::vector<FrameRef>& frames,
                                           const std::vector<std::string>& captions,
                                           const MatchSettings& settings) {
  if (frames.size() != 2 || captions.size() != 2) {
    throw ValidationError("pair matching needs exactly 2 frames and 2 captions");
  }
  auto out = detail::run_match_rounds(gw, frames, captions, settings);
  out.verdict = pair_verdict(out.n_correct);
  return out;
}

inline MatchOutcome evaluate_sequence_matching(Gateway& gw, const std::vector<FrameRef>& frames,
                                               const std::vector<std::string>& captions,
                                               const MatchSettings& settings) {
  if (captions.size() < 2) throw ValidationError("sequence matching needs M >= 2");
  auto out = detail::run_match_rounds(gw, frames, captions, settings);
  out.verdict = sequence_verdict(static_cast<int>(captions.size()), out.n_correct, out.n_wrong);
  return out;
}

// Share of sequences whose every frame was matched.
inline double sequence_level_accuracy(const std::vector<MatchOutcome>& outcomes) {
  if (outcomes.empty()) throw ValidationError("sequence_level_accuracy: no outcomes");
  std::size_t accepted = 0;
  for (const auto& o : outcomes) accepted += o.verdict == MatchVerdict::accepted ? 1 : 0;
  return static_cast<double>(accepted) / static_cast<double>(outcomes.size());
}

// ---------------------------------------------------------------------------
// match_outcomes.jsonl

inline Json to_record(const MatchOutcome& o) {
  Json j;
  j["version"] = kSchemaVersion;
  j["id"] = o.id;
  j["verdict"] = kMatchVerdictNames.name(o.verdict);
  j["n_correct"] = o.n_correct;
  j["n_wrong"] = o.n_wrong;
  j["n_abstain"] = o.n_abstain;
  Json rounds = Json::array();
  for (const auto& r : o.rounds) {
    Json x;
    x["frame"] = to_record(r.frame);
    x["frame_position"] = r.frame_position;
    x["options"] = r.options;
    x["permutation"] = r.permutation;
    x["correct_index"] = r.correct_index;
    x["reply_index"] = r.reply_index ? Json(*r.reply_index) : Json(nullptr);
    x["reply"] = r.reply;
    rounds.push_back(std::move(x));
  }
  j["rounds"] = std::move(rounds);
  return j;
}

inline MatchOutcome from_record(const Json& j, std::type_identity<MatchOutcome>) {
  FieldReader r(j, "match_outcome");
  r.expect_version();
  MatchOutcome o;
  o.id = r.req<std::string>("id");
  o.verdict = kMatchVerdictNames.parse(r.req<std::string>("verdict"), "verdict");
  o.n_correct = r.req<int>("n_correct");
  o.n_wrong = r.req<int>("n_wrong");
  o.n_abstain = r.req<int>("n_abstain");
  const Json& rounds = r.sub("rounds");
  if (!rounds.is_array()) throw ParseError("rounds: expected an array");
  for (const auto& x : rounds) {
    FieldReader rr(x, "round");
    MatchRound round;
    round.frame = from_record(rr.sub("frame"), std::type_identity<FrameRef>{});
    round.frame_position = rr.req<std::size_t>("frame_position");
    round.options = rr.req<std::vector<std::string>>("options");
    round.permutation = rr.req<std::vector<std::size_t>>("permutation");
    round.correct_index = rr.req<std::size_t>("correct_index");
    rr.sub("reply_index");
    if (!x.at("reply_index").is_null()) round.reply_index = x.at("reply_index").get<std::size_t>();
    round.reply = rr.req<std::string>("reply");
    rr.finish();
    o.rounds.push_back(std::move(round));
  }
  r.finish();
  return o;
}

}  // namespace framecap
