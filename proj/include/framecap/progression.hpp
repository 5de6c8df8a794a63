#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "framecap/core.hpp"
#include "framecap/gateway.hpp"
#include "framecap/protocol.hpp"

// Progression detection from caption pairs.
//
// Pseudo-label mode asks whether two captions suggest any visible change;
// evaluation mode asks whether the action progressed. Both share one label
// vocabulary: in eval mode `change` means progression and `no_change` means
// no progression.
namespace framecap {

enum class ChangeLabel { change, no_change, unsure };
enum class ConsensusValue { change, no_change, indeterminate };
enum class PairClass { pass, fail, skip };
enum class Aggregation { pooled, per_judge_first };

inline constexpr EnumNames<ChangeLabel, 3> kChangeLabelNames{{
    {ChangeLabel::change, "change"},
    {ChangeLabel::no_change, "no_change"},
    {ChangeLabel::unsure, "unsure"},
}};
inline constexpr EnumNames<ConsensusValue, 3> kConsensusNames{{
    {ConsensusValue::change, "change"},
    {ConsensusValue::no_change, "no_change"},
    {ConsensusValue::indeterminate, "indeterminate"},
}};
inline constexpr EnumNames<PairClass, 3> kPairClassNames{{
    {PairClass::pass, "pass"},
    {PairClass::fail, "fail"},
    {PairClass::skip, "skip"},
}};
inline constexpr EnumNames<Aggregation, 2> kAggregationNames{{
    {Aggregation::pooled, "pooled"},
    {Aggregation::per_judge_first, "per_judge_first"},
}};

// Adjacent frame pair, by frame identity.
struct PairRef {
  std::string video_id;
  int first = 0;
  int second = 0;

  static PairRef of(const FrameRef& a, const FrameRef& b) { return {a.video_id, a.index, b.index}; }
  std::string key() const { return fmt::format("{}/{}-{}", video_id, first, second); }
  bool operator==(const PairRef&) const = default;
  auto operator<=>(const PairRef&) const = default;
};

struct ChangeVerdict {
  std::string id;
  PairRef pair;
  std::size_t candidate_index = 0;
  std::string judge_id;
  ChangeLabel label = ChangeLabel::unsure;
  ProgressionMode mode = ProgressionMode::pseudo;
  std::string reply;

  bool operator==(const ChangeVerdict&) const = default;
};

struct ConsensusLabel {
  PairRef pair;
  ConsensusValue label = ConsensusValue::indeterminate;
  int votes_for = 0;
  int votes_against = 0;
  int abstentions = 0;

  bool operator==(const ConsensusLabel&) const = default;
};

struct GoldProgression {
  PairRef pair;
  bool progression = false;
  std::string annotator;

  bool operator==(const GoldProgression&) const = default;
};

// Option letter -> label, per the option order printed in each template.
inline ChangeLabel label_for_option(ProgressionMode mode, std::size_t option) {
  switch (option) {
    case 0: return mode == ProgressionMode::pseudo ? ChangeLabel::no_change : ChangeLabel::change;
    case 1: return mode == ProgressionMode::pseudo ? ChangeLabel::change : ChangeLabel::no_change;
    default: return ChangeLabel::unsure;
  }
}

struct PairJudgment {
  std::string judge_id;
  std::string caption1;
  std::string caption2;
  ProgressionMode mode = ProgressionMode::pseudo;
  std::optional<std::string> action;  // required in eval mode
  PairRef pair;
  std::size_t candidate_index = 0;
  std::uint64_t seed = 0;
};

// Renders the mode's prompt, asks the text judge and maps A/B/C to a label.
// Unparseable replies become `unsure`; gateway errors propagate.
inline ChangeVerdict judge_pair_change(Gateway& gw, const PairJudgment& j) {
  if (j.mode == ProgressionMode::eval && !j.action) {
    throw ValidationError("eval-mode judgment needs an action label");
  }
  const std::string prompt = render_progression(j.mode, j.caption1, j.caption2, j.action);
  ChangeVerdict v;
  v.id = fmt::format("{}/c{}/{}", j.pair.key(), j.candidate_index, j.judge_id);
  v.pair = j.pair;
  v.candidate_index = j.candidate_index;
  v.judge_id = j.judge_id;
  v.mode = j.mode;
  v.reply = ask(gw, j.judge_id, Role::text_judge, prompt, {}, j.seed);
  auto choice = try_parse_choice(v.reply, 3);
  v.label = choice ? label_for_option(j.mode, *choice) : ChangeLabel::unsure;
  return v;
}

namespace detail {

inline ConsensusValue strict_majority(int change, int no_change) {
  if (change > no_change) return ConsensusValue::change;
  if (no_change > change) return ConsensusValue::no_change;
  return ConsensusValue::indeterminate;
}

}  // namespace detail

// Majority vote over non-abstaining verdicts. Exact ties and all-abstain
// panels are indeterminate. With per_judge_first, each judge's verdicts are
// first reduced to one vote (a judge tie abstains) and judges are then
// majority-voted.
inline ConsensusLabel consensus_change(const std::vector<ChangeVerdict>& verdicts,
                                       Aggregation aggregation = Aggregation::pooled) {
  if (verdicts.empty()) throw ValidationError("consensus over an empty verdict list");
  ConsensusLabel c;
  c.pair = verdicts.front().pair;

  auto tally = [](const std::vector<ChangeLabel>& labels, int& yes, int& no, int& abstain) {
    for (auto l : labels) {
      if (l == ChangeLabel::change) ++yes;
      else if (l == ChangeLabel::no_change) ++no;
      else ++abstain;
    }
  };

  std::vector<ChangeLabel> votes;
  if (aggregation == Aggregation::pooled) {
    for (const auto& v : verdicts) votes.push_back(v.label);
  } else {
    std::map<std::string, std::vector<ChangeLabel>> by_judge;
    for (const auto& v : verdicts) by_judge[v.judge_id].push_back(v.label);
    for (const auto& [judge, labels] : by_judge) {
      int y = 0, n = 0, a = 0;
      tally(labels, y, n, a);
      switch (detail::strict_majority(y, n)) {
        case ConsensusValue::change: votes.push_back(ChangeLabel::change); break;
        case ConsensusValue::no_change: votes.push_back(ChangeLabel::no_change); break;
        case ConsensusValue::indeterminate: votes.push_back(ChangeLabel::unsure); break;
      }
    }
  }
  tally(votes, c.votes_for, c.votes_against, c.abstentions);
  c.label = detail::strict_majority(c.votes_for, c.votes_against);
  return c;
}

// A single candidate's label across the judge panel: its verdicts'
// majority, unsure on a tie.
inline ChangeLabel candidate_label(const std::vector<ChangeVerdict>& verdicts) {
  if (verdicts.empty()) return ChangeLabel::unsure;
  switch (consensus_change(verdicts).label) {
    case ConsensusValue::change: return ChangeLabel::change;
    case ConsensusValue::no_change: return ChangeLabel::no_change;
    default: return ChangeLabel::unsure;
  }
}

inline PairClass classify_pair(ChangeLabel candidate, const ConsensusLabel& consensus) {
  if (consensus.label == ConsensusValue::indeterminate || candidate == ChangeLabel::unsure) {
    return PairClass::skip;
  }
  const bool agrees = (candidate == ChangeLabel::change) == (consensus.label == ConsensusValue::change);
  return agrees ? PairClass::pass : PairClass::fail;
}

struct DistinctFrames {
  std::vector<std::size_t> positions;          // kept frame positions, ascending
  std::vector<std::size_t> indeterminate_pairs;  // pair p = (p, p+1) read as no_change
};

// Frame 0 is always kept; frame i is kept iff the consensus for the
// adjacent pair (i-1, i) is `change`. Indeterminate pairs count as
// no_change and are reported.
inline DistinctFrames distinct_frames(std::size_t num_frames,
                                      const std::vector<ConsensusValue>& adjacent) {
  if (num_frames < 1) throw ValidationError("distinct_frames: empty sequence");
  if (adjacent.size() + 1 != num_frames) {
    throw ValidationError(fmt::format("distinct_frames: {} consensus labels for T={}",
                                      adjacent.size(), num_frames));
  }
  DistinctFrames out;
  out.positions.push_back(0);
  for (std::size_t i = 1; i < num_frames; ++i) {
    const auto c = adjacent[i - 1];
    if (c == ConsensusValue::indeterminate) out.indeterminate_pairs.push_back(i - 1);
    if (c == ConsensusValue::change) out.positions.push_back(i);
  }
  return out;
}

inline DistinctFrames distinct_frames(const FrameSequence& seq,
                                      const std::vector<ConsensusLabel>& adjacent) {
  std::vector<ConsensusValue> values;
  for (const auto& c : adjacent) values.push_back(c.label);
  return distinct_frames(seq.length(), values);
}

// Mean of true-positive and true-negative rates, positive = progression.
inline double balanced_accuracy(const std::vector<bool>& preds, const std::vector<bool>& gold) {
  if (preds.size() != gold.size()) {
    throw ValidationError(fmt::format("balanced_accuracy: {} predictions for {} gold labels",
                                      preds.size(), gold.size()));
  }
  std::size_t pos = 0, neg = 0, tp = 0, tn = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i]) {
      ++pos;
      tp += preds[i] ? 1 : 0;
    } else {
      ++neg;
      tn += preds[i] ? 0 : 1;
    }
  }
  if (pos == 0 || neg == 0) {
    throw ValidationError("undefined balanced accuracy: gold lacks a positive or a negative");
  }
  return (static_cast<double>(tp) / static_cast<double>(pos) +
          static_cast<double>(tn) / static_cast<double>(neg)) / 2.0;
}

inline double balanced_accuracy(const std::vector<bool>& preds,
                                const std::vector<GoldProgression>& gold) {
  std::vector<bool> g;
  g.reserve(gold.size());
  for (const auto& x : gold) g.push_back(x.progression);
  return balanced_accuracy(preds, g);
}

// ---------------------------------------------------------------------------
// Records: verdicts.jsonl, consensus.jsonl, gold files.

inline Json pair_json(const PairRef& p) {
  Json j;
  j["video_id"] = p.video_id;
  j["first"] = p.first;
  j["second"] = p.second;
  return j;
}

inline PairRef pair_from_json(const Json& j) {
  FieldReader r(j, "pair");
  PairRef p;
  p.video_id = r.req<std::string>("video_id");
  p.first = r.req<int>("first");
  p.second = r.req<int>("second");
  r.finish();
  return p;
}

inline Json to_record(const ChangeVerdict& v) {
  Json j;
  j["version"] = kSchemaVersion;
  j["id"] = v.id;
  j["pair"] = pair_json(v.pair);
  j["candidate_index"] = v.candidate_index;
  j["judge_id"] = v.judge_id;
  j["mode"] = kProgressionModeNames.name(v.mode);
  j["label"] = kChangeLabelNames.name(v.label);
  j["reply"] = v.reply;
  return j;
}

inline ChangeVerdict from_record(const Json& j, std::type_identity<ChangeVerdict>) {
  FieldReader r(j, "verdict");
  r.expect_version();
  ChangeVerdict v;
  v.id = r.req<std::string>("id");
  v.pair = pair_from_json(r.sub("pair"));
  v.candidate_index = r.req<std::size_t>("candidate_index");
  v.judge_id = r.req<std::string>("judge_id");
  v.mode = kProgressionModeNames.parse(r.req<std::string>("mode"), "mode");
  v.label = kChangeLabelNames.parse(r.req<std::string>("label"), "label");
  v.reply = r.req<std::string>("reply");
  r.finish();
  return v;
}

inline Json to_record(const ConsensusLabel& c) {
  Json j;
  j["version"] = kSchemaVersion;
  j["pair"] = pair_json(c.pair);
  j["label"] = kConsensusNames.name(c.label);
  j["votes_for"] = c.votes_for;
  j["votes_against"] = c.votes_against;
  j["abstentions"] = c.abstentions;
  return j;
}

inline ConsensusLabel from_record(const Json& j, std::type_identity<ConsensusLabel>) {
  FieldReader r(j, "consensus");
  r.expect_version();
  ConsensusLabel c;
  c.pair = pair_from_json(r.sub("pair"));
  c.label = kConsensusNames.parse(r.req<std::string>("label"), "label");
  c.votes_for = r.req<int>("votes_for");
  c.votes_against = r.req<int>("votes_against");
  c.abstentions = r.req<int>("abstentions");
  r.finish();
  return c;
}

inline Json to_record(const GoldProgression& g) {
  Json j;
  j["version"] = kSchemaVersion;
  j["pair"] = pair_json(g.pair);
  j["label"] = g.progression ? "progression" : "no_progression";
  j["annotator"] = g.annotator;
  return j;
}

inline GoldProgression from_record(const Json& j, std::type_identity<GoldProgression>) {
  FieldReader r(j, "gold");
  r.expect_version();
  GoldProgression g;
  g.pair = pair_from_json(r.sub("pair"));
  auto label = r.req<std::string>("label");
  if (label != "progression" && label != "no_progression") {
    throw ParseError("gold: invalid label '" + label + "'");
  }
  g.progression = label == "progression";
  g.annotator = r.req<std::string>("annotator");
  r.finish();
  return g;
}

}  // namespace framecap
