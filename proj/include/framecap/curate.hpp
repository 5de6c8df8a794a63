#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "framecap/core.hpp"
#include "framecap/gateway.hpp"
#include "framecap/matching.hpp"
#include "framecap/progression.hpp"
#include "framecap/protocol.hpp"
#include "framecap/rng.hpp"
#include "framecap/workers.hpp"

// Two-stage dataset construction.
//
// Stage I (frame pairs): K captioners each caption the pair; a judge panel
// labels every candidate's caption pair as change / no change; the pooled
// majority is the consensus and candidates that disagree fail. Survivors are
// caption-matched; candidates passing both gates become SFT targets and the
// positive side of DPO records, candidates failing a gate the negative side.
//
// Stage II (sequences, 3..6 frames): candidates come from the primary
// captioner (pair window) and every other captioner (pair and full window).
// Adjacent-pair consensus selects the M distinct frames; each candidate,
// reduced to those frames, is caption-matched over all M captions.
//
// Identifiers used in provenance:
//   candidate  <item id>/c<k>
//   verdict    <candidate>/<first>-<second>/<judge>
//   match      <candidate>
namespace framecap {

enum class Window { pair, full };

inline constexpr EnumNames<Window, 2> kWindowNames{{{Window::pair, "pair"}, {Window::full, "full"}}};

enum class SkipReason { fail, tie, indeterminate, unsure, parse_error, backend_error };

inline constexpr EnumNames<SkipReason, 6> kSkipReasonNames{{
    {SkipReason::fail, "fail"},
    {SkipReason::tie, "tie"},
    {SkipReason::indeterminate, "indeterminate"},
    {SkipReason::unsure, "unsure"},
    {SkipReason::parse_error, "parse_error"},
    {SkipReason::backend_error, "backend_error"},
}};

struct CurationConfig {
  std::vector<std::string> captioners;          // the K ensemble (Stage II: the other VLMs)
  std::vector<std::string> progression_judges;  // text judges voting on change
  std::string matching_judge;                   // vision judge
  std::string primary_captioner;                // Stage II: the Stage-I model endpoint
  std::size_t dpo_cap = 3;                      // DPO records per item
  std::uint64_t seed = 0;
  Aggregation aggregation = Aggregation::pooled;
  std::size_t workers = 4;
  bool shuffle = true;
};

inline void validate_config(const CurationConfig& cfg, Stage stage, const Gateway* gw = nullptr) {
  if (stage == Stage::pair && cfg.captioners.size() < 2) {
    throw ValidationError("stage 1 needs K >= 2 captioners");
  }
  if (stage == Stage::sequence && cfg.primary_captioner.empty()) {
    throw ValidationError("stage 2 needs a primary captioner");
  }
  if (cfg.progression_judges.empty()) throw ValidationError("no progression judges configured");
  if (cfg.matching_judge.empty()) throw ValidationError("no matching judge configured");
  if (cfg.dpo_cap == 0) throw ValidationError("dpo_cap must be >= 1");
  if (!gw) return;
  std::vector<std::string> ids = cfg.captioners;
  ids.insert(ids.end(), cfg.progression_judges.begin(), cfg.progression_judges.end());
  ids.push_back(cfg.matching_judge);
  if (stage == Stage::sequence) ids.push_back(cfg.primary_captioner);
  for (const auto& id : ids) {
    if (!gw->has_backend(id)) throw ValidationError("unknown backend '" + id + "' in curation config");
  }
}

// ---------------------------------------------------------------------------
// Captioning with a context window

// Captions of every two-frame window (v_{t-1}, v_t), t = 1..T-1.
inline std::vector<std::array<std::string, 2>> caption_pair_windows(Gateway& gw,
                                                                   const std::string& captioner,
                                                                   const FrameSequence& seq,
                                                                   std::uint64_t seed) {
  if (seq.length() < 2) throw ValidationError("pair window needs T >= 2");
  std::vector<std::array<std::string, 2>> out;
  const std::string prompt = render_caption_generation(2, seq.action);
  for (std::size_t t = 1; t < seq.length(); ++t) {
    std::string reply = ask(gw, captioner, Role::captioner, prompt, {seq.frames[t - 1], seq.frames[t]},
                            derive_seed(seed, fmt::format("window{}", t)));
    try {
      auto caps = parse_frame_captions(reply, 2);
      out.push_back({caps[0], caps[1]});
    } catch (const ParseError& e) {
      throw ParseError(fmt::format("window {} (frames {}-{}): {}", t, t - 1, t, e.what()));
    }
  }
  return out;
}

// Frame 0 takes its caption from the first window; frame t from window
// (v_{t-1}, v_t).
inline std::vector<std::string> stitch_pair_windows(const std::vector<std::array<std::string, 2>>& windows) {
  std::vector<std::string> caps;
  if (windows.empty()) return caps;
  caps.push_back(windows.front()[0]);
  for (const auto& w : windows) caps.push_back(w[1]);
  return caps;
}

inline CaptionSequence caption_with_window(Gateway& gw, const std::string& captioner,
                                           const FrameSequence& seq, Window window,
                                           std::uint64_t seed) {
  CaptionSequence out;
  out.sequence_id = seq.id;
  out.backend = captioner;
  out.generation_seed = seed;
  if (window == Window::pair) {
    out.context_mode = ContextMode::pair_window;
    out.captions = stitch_pair_windows(caption_pair_windows(gw, captioner, seq, seed));
  } else {
    out.context_mode = ContextMode::full_sequence;
    std::string reply = ask(gw, captioner, Role::captioner,
                            render_caption_generation(seq.length(), seq.action), seq.frames,
                            derive_seed(seed, "window0"));
    try {
      out.captions = parse_frame_captions(reply, seq.length());
    } catch (const ParseError& e) {
      throw ParseError(fmt::format("window 0 (full sequence): {}", e.what()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bundle

struct SkipRecord {
  std::string item_id;
  std::string candidate_id;
  SkipReason reason = SkipReason::fail;
  std::string detail;

  bool operator==(const SkipRecord&) const = default;
};

struct Tally {
  std::size_t candidates_in = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;  // failed a gate and entered the DPO pool
  std::map<std::string, std::size_t> skipped;

  std::size_t skipped_total() const {
    std::size_t n = 0;
    for (const auto& [k, v] : skipped) n += v;
    return n;
  }
  bool conserved() const { return candidates_in == accepted + rejected + skipped_total(); }

  void merge(const Tally& o) {
    candidates_in += o.candidates_in;
    accepted += o.accepted;
    rejected += o.rejected;
    for (const auto& [k, v] : o.skipped) skipped[k] += v;
  }
};

struct DatasetBundle {
  Stage stage = Stage::pair;
  std::vector<SftRecord> sft;
  std::vector<PreferenceRecord> dpo;
  std::vector<SkipRecord> skips;
  std::vector<CaptionSequence> captions;
  std::vector<ChangeVerdict> verdicts;
  std::vector<ConsensusLabel> consensus;
  std::vector<MatchOutcome> matches;
  Tally tally;

  void append(DatasetBundle&& o) {
    auto move_into = [](auto& dst, auto& src) {
      dst.insert(dst.end(), std::make_move_iterator(src.begin()), std::make_move_iterator(src.end()));
    };
    move_into(sft, o.sft);
    move_into(dpo, o.dpo);
    move_into(skips, o.skips);
    move_into(captions, o.captions);
    move_into(verdicts, o.verdicts);
    move_into(consensus, o.consensus);
    move_into(matches, o.matches);
    tally.merge(o.tally);
  }
};

inline Json to_record(const SkipRecord& s) {
  Json j;
  j["version"] = kSchemaVersion;
  j["item_id"] = s.item_id;
  j["candidate_id"] = s.candidate_id;
  j["reason"] = kSkipReasonNames.name(s.reason);
  j["detail"] = s.detail;
  return j;
}

inline SkipRecord from_record(const Json& j, std::type_identity<SkipRecord>) {
  FieldReader r(j, "skip");
  r.expect_version();
  SkipRecord s;
  s.item_id = r.req<std::string>("item_id");
  s.candidate_id = r.req<std::string>("candidate_id");
  s.reason = kSkipReasonNames.parse(r.req<std::string>("reason"), "reason");
  s.detail = r.req<std::string>("detail");
  r.finish();
  return s;
}

namespace detail {

struct Candidate {
  std::string id;
  CaptionSequence captions;
  std::vector<ChangeVerdict> verdicts;  // Stage I only
  bool chosen = false;
  bool failed_gate = false;
  std::string failed_at;  // "progression" or "matching"
};

class ItemBuilder {
 public:
  ItemBuilder(const FrameSequence& seq, Stage stage) : seq_(seq) { bundle_.stage = stage; }

  void skip(const std::string& cand, SkipReason reason, std::string detail) {
    bundle_.skips.push_back({seq_.id, cand, reason, std::move(detail)});
    ++bundle_.tally.skipped[std::string(kSkipReasonNames.name(reason))];
  }

  DatasetBundle& bundle() { return bundle_; }

  // Candidate captioning; failures are recorded as skips.
  std::optional<CaptionSequence> caption(Gateway& gw, const std::string& cand_id,
                                         const std::string& backend, Window window,
                                         std::uint64_t base_seed) {
    ++bundle_.tally.candidates_in;
    const std::uint64_t seed =
        derive_seed(base_seed, fmt::format("caption/{}/{}/{}", seq_.id, backend, kWindowNames.name(window)));
    try {
      auto caps = caption_with_window(gw, backend, seq_, window, seed);
      bundle_.captions.push_back(caps);
      return caps;
    } catch (const ParseError& e) {
      skip(cand_id, SkipReason::parse_error, e.what());
    } catch (const GatewayError& e) {
      skip(cand_id, SkipReason::backend_error, e.what());
    }
    return std::nullopt;
  }

  // Emits SFT records for chosen candidates and DPO records for
  // (chosen, rejected) combinations, capped per item.
  void finish(std::vector<Candidate>& cands, const FrameSequence& record_frames,
              const std::vector<std::size_t>& positions, std::size_t dpo_cap) {
    const Stage stage = bundle_.stage;
    auto restricted = [&](const Candidate& c) {
      CaptionSequence out = c.captions;
      out.captions.clear();
      for (auto p : positions) out.captions.push_back(c.captions.captions.at(p));
      return out;
    };
    std::vector<const Candidate*> chosen, rejected;
    for (const auto& c : cands) {
      if (c.chosen) chosen.push_back(&c);
      if (c.failed_gate) rejected.push_back(&c);
    }
    for (const auto* c : chosen) {
      ++bundle_.tally.accepted;
      bundle_.sft.push_back({stage, record_frames, restricted(*c), true,
                             {"candidate:" + c->id, "match:" + c->id}});
    }
    for (const auto* r : rejected) {
      if (chosen.empty()) {
        skip(r->id, SkipReason::fail, "failed " + r->failed_at + "; no accepted caption to pair with");
      } else {
        ++bundle_.tally.rejected;
      }
    }
    std::size_t emitted = 0;
    for (const auto* c : chosen) {
      for (const auto* r : rejected) {
        if (emitted >= dpo_cap) break;
        auto pos = restricted(*c);
        auto neg = restricted(*r);
        if (pos.captions == neg.captions) continue;
        bundle_.dpo.push_back({stage, record_frames, std::move(pos), std::move(neg),
                               {"chosen:" + c->id, "rejected:" + r->id, "rejected_gate:" + r->failed_at}});
        ++emitted;
      }
    }
  }

 private:
  const FrameSequence& seq_;
  DatasetBundle bundle_;
};

inline std::vector<ChangeVerdict> judge_candidate_pair(Gateway& gw, const CurationConfig& cfg,
                                                       const std::string& item_id,
                                                       const std::string& cand_id,
                                                       std::size_t cand_index,
                                                       const FrameRef& a, const FrameRef& b,
                                                       const std::string& c1, const std::string& c2) {
  std::vector<ChangeVerdict> out;
  for (const auto& judge : cfg.progression_judges) {
    PairJudgment j;
    j.judge_id = judge;
    j.caption1 = c1;
    j.caption2 = c2;
    j.mode = ProgressionMode::pseudo;
    j.pair = PairRef::of(a, b);
    j.candidate_index = cand_index;
    j.seed = derive_seed(cfg.seed, fmt::format("progression/{}/{}-{}/{}", cand_id, a.index, b.index, judge));
    ChangeVerdict v;
    try {
      v = judge_pair_change(gw, j);
    } catch (const GatewayError& e) {
      v.pair = j.pair;
      v.candidate_index = cand_index;
      v.judge_id = judge;
      v.mode = j.mode;
      v.label = ChangeLabel::unsure;
      v.reply = std::string("error: ") + e.what();
    }
    v.id = fmt::format("{}/{}-{}/{}", cand_id, a.index, b.index, judge);
    (void)item_id;
    out.push_back(std::move(v));
  }
  return out;
}

inline DatasetBundle stage1_item(Gateway& gw, const FrameSequence& seq, const CurationConfig& cfg) {
  ItemBuilder b(seq, Stage::pair);
  std::vector<Candidate> cands;
  for (std::size_t k = 0; k < cfg.captioners.size(); ++k) {
    const std::string cid = fmt::format("{}/c{}", seq.id, k);
    if (auto caps = b.caption(gw, cid, cfg.captioners[k], Window::pair, cfg.seed)) {
      cands.push_back({cid, std::move(*caps), {}, false, false, {}});
    }
  }
  if (cands.empty()) return std::move(b.bundle());

  std::vector<ChangeVerdict> all;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    auto& c = cands[k];
    const std::size_t index = static_cast<std::size_t>(std::stoul(c.id.substr(c.id.rfind("/c") + 2)));
    c.verdicts = judge_candidate_pair(gw, cfg, seq.id, c.id, index, seq.frames[0], seq.frames[1],
                                      c.captions.captions[0], c.captions.captions[1]);
    all.insert(all.end(), c.verdicts.begin(), c.verdicts.end());
  }
  auto& bundle = b.bundle();
  bundle.verdicts = all;
  const ConsensusLabel consensus = consensus_change(all, cfg.aggregation);
  bundle.consensus.push_back(consensus);

  for (auto& c : cands) {
    const ChangeLabel label = candidate_label(c.verdicts);
    switch (classify_pair(label, consensus)) {
      case PairClass::skip:
        if (consensus.label == ConsensusValue::indeterminate) {
          const bool tie = consensus.votes_for + consensus.votes_against > 0;
          b.skip(c.id, tie ? SkipReason::tie : SkipReason::unsure,
                 fmt::format("consensus {}-{} with {} abstentions", consensus.votes_for,
                             consensus.votes_against, consensus.abstentions));
        } else {
          b.skip(c.id, SkipReason::unsure, "candidate label unsure");
        }
        continue;
      case PairClass::fail:
        c.failed_gate = true;
        c.failed_at = "progression";
        continue;
      case PairClass::pass:
        break;
    }
    const auto& caps = c.captions.captions;
    if (caps[0] == caps[1]) {
      b.skip(c.id, SkipReason::indeterminate, "identical captions cannot be caption-matched");
      continue;
    }
    MatchSettings ms{cfg.matching_judge, cfg.seed, cfg.shuffle, c.id};
    MatchOutcome m = evaluate_pair_matching(gw, seq.frames, caps, ms);
    m.id = c.id;
    if (m.verdict == MatchVerdict::accepted) {
      c.chosen = true;
    } else {
      c.failed_gate = true;
      c.failed_at = "matching";
    }
    bundle.matches.push_back(std::move(m));
  }
  b.finish(cands, without_embeddings(seq), {0, 1}, cfg.dpo_cap);
  return std::move(b.bundle());
}

inline DatasetBundle stage2_item(Gateway& gw, const FrameSequence& seq, const CurationConfig& cfg) {
  ItemBuilder b(seq, Stage::sequence);
  struct Plan {
    std::string backend;
    Window window;
  };
  std::vector<Plan> plans{{cfg.primary_captioner, Window::pair}};
  for (const auto& other : cfg.captioners) {
    plans.push_back({other, Window::pair});
    plans.push_back({other, Window::full});
  }
  std::vector<Candidate> cands;
  std::vector<std::size_t> cand_index;
  for (std::size_t k = 0; k < plans.size(); ++k) {
    const std::string cid = fmt::format("{}/c{}", seq.id, k);
    if (auto caps = b.caption(gw, cid, plans[k].backend, plans[k].window, cfg.seed)) {
      cands.push_back({cid, std::move(*caps), {}, false, false, {}});
      cand_index.push_back(k);
    }
  }
  if (cands.empty()) return std::move(b.bundle());

  auto& bundle = b.bundle();
  std::vector<ConsensusLabel> adjacent;
  for (std::size_t p = 0; p + 1 < seq.length(); ++p) {
    std::vector<ChangeVerdict> pair_votes;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const auto& caps = cands[i].captions.captions;
      auto v = judge_candidate_pair(gw, cfg, seq.id, cands[i].id, cand_index[i], seq.frames[p],
                                    seq.frames[p + 1], caps[p], caps[p + 1]);
      pair_votes.insert(pair_votes.end(), v.begin(), v.end());
    }
    bundle.verdicts.insert(bundle.verdicts.end(), pair_votes.begin(), pair_votes.end());
    adjacent.push_back(consensus_change(pair_votes, cfg.aggregation));
  }
  bundle.consensus.insert(bundle.consensus.end(), adjacent.begin(), adjacent.end());

  const DistinctFrames distinct = distinct_frames(seq, adjacent);
  if (distinct.positions.size() < 2) {
    for (const auto& c : cands) {
      b.skip(c.id, SkipReason::indeterminate, "M=1: no visually distinct frames to match");
    }
    return std::move(b.bundle());
  }
  const FrameSequence kept = subset(seq, distinct.positions);
  for (auto& c : cands) {
    std::vector<std::string> caps;
    for (auto p : distinct.positions) caps.push_back(c.captions.captions[p]);
    if (std::set<std::string>(caps.begin(), caps.end()).size() != caps.size()) {
      b.skip(c.id, SkipReason::indeterminate, "duplicate captions among the distinct frames");
      continue;
    }
    MatchSettings ms{cfg.matching_judge, cfg.seed, cfg.shuffle, c.id};
    MatchOutcome m = evaluate_sequence_matching(gw, kept.frames, caps, ms);
    m.id = c.id;
    switch (m.verdict) {
      case MatchVerdict::accepted:
        c.chosen = true;
        break;
      case MatchVerdict::rejected:
        c.failed_gate = true;
        c.failed_at = "matching";
        break;
      case MatchVerdict::indeterminate:
        b.skip(c.id, SkipReason::indeterminate,
               fmt::format("{} of {} frames wrong", m.n_wrong, caps.size()));
        break;
    }
    bundle.matches.push_back(std::move(m));
  }
  b.finish(cands, without_embeddings(kept), distinct.positions, cfg.dpo_cap);
  return std::move(b.bundle());
}

template <typename ItemFn>
DatasetBundle build_stage(Gateway& gw, const std::vector<FrameSequence>& items, const CurationConfig& cfg,
                          Stage stage, std::size_t candidates_per_item, ItemFn&& item_fn) {
  auto results = parallel_map(items.size(), cfg.workers, [&](std::size_t i) {
    try {
      return item_fn(gw, items[i], cfg);
    } catch (const std::exception& e) {
      // One bad item never aborts the run.
      spdlog::warn("item '{}' skipped: {}", items[i].id, e.what());
      ItemBuilder b(items[i], stage);
      b.bundle().tally.candidates_in = candidates_per_item;
      for (std::size_t k = 0; k < candidates_per_item; ++k) {
        b.skip(fmt::format("{}/c{}", items[i].id, k), SkipReason::backend_error, e.what());
      }
      return std::move(b.bundle());
    }
  });
  DatasetBundle out;
  out.stage = stage;
  for (auto& r : results) out.append(std::move(r));
  return out;
}

}  // namespace detail

inline DatasetBundle build_stage1(Gateway& gw, const std::vector<FrameSequence>& pairs,
                                  const CurationConfig& cfg) {
  validate_config(cfg, Stage::pair, &gw);
  std::set<std::string> ids;
  for (const auto& p : pairs) {
    require_valid(validate_sequence(p, {2, 2, true}), "stage 1 input '" + p.id + "'");
    if (!ids.insert(p.id).second) throw ValidationError("duplicate item id '" + p.id + "'");
  }
  return detail::build_stage(gw, pairs, cfg, Stage::pair, cfg.captioners.size(), detail::stage1_item);
}

inline DatasetBundle build_stage2(Gateway& gw, const std::vector<FrameSequence>& seqs,
                                  const CurationConfig& cfg) {
  validate_config(cfg, Stage::sequence, &gw);
  std::set<std::string> ids;
  for (const auto& s : seqs) {
    require_valid(validate_sequence(s, {3, 6, true}), "stage 2 input '" + s.id + "'");
    if (!ids.insert(s.id).second) throw ValidationError("duplicate item id '" + s.id + "'");
  }
  return detail::build_stage(gw, seqs, cfg, Stage::sequence, 1 + 2 * cfg.captioners.size(),
                             detail::stage2_item);
}

// ---------------------------------------------------------------------------
// Planned model calls for --dry-run. Matching calls depend on gate outcomes
// and are reported as an upper bound.

struct CallPlan {
  std::size_t caption_calls = 0;
  std::size_t progression_calls = 0;
  std::size_t matching_calls_max = 0;
};

inline CallPlan plan_calls(Stage stage, const std::vector<FrameSequence>& items, const CurationConfig& cfg) {
  CallPlan p;
  const std::size_t judges = cfg.progression_judges.size();
  for (const auto& s : items) {
    const std::size_t t = s.length();
    if (stage == Stage::pair) {
      const std::size_t k = cfg.captioners.size();
      p.caption_calls += k;
      p.progression_calls += k * judges;
      p.matching_calls_max += k * 2;
    } else {
      const std::size_t others = cfg.captioners.size();
      const std::size_t cands = 1 + 2 * others;
      p.caption_calls += (t - 1) + others * ((t - 1) + 1);
      p.progression_calls += (t - 1) * cands * judges;
      p.matching_calls_max += cands * t;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Gate soundness replay: recomputes every gate decision from the stored
// verdicts and match rounds and checks it against the emitted records.

struct ReplayReport {
  std::size_t sft_checked = 0;
  std::size_t dpo_checked = 0;
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

inline ReplayReport replay_gates(Stage stage, const std::vector<SftRecord>& sft,
                                 const std::vector<PreferenceRecord>& dpo,
                                 const std::vector<ChangeVerdict>& verdicts,
                                 const std::vector<MatchOutcome>& matches,
                                 Aggregation aggregation = Aggregation::pooled) {
  ReplayReport rep;
  std::map<std::string, const MatchOutcome*> match_by_id;
  for (const auto& m : matches) match_by_id[m.id] = &m;

  auto item_of = [](const std::string& cand) { return cand.substr(0, cand.rfind("/c")); };
  auto prefixed = [&](const std::string& prefix) {
    std::vector<ChangeVerdict> out;
    for (const auto& v : verdicts) {
      if (v.id.starts_with(prefix + "/")) out.push_back(v);
    }
    return out;
  };
  auto field = [](const std::vector<std::string>& prov, const std::string& key) -> std::string {
    for (const auto& p : prov) {
      if (p.starts_with(key + ":")) return p.substr(key.size() + 1);
    }
    return {};
  };
  auto match_verdict = [&](const std::string& cand) -> std::optional<MatchVerdict> {
    auto it = match_by_id.find(cand);
    if (it == match_by_id.end()) return std::nullopt;
    int correct = 0, wrong = 0;
    for (const auto& r : it->second->rounds) (r.correct() ? correct : wrong)++;
    const int m = static_cast<int>(it->second->rounds.size());
    return stage == Stage::pair ? pair_verdict(correct) : sequence_verdict(m, correct, wrong);
  };
  auto progression_class = [&](const std::string& cand) -> PairClass {
    auto item = prefixed(item_of(cand));
    auto own = prefixed(cand);
    if (item.empty() || own.empty()) return PairClass::skip;
    return classify_pair(candidate_label(own), consensus_change(item, aggregation));
  };
  // Stage II: positions kept by the recomputed adjacent consensus.
  auto distinct_indices = [&](const std::string& item) {
    std::map<PairRef, std::vector<ChangeVerdict>> by_pair;
    for (auto& v : prefixed(item)) by_pair[v.pair].push_back(v);
    std::vector<ConsensusValue> adjacent;
    std::vector<int> indices;
    for (const auto& [pair, votes] : by_pair) {
      if (indices.empty()) indices.push_back(pair.first);
      indices.push_back(pair.second);
      adjacent.push_back(consensus_change(votes, aggregation).label);
    }
    std::vector<int> kept;
    if (indices.empty()) return kept;
    for (auto p : distinct_frames(indices.size(), adjacent).positions) kept.push_back(indices[p]);
    return kept;
  };
  auto frame_indices = [](const FrameSequence& s) {
    std::vector<int> v;
    for (const auto& f : s.frames) v.push_back(f.index);
    return v;
  };

  for (const auto& r : sft) {
    ++rep.sft_checked;
    const std::string cand = field(r.provenance, "candidate");
    if (cand.empty()) {
      rep.violations.push_back("sft record without candidate provenance");
      continue;
    }
    if (stage == Stage::pair && progression_class(cand) != PairClass::pass) {
      rep.violations.push_back(cand + ": SFT target did not pass progression");
    }
    if (stage == Stage::sequence && distinct_indices(item_of(cand)) != frame_indices(r.frames)) {
      rep.violations.push_back(cand + ": SFT frames differ from the distinct-frame selection");
    }
    if (match_verdict(cand) != MatchVerdict::accepted) {
      rep.violations.push_back(cand + ": SFT target did not pass caption matching");
    }
  }
  for (const auto& r : dpo) {
    ++rep.dpo_checked;
    const std::string pos = field(r.provenance, "chosen");
    const std::string neg = field(r.provenance, "rejected");
    if (pos.empty() || neg.empty()) {
      rep.violations.push_back("dpo record without chosen/rejected provenance");
      continue;
    }
    if (r.chosen.captions == r.rejected.captions) rep.violations.push_back(pos + ": DPO pairs a caption with itself");
    if (match_verdict(pos) != MatchVerdict::accepted) rep.violations.push_back(pos + ": DPO chosen not accepted");
    if (stage == Stage::pair && progression_class(pos) != PairClass::pass) {
      rep.violations.push_back(pos + ": DPO chosen did not pass progression");
    }
    const bool failed_progression = stage == Stage::pair && progression_class(neg) == PairClass::fail;
    const bool failed_matching = match_verdict(neg) == MatchVerdict::rejected;
    if (!failed_progression && !failed_matching) {
      rep.violations.push_back(neg + ": DPO rejected side failed no gate");
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Dataset statistics (per source dataset + total)

struct StatsRow {
  std::size_t videos = 0;
  std::size_t frames = 0;
  std::size_t pair_sft = 0;
  std::size_t pair_dpo = 0;
  std::size_t seq_sft = 0;
  std::size_t seq_dpo = 0;

  bool operator==(const StatsRow&) const = default;
};

struct StatsTable {
  std::map<std::string, StatsRow> rows;

  StatsRow total() const {
    StatsRow t;
    for (const auto& [name, r] : rows) {
      t.videos += r.videos;
      t.frames += r.frames;
      t.pair_sft += r.pair_sft;
      t.pair_dpo += r.pair_dpo;
      t.seq_sft += r.seq_sft;
      t.seq_dpo += r.seq_dpo;
    }
    return t;
  }

  std::string render_tsv() const {
    std::string out = "dataset\tvideos\tframes\tpair_sft\tpair_dpo\tseq_sft\tseq_dpo\n";
    auto line = [&](const std::string& name, const StatsRow& r) {
      out += fmt::format("{}\t{}\t{}\t{}\t{}\t{}\t{}\n", name, r.videos, r.frames, r.pair_sft,
                         r.pair_dpo, r.seq_sft, r.seq_dpo);
    };
    for (const auto& [name, r] : rows) line(name, r);
    line("Total", total());
    return out;
  }
};

inline std::string source_tag(const FrameSequence& s) { return s.source.empty() ? "untagged" : s.source; }

// Videos and frames are distinct (video_id) and (video_id, index) values
// referenced by the records, attributed to the record's source dataset.
inline StatsTable dataset_stats(const std::vector<SftRecord>& sft, const std::vector<PreferenceRecord>& dpo) {
  StatsTable table;
  std::map<std::string, std::set<std::string>> videos;
  std::map<std::string, std::set<std::pair<std::string, int>>> frames;
  auto see = [&](const FrameSequence& s) {
    const auto tag = source_tag(s);
    table.rows[tag];
    for (const auto& f : s.frames) {
      videos[tag].insert(f.video_id);
      frames[tag].insert({f.video_id, f.index});
    }
  };
  for (const auto& r : sft) {
    see(r.frames);
    auto& row = table.rows[source_tag(r.frames)];
    (r.stage == Stage::pair ? row.pair_sft : row.seq_sft)++;
  }
  for (const auto& r : dpo) {
    see(r.frames);
    auto& row = table.rows[source_tag(r.frames)];
    (r.stage == Stage::pair ? row.pair_dpo : row.seq_dpo)++;
  }
  for (auto& [tag, row] : table.rows) {
    row.videos = videos[tag].size();
    row.frames = frames[tag].size();
  }
  return table;
}

}  // namespace framecap
