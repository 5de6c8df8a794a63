#include <gtest/gtest.h>

#include "framecap/progression.hpp"
#include "test_support.hpp"

using namespace framecap;

namespace {

std::vector<ChangeVerdict> votes(std::initializer_list<ChangeLabel> labels) {
  std::vector<ChangeVerdict> out;
  std::size_t i = 0;
  for (auto l : labels) {
    ChangeVerdict v;
    v.pair = {"v", 0, 1};
    v.candidate_index = i;
    v.judge_id = fmt::format("j{}", i % 2);
    v.label = l;
    out.push_back(v);
    ++i;
  }
  return out;
}

constexpr auto C = ChangeLabel::change;
constexpr auto N = ChangeLabel::no_change;
constexpr auto U = ChangeLabel::unsure;

PairJudgment judgment(const std::string& judge, const std::string& c1, const std::string& c2,
                      ProgressionMode mode = ProgressionMode::pseudo) {
  PairJudgment j;
  j.judge_id = judge;
  j.caption1 = c1;
  j.caption2 = c2;
  j.mode = mode;
  if (mode == ProgressionMode::eval) j.action = "welding";
  j.pair = {"v", 0, 1};
  return j;
}

}  // namespace

TEST(JudgePairChange, OptionMapping) {
  Gateway gw;
  gw.add_mock("b", fctest::constant_reply("B"));
  gw.add_mock("c", fctest::constant_reply("C"));
  gw.add_mock("a", fctest::constant_reply("A"));
  gw.add_mock("x", fctest::constant_reply("I cannot tell"));
  EXPECT_EQ(judge_pair_change(gw, judgment("b", "d1", "d2")).label, ChangeLabel::change);
  EXPECT_EQ(judge_pair_change(gw, judgment("c", "d1", "d2")).label, ChangeLabel::unsure);
  EXPECT_EQ(judge_pair_change(gw, judgment("c", "d1", "d2", ProgressionMode::eval)).label, ChangeLabel::unsure);
  EXPECT_EQ(judge_pair_change(gw, judgment("a", "d1", "d2", ProgressionMode::eval)).label, ChangeLabel::change);
  EXPECT_EQ(judge_pair_change(gw, judgment("b", "d1", "d2", ProgressionMode::eval)).label, ChangeLabel::no_change);
  EXPECT_EQ(judge_pair_change(gw, judgment("x", "d1", "d2")).label, ChangeLabel::unsure);
  auto no_action = judgment("a", "d1", "d2", ProgressionMode::eval);
  no_action.action.reset();
  EXPECT_THROW(judge_pair_change(gw, no_action), ValidationError);
}

TEST(JudgePairChange, FaithfulJudgeOnIdenticalCaptions) {
  Gateway gw;
  gw.add_mock("f", fctest::faithful_text_judge());
  auto v = judge_pair_change(gw, judgment("f", "the egg is whole", "the egg is whole"));
  EXPECT_EQ(v.reply, "A");
  EXPECT_EQ(v.label, ChangeLabel::no_change);
  EXPECT_EQ(v.judge_id, "f");
  EXPECT_EQ(v.mode, ProgressionMode::pseudo);
  EXPECT_EQ(judge_pair_change(gw, judgment("f", "a", "b")).label, ChangeLabel::change);
}

TEST(JudgePairChange, GatewayErrorsPropagate) {
  Gateway gw;
  gw.add_mock("e", MockScript{});
  EXPECT_THROW(judge_pair_change(gw, judgment("e", "a", "b")), RetriesExhaustedError);
}

TEST(Consensus, Examples) {
  auto c = consensus_change(votes({C, C, N}));
  EXPECT_EQ(c.label, ConsensusValue::change);
  EXPECT_EQ(c.votes_for, 2);
  EXPECT_EQ(c.votes_against, 1);
  EXPECT_EQ(consensus_change(votes({N, N, N, N, N, N})).label, ConsensusValue::no_change);
  EXPECT_EQ(consensus_change(votes({C, N})).label, ConsensusValue::indeterminate);
  auto a = consensus_change(votes({U, U}));
  EXPECT_EQ(a.label, ConsensusValue::indeterminate);
  EXPECT_EQ(a.abstentions, 2);
  EXPECT_THROW(consensus_change({}), ValidationError);
}

TEST(Consensus, PerJudgeFirst) {
  // j0 votes C, C (candidates 0, 2); j1 votes N, U (candidates 1, 3).
  auto v = votes({C, N, C, U});
  EXPECT_EQ(consensus_change(v, Aggregation::pooled).label, ConsensusValue::change);
  auto per = consensus_change(v, Aggregation::per_judge_first);
  EXPECT_EQ(per.votes_for, 1);
  EXPECT_EQ(per.votes_against, 1);
  EXPECT_EQ(per.label, ConsensusValue::indeterminate);
}

TEST(ClassifyPair, Rules) {
  ConsensusLabel ch{{"v", 0, 1}, ConsensusValue::change, 2, 1, 0};
  ConsensusLabel no{{"v", 0, 1}, ConsensusValue::no_change, 1, 2, 0};
  ConsensusLabel ind{{"v", 0, 1}, ConsensusValue::indeterminate, 1, 1, 0};
  EXPECT_EQ(classify_pair(C, ch), PairClass::pass);
  EXPECT_EQ(classify_pair(C, no), PairClass::fail);
  EXPECT_EQ(classify_pair(N, no), PairClass::pass);
  for (auto l : {C, N, U}) EXPECT_EQ(classify_pair(l, ind), PairClass::skip);
  EXPECT_EQ(classify_pair(U, ch), PairClass::skip);
}

TEST(CandidateLabel, MajorityOverJudges) {
  EXPECT_EQ(candidate_label(votes({C, C, N})), C);
  EXPECT_EQ(candidate_label(votes({C, N})), U);
  EXPECT_EQ(candidate_label({}), U);
}

TEST(DistinctFrames, Examples) {
  using V = ConsensusValue;
  EXPECT_EQ(distinct_frames(4, {V::change, V::change, V::change}).positions, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(distinct_frames(4, {V::no_change, V::change, V::no_change}).positions, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(distinct_frames(2, {V::no_change}).positions, (std::vector<std::size_t>{0}));
  auto d = distinct_frames(3, {V::indeterminate, V::change});
  EXPECT_EQ(d.positions, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(d.indeterminate_pairs, (std::vector<std::size_t>{0}));
  EXPECT_THROW(distinct_frames(3, {V::change}), ValidationError);
}

TEST(BalancedAccuracy, Examples) {
  EXPECT_DOUBLE_EQ(balanced_accuracy({true, false, true, false}, {true, false, true, false}), 1.0);
  // TPR 0, TNR 1.
  EXPECT_DOUBLE_EQ(balanced_accuracy({false, false, false, false}, {true, true, false, false}), 0.5);
  // TPR 2/3, TNR 1/1.
  EXPECT_DOUBLE_EQ(balanced_accuracy({true, true, false, false}, {true, true, true, false}), (2.0 / 3.0 + 1.0) / 2.0);
  using B = std::vector<bool>;
  EXPECT_THROW(balanced_accuracy(B{true}, B{true}), ValidationError);
  EXPECT_THROW(balanced_accuracy(B{true}, B{true, false}), ValidationError);
}

TEST(ProgressionRecords, Roundtrip) {
  fctest::TempDir d;
  auto v = votes({C, U});
  v[0].id = "v/c0/0-1/j0";
  v[0].reply = "B";
  EXPECT_EQ(roundtrip_records((d / "v.jsonl").string(), v), v);
  std::vector<ConsensusLabel> c{consensus_change(v)};
  EXPECT_EQ(roundtrip_records((d / "c.jsonl").string(), c), c);
  std::vector<GoldProgression> g{{{"v", 0, 1}, true, "ann"}, {{"v", 1, 2}, false, "ann"}};
  EXPECT_EQ(roundtrip_records((d / "g.jsonl").string(), g), g);
}
