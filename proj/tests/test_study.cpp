#include <gtest/gtest.h>

#include <thread>

#include "framecap/study.hpp"
#include "test_support.hpp"

using namespace framecap;

namespace {

const std::vector<std::string> kModels{"gpt-4o", "gemini-pro", "llava-ov", "qwen2-vl", "progress-captioner"};

struct Fixture {
  std::vector<FrameSequence> items;
  std::vector<CaptionSequence> captions;
};

Fixture fixture(const std::vector<std::size_t>& lengths, const std::vector<std::string>& models = kModels) {
  Fixture f;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    f.items.push_back(fctest::make_sequence(fmt::format("seq{}", i), lengths[i]));
    for (const auto& m : models) {
      CaptionSequence c{f.items.back().id, m, ContextMode::full_sequence, 0, {}};
      for (std::size_t k = 0; k < lengths[i]; ++k) c.captions.push_back(fmt::format("{} says frame {}", m, k));
      f.captions.push_back(std::move(c));
    }
  }
  return f;
}

std::string fixed_now() { return "2024-01-01T00:00:00Z"; }

StudyResponse resp(const std::string& study, const std::string& participant, const std::string& item,
                   std::size_t frame, std::string best, std::optional<std::string> second = std::nullopt) {
  return {study, participant, item, frame, std::move(best), std::move(second), ""};
}

std::vector<StudyResponse> picks(const std::vector<std::pair<std::string, std::optional<std::string>>>& choices) {
  std::vector<StudyResponse> out;
  for (std::size_t i = 0; i < choices.size(); ++i) out.push_back(resp("s", "p", "i", i, choices[i].first, choices[i].second));
  return out;
}

const ModelRate& rate_of(const SelectionReport& r, const std::string& model) {
  for (const auto& m : r.models) {
    if (m.model == model) return m;
  }
  throw std::runtime_error("no model " + model);
}

ProgressionAnnotation ann(const std::string& annotator, int first, bool progression) {
  return {"s", {"v", first, first + 1}, progression, annotator, ""};
}

}  // namespace

TEST(SelectionRates, Arithmetic) {
  const std::map<std::string, std::string> model_of{{"m1", "A"}, {"m2", "B"}};
  std::vector<std::pair<std::string, std::optional<std::string>>> choices;
  for (int i = 0; i < 3; ++i) choices.push_back({"m1", "m2"});
  choices.push_back({"m1", std::nullopt});
  for (int i = 0; i < 2; ++i) choices.push_back({"m2", "m1"});
  for (int i = 0; i < 4; ++i) choices.push_back({"none", std::nullopt});
  auto r = selection_rates(picks(choices), model_of);
  EXPECT_EQ(r.total, 10u);
  EXPECT_DOUBLE_EQ(rate_of(r, "A").best_rate, 40.0);
  EXPECT_DOUBLE_EQ(rate_of(r, "A").top2_rate, 60.0);
  EXPECT_DOUBLE_EQ(rate_of(r, "B").best_rate, 20.0);
  EXPECT_DOUBLE_EQ(r.none_rate, 40.0);
  double sum = r.none_rate;
  for (const auto& m : r.models) sum += m.best_rate;
  EXPECT_NEAR(sum, 100.0, 1e-9);
}

TEST(SelectionRates, TopTwo) {
  const std::map<std::string, std::string> model_of{{"m1", "A"}, {"m2", "B"}, {"m3", "C"}};
  std::vector<std::pair<std::string, std::optional<std::string>>> choices;
  for (int i = 0; i < 3; ++i) choices.push_back({"m1", "m3"});
  for (int i = 0; i < 2; ++i) choices.push_back({"m2", "m1"});
  for (int i = 0; i < 5; ++i) choices.push_back({"m3", std::nullopt});
  auto r = selection_rates(picks(choices), model_of);
  EXPECT_DOUBLE_EQ(rate_of(r, "A").top2_rate, 50.0);
}

TEST(SelectionRates, AllNone) {
  auto r = selection_rates(picks({{"none", std::nullopt}, {"none", std::nullopt}}), {{"m1", "A"}, {"m2", "B"}});
  EXPECT_DOUBLE_EQ(r.none_rate, 100.0);
  for (const auto& m : r.models) {
    EXPECT_EQ(m.best_rate, 0.0);
    EXPECT_EQ(m.top2_rate, 0.0);
  }
}

TEST(ExportGold, MajorityAndTies) {
  auto g = export_gold({ann("a", 0, true), ann("b", 0, true), ann("c", 0, true),  // agree
                        ann("a", 1, false), ann("b", 1, false), ann("c", 1, true),  // 2 vs 1
                        ann("a", 2, true), ann("b", 2, false)});                     // tie
  ASSERT_EQ(g.gold.size(), 2u);
  EXPECT_TRUE(g.gold[0].progression);
  EXPECT_FALSE(g.gold[1].progression);
  EXPECT_EQ(g.gold[1].annotator, "majority 2-1");
  ASSERT_EQ(g.unresolved.size(), 1u);
  EXPECT_EQ(g.unresolved[0].first, 2);
}

TEST(ExportGold, LatestPerAnnotatorWins) {
  auto g = export_gold({ann("a", 0, true), ann("b", 0, false), ann("a", 0, false)});
  ASSERT_EQ(g.gold.size(), 1u);
  EXPECT_FALSE(g.gold[0].progression);
}

TEST(StudyService, SlotsForTheStudyCorpus) {
  // 85 sequences totalling 364 frames: 24 of length 5 and 61 of length 4.
  std::vector<std::size_t> lengths(85, 4);
  for (std::size_t i = 0; i < 24; ++i) lengths[i] = 5;
  auto f = fixture(lengths);
  StudyService svc(std::nullopt, fixed_now);
  const auto id = svc.create_study(f.items, f.captions, 7);
  EXPECT_EQ(svc.snapshot(id).slot_count(), 364u);
  std::size_t answered = 0;
  for (;;) {
    auto n = svc.next(id, "p1");
    if (n["done"].get<bool>()) {
      EXPECT_EQ(n["progress"]["answered"], 364);
      break;
    }
    ASSERT_EQ(n["cards"].size(), 5u);
    svc.record_response(resp(id, "p1", n["item_id"], n["frame"], n["cards"][0]["key"]));
    ++answered;
  }
  EXPECT_EQ(answered, 364u);
  EXPECT_EQ(svc.responses(id).size(), 364u);
}

TEST(StudyService, CreationChecks) {
  StudyService svc(std::nullopt, fixed_now);
  auto one = fixture({3}, {"solo"});
  try {
    svc.create_study(one.items, one.captions, 1);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_STREQ(e.what(), "need >=2 models to rank");
  }
  auto gap = fixture({3});
  gap.captions[1].captions[2] = " ";
  try {
    svc.create_study(gap.items, gap.captions, 1);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(std::string(e.what()), "model 'gemini-pro' lacks a caption for frame seq0#2");
  }
}

TEST(StudyService, DeterministicShufflesAndAnonymity) {
  auto f = fixture({3, 2});
  StudyService a(std::nullopt, fixed_now), b(std::nullopt, fixed_now);
  const auto id = a.create_study(f.items, f.captions, 42);
  EXPECT_EQ(b.create_study(f.items, f.captions, 42), id);
  EXPECT_EQ(a.next(id, "p").dump(), b.next(id, "p").dump());
  EXPECT_EQ(a.snapshot(id).key_of, b.snapshot(id).key_of);
  // Different participants see different card orders somewhere.
  std::set<std::string> orders;
  for (int p = 0; p < 12; ++p) orders.insert(a.next(id, fmt::format("p{}", p))["cards"].dump());
  EXPECT_GT(orders.size(), 1u);
  const auto shown = a.next(id, "p").dump();
  for (const auto& m : kModels) {
    // Captions mention model names in this fixture; keys never do.
    for (const auto& card : a.next(id, "p")["cards"]) EXPECT_NE(card["key"].get<std::string>(), m);
  }
  auto s = a.snapshot(id);
  for (const auto& [key, model] : s.model_of) EXPECT_EQ(s.key_of.at(model), key);
  EXPECT_NE(shown.find("\"key\":\"m"), std::string::npos);
}

TEST(StudyService, ResponseRules) {
  auto f = fixture({3});
  StudyService svc(std::nullopt, fixed_now);
  const auto id = svc.create_study(f.items, f.captions, 1);
  EXPECT_EQ(svc.record_response(resp(id, "p", "seq0", 0, "m2", "m4")), "stored");
  EXPECT_THROW(svc.record_response(resp(id, "p", "seq0", 1, "m2", "m2")), ValidationError);
  EXPECT_THROW(svc.record_response(resp(id, "p", "seq0", 1, "none", "m2")), ValidationError);
  EXPECT_THROW(svc.record_response(resp(id, "p", "seq0", 3, "m1")), ValidationError);
  EXPECT_THROW(svc.record_response(resp(id, "p", "seq9", 0, "m1")), ValidationError);
  EXPECT_THROW(svc.record_response(resp(id, "p", "seq0", 0, "gpt-4o")), ValidationError);
  EXPECT_THROW(svc.record_response(resp("st-missing", "p", "seq0", 0, "m1")), StudyService::NotFound);
  EXPECT_EQ(svc.record_response(resp(id, "p", "seq0", 0, "m2", "m4")), "unchanged");
  EXPECT_EQ(svc.record_response(resp(id, "p", "seq0", 0, "m3")), "superseded");
  auto rs = svc.responses(id);
  ASSERT_EQ(rs.size(), 1u);
  EXPECT_EQ(rs[0].best, "m3");
  EXPECT_FALSE(rs[0].second.has_value());
}

TEST(StudyService, PersistsAndReplays) {
  fctest::TempDir d;
  auto f = fixture({3, 2});
  std::string id;
  {
    StudyService svc(d.path(), fixed_now);
    id = svc.create_study(f.items, f.captions, 9);
    svc.record_response(resp(id, "p", "seq0", 0, "m1", "m2"));
    svc.record_response(resp(id, "p", "seq0", 0, "m5"));
    svc.record_response(resp(id, "q", "seq1", 1, "none"));
    svc.record_annotation({id, {"seq0", 0, 1}, true, "ann1", ""});
    svc.record_annotation({id, {"seq0", 0, 1}, false, "ann1", ""});
    EXPECT_THROW(svc.record_annotation({id, {"seq0", 0, 2}, true, "ann1", ""}), ValidationError);
  }
  StudyService again(d.path(), fixed_now);
  ASSERT_TRUE(again.has_study(id));
  auto rs = again.responses(id);
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(rs[0].best, "m5");
  auto g = again.gold(id);
  ASSERT_EQ(g.gold.size(), 1u);
  EXPECT_FALSE(g.gold[0].progression);
  EXPECT_DOUBLE_EQ(again.report(id).none_rate, 50.0);
  // Creating the same study again does not duplicate it.
  EXPECT_EQ(again.create_study(f.items, f.captions, 9), id);
}

TEST(StudyService, CorruptLogNamesLine) {
  fctest::TempDir d;
  { std::ofstream(d / "events.jsonl") << "\n{broken\n"; }
  try {
    StudyService svc(d.path(), fixed_now);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(StudyHttp, EndToEnd) {
  httplib::Server server;
  StudyService svc(std::nullopt, fixed_now);
  install_study_routes(server, svc, std::nullopt);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto f = fixture({2});
  Json body;
  body["seed"] = 3;
  body["items"] = Json::array();
  for (const auto& s : f.items) body["items"].push_back(to_record(s));
  body["captions"] = Json::array();
  for (const auto& c : f.captions) body["captions"].push_back(to_record(c));
  auto created = cli.Post("/studies", body.dump(), "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);
  const auto id = Json::parse(created->body)["study_id"].get<std::string>();

  auto next = cli.Get("/studies/" + id + "/next?participant=p7");
  ASSERT_TRUE(next);
  EXPECT_EQ(next->status, 200);
  auto n = Json::parse(next->body);
  for (const auto& m : kModels) EXPECT_EQ(n.dump().find("\"" + m + "\""), std::string::npos);
  const std::string key = n["cards"][1]["key"];

  Json r{{"study_id", id}, {"participant", "p7"}, {"item_id", n["item_id"]}, {"frame", n["frame"]}, {"best", key}};
  auto posted = cli.Post("/responses", r.dump(), "application/json");
  ASSERT_TRUE(posted);
  EXPECT_EQ(Json::parse(posted->body)["status"], "stored");
  r["second"] = key;
  EXPECT_EQ(cli.Post("/responses", r.dump(), "application/json")->status, 400);
  EXPECT_EQ(cli.Post("/responses", "{not json", "application/json")->status, 400);
  EXPECT_EQ(cli.Get("/studies/st-nope/report")->status, 404);

  Json a{{"study_id", id}, {"annotator", "x"}, {"pair", {{"video_id", "seq0"}, {"first", 0}, {"second", 1}}},
         {"label", "progression"}};
  EXPECT_EQ(cli.Post("/annotations", a.dump(), "application/json")->status, 200);
  a["label"] = "maybe";
  EXPECT_EQ(cli.Post("/annotations", a.dump(), "application/json")->status, 400);

  auto report = Json::parse(cli.Get("/studies/" + id + "/report")->body);
  EXPECT_EQ(report["total"], 1);
  auto gold = Json::parse(cli.Get("/studies/" + id + "/gold")->body);
  EXPECT_EQ(gold["gold"].size(), 1u);
  auto pairs = Json::parse(cli.Get("/studies/" + id + "/pairs")->body);
  EXPECT_EQ(pairs["pairs"].size(), 1u);

  server.stop();
  th.join();
}
