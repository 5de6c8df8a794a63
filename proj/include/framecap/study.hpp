#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "framecap/core.hpp"
#include "framecap/digest.hpp"
#include "framecap/gateway.hpp"
#include "framecap/progression.hpp"
#include "framecap/rng.hpp"

// Caption-preference study and progression annotation service.
//
// Storage is one append-only JSONL event log (<data>/events.jsonl) replayed
// on start. Later responses by the same participant for the same frame
// supersede earlier ones; the same holds for annotations per annotator and
// pair. Participants only ever see anonymized model keys m1..mN.
namespace framecap {

inline constexpr std::string_view kNone = "none";

struct StudyItem {
  FrameSequence sequence;
  std::map<std::string, std::vector<std::string>> captions;  // model name -> per-frame captions
};

struct Study {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<std::string> models;           // sorted real names
  std::map<std::string, std::string> key_of;  // model -> "m<k>"
  std::map<std::string, std::string> model_of;
  std::vector<StudyItem> items;
  std::map<std::string, std::size_t> item_index;

  std::size_t slot_count() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.sequence.length();
    return n;
  }
};

struct StudyResponse {
  std::string study_id;
  std::string participant;
  std::string item_id;
  std::size_t frame = 0;  // position within the item
  std::string best;       // model key or "none"
  std::optional<std::string> second;
  std::string timestamp;

  bool same_choice(const StudyResponse& o) const { return best == o.best && second == o.second; }
};

struct ProgressionAnnotation {
  std::string study_id;
  PairRef pair;
  bool progression = false;
  std::string annotator;
  std::string timestamp;
};

struct ModelRate {
  std::string model;
  std::string key;
  std::size_t best = 0;
  std::size_t second = 0;
  double best_rate = 0;  // percent
  double top2_rate = 0;  // percent
};

struct SelectionReport {
  std::size_t total = 0;
  std::size_t none = 0;
  double none_rate = 0;
  std::vector<ModelRate> models;
};

struct GoldExport {
  std::vector<GoldProgression> gold;
  std::vector<PairRef> unresolved;
};

// Rates over effective responses. "none" responses stay in the denominator.
inline SelectionReport selection_rates(const std::vector<StudyResponse>& responses,
                                       const std::map<std::string, std::string>& model_of) {
  SelectionReport r;
  r.total = responses.size();
  std::map<std::string, ModelRate> by_key;
  for (const auto& [key, model] : model_of) by_key[key] = {model, key, 0, 0, 0, 0};
  for (const auto& x : responses) {
    if (x.best == kNone) {
      ++r.none;
      continue;
    }
    ++by_key.at(x.best).best;
    if (x.second) ++by_key.at(*x.second).second;
  }
  auto pct = [&](std::size_t n) { return r.total ? 100.0 * static_cast<double>(n) / static_cast<double>(r.total) : 0.0; };
  r.none_rate = pct(r.none);
  for (auto& [key, m] : by_key) {
    m.best_rate = pct(m.best);
    m.top2_rate = pct(m.best + m.second);
    r.models.push_back(m);
  }
  std::sort(r.models.begin(), r.models.end(), [](const auto& a, const auto& b) { return a.model < b.model; });
  return r;
}

// Latest label per annotator, then majority; ties are unresolved.
inline GoldExport export_gold(const std::vector<ProgressionAnnotation>& annotations) {
  std::map<PairRef, std::map<std::string, bool>> latest;
  for (const auto& a : annotations) latest[a.pair][a.annotator] = a.progression;
  GoldExport out;
  for (const auto& [pair, votes] : latest) {
    int yes = 0, no = 0;
    for (const auto& [annotator, v] : votes) (v ? yes : no)++;
    if (yes == no) {
      out.unresolved.push_back(pair);
      continue;
    }
    out.gold.push_back({pair, yes > no, fmt::format("majority {}-{}", std::max(yes, no), std::min(yes, no))});
  }
  return out;
}

inline std::string utc_now_iso() {
  auto now = std::chrono::system_clock::now();
  auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class StudyService {
 public:
  using Now = std::function<std::string()>;

  // Without a data dir the service is in-memory only.
  explicit StudyService(std::optional<std::filesystem::path> data_dir = std::nullopt, Now now = utc_now_iso)
      : data_dir_(std::move(data_dir)), now_(std::move(now)) {
    if (!data_dir_) return;
    std::filesystem::create_directories(*data_dir_);
    const auto log = *data_dir_ / "events.jsonl";
    if (std::filesystem::exists(log)) replay(log);
    out_.open(log, std::ios::app | std::ios::binary);
    if (!out_) throw Error("cannot open study log " + log.string());
  }

  // Returns the study id. Creating an identical study again is a no-op.
  std::string create_study(const std::vector<FrameSequence>& sequences, const std::vector<CaptionSequence>& captions,
                           std::uint64_t seed) {
    Json event = create_event(sequences, captions, seed);
    std::unique_lock lock(mu_);
    Study s = build_study(event);
    if (studies_.count(s.id)) return s.id;
    append(event);
    std::string id = s.id;
    studies_.emplace(id, std::move(s));
    return id;
  }

  // Next unanswered frame for a participant, or {"done": true}.
  Json next(const std::string& study_id, const std::string& participant) const {
    if (participant.empty()) throw ValidationError("participant is required");
    std::shared_lock lock(mu_);
    const Study& s = study(study_id);
    std::size_t answered = 0;
    std::optional<std::pair<std::size_t, std::size_t>> pending;
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      for (std::size_t f = 0; f < s.items[i].sequence.length(); ++f) {
        if (effective_.count(slot_key(study_id, participant, s.items[i].sequence.id, f))) {
          ++answered;
        } else if (!pending) {
          pending = {{i, f}};
        }
      }
    }
    Json j;
    j["study_id"] = study_id;
    j["progress"] = {{"answered", answered}, {"total", s.slot_count()}};
    if (!pending) {
      j["done"] = true;
      return j;
    }
    const auto& item = s.items[pending->first];
    const std::size_t f = pending->second;
    j["done"] = false;
    j["item_id"] = item.sequence.id;
    j["frame"] = f;
    j["action"] = item.sequence.action;
    j["image"] = media_url(item.sequence.frames[f].uri);
    Json strip = Json::array();
    for (const auto& fr : item.sequence.frames) strip.push_back(media_url(fr.uri));
    j["sequence"] = std::move(strip);
    Json cards = Json::array();
    for (auto k : presentation_order(s, participant, item.sequence.id, f)) {
      const auto& model = s.models[k];
      cards.push_back({{"key", s.key_of.at(model)}, {"caption", item.captions.at(model)[f]}});
    }
    j["cards"] = std::move(cards);
    return j;
  }

  // Card order shown to a participant for one frame.
  std::vector<std::size_t> presentation_order(const Study& s, const std::string& participant,
                                              const std::string& item_id, std::size_t frame) const {
    return seeded_permutation(s.models.size(),
                              derive_seed(s.seed, fmt::format("present/{}/{}/{}", participant, item_id, frame)));
  }

  // "stored", "superseded" or "unchanged".
  std::string record_response(StudyResponse r) {
    std::unique_lock lock(mu_);
    const Study& s = study(r.study_id);
    if (r.participant.empty()) throw ValidationError("participant is required");
    auto it = s.item_index.find(r.item_id);
    if (it == s.item_index.end()) throw ValidationError("unknown item '" + r.item_id + "'");
    if (r.frame >= s.items[it->second].sequence.length()) {
      throw ValidationError(fmt::format("frame {} outside item '{}'", r.frame, r.item_id));
    }
    if (r.best.empty()) throw ValidationError("best is required");
    if (r.best != kNone && !s.model_of.count(r.best)) throw ValidationError("unknown model key '" + r.best + "'");
    if (r.second) {
      if (r.best == kNone) throw ValidationError("\"none\" excludes a second pick");
      if (*r.second == kNone) {
        r.second.reset();
      } else if (!s.model_of.count(*r.second)) {
        throw ValidationError("unknown model key '" + *r.second + "'");
      } else if (*r.second == r.best) {
        throw ValidationError("best and second must differ");
      }
    }
    const auto key = slot_key(r.study_id, r.participant, r.item_id, r.frame);
    auto prev = effective_.find(key);
    if (prev != effective_.end() && responses_[prev->second].same_choice(r)) return "unchanged";
    r.timestamp = now_();
    append(response_event(r));
    const bool superseded = prev != effective_.end();
    apply_response(std::move(r));
    return superseded ? "superseded" : "stored";
  }

  std::string record_annotation(ProgressionAnnotation a) {
    std::unique_lock lock(mu_);
    const Study& s = study(a.study_id);
    if (a.annotator.empty()) throw ValidationError("annotator is required");
    bool found = false;
    for (const auto& item : s.items) {
      const auto& fr = item.sequence.frames;
      for (std::size_t p = 0; p + 1 < fr.size(); ++p) {
        found = found || PairRef::of(fr[p], fr[p + 1]) == a.pair;
      }
    }
    if (!found) throw ValidationError("pair " + a.pair.key() + " is not an adjacent pair of this study");
    a.timestamp = now_();
    append(annotation_event(a));
    annotations_[a.study_id].push_back(std::move(a));
    return "stored";
  }

  // Effective responses (latest per participant and frame), in log order.
  std::vector<StudyResponse> responses(const std::string& study_id) const {
    std::shared_lock lock(mu_);
    study(study_id);
    std::vector<std::size_t> idx;
    for (const auto& [key, i] : effective_) {
      if (responses_[i].study_id == study_id) idx.push_back(i);
    }
    std::sort(idx.begin(), idx.end());
    std::vector<StudyResponse> out;
    for (auto i : idx) out.push_back(responses_[i]);
    return out;
  }

  SelectionReport report(const std::string& study_id) const {
    auto rs = responses(study_id);
    std::shared_lock lock(mu_);
    return selection_rates(rs, study(study_id).model_of);
  }

  GoldExport gold(const std::string& study_id) const {
    std::shared_lock lock(mu_);
    study(study_id);
    auto it = annotations_.find(study_id);
    return export_gold(it == annotations_.end() ? std::vector<ProgressionAnnotation>{} : it->second);
  }

  Study snapshot(const std::string& study_id) const {
    std::shared_lock lock(mu_);
    return study(study_id);
  }

  bool has_study(const std::string& id) const {
    std::shared_lock lock(mu_);
    return studies_.count(id) > 0;
  }

 private:
  static std::string slot_key(const std::string& study, const std::string& participant, const std::string& item,
                              std::size_t frame) {
    return fmt::format("{}\x1f{}\x1f{}\x1f{}", study, participant, item, frame);
  }

  static std::string media_url(const std::string& uri) {
    if (ImageStore::is_remote(uri)) return uri;
    std::string u = uri;
    while (u.starts_with("./")) u = u.substr(2);
    return "/media/" + u;
  }

  const Study& study(const std::string& id) const {
    auto it = studies_.find(id);
    if (it == studies_.end()) throw NotFound("unknown study '" + id + "'");
    return it->second;
  }

 public:
  struct NotFound : ValidationError {
    using ValidationError::ValidationError;
  };

 private:
  static Json create_event(const std::vector<FrameSequence>& sequences, const std::vector<CaptionSequence>& captions,
                           std::uint64_t seed) {
    Json e;
    e["version"] = kSchemaVersion;
    e["type"] = "create";
    e["seed"] = seed;
    Json items = Json::array();
    for (const auto& s : sequences) items.push_back(to_record(s));
    e["items"] = std::move(items);
    Json caps = Json::array();
    for (const auto& c : captions) caps.push_back(to_record(c));
    e["captions"] = std::move(caps);
    return e;
  }

  static Study build_study(const Json& e) {
    Study s;
    s.seed = e.at("seed").get<std::uint64_t>();
    std::set<std::string> models;
    std::map<std::string, std::map<std::string, const Json*>> caps;  // model -> seq id
    std::vector<CaptionSequence> parsed;
    for (const auto& c : e.at("captions")) parsed.push_back(from_record(c, std::type_identity<CaptionSequence>{}));
    for (const auto& c : parsed) models.insert(c.backend);
    if (models.size() < 2) throw ValidationError("need >=2 models to rank");
    s.models.assign(models.begin(), models.end());
    for (const auto& j : e.at("items")) {
      StudyItem item;
      item.sequence = from_record(j, std::type_identity<FrameSequence>{});
      require_valid(validate_sequence(item.sequence, {1, 64, false}), "study item '" + item.sequence.id + "'");
      if (s.item_index.count(item.sequence.id)) throw ValidationError("duplicate item '" + item.sequence.id + "'");
      s.item_index[item.sequence.id] = s.items.size();
      s.items.push_back(std::move(item));
    }
    if (s.items.empty()) throw ValidationError("study has no items");
    for (const auto& c : parsed) {
      auto it = s.item_index.find(c.sequence_id);
      if (it == s.item_index.end()) {
        throw ValidationError("captions of model '" + c.backend + "' reference unknown item '" + c.sequence_id + "'");
      }
      auto& slot = s.items[it->second].captions[c.backend];
      if (!slot.empty()) throw ValidationError("model '" + c.backend + "' has two caption sets for '" + c.sequence_id + "'");
      slot = c.captions;
    }
    for (const auto& item : s.items) {
      for (const auto& m : s.models) {
        auto it = item.captions.find(m);
        for (std::size_t f = 0; f < item.sequence.length(); ++f) {
          if (it == item.captions.end() || f >= it->second.size() || trim(it->second[f]).empty()) {
            const auto& fr = item.sequence.frames[f];
            throw ValidationError(fmt::format("model '{}' lacks a caption for frame {}#{}", m, fr.video_id, fr.index));
          }
        }
      }
    }
    auto order = seeded_permutation(s.models.size(), derive_seed(s.seed, "anonymize"));
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto& model = s.models[order[k]];
      const std::string key = fmt::format("m{}", k + 1);
      s.key_of[model] = key;
      s.model_of[key] = model;
    }
    s.id = "st-" + sha256_hex(e.dump()).substr(0, 12);
    return s;
  }

  static Json response_event(const StudyResponse& r) {
    Json e;
    e["version"] = kSchemaVersion;
    e["type"] = "response";
    e["study_id"] = r.study_id;
    e["participant"] = r.participant;
    e["item_id"] = r.item_id;
    e["frame"] = r.frame;
    e["best"] = r.best;
    e["second"] = r.second ? Json(*r.second) : Json(nullptr);
    e["timestamp"] = r.timestamp;
    return e;
  }

  static Json annotation_event(const ProgressionAnnotation& a) {
    Json e;
    e["version"] = kSchemaVersion;
    e["type"] = "annotation";
    e["study_id"] = a.study_id;
    e["pair"] = pair_json(a.pair);
    e["label"] = a.progression ? "progression" : "no_progression";
    e["annotator"] = a.annotator;
    e["timestamp"] = a.timestamp;
    return e;
  }

  void apply_response(StudyResponse r) {
    const auto key = slot_key(r.study_id, r.participant, r.item_id, r.frame);
    responses_.push_back(std::move(r));
    effective_[key] = responses_.size() - 1;
  }

  void append(const Json& e) {
    if (!out_.is_open()) return;
    out_ << e.dump() << '\n';
    out_.flush();
    if (!out_) throw Error("study log write failed");
  }

  void replay(const std::filesystem::path& log) {
    std::ifstream in(log, std::ios::binary);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      try {
        Json e = Json::parse(line);
        const auto type = e.at("type").get<std::string>();
        if (type == "create") {
          Study s = build_study(e);
          std::string id = s.id;
          studies_.emplace(id, std::move(s));
        } else if (type == "response") {
          StudyResponse r;
          r.study_id = e.at("study_id").get<std::string>();
          r.participant = e.at("participant").get<std::string>();
          r.item_id = e.at("item_id").get<std::string>();
          r.frame = e.at("frame").get<std::size_t>();
          r.best = e.at("best").get<std::string>();
          if (!e.at("second").is_null()) r.second = e.at("second").get<std::string>();
          r.timestamp = e.at("timestamp").get<std::string>();
          apply_response(std::move(r));
        } else if (type == "annotation") {
          ProgressionAnnotation a;
          a.study_id = e.at("study_id").get<std::string>();
          a.pair = pair_from_json(e.at("pair"));
          a.progression = e.at("label").get<std::string>() == "progression";
          a.annotator = e.at("annotator").get<std::string>();
          a.timestamp = e.at("timestamp").get<std::string>();
          annotations_[a.study_id].push_back(std::move(a));
        } else {
          throw ParseError("unknown event type '" + type + "'");
        }
      } catch (const std::exception& ex) {
        throw ParseError(fmt::format("{}: line {}: {}", log.string(), lineno, ex.what()));
      }
    }
  }

  std::optional<std::filesystem::path> data_dir_;
  Now now_;
  mutable std::shared_mutex mu_;
  std::ofstream out_;
  std::map<std::string, Study> studies_;
  std::vector<StudyResponse> responses_;
  std::map<std::string, std::size_t> effective_;  // slot -> index into responses_
  std::map<std::string, std::vector<ProgressionAnnotation>> annotations_;
};

// ---------------------------------------------------------------------------
// HTTP surface
//
//   POST /studies              {"items": [FrameSequence], "captions": [CaptionSequence], "seed": n}
//                              -> {"study_id", "models", "slots"}
//   GET  /studies/{id}/next?participant=p
//                              -> {"done", "item_id", "frame", "action", "image", "sequence",
//                                  "cards": [{"key", "caption"}], "progress"}
//   GET  /studies/{id}/pairs   -> {"pairs": [{"video_id", "first", "second", "images": [a, b]}]}
//   POST /responses            {"study_id", "participant", "item_id", "frame", "best", "second"?}
//   POST /annotations          {"study_id", "annotator", "pair": {"video_id", "first", "second"},
//                               "label": "progression" | "no_progression"}
//   GET  /studies/{id}/report  -> {"total", "none", "none_rate", "models": [...]}
//   GET  /studies/{id}/gold    -> {"gold": [GoldProgression], "unresolved": [pair]}
//   GET  /media/...            frame images under the media root
// Errors: 400 {"error"} for validation failures, 404 for unknown studies.

inline void install_study_routes(httplib::Server& server, StudyService& svc,
                                 const std::optional<std::filesystem::path>& media_root) {
  auto reply = [](httplib::Response& res, const Json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  auto guarded = [reply](auto fn) {
    return [reply, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const StudyService::NotFound& e) {
        reply(res, {{"error", e.what()}}, 404);
      } catch (const ValidationError& e) {
        reply(res, {{"error", e.what()}}, 400);
      } catch (const ParseError& e) {
        reply(res, {{"error", e.what()}}, 400);
      } catch (const Json::exception& e) {
        reply(res, {{"error", std::string("malformed request: ") + e.what()}}, 400);
      } catch (const std::exception& e) {
        reply(res, {{"error", e.what()}}, 500);
      }
    };
  };

  server.Post("/studies", guarded([&svc, reply](const httplib::Request& req, httplib::Response& res) {
    Json body = Json::parse(req.body);
    std::vector<FrameSequence> items;
    for (const auto& j : body.at("items")) items.push_back(from_record(j, std::type_identity<FrameSequence>{}));
    std::vector<CaptionSequence> caps;
    for (const auto& j : body.at("captions")) caps.push_back(from_record(j, std::type_identity<CaptionSequence>{}));
    const std::uint64_t seed = body.value("seed", std::uint64_t{0});
    auto id = svc.create_study(items, caps, seed);
    auto s = svc.snapshot(id);
    reply(res, {{"study_id", id}, {"models", s.models.size()}, {"slots", s.slot_count()}}, 201);
  }));

  server.Get(R"(/studies/([^/]+)/next)", guarded([&svc, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, svc.next(req.matches[1], req.get_param_value("participant")));
  }));

  server.Get(R"(/studies/([^/]+)/pairs)", guarded([&svc, reply](const httplib::Request& req, httplib::Response& res) {
    auto s = svc.snapshot(req.matches[1]);
    Json pairs = Json::array();
    for (const auto& item : s.items) {
      const auto& fr = item.sequence.frames;
      for (std::size_t p = 0; p + 1 < fr.size(); ++p) {
        Json j = pair_json(PairRef::of(fr[p], fr[p + 1]));
        j["images"] = {fr[p].uri, fr[p + 1].uri};
        pairs.push_back(std::move(j));
      }
    }
    reply(res, {{"pairs", std::move(pairs)}});
  }));

  server.Post("/responses", guarded([&svc, reply](const httplib::Request& req, httplib::Response& res) {
    Json b = Json::parse(req.body);
    StudyResponse r;
    r.study_id = b.at("study_id").get<std::string>();
    r.participant = b.at("participant").get<std::string>();
    r.item_id = b.at("item_id").get<std::string>();
    r.frame = b.at("frame").get<std::size_t>();
    r.best = b.at("best").get<std::string>();
    if (b.contains("second") && !b.at("second").is_null()) r.second = b.at("second").get<std::string>();
    reply(res, {{"status", svc.record_response(std::move(r))}});
  }));

  server.Post("/annotations", guarded([&svc, reply](const httplib::Request& req, httplib::Response& res) {
    Json b = Json::parse(req.body);
    ProgressionAnnotation a;
    a.study_id = b.at("study_id").get<std::string>();
    a.annotator = b.at("annotator").get<std::string>();
    a.pair = pair_from_json(b.at("pair"));
    const auto label = b.at("label").get<std::string>();
    if (label != "progression" && label != "no_progression") {
      throw ValidationError("label must be progression or no_progression");
    }
    a.progression = label == "progression";
    reply(res, {{"status", svc.record_annotation(std::move(a))}});
  }));

  server.Get(R"(/studies/([^/]+)/report)", guarded([&svc, reply](const httplib::Request& req, httplib::Response& res) {
    auto r = svc.report(req.matches[1]);
    Json models = Json::array();
    for (const auto& m : r.models) {
      models.push_back({{"model", m.model}, {"key", m.key}, {"best", m.best}, {"second", m.second},
                        {"best_rate", quantize6(m.best_rate)}, {"top2_rate", quantize6(m.top2_rate)}});
    }
    reply(res, {{"total", r.total}, {"none", r.none}, {"none_rate", quantize6(r.none_rate)}, {"models", models}});
  }));

  server.Get(R"(/studies/([^/]+)/gold)", guarded([&svc, reply](const httplib::Request& req, httplib::Response& res) {
    auto g = svc.gold(req.matches[1]);
    Json gold = Json::array();
    for (const auto& x : g.gold) gold.push_back(to_record(x));
    Json unresolved = Json::array();
    for (const auto& p : g.unresolved) unresolved.push_back(pair_json(p));
    reply(res, {{"gold", gold}, {"unresolved", unresolved}});
  }));

  if (media_root && !server.set_mount_point("/media", media_root->string())) {
    throw ValidationError("media directory not found: " + media_root->string());
  }
}

}  // namespace framecap
