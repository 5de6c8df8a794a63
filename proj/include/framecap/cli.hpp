#pragma once

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "framecap/apps.hpp"
#include "framecap/bench.hpp"
#include "framecap/config.hpp"
#include "framecap/curate.hpp"
#include "framecap/matching.hpp"
#include "framecap/progression.hpp"
#include "framecap/study.hpp"
#ifdef FRAMECAP_WITH_INGEST
#include "framecap/ingest.hpp"
#endif

// Command-line front end. Exit codes:
//   0  success (also --help)
//   1  validation error: bad flags, config, or input files; unknown subcommand
//   2  runtime failure: backend, I/O, or any other error
namespace framecap {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

struct CliEnv {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
  // Replaceable for tests; defaults to build_gateway.
  std::function<std::unique_ptr<Gateway>(const RunConfig&)> make_gateway;
};

namespace detail {

inline std::map<std::string, CaptionSequence> captions_by_sequence(const std::vector<CaptionSequence>& caps,
                                                                   const std::string& backend) {
  std::map<std::string, CaptionSequence> out;
  for (const auto& c : caps) {
    if (!backend.empty() && c.backend != backend) continue;
    out.emplace(c.sequence_id, c);  // first wins
  }
  return out;
}

inline void ensure_parent(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

inline void write_json_lines(const std::filesystem::path& p, const std::vector<Json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text(p, text);
}

template <typename T>
std::vector<T> read_input(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("input not found: " + path);
  try {
    return read_jsonl<T>(path);
  } catch (const ParseError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline std::string require(const std::string& flag_value, const std::string& fallback, const std::string& what) {
  const std::string v = flag_value.empty() ? fallback : flag_value;
  if (v.empty()) throw ValidationError("no " + what + " configured (flag or config file)");
  return v;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, CliEnv env = {}) {
  if (!env.make_gateway) env.make_gateway = [](const RunConfig& c) { return build_gateway(c); };

  CLI::App app{"framecap: progress-aware frame caption curation and evaluation"};
  app.name("framecap");
  app.require_subcommand(1);

  std::string config_flag;
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::size_t> workers_flag;
  int verbosity = 0;
  bool quiet = false;
  app.add_option("--config", config_flag, "Config file (INI); falls back to $FRAMECAP_CONFIG");
  app.add_option("--seed", seed_flag, "Base seed for every random decision (overrides config)");
  app.add_option("--workers", workers_flag, "Concurrent items")->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", verbosity, "More logging (repeatable)");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  // Shared state filled by subcommand callbacks.
  std::function<int()> action;

  auto load = [&]() {
    RunConfig cfg = load_config(resolve_config_path(config_flag));
    if (seed_flag) cfg.seed = cfg.curate.seed = *seed_flag;
    if (workers_flag) cfg.workers = cfg.curate.workers = *workers_flag;
    return cfg;
  };

  // ---- curate
  auto* curate = app.add_subcommand("curate", "Build Stage-1 (pair) or Stage-2 (sequence) datasets");
  int stage = 1;
  std::string curate_in, curate_out;
  bool dry_run = false;
  curate->add_option("--stage", stage, "1 = frame pairs, 2 = frame sequences")->required()->check(CLI::IsMember({1, 2}));
  curate->add_option("--in", curate_in, "frames.jsonl (FrameSequence records)")->required();
  curate->add_option("--out", curate_out, "Output directory");
  curate->add_flag("--dry-run", dry_run, "Validate and print planned model calls");
  curate->callback([&] {
    action = [&] {
      RunConfig cfg = load();
      const Stage st = stage == 1 ? Stage::pair : Stage::sequence;
      auto items = detail::read_input<FrameSequence>(curate_in);
      auto gw = env.make_gateway(cfg);
      validate_config(cfg.curate, st, gw.get());
      for (const auto& s : items) {
        require_valid(validate_sequence(s, st == Stage::pair ? SequenceRules{2, 2, true} : SequenceRules{3, 6, true}),
                      "input '" + s.id + "'");
      }
      if (dry_run) {
        auto p = plan_calls(st, items, cfg.curate);
        env.out << fmt::format("items: {}\ncaption calls: {}\nprogression calls: {}\nmatching calls (upper bound): {}\n",
                               items.size(), p.caption_calls, p.progression_calls, p.matching_calls_max);
        return kExitOk;
      }
      if (curate_out.empty()) throw ValidationError("--out is required unless --dry-run");
      const std::filesystem::path out(curate_out);
      std::filesystem::create_directories(out);
      auto bundle = st == Stage::pair ? build_stage1(*gw, items, cfg.curate) : build_stage2(*gw, items, cfg.curate);
      const std::string tag = st == Stage::pair ? "pair" : "seq";
      write_jsonl((out / ("sft_" + tag + ".jsonl")).string(), bundle.sft);
      write_jsonl((out / ("dpo_" + tag + ".jsonl")).string(), bundle.dpo);
      write_jsonl((out / "skips.jsonl").string(), bundle.skips);
      write_jsonl((out / "captions.jsonl").string(), bundle.captions);
      write_jsonl((out / "verdicts.jsonl").string(), bundle.verdicts);
      write_jsonl((out / "consensus.jsonl").string(), bundle.consensus);
      write_jsonl((out / "match_outcomes.jsonl").string(), bundle.matches);
      detail::write_text(out / "stats.tsv", dataset_stats(bundle.sft, bundle.dpo).render_tsv());
      spdlog::info("stage {}: {} candidates, {} accepted, {} rejected, {} skipped; {} SFT, {} DPO records", stage,
                   bundle.tally.candidates_in, bundle.tally.accepted, bundle.tally.rejected,
                   bundle.tally.skipped_total(), bundle.sft.size(), bundle.dpo.size());
      return kExitOk;
    };
  });

  // ---- match
  auto* match = app.add_subcommand("match", "Caption matching (pair mode for T=2, sequence mode otherwise)");
  std::string match_in, match_caps, match_out, match_judge, match_backend;
  bool no_shuffle = false;
  match->add_option("--in", match_in, "frames.jsonl")->required();
  match->add_option("--captions", match_caps, "captions.jsonl (CaptionSequence records)")->required();
  match->add_option("--backend", match_backend, "Only use captions from this captioner");
  match->add_option("--judge", match_judge, "Vision judge backend");
  match->add_option("--out", match_out, "match_outcomes.jsonl");
  match->add_flag("--no-shuffle", no_shuffle, "Present captions in frame order");
  match->add_flag("--dry-run", dry_run, "Print planned model calls");
  match->callback([&] {
    action = [&] {
      RunConfig cfg = load();
      const auto judge = detail::require(match_judge, cfg.vision_judge, "vision judge");
      auto items = detail::read_input<FrameSequence>(match_in);
      auto caps = detail::captions_by_sequence(detail::read_input<CaptionSequence>(match_caps), match_backend);
      auto gw = env.make_gateway(cfg);
      if (!gw->has_backend(judge)) throw ValidationError("unknown backend '" + judge + "'");
      std::size_t planned = 0;
      for (const auto& s : items) {
        auto it = caps.find(s.id);
        if (it == caps.end()) throw ValidationError("no captions for sequence '" + s.id + "'");
        require_valid(validate_captions(it->second, s), "captions of '" + s.id + "'");
        planned += s.length();
      }
      if (dry_run) {
        env.out << fmt::format("sequences: {}\nmatching calls: {}\n", items.size(), planned);
        return kExitOk;
      }
      if (match_out.empty()) throw ValidationError("--out is required unless --dry-run");
      auto results = parallel_map(items.size(), cfg.workers, [&](std::size_t i) {
        const auto& s = items[i];
        MatchSettings ms{judge, cfg.seed, !no_shuffle, "match/" + s.id};
        auto o = s.length() == 2 ? evaluate_pair_matching(*gw, s.frames, caps.at(s.id).captions, ms)
                                 : evaluate_sequence_matching(*gw, s.frames, caps.at(s.id).captions, ms);
        o.id = s.id;
        return o;
      });
      detail::ensure_parent(match_out);
      write_jsonl(match_out, results);
      if (!results.empty()) {
        env.out << fmt::format("sequence-level accuracy: {:.1f}% ({} sequences)\n",
                               100.0 * sequence_level_accuracy(results), results.size());
      }
      return kExitOk;
    };
  });

  // ---- progress
  auto* progress = app.add_subcommand("progress", "Progression detection over adjacent caption pairs");
  std::string prog_mode = "pseudo", prog_in, prog_caps, prog_out, prog_consensus, prog_gold, prog_judges, prog_backend;
  progress->add_option("--mode", prog_mode, "pseudo (visual change consensus) or eval (action progression)")
      ->check(CLI::IsMember({"pseudo", "eval"}));
  progress->add_option("--in", prog_in, "frames.jsonl")->required();
  progress->add_option("--captions", prog_caps, "captions.jsonl")->required();
  progress->add_option("--backend", prog_backend, "Only use captions from this captioner");
  progress->add_option("--judges", prog_judges, "Comma-separated text judges");
  progress->add_option("--out", prog_out, "verdicts.jsonl");
  progress->add_option("--consensus", prog_consensus, "consensus.jsonl (pseudo mode)");
  progress->add_option("--gold", prog_gold, "Gold labels (GoldProgression records) for balanced accuracy");
  progress->add_flag("--dry-run", dry_run, "Print planned model calls");
  progress->callback([&] {
    action = [&] {
      RunConfig cfg = load();
      const auto mode = kProgressionModeNames.parse(prog_mode, "mode");
      auto judges = split_list(prog_judges);
      if (judges.empty()) {
        judges = mode == ProgressionMode::pseudo ? cfg.curate.progression_judges
                                                 : std::vector<std::string>{cfg.text_judge};
      }
      if (judges.empty() || judges.front().empty()) throw ValidationError("no progression judges configured");
      auto items = detail::read_input<FrameSequence>(prog_in);
      auto all_caps = detail::read_input<CaptionSequence>(prog_caps);
      std::map<std::string, std::vector<CaptionSequence>> caps;
      for (const auto& c : all_caps) {
        if (prog_backend.empty() || c.backend == prog_backend) caps[c.sequence_id].push_back(c);
      }
      auto gw = env.make_gateway(cfg);
      for (const auto& j : judges) {
        if (!gw->has_backend(j)) throw ValidationError("unknown backend '" + j + "'");
      }
      std::size_t planned = 0;
      for (const auto& s : items) {
        if (!caps.count(s.id)) throw ValidationError("no captions for sequence '" + s.id + "'");
        for (const auto& c : caps[s.id]) require_valid(validate_captions(c, s), "captions of '" + s.id + "'");
        planned += (s.length() - 1) * caps[s.id].size() * judges.size();
      }
      if (dry_run) {
        env.out << fmt::format("sequences: {}\nprogression calls: {}\n", items.size(), planned);
        return kExitOk;
      }
      if (prog_out.empty()) throw ValidationError("--out is required unless --dry-run");
      struct Result {
        std::vector<ChangeVerdict> verdicts;
        std::vector<ConsensusLabel> consensus;
      };
      auto results = parallel_map(items.size(), cfg.workers, [&](std::size_t i) {
        Result r;
        const auto& s = items[i];
        const auto& cands = caps.at(s.id);
        for (std::size_t p = 0; p + 1 < s.length(); ++p) {
          std::vector<ChangeVerdict> votes;
          for (std::size_t k = 0; k < cands.size(); ++k) {
            for (const auto& judge : judges) {
              PairJudgment j;
              j.judge_id = judge;
              j.caption1 = cands[k].captions[p];
              j.caption2 = cands[k].captions[p + 1];
              j.mode = mode;
              if (mode == ProgressionMode::eval) j.action = s.action;
              j.pair = PairRef::of(s.frames[p], s.frames[p + 1]);
              j.candidate_index = k;
              j.seed = derive_seed(cfg.seed, fmt::format("progress/{}/{}/c{}/{}", s.id, p, k, judge));
              auto v = judge_pair_change(*gw, j);
              v.id = fmt::format("{}/c{}/{}-{}/{}", s.id, k, j.pair.first, j.pair.second, judge);
              votes.push_back(std::move(v));
            }
          }
          if (mode == ProgressionMode::pseudo) r.consensus.push_back(consensus_change(votes, cfg.curate.aggregation));
          r.verdicts.insert(r.verdicts.end(), votes.begin(), votes.end());
        }
        return r;
      });
      std::vector<ChangeVerdict> verdicts;
      std::vector<ConsensusLabel> consensus;
      for (auto& r : results) {
        verdicts.insert(verdicts.end(), r.verdicts.begin(), r.verdicts.end());
        consensus.insert(consensus.end(), r.consensus.begin(), r.consensus.end());
      }
      detail::ensure_parent(prog_out);
      write_jsonl(prog_out, verdicts);
      if (!prog_consensus.empty()) {
        detail::ensure_parent(prog_consensus);
        write_jsonl(prog_consensus, consensus);
      }
      if (!prog_gold.empty()) {
        auto gold = detail::read_input<GoldProgression>(prog_gold);
        std::map<PairRef, bool> gold_by_pair;
        for (const auto& g : gold) gold_by_pair[g.pair] = g.progression;
        std::vector<bool> p, g;
        for (const auto& v : verdicts) {
          auto it = gold_by_pair.find(v.pair);
          if (it == gold_by_pair.end()) continue;
          p.push_back(v.label == ChangeLabel::change);
          g.push_back(it->second);
        }
        env.out << fmt::format("balanced accuracy: {:.1f}% over {} judged pairs\n", 100.0 * balanced_accuracy(p, g),
                               p.size());
      }
      return kExitOk;
    };
  });

  // ---- bench
  auto* bench = app.add_subcommand("bench", "Run the Cap/Prog benchmark for one captioner");
  std::string bench_model, bench_split, bench_out, bench_text, bench_vision;
  bench->add_option("--model", bench_model, "Captioner backend under test")->required();
  bench->add_option("--split", bench_split, "Benchmark split (JSONL)")->required();
  bench->add_option("--out", bench_out, "report.tsv");
  bench->add_option("--text-judge", bench_text, "Progression judge");
  bench->add_option("--vision-judge", bench_vision, "Matching judge");
  bench->add_flag("--no-shuffle", no_shuffle, "Present captions in frame order");
  bench->add_flag("--dry-run", dry_run, "Print planned model calls");
  bench->callback([&] {
    action = [&] {
      RunConfig cfg = load();
      BenchSettings bs{bench_model, detail::require(bench_text, cfg.text_judge, "text judge"),
                       detail::require(bench_vision, cfg.vision_judge, "vision judge"), cfg.seed, !no_shuffle,
                       cfg.workers};
      auto split = detail::read_input<BenchSequence>(bench_split);
      if (split.empty()) throw ValidationError("benchmark split is empty");
      for (const auto& b : split) validate_bench_sequence(b);
      auto gw = env.make_gateway(cfg);
      for (const auto& id : {bs.model, bs.text_judge, bs.vision_judge}) {
        if (!gw->has_backend(id)) throw ValidationError("unknown backend '" + id + "'");
      }
      if (dry_run) {
        std::size_t caption = split.size(), prog = 0, match_max = 0;
        for (const auto& b : split) {
          prog += b.seq.length() - 1;
          match_max += match_eligible(b) ? b.seq.length() : 0;
        }
        env.out << fmt::format("sequences: {}\ncaption calls: {}\nprogression calls: {}\nmatching calls (upper bound): {}\n",
                               split.size(), caption, prog, match_max);
        return kExitOk;
      }
      auto rep = run_benchmark(*gw, split, bs);
      const auto tsv = rep.render_tsv();
      if (bench_out.empty()) {
        env.out << tsv;
      } else {
        detail::write_text(bench_out, tsv);
      }
      return kExitOk;
    };
  });

  // ---- keyframes
  auto* keyframes = app.add_subcommand("keyframes", "Dynamic keyframe selection");
  std::string kf_in, kf_out, kf_captioner, kf_judge;
  keyframes->add_option("--in", kf_in, "frames.jsonl")->required();
  keyframes->add_option("--captioner", kf_captioner, "Captioner backend")->required();
  keyframes->add_option("--judge", kf_judge, "Progression judge");
  keyframes->add_option("--out", kf_out, "keyframes.jsonl");
  keyframes->add_flag("--dry-run", dry_run, "Print planned model calls");
  keyframes->callback([&] {
    action = [&] {
      RunConfig cfg = load();
      const auto judge = detail::require(kf_judge, cfg.text_judge, "text judge");
      auto items = detail::read_input<FrameSequence>(kf_in);
      for (const auto& s : items) require_valid(validate_sequence(s, {2, 1024, true}), "input '" + s.id + "'");
      auto gw = env.make_gateway(cfg);
      for (const auto& id : {kf_captioner, judge}) {
        if (!gw->has_backend(id)) throw ValidationError("unknown backend '" + id + "'");
      }
      if (dry_run) {
        std::size_t n = 0;
        for (const auto& s : items) n += s.length() - 1;
        env.out << fmt::format("sequences: {}\ncaption calls: {}\nprogression calls: {}\n", items.size(), n, n);
        return kExitOk;
      }
      if (kf_out.empty()) throw ValidationError("--out is required unless --dry-run");
      auto results = parallel_map(items.size(), cfg.workers, [&](std::size_t i) {
        return select_keyframes(*gw, items[i], kf_captioner, judge, cfg.seed);
      });
      detail::ensure_parent(kf_out);
      write_jsonl(kf_out, results);
      return kExitOk;
    };
  });

  // ---- select-n
  auto* select_n = app.add_subcommand("select-n", "Select N representative frames from captions");
  std::string sn_caps, sn_in, sn_out, sn_judge;
  std::size_t sn_n = 4;
  select_n->add_option("--captions", sn_caps, "captions.jsonl")->required();
  select_n->add_option("--in", sn_in, "frames.jsonl (for action labels)");
  select_n->add_option("--n", sn_n, "Frames to select")->check(CLI::PositiveNumber);
  select_n->add_option("--judge", sn_judge, "Text judge");
  select_n->add_option("--out", sn_out, "selection.jsonl");
  select_n->add_flag("--dry-run", dry_run, "Print planned model calls");
  select_n->callback([&] {
    action = [&] {
      RunConfig cfg = load();
      const auto judge = detail::require(sn_judge, cfg.text_judge, "text judge");
      auto caps = detail::read_input<CaptionSequence>(sn_caps);
      std::map<std::string, std::string> actions;
      if (!sn_in.empty()) {
        for (const auto& s : detail::read_input<FrameSequence>(sn_in)) actions[s.id] = s.action;
      }
      for (const auto& c : caps) {
        if (sn_n > c.captions.size()) {
          throw ValidationError(fmt::format("--n {} exceeds T={} of '{}'", sn_n, c.captions.size(), c.sequence_id));
        }
      }
      auto gw = env.make_gateway(cfg);
      if (!gw->has_backend(judge)) throw ValidationError("unknown backend '" + judge + "'");
      if (dry_run) {
        std::size_t n = 0;
        for (const auto& c : caps) n += c.captions.size() == sn_n ? 0 : 1;
        env.out << fmt::format("sequences: {}\nselection calls: {}\n", caps.size(), n);
        return kExitOk;
      }
      if (sn_out.empty()) throw ValidationError("--out is required unless --dry-run");
      auto results = parallel_map(caps.size(), cfg.workers, [&](std::size_t i) {
        auto it = actions.find(caps[i].sequence_id);
        auto sel = select_n_keyframes(*gw, caps[i], sn_n, judge, it == actions.end() ? "" : it->second, cfg.seed);
        Json j;
        j["version"] = kSchemaVersion;
        j["sequence_id"] = caps[i].sequence_id;
        j["selected"] = sel;
        return j;
      });
      detail::write_json_lines(sn_out, results);
      return kExitOk;
    };
  });

  // ---- classify
  auto* classify = app.add_subcommand("classify", "Zero-shot per-frame classification from captions");
  std::string cl_caps, cl_labels, cl_out, cl_judge;
  classify->add_option("--captions", cl_caps, "captions.jsonl")->required();
  classify->add_option("--labels", cl_labels, "Label file, one label per line")->required();
  classify->add_option("--judge", cl_judge, "Text judge");
  classify->add_option("--out", cl_out, "labels.jsonl");
  classify->add_flag("--dry-run", dry_run, "Print planned model calls");
  classify->callback([&] {
    action = [&] {
      RunConfig cfg = load();
      const auto judge = detail::require(cl_judge, cfg.text_judge, "text judge");
      auto caps = detail::read_input<CaptionSequence>(cl_caps);
      std::ifstream lf(cl_labels);
      if (!lf) throw ValidationError("cannot read labels file " + cl_labels);
      std::vector<std::string> labels;
      for (std::string line; std::getline(lf, line);) {
        if (!trim(line).empty()) labels.push_back(trim(line));
      }
      if (labels.size() < 2) throw ValidationError("need at least 2 labels");
      if (labels.size() > kMaxOptions) throw ValidationError("more labels than letters A-Z");
      auto gw = env.make_gateway(cfg);
      if (!gw->has_backend(judge)) throw ValidationError("unknown backend '" + judge + "'");
      if (dry_run) {
        std::size_t n = 0;
        for (const auto& c : caps) {
          for (const auto& t : c.captions) n += trim(t).empty() ? 0 : 1;
        }
        env.out << fmt::format("sequences: {}\nclassification calls: {}\n", caps.size(), n);
        return kExitOk;
      }
      if (cl_out.empty()) throw ValidationError("--out is required unless --dry-run");
      auto results = parallel_map(caps.size(), cfg.workers, [&](std::size_t i) {
        auto r = classify_frames(*gw, caps[i].captions, labels, judge,
                                 derive_seed(cfg.seed, "classify/" + caps[i].sequence_id));
        Json j;
        j["version"] = kSchemaVersion;
        j["sequence_id"] = caps[i].sequence_id;
        Json out = Json::array();
        for (const auto& l : r.labels) out.push_back(l ? Json(labels[*l]) : Json(nullptr));
        j["labels"] = std::move(out);
        return j;
      });
      detail::write_json_lines(cl_out, results);
      return kExitOk;
    };
  });

  // ---- qa
  auto* qa = app.add_subcommand("qa", "Multiple-choice QA over frame-wise captions");
  std::string qa_caps, qa_questions, qa_out, qa_judge;
  qa->add_option("--captions", qa_caps, "captions.jsonl")->required();
  qa->add_option("--questions", qa_questions,
                 "JSONL: {\"sequence_id\", \"question\", \"options\": [...], \"answer\": index?}")
      ->required();
  qa->add_option("--judge", qa_judge, "Text judge");
  qa->add_option("--out", qa_out, "answers.jsonl");
  qa->add_flag("--dry-run", dry_run, "Print planned model calls");
  qa->callback([&] {
    action = [&] {
      RunConfig cfg = load();
      const auto judge = detail::require(qa_judge, cfg.text_judge, "text judge");
      auto caps = detail::captions_by_sequence(detail::read_input<CaptionSequence>(qa_caps), "");
      std::ifstream qf(qa_questions);
      if (!qf) throw ValidationError("cannot read questions file " + qa_questions);
      struct Question {
        std::string sequence_id, question;
        std::vector<std::string> options;
        std::optional<std::size_t> answer;
      };
      std::vector<Question> questions;
      std::size_t lineno = 0;
      for (std::string line; std::getline(qf, line);) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
          Json j = Json::parse(line);
          FieldReader r(j, "question");
          Question q;
          q.sequence_id = r.req<std::string>("sequence_id");
          q.question = r.req<std::string>("question");
          q.options = r.req<std::vector<std::string>>("options");
          if (r.has("answer")) q.answer = r.req<std::size_t>("answer");
          r.finish();
          if (!caps.count(q.sequence_id)) throw ValidationError("no captions for '" + q.sequence_id + "'");
          McqOptions check(q.options, false);
          questions.push_back(std::move(q));
        } catch (const std::exception& e) {
          throw ValidationError(fmt::format("{}: line {}: {}", qa_questions, lineno, e.what()));
        }
      }
      auto gw = env.make_gateway(cfg);
      if (!gw->has_backend(judge)) throw ValidationError("unknown backend '" + judge + "'");
      if (dry_run) {
        env.out << fmt::format("questions: {}\nqa calls: {}\n", questions.size(), questions.size());
        return kExitOk;
      }
      if (qa_out.empty()) throw ValidationError("--out is required unless --dry-run");
      auto results = parallel_map(questions.size(), cfg.workers, [&](std::size_t i) {
        const auto& q = questions[i];
        return qa_over_captions(*gw, caps.at(q.sequence_id), q.question, q.options, judge, cfg.seed);
      });
      std::vector<Json> rows;
      std::size_t answered = 0, correct = 0;
      for (std::size_t i = 0; i < questions.size(); ++i) {
        Json j;
        j["version"] = kSchemaVersion;
        j["sequence_id"] = questions[i].sequence_id;
        j["question"] = questions[i].question;
        j["choice"] = results[i] ? Json(*results[i]) : Json(nullptr);
        rows.push_back(std::move(j));
        if (questions[i].answer) {
          ++answered;
          correct += results[i] == questions[i].answer ? 1 : 0;
        }
      }
      detail::write_json_lines(qa_out, rows);
      if (answered) {
        env.out << fmt::format("accuracy: {:.1f}% ({} of {})\n", 100.0 * static_cast<double>(correct) / static_cast<double>(answered),
                               correct, answered);
      }
      return kExitOk;
    };
  });

  // ---- serve-study
  auto* serve = app.add_subcommand("serve-study", "Serve the user-study and annotation HTTP API");
  int port = 8080;
  std::string data_dir, media_dir, host = "127.0.0.1";
  serve->add_option("--port", port, "TCP port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--data", data_dir, "Directory holding the event log")->required();
  serve->add_option("--media", media_dir, "Frame images served under /media/");
  serve->callback([&] {
    action = [&] {
      StudyService svc{std::filesystem::path(data_dir)};
      httplib::Server server;
      install_study_routes(server, svc,
                           media_dir.empty() ? std::nullopt : std::optional<std::filesystem::path>(media_dir));
      spdlog::info("study service on http://{}:{} (data: {})", host, port, data_dir);
      if (!server.listen(host, port)) throw Error(fmt::format("cannot listen on {}:{}", host, port));
      return kExitOk;
    };
  });

  // ---- stats
  auto* stats = app.add_subcommand("stats", "Dataset statistics per source dataset");
  std::vector<std::string> stats_in;
  std::string stats_out;
  stats->add_option("--in", stats_in, "Curation output directories")->required();
  stats->add_option("--out", stats_out, "stats.tsv (default: stdout)");
  stats->callback([&] {
    action = [&] {
      std::vector<SftRecord> sft;
      std::vector<PreferenceRecord> dpo;
      for (const auto& dir : stats_in) {
        if (!std::filesystem::is_directory(dir)) throw ValidationError("not a directory: " + dir);
        for (const char* tag : {"pair", "seq"}) {
          const auto s = std::filesystem::path(dir) / fmt::format("sft_{}.jsonl", tag);
          const auto d = std::filesystem::path(dir) / fmt::format("dpo_{}.jsonl", tag);
          if (std::filesystem::exists(s)) {
            auto v = detail::read_input<SftRecord>(s.string());
            sft.insert(sft.end(), v.begin(), v.end());
          }
          if (std::filesystem::exists(d)) {
            auto v = detail::read_input<PreferenceRecord>(d.string());
            dpo.insert(dpo.end(), v.begin(), v.end());
          }
        }
      }
      const auto tsv = dataset_stats(sft, dpo).render_tsv();
      if (stats_out.empty()) {
        env.out << tsv;
      } else {
        detail::write_text(stats_out, tsv);
      }
      return kExitOk;
    };
  });

#ifdef FRAMECAP_WITH_INGEST
  // ---- ingest
  auto* ingest = app.add_subcommand("ingest", "Extract frames at 1 FPS and append a FrameSequence record");
  std::string ing_video, ing_frames_dir, ing_append;
  IngestOptions ing;
  ingest->add_option("--video", ing_video, "Video file")->required();
  ingest->add_option("--frames-dir", ing_frames_dir, "Where frame images are written")->required();
  ingest->add_option("--append", ing_append, "frames.jsonl to append to")->required();
  ingest->add_option("--id", ing.video_id, "Sequence/video id (default: file stem)");
  ingest->add_option("--action", ing.action, "Action label");
  ingest->add_option("--source", ing.source, "Source dataset tag");
  ingest->callback([&] {
    action = [&] {
      auto seq = ingest_frames(ing_video, ing_frames_dir, ing);
      detail::ensure_parent(ing_append);
      std::ofstream out(ing_append, std::ios::binary | std::ios::app);
      out << to_record(seq).dump() << '\n';
      if (!out) throw Error("cannot append to " + ing_append);
      spdlog::info("{}: {} frames", seq.id, seq.length());
      return kExitOk;
    };
  });
#endif

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    env.out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    env.out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    env.err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  auto logger = spdlog::get("framecap");
  if (!logger) logger = spdlog::stderr_color_mt("framecap");
  spdlog::set_default_logger(logger);
  spdlog::set_level(quiet ? spdlog::level::warn : verbosity > 0 ? spdlog::level::debug : spdlog::level::info);

  try {
    return action ? action() : kExitValidation;
  } catch (const ValidationError& e) {
    env.err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    env.err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace framecap
