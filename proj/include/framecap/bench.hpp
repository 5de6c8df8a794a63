#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "framecap/core.hpp"
#include "framecap/curate.hpp"
#include "framecap/gateway.hpp"
#include "framecap/matching.hpp"
#include "framecap/progression.hpp"
#include "framecap/rng.hpp"
#include "framecap/workers.hpp"

namespace framecap {

using Point = std::vector<double>;

inline double squared_distance(const Point& a, const Point& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double euclidean(const Point& a, const Point& b) { return std::sqrt(squared_distance(a, b)); }

inline void check_dimensions(const std::vector<Point>& points) {
  if (points.empty()) throw ValidationError("no embeddings");
  const auto d = points.front().size();
  if (d == 0) throw ValidationError("embeddings have dimension 0");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].size() != d) {
      throw ValidationError(fmt::format("embedding {} has dimension {}, expected {}", i, points[i].size(), d));
    }
  }
}

// ---------------------------------------------------------------------------
// k-means (k-means++ seeding, Lloyd iterations, best of n restarts)

struct KMeansOptions {
  std::size_t restarts = 10;
  std::size_t max_iterations = 300;
};

struct KMeansResult {
  std::vector<Point> centroids;
  std::vector<std::size_t> labels;
  double inertia = 0;
  std::size_t iterations = 0;
  std::vector<double> inertia_trace;  // after each assignment step
};

namespace detail {

// Uniform double in [0, 1) from 53 random bits.
inline double unit_draw(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::vector<Point> kmeanspp_seeds(const std::vector<Point>& pts, std::size_t k, Rng& rng) {
  std::vector<Point> c{pts[uniform_below(rng, pts.size())]};
  std::vector<double> d2(pts.size());
  while (c.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& cc : c) best = std::min(best, squared_distance(pts[i], cc));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total <= 0) {
      pick = uniform_below(rng, pts.size());
    } else {
      double r = unit_draw(rng) * total;
      pick = pts.size() - 1;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (r < d2[i]) {
          pick = i;
          break;
        }
        r -= d2[i];
      }
    }
    c.push_back(pts[pick]);
  }
  return c;
}

inline double assign(const std::vector<Point>& pts, const std::vector<Point>& c,
                     std::vector<std::size_t>& labels) {
  double inertia = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c.size(); ++j) {
      const double d = squared_distance(pts[i], c[j]);
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    labels[i] = best;
    inertia += bd;
  }
  return inertia;
}

inline KMeansResult lloyd(const std::vector<Point>& pts, std::vector<Point> c, std::size_t max_iter) {
  KMeansResult r;
  r.labels.assign(pts.size(), 0);
  const std::size_t dim = pts.front().size();
  std::vector<std::size_t> prev;
  for (std::size_t it = 0; it < max_iter; ++it) {
    r.inertia = assign(pts, c, r.labels);
    r.inertia_trace.push_back(r.inertia);
    r.iterations = it + 1;
    if (r.labels == prev) break;
    prev = r.labels;
    std::vector<Point> sum(c.size(), Point(dim, 0.0));
    std::vector<std::size_t> count(c.size(), 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      ++count[r.labels[i]];
      for (std::size_t d = 0; d < dim; ++d) sum[r.labels[i]][d] += pts[i][d];
    }
    for (std::size_t j = 0; j < c.size(); ++j) {
      if (count[j] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t d = 0; d < dim; ++d) c[j][d] = sum[j][d] / static_cast<double>(count[j]);
    }
  }
  r.centroids = std::move(c);
  return r;
}

}  // namespace detail

inline KMeansResult kmeans(const std::vector<Point>& pts, std::size_t k, std::uint64_t seed,
                           const KMeansOptions& opt = {}) {
  check_dimensions(pts);
  if (k < 1 || k > pts.size()) throw ValidationError(fmt::format("k={} outside [1, {}]", k, pts.size()));
  if (opt.restarts < 1 || opt.max_iterations < 1) throw ValidationError("k-means needs restarts and iterations >= 1");
  std::optional<KMeansResult> best;
  for (std::size_t r = 0; r < opt.restarts; ++r) {
    Rng rng(derive_seed(seed, fmt::format("kmeans/k{}/restart{}", k, r)));
    auto res = detail::lloyd(pts, detail::kmeanspp_seeds(pts, k, rng), opt.max_iterations);
    if (!best || res.inertia < best->inertia) best = std::move(res);
  }
  return std::move(*best);
}

// Mean silhouette; points in singleton clusters score 0.
inline double silhouette(const std::vector<Point>& pts, const std::vector<std::size_t>& labels) {
  if (pts.size() != labels.size()) throw ValidationError("silhouette: label count mismatch");
  const std::size_t k = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> size(k, 0);
  for (auto l : labels) ++size[l];
  std::size_t used = 0;
  for (auto s : size) used += s > 0 ? 1 : 0;
  if (used < 2) throw ValidationError("silhouette undefined for fewer than 2 clusters");
  double total = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (size[labels[i]] == 1) continue;
    std::vector<double> sum(k, 0.0);
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j != i) sum[labels[j]] += euclidean(pts[i], pts[j]);
    }
    const double a = sum[labels[i]] / static_cast<double>(size[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (c != labels[i] && size[c] > 0) b = std::min(b, sum[c] / static_cast<double>(size[c]));
    }
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(pts.size());
}

struct ClusterSelection {
  std::size_t k = 0;
  double silhouette = 0;
  std::vector<std::size_t> representatives;  // ascending frame indices
  std::map<std::size_t, double> scores;      // silhouette per tried k
  KMeansResult fit;
};

// Picks k in [k_min, min(k_max, n-1)] by silhouette (ties to the smaller
// k) and returns the frame nearest each centroid.
inline ClusterSelection cluster_frames(const std::vector<Point>& embeddings, std::size_t k_min = 3,
                                       std::size_t k_max = 6, std::uint64_t seed = 0,
                                       const KMeansOptions& opt = {}) {
  if (k_min < 2 || k_max < k_min) throw ValidationError("cluster_frames: need 2 <= k_min <= k_max");
  if (embeddings.size() < k_min + 1) {
    throw ValidationError(fmt::format("cluster_frames: fewer frames ({}) than k_min+1 ({})",
                                      embeddings.size(), k_min + 1));
  }
  check_dimensions(embeddings);
  std::set<Point> distinct(embeddings.begin(), embeddings.end());
  if (distinct.size() < 2) throw ValidationError("no cluster structure: all embeddings identical");

  ClusterSelection best;
  bool found = false;
  const std::size_t hi = std::min(k_max, embeddings.size() - 1);
  for (std::size_t k = k_min; k <= hi; ++k) {
    if (k > distinct.size()) break;
    auto fit = kmeans(embeddings, k, seed, opt);
    std::set<std::size_t> used(fit.labels.begin(), fit.labels.end());
    if (used.size() != k) continue;
    const double s = silhouette(embeddings, fit.labels);
    best.scores[k] = s;
    if (!found || s > best.silhouette) {
      found = true;
      best.k = k;
      best.silhouette = s;
      best.fit = std::move(fit);
    }
  }
  if (!found) throw ValidationError("no cluster structure: too few distinct embeddings for k_min");
  for (std::size_t c = 0; c < best.k; ++c) {
    std::size_t rep = embeddings.size();
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
      if (best.fit.labels[i] != c) continue;
      const double d = squared_distance(embeddings[i], best.fit.centroids[c]);
      if (d < bd) {
        bd = d;
        rep = i;
      }
    }
    best.representatives.push_back(rep);
  }
  std::sort(best.representatives.begin(), best.representatives.end());
  return best;
}

// Adds the unselected frame nearest a randomly chosen selected frame.
inline std::vector<std::size_t> inject_near_duplicate(const std::vector<Point>& embeddings,
                                                      std::vector<std::size_t> selected,
                                                      std::uint64_t seed) {
  check_dimensions(embeddings);
  if (selected.empty()) throw ValidationError("inject_near_duplicate: nothing selected");
  std::sort(selected.begin(), selected.end());
  if (std::adjacent_find(selected.begin(), selected.end()) != selected.end()) {
    throw ValidationError("inject_near_duplicate: duplicate selected index");
  }
  if (selected.back() >= embeddings.size()) throw ValidationError("inject_near_duplicate: index out of range");
  if (selected.size() == embeddings.size()) throw ValidationError("inject_near_duplicate: no unselected frame");
  Rng rng(derive_seed(seed, "near_duplicate"));
  const std::size_t anchor = selected[uniform_below(rng, selected.size())];
  std::size_t pick = embeddings.size();
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (std::binary_search(selected.begin(), selected.end(), i)) continue;
    const double d = squared_distance(embeddings[i], embeddings[anchor]);
    if (d < bd) {
      bd = d;
      pick = i;
    }
  }
  selected.push_back(pick);
  std::sort(selected.begin(), selected.end());
  return selected;
}

// ---------------------------------------------------------------------------
// Benchmark runner

struct BenchSequence {
  FrameSequence seq;
  std::vector<GoldProgression> gold;  // one per adjacent pair, in order
};

inline void validate_bench_sequence(const BenchSequence& b) {
  require_valid(validate_sequence(b.seq, {2, 64, true}), "benchmark sequence '" + b.seq.id + "'");
  if (b.gold.size() + 1 != b.seq.length()) {
    throw ValidationError(fmt::format("benchmark sequence '{}': {} gold labels for T={}", b.seq.id,
                                      b.gold.size(), b.seq.length()));
  }
  for (std::size_t p = 0; p < b.gold.size(); ++p) {
    const auto& pr = b.gold[p].pair;
    if (pr.first != b.seq.frames[p].index || pr.second != b.seq.frames[p + 1].index) {
      throw ValidationError(fmt::format("benchmark sequence '{}': gold {} is not adjacent pair {}", b.seq.id, p, p));
    }
  }
}

// Sequences without any gold progression are excluded from Cap.
inline bool match_eligible(const BenchSequence& b) {
  return std::any_of(b.gold.begin(), b.gold.end(), [](const auto& g) { return g.progression; });
}

// Split files: one record per sequence,
//   {"version": 1, "sequence": {...}, "gold": ["progression", "no_progression", ...]}
// with one gold label per adjacent pair, in order.
inline Json to_record(const BenchSequence& b) {
  Json j;
  j["version"] = kSchemaVersion;
  j["sequence"] = detail::sequence_body(b.seq);
  Json gold = Json::array();
  for (const auto& g : b.gold) gold.push_back(g.progression ? "progression" : "no_progression");
  j["gold"] = std::move(gold);
  return j;
}

inline BenchSequence from_record(const Json& j, std::type_identity<BenchSequence>) {
  FieldReader r(j, "bench sequence");
  r.expect_version();
  BenchSequence b;
  b.seq = detail::nested_sequence(r.sub("sequence"));
  auto labels = r.req<std::vector<std::string>>("gold");
  r.finish();
  if (labels.size() + 1 != b.seq.length()) {
    throw ParseError(fmt::format("bench sequence '{}': {} gold labels for T={}", b.seq.id, labels.size(), b.seq.length()));
  }
  for (std::size_t p = 0; p < labels.size(); ++p) {
    if (labels[p] != "progression" && labels[p] != "no_progression") {
      throw ParseError("bench sequence '" + b.seq.id + "': invalid gold label '" + labels[p] + "'");
    }
    b.gold.push_back({PairRef::of(b.seq.frames[p], b.seq.frames[p + 1]), labels[p] == "progression", "split"});
  }
  return b;
}

struct BenchSettings {
  std::string model;       // captioner under test
  std::string text_judge;  // progression (eval mode)
  std::string vision_judge;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::size_t workers = 4;
};

struct BenchRow {
  std::optional<double> cap;   // percent
  std::optional<double> prog;  // percent
  std::size_t sequences = 0;
  std::size_t eligible = 0;
  std::size_t accepted = 0;
  std::size_t pairs = 0;
  std::size_t failed = 0;
};

struct BenchReport {
  std::string model;
  std::map<std::string, BenchRow> rows;

  // One block per model: "# model=<id>", then dataset, Cap, Prog with one
  // decimal; "--" where a metric is undefined.
  std::string render_tsv() const {
    auto pct = [](const std::optional<double>& v) { return v ? fmt::format("{:.1f}", *v) : std::string("--"); };
    std::string out = fmt::format("# model={}\ndataset\tCap\tProg\n", model);
    for (const auto& [name, r] : rows) out += fmt::format("{}\t{}\t{}\n", name, pct(r.cap), pct(r.prog));
    return out;
  }
};

struct SequenceResult {
  std::string source;
  bool failed = false;
  std::string error;
  std::vector<bool> preds;
  std::vector<bool> gold;
  bool eligible = false;
  bool accepted = false;
};

inline SequenceResult bench_one(Gateway& gw, const BenchSequence& b, const BenchSettings& s) {
  SequenceResult r;
  r.source = source_tag(b.seq);
  r.eligible = match_eligible(b);
  try {
    const auto caps = caption_with_window(gw, s.model, b.seq, Window::full,
                                          derive_seed(s.seed, "bench/caption/" + b.seq.id))
                          .captions;
    for (std::size_t p = 0; p + 1 < caps.size(); ++p) {
      PairJudgment j;
      j.judge_id = s.text_judge;
      j.caption1 = caps[p];
      j.caption2 = caps[p + 1];
      j.mode = ProgressionMode::eval;
      j.action = b.seq.action;
      j.pair = PairRef::of(b.seq.frames[p], b.seq.frames[p + 1]);
      j.seed = derive_seed(s.seed, fmt::format("bench/prog/{}/{}", b.seq.id, p));
      // Unsure counts as no progression.
      r.preds.push_back(judge_pair_change(gw, j).label == ChangeLabel::change);
      r.gold.push_back(b.gold[p].progression);
    }
    if (r.eligible) {
      const std::set<std::string> distinct(caps.begin(), caps.end());
      if (distinct.size() == caps.size()) {
        MatchSettings ms{s.vision_judge, s.seed, s.shuffle, "bench/" + b.seq.id};
        r.accepted = evaluate_sequence_matching(gw, b.seq.frames, caps, ms).verdict == MatchVerdict::accepted;
      }
    }
  } catch (const GatewayError& e) {
    r.failed = true;
    r.error = e.what();
  } catch (const ParseError& e) {
    r.failed = true;
    r.error = e.what();
  }
  return r;
}

inline BenchReport run_benchmark(Gateway& gw, const std::vector<BenchSequence>& dataset, const BenchSettings& s) {
  if (dataset.empty()) throw ValidationError("benchmark dataset is empty");
  for (const auto& id : {s.model, s.text_judge, s.vision_judge}) {
    if (!gw.has_backend(id)) throw UnknownBackendError(id);
  }
  for (const auto& b : dataset) validate_bench_sequence(b);

  auto results = parallel_map(dataset.size(), s.workers, [&](std::size_t i) { return bench_one(gw, dataset[i], s); });

  BenchReport rep;
  rep.model = s.model;
  std::map<std::string, std::pair<std::vector<bool>, std::vector<bool>>> labels;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    auto& row = rep.rows[r.source];
    ++row.sequences;
    if (r.failed) {
      ++row.failed;
      spdlog::warn("benchmark sequence '{}' excluded: {}", dataset[i].seq.id, r.error);
      continue;
    }
    auto& [p, g] = labels[r.source];
    p.insert(p.end(), r.preds.begin(), r.preds.end());
    g.insert(g.end(), r.gold.begin(), r.gold.end());
    row.pairs += r.preds.size();
    if (r.eligible) {
      ++row.eligible;
      row.accepted += r.accepted ? 1 : 0;
    }
  }
  for (auto& [name, row] : rep.rows) {
    if (row.eligible > 0) row.cap = 100.0 * static_cast<double>(row.accepted) / static_cast<double>(row.eligible);
    const auto& [p, g] = labels[name];
    const bool both = std::count(g.begin(), g.end(), true) > 0 && std::count(g.begin(), g.end(), false) > 0;
    if (both) row.prog = 100.0 * balanced_accuracy(p, g);
  }
  return rep;
}

}  // namespace framecap
