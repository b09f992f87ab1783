// SPDX-License-Identifier: Apache-2.0
#pragma once

// Position-modeling pre-training: the noise / mask generator, the
// reconstruction objective, the training loop, and a procedural corpus of
// road-like ego maps to train on.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "priormap/errors.hpp"
#include "priormap/map_io.hpp"
#include "priormap/rng.hpp"
#include "priormap/tensor.hpp"
#include "priormap/uve.hpp"
#include "priormap/vector_core.hpp"

namespace priormap {

enum class CorruptionMode { noise, mask, none };

inline std::string_view to_string(CorruptionMode m) {
  switch (m) {
    case CorruptionMode::noise: return "noise";
    case CorruptionMode::mask: return "mask";
    case CorruptionMode::none: return "none";
  }
  return "?";
}

inline CorruptionMode corruption_mode_from_string(std::string_view s) {
  if (s == "noise") return CorruptionMode::noise;
  if (s == "mask") return CorruptionMode::mask;
  if (s == "none") return CorruptionMode::none;
  throw UsageError("unknown corruption mode '" + std::string(s) + "' (expected noise|mask|none)");
}

/// Coordinate written into masked points.
inline constexpr double kMaskValue = -1.0;

struct CorruptionConfig {
  CorruptionMode mode = CorruptionMode::noise;
  double seg_fraction = 0.10;
  double pt_fraction = 0.05;
  double noise_std = 1.0;  // meters
  std::uint64_t seed = 0;

  void validate() const {
    if (!(seg_fraction >= 0.0 && seg_fraction <= 1.0) || !(pt_fraction >= 0.0 && pt_fraction <= 1.0))
      throw UsageError("corruption fractions must lie in [0, 1]");
    if (!(noise_std >= 0.0)) throw UsageError("noise_std must be non-negative");
  }

  nlohmann::ordered_json to_json() const {
    return {{"mode", std::string(to_string(mode))}, {"seg_fraction", seg_fraction}, {"pt_fraction", pt_fraction},
            {"noise_std", noise_std}};
  }
};

struct CorruptedPoint {
  std::size_t instance = 0;
  std::size_t point = 0;
  Vec2 original;
  Vec2 delta;  // zero when masked
  bool masked = false;
  bool segment_level = false;
};

/// Every corrupted point, ordered by (instance, point); each appears once.
struct CorruptionPlan {
  std::vector<CorruptedPoint> points;
  std::size_t selected_instances = 0;   // instances given a segment-level span
  std::size_t candidate_points = 0;     // points eligible for point-level selection

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  std::size_t point_level_count() const {
    return static_cast<std::size_t>(std::count_if(points.begin(), points.end(),
                                                  [](const CorruptedPoint& c) { return !c.segment_level; }));
  }
};

namespace detail {
// First k entries of a seeded partial Fisher-Yates shuffle of [0, n).
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}
}  // namespace detail

/// Segment-level then point-level selection; selected points get Gaussian
/// offsets on x and y (noise) or are set to (-1, -1) (mask). Expected
/// selection counts equal fraction x population (stochastic rounding).
inline std::pair<VectorMap, CorruptionPlan> corrupt(const VectorMap& map, const CorruptionConfig& cfg) {
  cfg.validate();
  if (map.frame != Frame::ego) throw DataError("corrupt: map must be in the ego frame");
  VectorMap out = map;
  CorruptionPlan plan;
  if (cfg.mode == CorruptionMode::none || map.instances.empty()) return {std::move(out), std::move(plan)};

  Rng rng(cfg.seed);
  const std::size_t m = map.instances.size();
  std::vector<std::vector<char>> state(m);  // 0 untouched, 1 segment, 2 point
  for (std::size_t i = 0; i < m; ++i) state[i].assign(map.instances[i].size(), 0);

  const auto k_inst = static_cast<std::size_t>(
      std::min<std::int64_t>(rng.stochastic_round(cfg.seg_fraction * static_cast<double>(m)), static_cast<std::int64_t>(m)));
  auto chosen = detail::sample_without_replacement(m, k_inst, rng);
  std::sort(chosen.begin(), chosen.end());
  for (auto i : chosen) {
    const std::size_t n = map.instances[i].size();
    const auto lo = static_cast<std::int64_t>(std::ceil(0.3 * static_cast<double>(n)));
    const auto hi = static_cast<std::int64_t>(std::floor(0.7 * static_cast<double>(n)));
    const std::int64_t len_lo = std::min<std::int64_t>(std::max<std::int64_t>(2, lo), static_cast<std::int64_t>(n));
    const std::int64_t len_hi = std::min<std::int64_t>(std::max<std::int64_t>(len_lo, hi), static_cast<std::int64_t>(n));
    const auto len = static_cast<std::size_t>(rng.uniform_int(len_lo, len_hi));
    const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - len)));
    for (std::size_t j = start; j < start + len; ++j) state[i][j] = 1;
  }
  plan.selected_instances = chosen.size();

  std::vector<std::pair<std::size_t, std::size_t>> remaining;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < state[i].size(); ++j)
      if (state[i][j] == 0) remaining.emplace_back(i, j);
  plan.candidate_points = remaining.size();
  // pt_fraction is a share of all points, drawn from those not already taken
  const auto k_pt = std::min(remaining.size(), static_cast<std::size_t>(std::max<std::int64_t>(
      0, rng.stochastic_round(cfg.pt_fraction * static_cast<double>(map.total_points())))));
  for (auto r : detail::sample_without_replacement(remaining.size(), k_pt, rng))
    state[remaining[r].first][remaining[r].second] = 2;

  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < state[i].size(); ++j) {
      if (state[i][j] == 0) continue;
      auto& p = out.instances[i].points[j];
      CorruptedPoint c;
      c.instance = i;
      c.point = j;
      c.original = {p.x, p.y};
      c.segment_level = state[i][j] == 1;
      if (cfg.mode == CorruptionMode::noise) {
        c.delta = {cfg.noise_std * rng.normal(), cfg.noise_std * rng.normal()};
        p.x += c.delta.x;
        p.y += c.delta.y;
      } else {
        c.masked = true;
        p.x = kMaskValue;
        p.y = kMaskValue;
      }
      plan.points.push_back(c);
    }
  }
  return {std::move(out), std::move(plan)};
}

// ---------------------------------------------------------------------------
// Objective

/// Clean coordinates of every point, instance-major, as [P, 2].
inline Array coordinate_targets(const VectorMap& map) {
  Array t(Shape{map.total_points(), 2});
  std::size_t r = 0;
  for (const auto& inst : map.instances)
    for (const auto& p : inst.points) {
      t.at(r, 0) = p.x;
      t.at(r, 1) = p.y;
      ++r;
    }
  return t;
}

/// sqrt(mean over points of squared Euclidean error).
inline Var reconstruction_loss(Var predicted, const Array& target) {
  if (predicted.shape() != target.shape() || target.rank() != 2 || target.dim(1) != 2)
    detail::shape_mismatch("reconstruction_loss", predicted.shape(), target.shape());
  if (target.dim(0) == 0) throw DataError("reconstruction_loss: no valid points");
  Tape& t = *predicted.tape;
  return sqrt(scale(mean(square(sub(predicted, t.constant(target)))), 2.0));
}

inline double reconstruction_loss(const Array& predicted, const Array& target) {
  if (predicted.shape() != target.shape() || target.rank() != 2 || target.dim(1) != 2)
    detail::shape_mismatch("reconstruction_loss", predicted.shape(), target.shape());
  if (target.dim(0) == 0) throw DataError("reconstruction_loss: no valid points");
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) s += (predicted[i] - target[i]) * (predicted[i] - target[i]);
  return std::sqrt(s / static_cast<double>(target.dim(0)));
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthConfig {
  PerceptionWindow window{};
  std::size_t points_per_instance = kDefaultPointsPerInstance;
};

namespace detail {
inline VectorInstance road_curve(double offset, double slope, double curvature, const PerceptionWindow& w,
                                 ElementType type) {
  std::vector<Vec2> pts;
  const double y0 = w.y_min - 6.0;
  const double y1 = w.y_max + 6.0;
  const int steps = static_cast<int>(std::ceil((y1 - y0) / 2.0));
  for (int s = 0; s <= steps; ++s) {
    const double y = y0 + (y1 - y0) * s / steps;
    pts.push_back({offset + slope * y + curvature * y * y, y});
  }
  return compute_directions(make_instance(pts, type));
}

inline double curve_x(double offset, double slope, double curvature, double y) {
  return offset + slope * y + curvature * y * y;
}
}  // namespace detail

/// Procedural ego maps: 2-4 roughly parallel lane dividers spanning the
/// window, a road boundary beyond each outermost divider, and 0-2
/// pedestrian crossings across the road. Clipped and resampled.
inline VectorMap synth_map(Rng& rng, const SynthConfig& cfg = {}) {
  const auto& w = cfg.window;
  const double cx = 0.5 * (w.x_min + w.x_max);
  const auto n_div = static_cast<std::size_t>(rng.uniform_int(2, 4));
  const double lane = rng.uniform(3.0, 3.8);
  const double slope = rng.uniform(-0.12, 0.12);
  const double curvature = rng.uniform(-0.004, 0.004);
  const double center = cx + rng.uniform(-2.0, 2.0);
  const double margin_l = rng.uniform(2.0, 3.5);
  const double margin_r = rng.uniform(2.0, 3.5);

  VectorMap map;
  map.frame = Frame::ego;
  map.source_tag = SourceTag::ground_truth;
  std::vector<double> offsets;
  for (std::size_t k = 0; k < n_div; ++k)
    offsets.push_back(center + (static_cast<double>(k) - 0.5 * static_cast<double>(n_div - 1)) * lane);
  for (double o : offsets)
    map.instances.push_back(detail::road_curve(o, slope, curvature, w, ElementType::lane_divider));
  const double left = offsets.front() - margin_l;
  const double right = offsets.back() + margin_r;
  map.instances.push_back(detail::road_curve(left, slope, curvature, w, ElementType::road_boundary));
  map.instances.push_back(detail::road_curve(right, slope, curvature, w, ElementType::road_boundary));

  const auto n_cross = rng.uniform_int(0, 2);
  std::vector<double> used;
  for (std::int64_t c = 0; c < n_cross; ++c) {
    double y = 0.0;
    bool ok = false;
    for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
      y = rng.uniform(w.y_min + 8.0, w.y_max - 8.0);
      ok = std::all_of(used.begin(), used.end(), [&](double u) { return std::abs(u - y) > 9.0; });
    }
    if (!ok) continue;
    used.push_back(y);
    const double depth = rng.uniform(3.0, 5.0);
    const double y_a = y - 0.5 * depth;
    const double y_b = y + 0.5 * depth;
    const Vec2 corners[5] = {{detail::curve_x(left, slope, curvature, y_a), y_a},
                             {detail::curve_x(right, slope, curvature, y_a), y_a},
                             {detail::curve_x(right, slope, curvature, y_b), y_b},
                             {detail::curve_x(left, slope, curvature, y_b), y_b},
                             {detail::curve_x(left, slope, curvature, y_a), y_a}};
    map.instances.push_back(compute_directions(make_instance(corners, ElementType::pedestrian_crossing)));
  }
  return prepare_ego_map(map, w, cfg.points_per_instance);
}

/// Seed-deterministic corpus; map k depends only on (seed, k).
inline std::vector<VectorMap> synth_corpus(std::size_t n_maps, std::uint64_t seed, const SynthConfig& cfg = {}) {
  if (n_maps < 1) throw UsageError("synth_corpus: n_maps must be at least 1");
  cfg.window.validate();
  std::vector<VectorMap> corpus;
  corpus.reserve(n_maps);
  for (std::size_t k = 0; k < n_maps; ++k) {
    Rng rng(derive_seed(seed, "synth", k));
    corpus.push_back(synth_map(rng, cfg));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Training

struct PretrainConfig {
  UveConfig uve{};
  CorruptionConfig corruption{};
  std::size_t epochs = 24;
  double lr = 1e-3;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.1;

  nlohmann::ordered_json to_json() const {
    return {{"uve", uve.to_json()}, {"corruption", corruption.to_json()}, {"epochs", epochs}, {"lr", lr},
            {"batch", batch},       {"seed", seed},                       {"holdout_fraction", holdout_fraction}};
  }
};

struct TrainReport {
  std::vector<double> epoch_loss;        // mean per-map RMSE loss of each epoch
  double heldout_error_all = 0.0;        // mean Euclidean error, all held-out points
  double heldout_error_corrupted = 0.0;  // same, restricted to corrupted points
  double heldout_input_error_corrupted = 0.0;  // corrupted input vs clean, before the model
  std::size_t heldout_maps = 0;
  std::size_t heldout_points = 0;
  std::size_t heldout_corrupted_points = 0;
  bool heldout_is_training_set = false;
  std::size_t steps = 0;
  nlohmann::ordered_json config;
  double wall_clock_s = 0.0;  // not serialized; see to_json

  /// Deterministic report (everything except wall-clock time).
  nlohmann::ordered_json to_json() const {
    return {{"config", config},
            {"epoch_loss", epoch_loss},
            {"steps", steps},
            {"heldout_maps", heldout_maps},
            {"heldout_points", heldout_points},
            {"heldout_corrupted_points", heldout_corrupted_points},
            {"heldout_is_training_set", heldout_is_training_set},
            {"heldout_error_all_m", heldout_error_all},
            {"heldout_error_corrupted_m", heldout_error_corrupted},
            {"heldout_input_error_corrupted_m", heldout_input_error_corrupted}};
  }
};

struct HeldoutErrors {
  double all = 0.0;
  double corrupted = 0.0;
  double input_corrupted = 0.0;
  std::size_t points = 0;
  std::size_t corrupted_points = 0;
};

/// Mean Euclidean reconstruction error over a fixed, seeded corruption of
/// each map.
inline HeldoutErrors evaluate_reconstruction(const std::vector<VectorMap>& maps, const UveConfig& uve,
                                             const ParamStore& ps, CorruptionConfig corruption, std::uint64_t seed) {
  HeldoutErrors e;
  double sum_all = 0.0;
  double sum_cor = 0.0;
  double sum_in = 0.0;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    corruption.seed = derive_seed(seed, "heldout", k);
    const auto [noisy, plan] = corrupt(maps[k], corruption);
    const VectorMap rec = reconstruct(noisy, uve, ps);
    for (std::size_t i = 0; i < rec.instances.size(); ++i)
      for (std::size_t j = 0; j < rec.instances[i].size(); ++j) {
        const auto& a = rec.instances[i].points[j];
        const auto& b = maps[k].instances[i].points[j];
        sum_all += std::hypot(a.x - b.x, a.y - b.y);
        ++e.points;
      }
    for (const auto& c : plan.points) {
      const auto& a = rec.instances[c.instance].points[c.point];
      const auto& n = noisy.instances[c.instance].points[c.point];
      sum_cor += std::hypot(a.x - c.original.x, a.y - c.original.y);
      sum_in += std::hypot(n.x - c.original.x, n.y - c.original.y);
      ++e.corrupted_points;
    }
  }
  if (e.points > 0) e.all = sum_all / static_cast<double>(e.points);
  if (e.corrupted_points > 0) {
    e.corrupted = sum_cor / static_cast<double>(e.corrupted_points);
    e.input_corrupted = sum_in / static_cast<double>(e.corrupted_points);
  }
  return e;
}

struct PretrainResult {
  ParamStore params;
  TrainReport report;
};

/// corrupt -> embed -> encode -> decode -> RMSE -> backward, Adam step per
/// batch. The last holdout_fraction of the corpus is held out for the
/// reported errors (the training set itself when that rounds to zero maps).
using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

inline PretrainResult pretrain_loop(const std::vector<VectorMap>& corpus, const PretrainConfig& cfg,
                                    const EpochCallback& on_epoch = {}) {
  if (corpus.empty()) throw UsageError("pretrain_loop: empty corpus");
  if (cfg.batch == 0) throw UsageError("pretrain_loop: batch must be positive");
  cfg.uve.validate();
  cfg.corruption.validate();
  const auto start_time = std::chrono::steady_clock::now();

  const auto n_hold = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(corpus.size())));
  const std::size_t n_train = corpus.size() - n_hold;
  std::vector<VectorMap> heldout(corpus.begin() + static_cast<std::ptrdiff_t>(n_train), corpus.end());
  const bool heldout_is_train = heldout.empty();
  if (heldout_is_train) heldout.assign(corpus.begin(), corpus.end());

  PretrainResult res{init_uve_params(cfg.uve, derive_seed(cfg.seed, "uve.init")), {}};
  ParamStore& ps = res.params;
  ps.set_seed(cfg.seed);
  const AdamConfig adam{cfg.lr};

  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch));
    for (std::size_t i = n_train; i-- > 1;)
      std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    double epoch_sum = 0.0;
    for (std::size_t b0 = 0; b0 < n_train; b0 += cfg.batch) {
      const std::size_t b1 = std::min(n_train, b0 + cfg.batch);
      const double inv_b = 1.0 / static_cast<double>(b1 - b0);
      ps.zero_grads();
      for (std::size_t b = b0; b < b1; ++b) {
        const std::size_t idx = order[b];
        const VectorMap& clean = corpus[idx];
        if (clean.total_points() == 0) continue;
        CorruptionConfig cc = cfg.corruption;
        cc.seed = derive_seed(cfg.seed, "corrupt", epoch * corpus.size() + idx);
        const VectorMap noisy = corrupt(clean, cc).first;
        const TokenSequence ts = tokenize(noisy, cfg.uve);
        Tape t;
        Var states = encode_tokens(t, ts, cfg.uve, ps);
        Var loss = reconstruction_loss(decode_coordinates(t, states, ts, cfg.uve, ps), coordinate_targets(clean));
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) throw NumericError("pretrain_loop: divergence (non-finite loss) at step " + std::to_string(step));
        epoch_sum += lv;
        t.backward(scale(loss, inv_b), ps, GradMode::accumulate);
      }
      try {
        adam_step(ps, adam);
      } catch (const NumericError& e) {
        throw NumericError("pretrain_loop: divergence at step " + std::to_string(step) + ": " + e.what());
      }
      ++step;
    }
    res.report.epoch_loss.push_back(epoch_sum / static_cast<double>(n_train));
    if (on_epoch) on_epoch(epoch + 1, res.report.epoch_loss.back());
  }

  const auto e = evaluate_reconstruction(heldout, cfg.uve, ps, cfg.corruption, cfg.seed);
  auto& r = res.report;
  r.heldout_error_all = e.all;
  r.heldout_error_corrupted = e.corrupted;
  r.heldout_input_error_corrupted = e.input_corrupted;
  r.heldout_maps = heldout.size();
  r.heldout_points = e.points;
  r.heldout_corrupted_points = e.corrupted_points;
  r.heldout_is_training_set = heldout_is_train;
  r.steps = step;
  r.config = cfg.to_json();
  r.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return res;
}

}  // namespace priormap
