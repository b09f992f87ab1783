// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "priormap/errors.hpp"
#include "priormap/map_io.hpp"
#include "priormap/pretrain.hpp"
#include "priormap/vector_core.hpp"

namespace priormap {

inline constexpr std::size_t kChamferPoints = 100;
inline constexpr std::array<double, 3> kDefaultThresholds = {0.5, 1.0, 1.5};
inline constexpr double kRasterResolution = 0.15;

// ---------------------------------------------------------------------------
// Chamfer distance

inline double chamfer_distance(std::span<const VectorPoint> a, std::span<const VectorPoint> b) {
  if (a.empty() || b.empty()) throw DataError("chamfer_distance: empty instance");
  auto one_sided = [](std::span<const VectorPoint> from, std::span<const VectorPoint> to) {
    double total = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, std::hypot(p.x - q.x, p.y - q.y));
      total += best;
    }
    return total / static_cast<double>(from.size());
  };
  return 0.5 * (one_sided(a, b) + one_sided(b, a));
}

/// Both instances are resampled to `resample` points first; 0 uses the raw points.
inline double chamfer_distance(const VectorInstance& a, const VectorInstance& b,
                               std::size_t resample = kChamferPoints) {
  if (a.points.empty() || b.points.empty()) throw DataError("chamfer_distance: empty instance");
  if (resample == 0) return chamfer_distance(std::span<const VectorPoint>(a.points), b.points);
  const auto ra = resample_instance(a, resample);
  const auto rb = resample_instance(b, resample);
  return chamfer_distance(std::span<const VectorPoint>(ra.points), rb.points);
}

// ---------------------------------------------------------------------------
// Matching and AP

struct PredMatch {
  std::size_t pred_index = 0;            // index into the prediction map
  std::optional<std::size_t> gt_index;   // index into the GT map
  double distance = std::numeric_limits<double>::infinity();  // to the nearest unmatched GT at decision time
  double confidence = 0.0;
};

struct MatchResult {
  ElementType cls = ElementType::lane_divider;
  double tau = 0.0;
  std::vector<PredMatch> preds;  // in processing order (descending confidence)
  std::size_t num_gt = 0;

  std::size_t true_positives() const {
    return static_cast<std::size_t>(std::count_if(preds.begin(), preds.end(), [](auto& p) { return p.gt_index; }));
  }
};

/// Pairwise Chamfer distances between class members, computed once per frame
/// and reused across thresholds.
struct DistanceTable {
  std::vector<std::size_t> pred_idx, gt_idx;
  std::vector<double> d;  // [pred][gt]
  double at(std::size_t p, std::size_t g) const { return d[p * gt_idx.size() + g]; }
};

inline DistanceTable distance_table(std::span<const VectorInstance> preds, std::span<const VectorInstance> gts,
                                    ElementType cls, std::size_t resample = kChamferPoints) {
  DistanceTable t;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i].element_type == cls) t.pred_idx.push_back(i);
  for (std::size_t i = 0; i < gts.size(); ++i)
    if (gts[i].element_type == cls) t.gt_idx.push_back(i);
  std::vector<VectorInstance> rp, rg;
  for (auto i : t.pred_idx) rp.push_back(resample ? resample_instance(preds[i], resample) : preds[i]);
  for (auto i : t.gt_idx) rg.push_back(resample ? resample_instance(gts[i], resample) : gts[i]);
  t.d.resize(rp.size() * rg.size());
  for (std::size_t p = 0; p < rp.size(); ++p)
    for (std::size_t g = 0; g < rg.size(); ++g)
      t.d[p * rg.size() + g] = chamfer_distance(std::span<const VectorPoint>(rp[p].points), rg[g].points);
  return t;
}

inline MatchResult match_instances(std::span<const VectorInstance> preds, const DistanceTable& t, ElementType cls,
                                   double tau) {
  MatchResult r;
  r.cls = cls;
  r.tau = tau;
  r.num_gt = t.gt_idx.size();
  std::vector<std::size_t> order(t.pred_idx.size());
  std::iota(order.begin(), order.end(), 0);
  // ties keep input order
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[t.pred_idx[a]].confidence > preds[t.pred_idx[b]].confidence;
  });
  std::vector<bool> taken(t.gt_idx.size(), false);
  for (auto p : order) {
    PredMatch m;
    m.pred_index = t.pred_idx[p];
    m.confidence = preds[m.pred_index].confidence;
    std::optional<std::size_t> best;
    for (std::size_t g = 0; g < t.gt_idx.size(); ++g) {
      if (taken[g]) continue;
      if (!best || t.at(p, g) < t.at(p, *best)) best = g;
    }
    if (best) {
      m.distance = t.at(p, *best);
      if (m.distance < tau) {
        taken[*best] = true;
        m.gt_index = t.gt_idx[*best];
      }
    }
    r.preds.push_back(m);
  }
  return r;
}

inline MatchResult match_instances(std::span<const VectorInstance> preds, std::span<const VectorInstance> gts,
                                   ElementType cls, double tau, std::size_t resample = kChamferPoints) {
  return match_instances(preds, distance_table(preds, gts, cls, resample), cls, tau);
}

/// 101-point interpolated AP over matches pooled across frames. Predictions
/// are ranked by confidence; ties keep frame order, then per-frame order.
inline double average_precision(std::span<const MatchResult> frames) {
  std::size_t num_gt = 0;
  struct Det {
    double conf;
    bool tp;
  };
  std::vector<Det> dets;
  for (const auto& f : frames) {
    num_gt += f.num_gt;
    for (const auto& p : f.preds) dets.push_back({p.confidence, p.gt_index.has_value()});
  }
  if (num_gt == 0) throw DataError("average_precision: no ground-truth instances");
  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.conf > b.conf; });
  // running precision and true-positive count after each detection
  std::vector<double> prec(dets.size());
  std::vector<std::size_t> tps(dets.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    tp += dets[k].tp;
    tps[k] = tp;
    prec[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  // suffix max gives the interpolated precision envelope
  for (std::size_t k = dets.size(); k-- > 1;) prec[k - 1] = std::max(prec[k - 1], prec[k]);
  double total = 0.0;
  std::size_t k = 0;
  for (std::size_t r = 0; r <= 100; ++r) {
    // first rank whose recall reaches r/100, compared in integers
    while (k < dets.size() && tps[k] * 100 < r * num_gt) ++k;
    if (k < dets.size()) total += prec[k];
  }
  return total / 101.0;
}

inline double average_precision(std::span<const VectorInstance> preds, std::span<const VectorInstance> gts,
                                 ElementType cls, double tau, std::size_t resample = kChamferPoints) {
  const MatchResult m = match_instances(preds, gts, cls, tau, resample);
  return average_precision(std::span<const MatchResult>(&m, 1));
}

struct ClassAp {
  ElementType cls = ElementType::lane_divider;
  bool has_gt = false;
  std::vector<double> ap_per_tau;
  double ap = 0.0;  // mean over thresholds
};

struct ApReport {
  std::vector<double> thresholds;
  std::vector<ClassAp> classes;
  double map = 0.0;  // mean over classes with GT
  std::vector<std::string> excluded;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = "ap";
    j["thresholds"] = thresholds;
    auto& per = j["classes"] = nlohmann::ordered_json::object();
    for (const auto& c : classes) {
      if (!c.has_gt) continue;
      nlohmann::ordered_json e;
      for (std::size_t t = 0; t < thresholds.size(); ++t) {
        std::string key = "ap@" + nlohmann::json(thresholds[t]).dump();
        e[key] = c.ap_per_tau[t];
      }
      e["ap"] = c.ap;
      per[std::string(to_string(c.cls))] = e;
    }
    j["mAP"] = map;
    j["excluded_classes"] = excluded;
    return j;
  }
};

/// Dataset-level AP for the evaluation classes. preds[k] pairs with gts[k].
inline ApReport evaluate_ap(std::span<const VectorMap> preds, std::span<const VectorMap> gts,
                            std::span<const double> thresholds = kDefaultThresholds,
                            std::size_t resample = kChamferPoints) {
  if (preds.size() != gts.size()) throw DataError("evaluate_ap: prediction and GT frame counts differ");
  if (thresholds.empty()) throw UsageError("evaluate_ap: no thresholds");
  ApReport rep;
  rep.thresholds.assign(thresholds.begin(), thresholds.end());
  std::size_t counted = 0;
  for (auto cls : kEvalClasses) {
    ClassAp c;
    c.cls = cls;
    std::vector<std::vector<MatchResult>> per_tau(thresholds.size());
    for (std::size_t f = 0; f < preds.size(); ++f) {
      const auto table = distance_table(preds[f].instances, gts[f].instances, cls, resample);
      for (std::size_t t = 0; t < thresholds.size(); ++t)
        per_tau[t].push_back(match_instances(preds[f].instances, table, cls, thresholds[t]));
    }
    std::size_t num_gt = 0;
    for (const auto& m : per_tau[0]) num_gt += m.num_gt;
    c.has_gt = num_gt > 0;
    if (c.has_gt) {
      for (const auto& ms : per_tau) c.ap_per_tau.push_back(average_precision(ms));
      c.ap = std::accumulate(c.ap_per_tau.begin(), c.ap_per_tau.end(), 0.0) / static_cast<double>(thresholds.size());
      rep.map += c.ap;
      ++counted;
    } else {
      rep.excluded.emplace_back(to_string(cls));
    }
    rep.classes.push_back(std::move(c));
  }
  if (counted) rep.map /= static_cast<double>(counted);
  return rep;
}

// ---------------------------------------------------------------------------
// Rasterization and IoU

struct RasterGrid {
  PerceptionWindow window;
  double resolution = kRasterResolution;
  std::size_t rows = 0;  // along y
  std::size_t cols = 0;  // along x
  std::array<std::vector<std::uint8_t>, kNumElementTypes> channels;

  RasterGrid() = default;
  RasterGrid(const PerceptionWindow& w, double res) : window(w), resolution(res) {
    w.validate();
    if (!(res > 0.0)) throw UsageError("raster resolution must be positive");
    rows = static_cast<std::size_t>(std::llround(w.height() / res));
    cols = static_cast<std::size_t>(std::llround(w.width() / res));
    for (auto& ch : channels) ch.assign(rows * cols, 0);
  }

  std::uint8_t at(ElementType t, std::size_t r, std::size_t c) const { return channels[type_code(t)][r * cols + c]; }
  std::size_t count(ElementType t) const {
    const auto& ch = channels[type_code(t)];
    return static_cast<std::size_t>(std::count(ch.begin(), ch.end(), 1));
  }
  friend bool operator==(const RasterGrid&, const RasterGrid&) = default;
};

/// Polylines are sampled at a quarter cell; each sample marks the cell that
/// contains it (half-open cells, the far window edge belongs to the last
/// cell). The mark is then dilated to a square of the requested width.
inline RasterGrid rasterize(const VectorMap& map, const PerceptionWindow& window = {},
                            double resolution = kRasterResolution, double line_width_m = kRasterResolution) {
  RasterGrid g(window, resolution);
  const double eps = 1e-9;
  const auto radius = static_cast<long>(std::max(0.0, std::round((line_width_m / resolution - 1.0) / 2.0)));
  auto cell = [&](double v, double lo, double hi, std::size_t n) -> std::optional<long> {
    if (v < lo - eps || v > hi + eps) return std::nullopt;
    long c = static_cast<long>(std::floor((v - lo) / resolution + eps));
    return std::clamp<long>(c, 0, static_cast<long>(n) - 1);
  };
  for (const auto& inst : map.instances) {
    auto& ch = g.channels[type_code(inst.element_type)];
    auto mark = [&](double x, double y) {
      auto c = cell(x, window.x_min, window.x_max, g.cols);
      auto r = cell(y, window.y_min, window.y_max, g.rows);
      if (!c || !r) return;
      for (long dr = -radius; dr <= radius; ++dr)
        for (long dc = -radius; dc <= radius; ++dc) {
          const long rr = *r + dr, cc = *c + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(g.rows) || cc >= static_cast<long>(g.cols)) continue;
          ch[static_cast<std::size_t>(rr) * g.cols + static_cast<std::size_t>(cc)] = 1;
        }
    };
    const auto& pts = inst.points;
    if (pts.size() == 1) mark(pts[0].x, pts[0].y);
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      const double dx = pts[i + 1].x - pts[i].x, dy = pts[i + 1].y - pts[i].y;
      const auto steps = static_cast<std::size_t>(std::ceil(std::hypot(dx, dy) / (resolution / 4.0)));
      for (std::size_t s = 0; s <= steps; ++s) {
        const double t = steps ? static_cast<double>(s) / static_cast<double>(steps) : 0.0;
        mark(pts[i].x + t * dx, pts[i].y + t * dy);
      }
    }
  }
  return g;
}

struct IouReport {
  std::vector<ElementType> classes;
  std::vector<double> iou;
  std::vector<bool> both_empty;
  double mean = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = "iou";
    auto& per = j["classes"] = nlohmann::ordered_json::object();
    for (std::size_t k = 0; k < classes.size(); ++k)
      per[std::string(to_string(classes[k]))] = {{"iou", iou[k]}, {"both_empty", static_cast<bool>(both_empty[k])}};
    j["mIoU"] = mean;
    return j;
  }
};

inline IouReport iou(const RasterGrid& a, const RasterGrid& b) {
  if (a.rows != b.rows || a.cols != b.cols || a.resolution != b.resolution || !(a.window == b.window))
    throw DataError("iou: raster grids differ in dimensions or resolution");
  IouReport r;
  for (auto cls : kEvalClasses) {
    const auto& ca = a.channels[type_code(cls)];
    const auto& cb = b.channels[type_code(cls)];
    std::size_t inter = 0, uni = 0;
    for (std::size_t k = 0; k < ca.size(); ++k) {
      inter += (ca[k] & cb[k]);
      uni += (ca[k] | cb[k]);
    }
    r.classes.push_back(cls);
    r.both_empty.push_back(uni == 0);
    r.iou.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni));
  }
  r.mean = std::accumulate(r.iou.begin(), r.iou.end(), 0.0) / static_cast<double>(r.iou.size());
  return r;
}

/// Accumulates IoU counts over many frames before dividing.
inline IouReport iou(std::span<const RasterGrid> a, std::span<const RasterGrid> b) {
  if (a.size() != b.size()) throw DataError("iou: frame counts differ");
  IouReport r;
  for (auto cls : kEvalClasses) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t f = 0; f < a.size(); ++f) {
      if (a[f].rows != b[f].rows || a[f].cols != b[f].cols || a[f].resolution != b[f].resolution)
        throw DataError("iou: raster grids differ in dimensions or resolution");
      const auto& ca = a[f].channels[type_code(cls)];
      const auto& cb = b[f].channels[type_code(cls)];
      for (std::size_t k = 0; k < ca.size(); ++k) {
        inter += (ca[k] & cb[k]);
        uni += (ca[k] | cb[k]);
      }
    }
    r.classes.push_back(cls);
    r.both_empty.push_back(uni == 0);
    r.iou.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni));
  }
  r.mean = std::accumulate(r.iou.begin(), r.iou.end(), 0.0) / static_cast<double>(r.iou.size());
  return r;
}

// ---------------------------------------------------------------------------
// Index-aligned point error

inline void check_same_structure(const VectorMap& a, const VectorMap& b) {
  if (a.instances.size() != b.instances.size())
    throw DataError("mean_point_error: instance counts differ (" + std::to_string(a.instances.size()) + " vs " +
                    std::to_string(b.instances.size()) + ")");
  for (std::size_t i = 0; i < a.instances.size(); ++i)
    if (a.instances[i].size() != b.instances[i].size())
      throw DataError("mean_point_error: instance " + std::to_string(i) + " point counts differ");
}

inline double mean_point_error(const VectorMap& pred, const VectorMap& gt) {
  check_same_structure(pred, gt);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.instances.size(); ++i)
    for (std::size_t j = 0; j < pred.instances[i].size(); ++j) {
      const auto& p = pred.instances[i].points[j];
      const auto& q = gt.instances[i].points[j];
      total += std::hypot(p.x - q.x, p.y - q.y);
      ++n;
    }
  return n ? total / static_cast<double>(n) : 0.0;
}

inline double mean_point_error(const VectorMap& pred, const VectorMap& gt, const CorruptionPlan& plan) {
  check_same_structure(pred, gt);
  if (plan.points.empty()) return 0.0;
  double total = 0.0;
  for (const auto& cp : plan.points) {
    if (cp.instance >= pred.instances.size() || cp.point >= pred.instances[cp.instance].size())
      throw DataError("mean_point_error: plan refers outside the map");
    const auto& p = pred.instances[cp.instance].points[cp.point];
    const auto& q = gt.instances[cp.instance].points[cp.point];
    total += std::hypot(p.x - q.x, p.y - q.y);
  }
  return total / static_cast<double>(plan.points.size());
}

}  // namespace priormap
