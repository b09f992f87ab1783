// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <mutex>
#include <ostream>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "priormap/errors.hpp"
#include "priormap/map_io.hpp"
#include "priormap/rng.hpp"
#include "priormap/tensor.hpp"
#include "priormap/uve.hpp"
#include "priormap/vector_core.hpp"

namespace priormap {

inline constexpr double kDefaultSearchRange = 5.0;
inline constexpr std::size_t kDefaultPriorNum = 2;

// ---------------------------------------------------------------------------
// Prior store

struct PriorEntry {
  Pose pose;
  VectorMap map;  // world frame
  double timestamp = 0.0;
  std::size_t id = 0;  // insertion order
};

/// Uniform-grid hash over entry positions. Reads may run concurrently;
/// insert takes an exclusive lock.
class PriorStore {
 public:
  explicit PriorStore(double cell_size = 10.0) : cell_(cell_size) {
    if (!(cell_size > 0.0)) throw UsageError("PriorStore: cell size must be positive");
  }
  PriorStore(PriorStore&& o) noexcept : cell_(o.cell_), entries_(std::move(o.entries_)), grid_(std::move(o.grid_)) {}
  PriorStore& operator=(PriorStore&& o) noexcept {
    cell_ = o.cell_;
    entries_ = std::move(o.entries_);
    grid_ = std::move(o.grid_);
    return *this;
  }

  void insert(const Pose& pose, VectorMap map, double timestamp) {
    if (map.frame != Frame::global) throw DataError("insert_prior: map must be in the global frame");
    if (!std::isfinite(pose.x) || !std::isfinite(pose.y) || !std::isfinite(pose.yaw) || !std::isfinite(timestamp))
      throw DataError("insert_prior: non-finite pose or timestamp");
    std::unique_lock lock(mu_);
    const std::size_t id = entries_.size();
    map.pose = pose;
    entries_.push_back({pose, std::move(map), timestamp, id});
    grid_[key(cell_of(pose.x), cell_of(pose.y))].push_back(id);
  }

  /// Entries within `radius` (inclusive), nearest first; equal distances put
  /// the newer timestamp first, then the earlier insertion.
  std::vector<const PriorEntry*> query(double x, double y, double radius, std::size_t limit = SIZE_MAX) const {
    std::shared_lock lock(mu_);
    struct Hit {
      double d;
      const PriorEntry* e;
    };
    std::vector<Hit> hits;
    const long cx0 = cell_of(x - radius), cx1 = cell_of(x + radius);
    const long cy0 = cell_of(y - radius), cy1 = cell_of(y + radius);
    for (long cx = cx0; cx <= cx1; ++cx)
      for (long cy = cy0; cy <= cy1; ++cy) {
        auto it = grid_.find(key(cx, cy));
        if (it == grid_.end()) continue;
        for (auto id : it->second) {
          const auto& e = entries_[id];
          const double d = std::hypot(e.pose.x - x, e.pose.y - y);
          if (d <= radius) hits.push_back({d, &e});
        }
      }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
      if (a.d != b.d) return a.d < b.d;
      if (a.e->timestamp != b.e->timestamp) return a.e->timestamp > b.e->timestamp;
      return a.e->id < b.e->id;
    });
    std::vector<const PriorEntry*> out;
    for (std::size_t k = 0; k < hits.size() && k < limit; ++k) out.push_back(hits[k].e);
    return out;
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }
  const std::vector<PriorEntry>& entries() const { return entries_; }

  /// One JSON record per line: {"pose":[x,y,yaw],"timestamp":t,"map":{...}}.
  void save(std::ostream& out) const {
    std::shared_lock lock(mu_);
    for (const auto& e : entries_) {
      nlohmann::ordered_json j;
      j["pose"] = {e.pose.x, e.pose.y, e.pose.yaw};
      j["timestamp"] = e.timestamp;
      j["map"] = map_to_json(e.map);
      out << j.dump() << '\n';
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write prior store '" + path + "'");
    save(out);
  }

  static PriorStore load(std::istream& in, double cell_size = 10.0) {
    PriorStore s(cell_size);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::ordered_json j;
      try {
        j = nlohmann::ordered_json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw DataError("line " + std::to_string(n) + ": " + e.what());
      }
      if (!j.contains("pose") || !j["pose"].is_array() || j["pose"].size() != 3)
        throw DataError("line " + std::to_string(n) + ": field 'pose': expected [x, y, yaw]");
      if (!j.contains("timestamp") || !j["timestamp"].is_number())
        throw DataError("line " + std::to_string(n) + ": field 'timestamp': expected a number");
      if (!j.contains("map")) throw DataError("line " + std::to_string(n) + ": field 'map': missing");
      Pose p{j["pose"][0].get<double>(), j["pose"][1].get<double>(), j["pose"][2].get<double>()};
      s.insert(p, map_from_json(j["map"], n), j["timestamp"].get<double>());
    }
    return s;
  }

  static PriorStore load(const std::string& path, double cell_size = 10.0) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open prior store '" + path + "'");
    return load(in, cell_size);
  }

 private:
  long cell_of(double v) const { return static_cast<long>(std::floor(v / cell_)); }
  static std::uint64_t key(long cx, long cy) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(cx)) << 32) | static_cast<std::uint32_t>(cy);
  }

  double cell_;
  std::vector<PriorEntry> entries_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid_;
  mutable std::shared_mutex mu_;
};

inline void insert_prior(PriorStore& store, const Pose& pose, VectorMap map, double timestamp) {
  store.insert(pose, std::move(map), timestamp);
}

/// Nearest priors around `pose`, expressed in its ego frame and clipped.
inline std::vector<VectorMap> retrieve_priors(const PriorStore& store, const Pose& pose,
                                              double search_range = kDefaultSearchRange,
                                              std::size_t prior_num = kDefaultPriorNum,
                                              const PerceptionWindow& window = {}) {
  if (!(search_range > 0.0)) throw UsageError("retrieve_priors: search range must be positive");
  if (prior_num < 1) throw UsageError("retrieve_priors: prior_num must be at least 1");
  std::vector<VectorMap> out;
  for (const PriorEntry* e : store.query(pose.x, pose.y, search_range, prior_num))
    out.push_back(clip_to_window(world_to_ego(e->map, pose), window));
  return out;
}

// ---------------------------------------------------------------------------
// Query grid and merges

struct QueryGrid {
  Array q_ins{Shape{0, 0}};  // [m, qd]
  Array q_pt{Shape{0, 0}};   // [n, qd]

  std::size_t m() const { return q_ins.dim(0); }
  std::size_t n() const { return q_pt.dim(0); }
  std::size_t query_dim() const { return q_ins.dim(1); }
  double compose(std::size_t i, std::size_t j, std::size_t k) const { return q_ins.at(i, k) + q_pt.at(j, k); }

  static QueryGrid random(std::size_t m, std::size_t n, std::size_t qd, std::uint64_t seed) {
    if (m == 0 || n == 0 || qd == 0) throw UsageError("QueryGrid: dimensions must be positive");
    return {detail::random_normal(Shape{m, qd}, 0.02, derive_seed(seed, "query.ins")),
            detail::random_normal(Shape{n, qd}, 0.02, derive_seed(seed, "query.pt"))};
  }
};

struct FusionParams {
  Array projection{Shape{0, 0}};         // [dim, qd], shared by all modes
  Array concat_projection{Shape{0, 0}};  // [2qd, qd]
  Array null_prior{Shape{0}};            // [qd]

  static FusionParams random(std::size_t dim, std::size_t qd, std::uint64_t seed) {
    FusionParams p;
    p.projection = detail::random_normal(Shape{dim, qd}, 1.0 / std::sqrt(static_cast<double>(dim)),
                                         derive_seed(seed, "fusion.proj"));
    p.concat_projection = detail::random_normal(Shape{2 * qd, qd}, 1.0 / std::sqrt(2.0 * static_cast<double>(qd)),
                                                derive_seed(seed, "fusion.concat"));
    p.null_prior = detail::random_normal(Shape{qd}, 0.02, derive_seed(seed, "fusion.null"));
    return p;
  }

  /// Concat reduces to the plain query: top block identity, rest zero.
  static FusionParams identity_concat(std::size_t dim, std::size_t qd) {
    FusionParams p;
    p.projection = Array(Shape{dim, qd});
    p.concat_projection = Array(Shape{2 * qd, qd});
    for (std::size_t k = 0; k < qd; ++k) p.concat_projection.at(k, k) = 1.0;
    p.null_prior = Array(Shape{qd});
    return p;
  }
};

enum class MergeMode { add, replace, concat };
inline constexpr MergeMode kDefaultMergeMode = MergeMode::concat;

inline std::string_view to_string(MergeMode m) {
  switch (m) {
    case MergeMode::add: return "add";
    case MergeMode::replace: return "replace";
    case MergeMode::concat: return "concat";
  }
  return "?";
}

inline MergeMode merge_mode_from_string(std::string_view s) {
  if (s == "add") return MergeMode::add;
  if (s == "replace") return MergeMode::replace;
  if (s == "concat") return MergeMode::concat;
  throw UsageError("unknown merge mode '" + std::string(s) + "' (expected add|replace|concat)");
}

struct MergedQueries {
  Array features{Shape{0, 0, 0}};      // [m, n, qd]
  std::vector<std::uint8_t> prior_backed;  // [m * n]
  std::size_t dropped_instances = 0;
  std::size_t dropped_points = 0;

  std::size_t prior_backed_count() const {
    return static_cast<std::size_t>(std::count(prior_backed.begin(), prior_backed.end(), 1));
  }
  Array prior_backed_array() const {
    const std::size_t m = features.dim(0), n = features.dim(1);
    Array a(Shape{m, n});
    for (std::size_t k = 0; k < m * n; ++k) a[k] = prior_backed[k];
    return a;
  }
};

namespace detail {

// P·f for one feature row.
inline void project_row(const Array& proj, const double* f, double* out) {
  const std::size_t dim = proj.dim(0), qd = proj.dim(1);
  std::fill(out, out + qd, 0.0);
  for (std::size_t r = 0; r < dim; ++r) {
    const double v = f[r];
    for (std::size_t k = 0; k < qd; ++k) out[k] += v * proj.at(r, k);
  }
}

struct SlotPrior {
  std::vector<double> ins, pt;  // projected instance and point components
};

}  // namespace detail

/// Priors fill disjoint consecutive instance-slot blocks in the given order
/// (nearest first); anything past the grid is dropped and counted.
inline MergedQueries merge(const QueryGrid& grid, std::span<const PriorFeatureBundle> bundles,
                           const FusionParams& params, MergeMode mode) {
  const std::size_t m = grid.m(), n = grid.n(), qd = grid.query_dim();
  if (grid.q_pt.dim(1) != qd) throw ShapeError("merge: q_ins and q_pt widths differ");
  MergedQueries out;
  out.features = Array(Shape{m, n, qd});
  out.prior_backed.assign(m * n, 0);

  // slot -> projected prior components
  std::vector<std::vector<detail::SlotPrior>> slots(m, std::vector<detail::SlotPrior>(n));
  std::size_t cursor = 0;
  for (const auto& b : bundles) {
    if (b.num_instances() == 0) continue;
    if (params.projection.rank() != 2 || params.projection.dim(0) != b.dim() || params.projection.dim(1) != qd)
      throw ShapeError("merge: projection shape " + shape_str(params.projection.shape()) + " does not map dim " +
                       std::to_string(b.dim()) + " to query_dim " + std::to_string(qd));
    for (std::size_t i = 0; i < b.num_instances(); ++i) {
      const std::size_t npts = b.points_per_instance[i];
      if (cursor >= m) {
        ++out.dropped_instances;
        out.dropped_points += npts;
        continue;
      }
      std::vector<double> pins(qd);
      detail::project_row(params.projection, &b.f_ins.storage()[i * b.dim()], pins.data());
      for (std::size_t j = 0; j < npts; ++j) {
        if (j >= n) {
          ++out.dropped_points;
          continue;
        }
        auto& s = slots[cursor][j];
        s.ins = pins;
        s.pt.resize(qd);
        detail::project_row(params.projection, &b.f_pt.storage()[(i * b.f_pt.dim(1) + j) * b.dim()], s.pt.data());
        out.prior_backed[cursor * n + j] = 1;
      }
      ++cursor;
    }
  }

  if (mode == MergeMode::concat) {
    if (params.concat_projection.shape() != Shape{2 * qd, qd})
      throw ShapeError("merge: concat projection must be " + shape_str(Shape{2 * qd, qd}));
    if (params.null_prior.shape() != Shape{qd}) throw ShapeError("merge: null prior must be " + shape_str(Shape{qd}));
  }
  std::vector<double> v(2 * qd);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double* o = &out.features.at(i, j, 0);
      const bool backed = out.prior_backed[i * n + j];
      const auto& s = slots[i][j];
      switch (mode) {
        case MergeMode::add:
          for (std::size_t k = 0; k < qd; ++k)
            o[k] = backed ? (grid.q_ins.at(i, k) + s.ins[k]) + (grid.q_pt.at(j, k) + s.pt[k]) : grid.compose(i, j, k);
          break;
        case MergeMode::replace:
          for (std::size_t k = 0; k < qd; ++k) o[k] = backed ? s.ins[k] + s.pt[k] : grid.compose(i, j, k);
          break;
        case MergeMode::concat:
          for (std::size_t k = 0; k < qd; ++k) {
            v[k] = grid.compose(i, j, k);
            v[qd + k] = backed ? s.ins[k] + s.pt[k] : params.null_prior[k];
          }
          for (std::size_t k = 0; k < qd; ++k) o[k] = 0.0;
          for (std::size_t r = 0; r < 2 * qd; ++r)
            for (std::size_t k = 0; k < qd; ++k) o[k] += v[r] * params.concat_projection.at(r, k);
          break;
      }
    }
  return out;
}

inline MergedQueries merge_add(const QueryGrid& g, std::span<const PriorFeatureBundle> b, const FusionParams& p) {
  return merge(g, b, p, MergeMode::add);
}
inline MergedQueries merge_replace(const QueryGrid& g, std::span<const PriorFeatureBundle> b, const FusionParams& p) {
  return merge(g, b, p, MergeMode::replace);
}
inline MergedQueries merge_concat(const QueryGrid& g, std::span<const PriorFeatureBundle> b, const FusionParams& p) {
  return merge(g, b, p, MergeMode::concat);
}

/// The unmerged grid as [m, n, qd], for comparisons.
inline Array compose_grid(const QueryGrid& g) {
  Array a(Shape{g.m(), g.n(), g.query_dim()});
  for (std::size_t i = 0; i < g.m(); ++i)
    for (std::size_t j = 0; j < g.n(); ++j)
      for (std::size_t k = 0; k < g.query_dim(); ++k) a.at(i, j, k) = g.compose(i, j, k);
  return a;
}

}  // namespace priormap
