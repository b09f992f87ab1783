// SPDX-License-Identifier: Apache-2.0
#pragma once

// Vectorized map data model: points carrying position, direction and type,
// ordered polylines of such points, and maps made of polylines.

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "priormap/errors.hpp"

namespace priormap {

enum class ElementType : std::uint8_t {
  lane_divider = 0,
  pedestrian_crossing = 1,
  road_boundary = 2,
  centerline = 3,
};

inline constexpr std::size_t kNumElementTypes = 4;

/// The three classes scored by the evaluation protocol.
inline constexpr std::array<ElementType, 3> kEvalClasses = {
    ElementType::lane_divider, ElementType::pedestrian_crossing, ElementType::road_boundary};

inline constexpr int type_code(ElementType t) { return static_cast<int>(t); }

inline std::string_view to_string(ElementType t) {
  switch (t) {
    case ElementType::lane_divider: return "lane_divider";
    case ElementType::pedestrian_crossing: return "pedestrian_crossing";
    case ElementType::road_boundary: return "road_boundary";
    case ElementType::centerline: return "centerline";
  }
  return "?";
}

inline std::optional<ElementType> element_type_from_string(std::string_view s) {
  if (s == "lane_divider") return ElementType::lane_divider;
  if (s == "pedestrian_crossing") return ElementType::pedestrian_crossing;
  if (s == "road_boundary") return ElementType::road_boundary;
  if (s == "centerline") return ElementType::centerline;
  return std::nullopt;
}

enum class SourceTag : std::uint8_t { sd_map, hd_map_ex, online_local, ground_truth, prediction };

inline std::string_view to_string(SourceTag s) {
  switch (s) {
    case SourceTag::sd_map: return "sd_map";
    case SourceTag::hd_map_ex: return "hd_map_ex";
    case SourceTag::online_local: return "online_local";
    case SourceTag::ground_truth: return "ground_truth";
    case SourceTag::prediction: return "prediction";
  }
  return "?";
}

inline std::optional<SourceTag> source_tag_from_string(std::string_view s) {
  if (s == "sd_map") return SourceTag::sd_map;
  if (s == "hd_map_ex") return SourceTag::hd_map_ex;
  if (s == "online_local") return SourceTag::online_local;
  if (s == "ground_truth") return SourceTag::ground_truth;
  if (s == "prediction") return SourceTag::prediction;
  return std::nullopt;
}

enum class Frame : std::uint8_t { global, ego };

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

/// p = [x, y, vx, vy, c]. (vx, vy) is either (0, 0) or unit length.
struct VectorPoint {
  double x = 0.0;
  double y = 0.0;
  double vx = 0.0;
  double vy = 0.0;
  int cls = 0;
  friend bool operator==(const VectorPoint&, const VectorPoint&) = default;
};

/// Pose of the ego frame expressed in world coordinates.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;
  friend bool operator==(const Pose&, const Pose&) = default;
};

struct VectorInstance {
  std::vector<VectorPoint> points;
  ElementType element_type = ElementType::lane_divider;
  double confidence = 1.0;
  std::uint64_t instance_id = 0;

  std::size_t size() const { return points.size(); }
};

struct VectorMap {
  std::vector<VectorInstance> instances;
  Frame frame = Frame::ego;
  std::optional<Pose> pose;
  SourceTag source_tag = SourceTag::ground_truth;
  std::string origin;  // name of the world origin when frame == global

  std::size_t total_points() const {
    std::size_t n = 0;
    for (const auto& inst : instances) n += inst.size();
    return n;
  }
};

/// Axis-aligned ego-frame rectangle kept by evaluation and encoding.
struct PerceptionWindow {
  double x_min = -15.0;
  double x_max = 15.0;
  double y_min = -30.0;
  double y_max = 30.0;

  void validate() const {
    if (!(x_min < x_max) || !(y_min < y_max))
      throw UsageError("perception window requires x_min < x_max and y_min < y_max");
  }
  bool contains(double x, double y, double tol = 0.0) const {
    return x >= x_min - tol && x <= x_max + tol && y >= y_min - tol && y <= y_max + tol;
  }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  friend bool operator==(const PerceptionWindow&, const PerceptionWindow&) = default;
};

inline std::uint64_t next_instance_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

namespace detail {
inline bool unit_or_zero(double vx, double vy) {
  if (vx == 0.0 && vy == 0.0) return true;
  return std::abs(std::hypot(vx, vy) - 1.0) <= 1e-6;
}
}  // namespace detail

/// Builds an instance from already-directed points. cls is overwritten with
/// the element type code; point order is kept as given.
inline VectorInstance make_instance(std::vector<VectorPoint> points, ElementType type,
                                    double confidence = 1.0) {
  if (points.size() < 2) throw DataError("make_instance: too few points (need at least 2)");
  if (!(confidence >= 0.0 && confidence <= 1.0))
    throw DataError("make_instance: confidence must lie in [0, 1]");
  for (auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw DataError("make_instance: non-finite coordinate");
    if (!std::isfinite(p.vx) || !std::isfinite(p.vy) || !detail::unit_or_zero(p.vx, p.vy))
      throw DataError("make_instance: direction must be (0,0) or unit length");
    p.cls = type_code(type);
  }
  return VectorInstance{std::move(points), type, confidence, next_instance_id()};
}

/// Convenience overload for bare positions; directions are left at (0, 0).
inline VectorInstance make_instance(std::span<const Vec2> xy, ElementType type,
                                    double confidence = 1.0) {
  std::vector<VectorPoint> pts;
  pts.reserve(xy.size());
  for (const auto& p : xy) pts.push_back({p.x, p.y, 0.0, 0.0, 0});
  return make_instance(std::move(pts), type, confidence);
}

inline VectorInstance make_instance(std::initializer_list<Vec2> xy, ElementType type,
                                    double confidence = 1.0) {
  return make_instance(std::span<const Vec2>(xy.begin(), xy.size()), type, confidence);
}

/// Unit central-difference tangents. Interior points use the chord from the
/// predecessor to the successor, endpoints their single adjacent chord. A
/// zero-length chord inherits the previous point's direction; leading
/// zero-length chords take the first non-degenerate direction after them.
inline VectorInstance compute_directions(VectorInstance inst) {
  auto& pts = inst.points;
  const std::size_t n = pts.size();
  if (n < 2) throw DataError("compute_directions: too few points (need at least 2)");
  std::vector<bool> defined(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i == 0 ? 0 : i - 1;
    const std::size_t hi = i + 1 == n ? n - 1 : i + 1;
    const double dx = pts[hi].x - pts[lo].x;
    const double dy = pts[hi].y - pts[lo].y;
    const double len = std::hypot(dx, dy);
    if (len > 0.0) {
      pts[i].vx = dx / len;
      pts[i].vy = dy / len;
      defined[i] = true;
    } else if (i > 0 && defined[i - 1]) {
      pts[i].vx = pts[i - 1].vx;
      pts[i].vy = pts[i - 1].vy;
      defined[i] = true;
    } else {
      pts[i].vx = 0.0;
      pts[i].vy = 0.0;
    }
  }
  std::size_t first = 0;
  while (first < n && !defined[first]) ++first;
  if (first < n) {
    for (std::size_t i = 0; i < first; ++i) {
      pts[i].vx = pts[first].vx;
      pts[i].vy = pts[first].vy;
    }
  }
  return inst;
}

inline double polyline_length(const VectorInstance& inst) {
  double len = 0.0;
  for (std::size_t i = 1; i < inst.points.size(); ++i)
    len += std::hypot(inst.points[i].x - inst.points[i - 1].x, inst.points[i].y - inst.points[i - 1].y);
  return len;
}

}  // namespace priormap
