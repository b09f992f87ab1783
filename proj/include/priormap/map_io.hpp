// SPDX-License-Identifier: Apache-2.0
#pragma once

// Line-delimited map records, frame transforms, window clipping and
// arc-length resampling.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "priormap/errors.hpp"
#include "priormap/vector_core.hpp"

namespace priormap {

inline constexpr std::size_t kDefaultPointsPerInstance = 20;

namespace detail {

using ojson = nlohmann::ordered_json;

[[noreturn]] inline void field_error(std::size_t line, const std::string& field, const std::string& what) {
  throw DataError("line " + std::to_string(line) + ": field '" + field + "': " + what);
}

inline double number_at(const ojson& j, std::size_t line, const std::string& field) {
  if (!j.is_number()) field_error(line, field, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) field_error(line, field, "non-finite number");
  return v;
}

inline Vec2 pair_at(const ojson& j, std::size_t line, const std::string& field) {
  if (!j.is_array() || j.size() != 2) field_error(line, field, "expected [a, b]");
  return {number_at(j[0], line, field + "[0]"), number_at(j[1], line, field + "[1]")};
}

inline VectorInstance parse_instance(const ojson& j, std::size_t line, const std::string& field) {
  if (!j.is_object()) field_error(line, field, "expected an object");
  if (!j.contains("type") || !j["type"].is_string()) field_error(line, field + ".type", "missing element type");
  const auto type_str = j["type"].get<std::string>();
  const auto type = element_type_from_string(type_str);
  if (!type) field_error(line, field + ".type", "unknown element_type '" + type_str + "'");
  double confidence = 1.0;
  if (j.contains("confidence") && !j["confidence"].is_null())
    confidence = number_at(j["confidence"], line, field + ".confidence");
  if (!j.contains("points") || !j["points"].is_array()) field_error(line, field + ".points", "expected an array");
  const auto& pts = j["points"];
  std::vector<VectorPoint> points;
  points.reserve(pts.size());
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const Vec2 p = pair_at(pts[k], line, field + ".points[" + std::to_string(k) + "]");
    points.push_back({p.x, p.y, 0.0, 0.0, 0});
  }
  bool derive = true;
  if (j.contains("dirs") && !j["dirs"].is_null()) {
    const auto& dirs = j["dirs"];
    if (!dirs.is_array() || dirs.size() != pts.size())
      field_error(line, field + ".dirs", "expected one direction per point");
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      const Vec2 d = pair_at(dirs[k], line, field + ".dirs[" + std::to_string(k) + "]");
      points[k].vx = d.x;
      points[k].vy = d.y;
    }
    derive = false;
  }
  try {
    auto inst = make_instance(std::move(points), *type, confidence);
    return derive ? compute_directions(std::move(inst)) : inst;
  } catch (const DataError& e) {
    field_error(line, field, e.what());
  }
}

inline VectorMap parse_record(const ojson& j, std::size_t line) {
  if (!j.is_object()) field_error(line, "<record>", "expected a JSON object");
  VectorMap map;
  if (!j.contains("frame") || !j["frame"].is_string()) field_error(line, "frame", "missing");
  const auto frame = j["frame"].get<std::string>();
  if (frame == "global") map.frame = Frame::global;
  else if (frame == "ego") map.frame = Frame::ego;
  else field_error(line, "frame", "expected 'global' or 'ego', got '" + frame + "'");
  if (j.contains("pose") && !j["pose"].is_null()) {
    const auto& p = j["pose"];
    if (!p.is_array() || p.size() != 3) field_error(line, "pose", "expected [x, y, yaw]");
    map.pose = Pose{number_at(p[0], line, "pose[0]"), number_at(p[1], line, "pose[1]"),
                    number_at(p[2], line, "pose[2]")};
  }
  if (j.contains("source")) {
    if (!j["source"].is_string()) field_error(line, "source", "expected a string");
    const auto s = j["source"].get<std::string>();
    const auto tag = source_tag_from_string(s);
    if (!tag) field_error(line, "source", "unknown source tag '" + s + "'");
    map.source_tag = *tag;
  }
  if (j.contains("origin") && j["origin"].is_string()) map.origin = j["origin"].get<std::string>();
  if (!j.contains("instances") || !j["instances"].is_array()) field_error(line, "instances", "expected an array");
  const auto& insts = j["instances"];
  for (std::size_t i = 0; i < insts.size(); ++i)
    map.instances.push_back(parse_instance(insts[i], line, "instances[" + std::to_string(i) + "]"));
  return map;
}

}  // namespace detail

inline nlohmann::ordered_json map_to_json(const VectorMap& map) {
  detail::ojson j;
  j["frame"] = map.frame == Frame::global ? "global" : "ego";
  if (map.pose) j["pose"] = {map.pose->x, map.pose->y, map.pose->yaw};
  else j["pose"] = nullptr;
  j["source"] = std::string(to_string(map.source_tag));
  if (!map.origin.empty()) j["origin"] = map.origin;
  auto insts = detail::ojson::array();
  for (const auto& inst : map.instances) {
    detail::ojson ji;
    ji["type"] = std::string(to_string(inst.element_type));
    ji["confidence"] = inst.confidence;
    auto pts = detail::ojson::array();
    auto dirs = detail::ojson::array();
    for (const auto& p : inst.points) {
      pts.push_back({p.x, p.y});
      dirs.push_back({p.vx, p.vy});
    }
    ji["points"] = std::move(pts);
    ji["dirs"] = std::move(dirs);
    insts.push_back(std::move(ji));
  }
  j["instances"] = std::move(insts);
  return j;
}

inline VectorMap map_from_json(const nlohmann::ordered_json& j, std::size_t line = 1) {
  return detail::parse_record(j, line);
}

/// One VectorMap per non-blank line.
inline std::vector<VectorMap> parse_maps(std::istream& in) {
  std::vector<VectorMap> maps;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    detail::ojson j;
    try {
      j = detail::ojson::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("line " + std::to_string(line) + ": malformed record: " + e.what());
    }
    maps.push_back(detail::parse_record(j, line));
  }
  return maps;
}

inline std::vector<VectorMap> parse_map_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open map file '" + path + "'");
  return parse_maps(in);
}

inline std::string serialize_map(const VectorMap& map) { return map_to_json(map).dump(); }

inline void write_maps(std::ostream& out, const std::vector<VectorMap>& maps) {
  for (const auto& m : maps) out << serialize_map(m) << '\n';
}

inline void write_map_file(const std::string& path, const std::vector<VectorMap>& maps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write map file '" + path + "'");
  write_maps(out, maps);
}

// ---------------------------------------------------------------------------
// Frames

inline VectorMap world_to_ego(const VectorMap& map, const Pose& pose) {
  if (map.frame != Frame::global) throw DataError("world_to_ego: map must be in the global frame");
  const double c = std::cos(pose.yaw);
  const double s = std::sin(pose.yaw);
  VectorMap out = map;
  for (auto& inst : out.instances) {
    for (auto& p : inst.points) {
      const double dx = p.x - pose.x;
      const double dy = p.y - pose.y;
      p.x = c * dx + s * dy;
      p.y = -s * dx + c * dy;
      const double vx = p.vx;
      p.vx = c * vx + s * p.vy;
      p.vy = -s * vx + c * p.vy;
    }
  }
  out.frame = Frame::ego;
  out.pose = pose;
  return out;
}

inline VectorMap ego_to_world(const VectorMap& map, const Pose& pose) {
  if (map.frame != Frame::ego) throw DataError("ego_to_world: map must be in the ego frame");
  const double c = std::cos(pose.yaw);
  const double s = std::sin(pose.yaw);
  VectorMap out = map;
  for (auto& inst : out.instances) {
    for (auto& p : inst.points) {
      const double ex = p.x;
      p.x = c * ex - s * p.y + pose.x;
      p.y = s * ex + c * p.y + pose.y;
      const double vx = p.vx;
      p.vx = c * vx - s * p.vy;
      p.vy = s * vx + c * p.vy;
    }
  }
  out.frame = Frame::global;
  out.pose = pose;
  return out;
}

// ---------------------------------------------------------------------------
// Clipping

namespace detail {

// Liang-Barsky parametric clip of p + t (q - p), t in [0, 1].
inline bool clip_segment(const VectorPoint& p, const VectorPoint& q, const PerceptionWindow& w,
                         double& t0, double& t1) {
  t0 = 0.0;
  t1 = 1.0;
  const double dx = q.x - p.x;
  const double dy = q.y - p.y;
  const double pk[4] = {-dx, dx, -dy, dy};
  const double qk[4] = {p.x - w.x_min, w.x_max - p.x, p.y - w.y_min, w.y_max - p.y};
  for (int k = 0; k < 4; ++k) {
    if (pk[k] == 0.0) {
      if (qk[k] < 0.0) return false;
      continue;
    }
    const double r = qk[k] / pk[k];
    if (pk[k] < 0.0) t0 = std::max(t0, r);
    else t1 = std::min(t1, r);
    if (t0 > t1) return false;
  }
  return true;
}

inline VectorPoint interpolate(const VectorPoint& p, const VectorPoint& q, double t,
                               const PerceptionWindow& w) {
  VectorPoint r = p;
  r.x = std::clamp(p.x + t * (q.x - p.x), w.x_min, w.x_max);
  r.y = std::clamp(p.y + t * (q.y - p.y), w.y_min, w.y_max);
  const double len = std::hypot(q.x - p.x, q.y - p.y);
  if (len > 0.0) {
    r.vx = (q.x - p.x) / len;
    r.vy = (q.y - p.y) / len;
  }
  return r;
}

}  // namespace detail

/// Intersects every instance with the window. Instances leaving and
/// re-entering the window are split into separate pieces at the exact
/// boundary crossings; pieces with fewer than two points are dropped.
inline VectorMap clip_to_window(const VectorMap& map, const PerceptionWindow& window) {
  if (map.frame != Frame::ego) throw DataError("clip_to_window: map must be in the ego frame");
  VectorMap out = map;
  out.instances.clear();
  for (const auto& inst : map.instances) {
    std::vector<std::vector<VectorPoint>> pieces;
    std::vector<VectorPoint> cur;
    auto flush = [&] {
      if (cur.size() >= 2) pieces.push_back(std::move(cur));
      cur.clear();
    };
    const auto& pts = inst.points;
    if (pts.size() == 1 && window.contains(pts[0].x, pts[0].y)) cur.push_back(pts[0]);
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      const auto& p = pts[i];
      const auto& q = pts[i + 1];
      double t0 = 0.0;
      double t1 = 0.0;
      if (!detail::clip_segment(p, q, window, t0, t1)) {
        flush();
        continue;
      }
      // A segment grazing the window at one point carries no extent.
      if (t0 > 0.0 && t1 <= t0) {
        flush();
        continue;
      }
      const VectorPoint a = t0 == 0.0 ? p : detail::interpolate(p, q, t0, window);
      const VectorPoint b = t1 == 1.0 ? q : detail::interpolate(p, q, t1, window);
      if (t0 > 0.0) flush();
      if (cur.empty()) cur.push_back(a);
      if (!(b.x == cur.back().x && b.y == cur.back().y) || t1 == 1.0) cur.push_back(b);
      if (t1 < 1.0) flush();
    }
    flush();
    for (std::size_t k = 0; k < pieces.size(); ++k) {
      VectorInstance piece = inst;
      piece.points = std::move(pieces[k]);
      if (pieces.size() > 1 || piece.points.size() != inst.points.size()) piece.instance_id = next_instance_id();
      out.instances.push_back(std::move(piece));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

/// Equally spaced points by arc length; endpoints are copied exactly.
inline VectorInstance resample_instance(const VectorInstance& inst, std::size_t n_points) {
  if (n_points < 2) throw UsageError("resample_instance: n_points must be at least 2");
  if (inst.points.empty()) throw DataError("resample_instance: empty instance");
  const auto& pts = inst.points;
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i)
    cum[i] = cum[i - 1] + std::hypot(pts[i].x - pts[i - 1].x, pts[i].y - pts[i - 1].y);
  const double total = cum.back();

  VectorInstance out = inst;
  out.points.assign(n_points, pts.front());
  if (total <= 0.0) {
    for (auto& p : out.points) p.vx = p.vy = 0.0;
    return out;
  }
  out.points.back() = pts.back();
  std::size_t seg = 0;
  for (std::size_t k = 1; k + 1 < n_points; ++k) {
    const double s = total * static_cast<double>(k) / static_cast<double>(n_points - 1);
    while (seg + 2 < pts.size() && cum[seg + 1] < s) ++seg;
    const double seg_len = cum[seg + 1] - cum[seg];
    const double t = seg_len > 0.0 ? std::clamp((s - cum[seg]) / seg_len, 0.0, 1.0) : 0.0;
    auto& p = out.points[k];
    p.x = pts[seg].x + t * (pts[seg + 1].x - pts[seg].x);
    p.y = pts[seg].y + t * (pts[seg + 1].y - pts[seg].y);
  }
  return compute_directions(std::move(out));
}

inline VectorMap resample_map(const VectorMap& map, std::size_t n_points) {
  VectorMap out = map;
  for (auto& inst : out.instances) inst = resample_instance(inst, n_points);
  return out;
}

/// Clip then resample: the canonical preparation of an ego map for encoding.
inline VectorMap prepare_ego_map(const VectorMap& map, const PerceptionWindow& window,
                                 std::size_t n_points = kDefaultPointsPerInstance) {
  return resample_map(clip_to_window(map, window), n_points);
}

/// Parses "x0,x1,y0,y1".
inline PerceptionWindow parse_window(const std::string& text) {
  std::stringstream ss(text);
  std::string tok;
  std::vector<double> v;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("--window: cannot parse '" + tok + "'");
    }
  }
  if (v.size() != 4) throw UsageError("--window expects x0,x1,y0,y1");
  PerceptionWindow w{v[0], v[1], v[2], v[3]};
  w.validate();
  return w;
}

}  // namespace priormap
