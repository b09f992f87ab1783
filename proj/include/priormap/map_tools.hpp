// SPDX-License-Identifier: Apache-2.0
#pragma once

// Map utilities used by the command-line front end: HD-map degradation and
// SVG rendering.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "priormap/map_io.hpp"
#include "priormap/rng.hpp"
#include "priormap/vector_core.hpp"

namespace priormap {

/// Removes the listed classes and shifts every remaining instance by its own
/// rigid offset drawn from N(0, offset_std^2) per axis.
inline VectorMap degrade_map(const VectorMap& map, const std::vector<ElementType>& drop, double offset_std,
                             std::uint64_t seed) {
  if (!(offset_std >= 0.0)) throw UsageError("degrade: offset std must be non-negative");
  VectorMap out = map;
  out.instances.clear();
  out.source_tag = SourceTag::hd_map_ex;
  Rng rng(seed);
  for (const auto& inst : map.instances) {
    if (std::find(drop.begin(), drop.end(), inst.element_type) != drop.end()) continue;
    VectorInstance moved = inst;
    if (offset_std > 0.0) {
      const double dx = rng.normal(0.0, offset_std);
      const double dy = rng.normal(0.0, offset_std);
      for (auto& p : moved.points) {
        p.x += dx;
        p.y += dy;
      }
    }
    out.instances.push_back(std::move(moved));
  }
  return out;
}

inline const char* svg_color(ElementType t) {
  switch (t) {
    case ElementType::lane_divider: return "#e69f00";
    case ElementType::pedestrian_crossing: return "#0072b2";
    case ElementType::road_boundary: return "#009e73";
    case ElementType::centerline: return "#cc79a7";
  }
  return "#000000";
}

/// Ego maps are drawn inside the window with +y (forward) pointing up.
/// Global maps are framed by their own bounding box.
inline std::string render_svg(const VectorMap& map, const PerceptionWindow& window = {}, double px_per_m = 10.0) {
  double x0 = window.x_min, x1 = window.x_max, y0 = window.y_min, y1 = window.y_max;
  if (map.frame == Frame::global && map.total_points() > 0) {
    x0 = y0 = 1e300;
    x1 = y1 = -1e300;
    for (const auto& inst : map.instances)
      for (const auto& p : inst.points) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
      }
    x0 -= 2.0, x1 += 2.0, y0 -= 2.0, y1 += 2.0;
  }
  const double w = (x1 - x0) * px_per_m;
  const double h = (y1 - y0) * px_per_m;
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
    << ' ' << h << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\" stroke=\"#999999\"/>\n";
  auto px = [&](double x) { return (x - x0) * px_per_m; };
  auto py = [&](double y) { return (y1 - y) * px_per_m; };
  if (map.frame == Frame::ego)
    s << "<polygon points=\"" << px(-1.0) << ',' << py(-2.0) << ' ' << px(1.0) << ',' << py(-2.0) << ' ' << px(0.0)
      << ',' << py(2.0) << "\" fill=\"#444444\"/>\n";
  for (const auto& inst : map.instances) {
    s << "<polyline fill=\"none\" stroke=\"" << svg_color(inst.element_type)
      << "\" stroke-width=\"2\" stroke-linejoin=\"round\" points=\"";
    for (std::size_t k = 0; k < inst.points.size(); ++k)
      s << (k ? " " : "") << px(inst.points[k].x) << ',' << py(inst.points[k].y);
    s << "\"/>\n";
    for (const auto& p : inst.points)
      s << "<circle cx=\"" << px(p.x) << "\" cy=\"" << py(p.y) << "\" r=\"1.5\" fill=\"" << svg_color(inst.element_type)
        << "\"/>\n";
  }
  std::size_t y = 16;
  for (std::size_t t = 0; t < kNumElementTypes; ++t, y += 16) {
    const auto type = static_cast<ElementType>(t);
    s << "<text x=\"6\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << svg_color(type)
      << "\">" << to_string(type) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace priormap
