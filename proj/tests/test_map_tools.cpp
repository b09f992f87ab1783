// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace priormap;
using pmtest::ego_map;
using pmtest::straight;

namespace {
VectorMap mixed() {
  return ego_map({straight({0, -10}, {0, 10}, 5), straight({-4, 3}, {4, 3}, 4, ElementType::pedestrian_crossing),
                  straight({6, -20}, {7, 20}, 6, ElementType::road_boundary),
                  straight({-6, -20}, {-7, 20}, 6, ElementType::road_boundary)});
}
}  // namespace

TEST(Degrade, DropClasses) {
  auto out = degrade_map(mixed(), {ElementType::pedestrian_crossing, ElementType::lane_divider}, 0.0, 1);
  ASSERT_EQ(out.instances.size(), 2u);
  for (const auto& inst : out.instances) EXPECT_EQ(inst.element_type, ElementType::road_boundary);
  EXPECT_EQ(out.source_tag, SourceTag::hd_map_ex);
}

TEST(Degrade, IdentityWithoutDropOrOffset) {
  auto m = mixed();
  auto out = degrade_map(m, {}, 0.0, 1);
  ASSERT_EQ(out.instances.size(), m.instances.size());
  for (std::size_t i = 0; i < m.instances.size(); ++i) EXPECT_EQ(out.instances[i].points, m.instances[i].points);
}

TEST(Degrade, RigidPerInstance) {
  auto m = mixed();
  auto out = degrade_map(m, {}, 2.0, 9);
  for (std::size_t i = 0; i < m.instances.size(); ++i) {
    const auto& a = m.instances[i].points;
    const auto& b = out.instances[i].points;
    const double dx = b[0].x - a[0].x, dy = b[0].y - a[0].y;
    EXPECT_GT(std::hypot(dx, dy), 0.0);
    for (std::size_t j = 1; j < a.size(); ++j) {
      EXPECT_NEAR(b[j].x - a[j].x, dx, 1e-9);
      EXPECT_NEAR(b[j].y - a[j].y, dy, 1e-9);
      EXPECT_EQ(b[j].vx, a[j].vx);
    }
  }
}

TEST(Degrade, DeterministicAndRejectsNegativeStd) {
  auto a = degrade_map(mixed(), {}, 1.0, 4), b = degrade_map(mixed(), {}, 1.0, 4);
  EXPECT_EQ(serialize_map(a), serialize_map(b));
  EXPECT_THROW(degrade_map(mixed(), {}, -1.0, 4), UsageError);
}

TEST(Render, SvgContents) {
  auto svg = render_svg(mixed());
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  std::size_t lines = 0;
  for (auto p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
  EXPECT_EQ(lines, 4u);
  EXPECT_NE(svg.find("road_boundary"), std::string::npos);
  EXPECT_NE(svg.find("width=\"300.00\""), std::string::npos);
}
