// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace priormap;
using pmtest::line;

TEST(MakeInstance, MinimalPolyline) {
  auto inst = make_instance({{0, 0}, {0, 10}}, ElementType::lane_divider);
  EXPECT_EQ(inst.size(), 2u);
  for (const auto& p : inst.points) EXPECT_EQ(p.cls, type_code(ElementType::lane_divider));
  EXPECT_EQ(inst.confidence, 1.0);
}

TEST(MakeInstance, TooFewPoints) {
  try {
    make_instance({{0, 0}}, ElementType::lane_divider);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("too few points"), std::string::npos);
  }
}

TEST(MakeInstance, BoundaryLoopEcho) {
  std::vector<Vec2> pts;
  for (int k = 0; k < 20; ++k) pts.push_back({std::cos(k * 0.3), std::sin(k * 0.3)});
  auto inst = make_instance(std::span<const Vec2>(pts), ElementType::road_boundary);
  EXPECT_EQ(inst.size(), 20u);
  EXPECT_EQ(inst.element_type, ElementType::road_boundary);
  for (std::size_t k = 0; k < pts.size(); ++k) {
    EXPECT_EQ(inst.points[k].x, pts[k].x);
    EXPECT_EQ(inst.points[k].y, pts[k].y);
    EXPECT_EQ(inst.points[k].cls, 2);
  }
}

TEST(MakeInstance, RejectsBadValues) {
  EXPECT_THROW(make_instance({{0, 0}, {NAN, 1}}, ElementType::lane_divider), DataError);
  EXPECT_THROW(make_instance({{0, 0}, {1, 1}}, ElementType::lane_divider, 1.5), DataError);
  std::vector<VectorPoint> pts = {{0, 0, 0.5, 0.5, 0}, {1, 0, 1, 0, 0}};
  EXPECT_THROW(make_instance(pts, ElementType::lane_divider), DataError);
}

TEST(TypeCodes, Stable) {
  EXPECT_EQ(type_code(ElementType::lane_divider), 0);
  EXPECT_EQ(type_code(ElementType::pedestrian_crossing), 1);
  EXPECT_EQ(type_code(ElementType::road_boundary), 2);
  EXPECT_EQ(type_code(ElementType::centerline), 3);
  for (int t = 0; t < 4; ++t) {
    auto e = static_cast<ElementType>(t);
    EXPECT_EQ(element_type_from_string(to_string(e)), e);
  }
  EXPECT_FALSE(element_type_from_string("sidewalk"));
}

TEST(Directions, StraightAxisAligned) {
  auto inst = line({{0, 0}, {0, 5}, {0, 10}});
  for (const auto& p : inst.points) {
    EXPECT_EQ(p.vx, 0.0);
    EXPECT_EQ(p.vy, 1.0);
  }
}

TEST(Directions, RightAngleCentralChord) {
  auto inst = line({{0, 0}, {1, 0}, {1, 1}});
  EXPECT_NEAR(inst.points[1].vx, std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(inst.points[1].vy, std::sqrt(0.5), 1e-12);
  EXPECT_EQ(inst.points[0].vx, 1.0);
  EXPECT_EQ(inst.points[2].vy, 1.0);
}

TEST(Directions, DuplicateLeadingPoints) {
  auto inst = line({{0, 0}, {0, 0}, {1, 0}});
  EXPECT_EQ(inst.points[0].vx, 1.0);
  EXPECT_EQ(inst.points[0].vy, 0.0);
  EXPECT_EQ(inst.points[1].vx, 1.0);
  EXPECT_EQ(inst.points[1].vy, 0.0);
}

TEST(Directions, AllCoincidentGivesZero) {
  auto inst = line({{2, 2}, {2, 2}, {2, 2}});
  for (const auto& p : inst.points) {
    EXPECT_EQ(p.vx, 0.0);
    EXPECT_EQ(p.vy, 0.0);
  }
}

TEST(Directions, TranslationInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec2> a, b;
    // dyadic coordinates so translation is exact
    const double tx = std::ldexp(static_cast<double>(rng.uniform_int(-64, 64)), -2);
    const double ty = std::ldexp(static_cast<double>(rng.uniform_int(-64, 64)), -2);
    for (int k = 0; k < 7; ++k) {
      Vec2 p{std::ldexp(static_cast<double>(rng.uniform_int(-40, 40)), -3),
             std::ldexp(static_cast<double>(rng.uniform_int(-40, 40)), -3)};
      a.push_back(p);
      b.push_back({p.x + tx, p.y + ty});
    }
    auto ia = compute_directions(make_instance(std::span<const Vec2>(a), ElementType::lane_divider));
    auto ib = compute_directions(make_instance(std::span<const Vec2>(b), ElementType::lane_divider));
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_EQ(ia.points[k].vx, ib.points[k].vx);
      EXPECT_EQ(ia.points[k].vy, ib.points[k].vy);
    }
  }
}

TEST(Directions, ReversalNegates) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec2> a;
    for (int k = 0; k < 6; ++k) a.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5)});
    std::vector<Vec2> r(a.rbegin(), a.rend());
    auto fa = compute_directions(make_instance(std::span<const Vec2>(a), ElementType::road_boundary));
    auto fr = compute_directions(make_instance(std::span<const Vec2>(r), ElementType::road_boundary));
    const std::size_t n = a.size();
    for (std::size_t k = 0; k < n; ++k) {
      EXPECT_NEAR(fa.points[k].vx, -fr.points[n - 1 - k].vx, 1e-12);
      EXPECT_NEAR(fa.points[k].vy, -fr.points[n - 1 - k].vy, 1e-12);
    }
  }
}

TEST(Directions, UnitOrZero) {
  auto inst = line({{0, 0}, {3, 4}, {3, 4}, {10, -2}});
  for (const auto& p : inst.points) {
    const double n = std::hypot(p.vx, p.vy);
    EXPECT_TRUE(n == 0.0 || std::abs(n - 1.0) < 1e-12);
  }
}

TEST(Window, Defaults) {
  PerceptionWindow w;
  EXPECT_EQ(w.width(), 30.0);
  EXPECT_EQ(w.height(), 60.0);
  EXPECT_THROW((PerceptionWindow{1, 0, 0, 1}.validate()), UsageError);
}
