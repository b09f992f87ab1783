// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "test_util.hpp"

using namespace priormap;
using pmtest::straight;

namespace {
VectorMap world_map(double x, double y) {
  VectorMap m;
  m.frame = Frame::global;
  m.instances.push_back(straight({x - 1, y - 5}, {x + 1, y + 5}, 5));
  return m;
}

PriorFeatureBundle bundle(std::size_t m, std::size_t n, std::size_t dim, double fill_ins, double fill_pt) {
  PriorFeatureBundle b;
  b.points_per_instance.assign(m, n);
  b.f_ins = Array(Shape{m, dim}, fill_ins);
  b.f_pt = Array(Shape{m, n, dim}, fill_pt);
  return b;
}

QueryGrid grid(std::size_t m, std::size_t n, std::size_t qd) { return QueryGrid::random(m, n, qd, 3); }
}  // namespace

TEST(Store, InsertQuerySamePose) {
  PriorStore s;
  insert_prior(s, {10, 20, 0}, world_map(10, 20), 1.0);
  EXPECT_EQ(s.query(10, 20, 5).size(), 1u);
  EXPECT_EQ(retrieve_priors(s, {10, 20, 0}).size(), 1u);
}

TEST(Store, FarEntryExcluded) {
  PriorStore s;
  insert_prior(s, {100, 0, 0}, world_map(100, 0), 1.0);
  EXPECT_TRUE(s.query(0, 0, 5).empty());
  EXPECT_TRUE(retrieve_priors(s, {0, 0, 0}).empty());
}

TEST(Store, TieNewerFirst) {
  PriorStore s;
  insert_prior(s, {3, 0, 0}, world_map(3, 0), 1.0);
  insert_prior(s, {-3, 0, 0}, world_map(-3, 0), 2.0);
  auto r = s.query(0, 0, 5);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0]->timestamp, 2.0);
}

TEST(Store, RangeAndCap) {
  PriorStore s;
  for (double d : {8.0, 1.0, 4.0}) insert_prior(s, {d, 0, 0}, world_map(d, 0), d);
  auto r = s.query(0, 0, 5, 2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0]->pose.x, 1.0);
  EXPECT_EQ(r[1]->pose.x, 4.0);
  auto one = s.query(0, 0, 5, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0]->pose.x, 1.0);
}

TEST(Store, RejectsEgoMap) {
  PriorStore s;
  VectorMap m = world_map(0, 0);
  m.frame = Frame::ego;
  EXPECT_THROW(insert_prior(s, {0, 0, 0}, m, 0), DataError);
}

TEST(Store, InsertionOrderIndependent) {
  Rng rng(5);
  std::vector<std::tuple<double, double, double>> entries;
  for (int k = 0; k < 200; ++k) entries.emplace_back(rng.uniform(-20, 20), rng.uniform(-20, 20), k);
  PriorStore a, b;
  for (auto& [x, y, t] : entries) insert_prior(a, {x, y, 0}, world_map(x, y), t);
  std::reverse(entries.begin(), entries.end());
  for (auto& [x, y, t] : entries) insert_prior(b, {x, y, 0}, world_map(x, y), t);
  for (int q = 0; q < 50; ++q) {
    const double x = rng.uniform(-20, 20), y = rng.uniform(-20, 20);
    auto ra = a.query(x, y, 6), rb = b.query(x, y, 6);
    ASSERT_EQ(ra.size(), rb.size());
    for (std::size_t k = 0; k < ra.size(); ++k) EXPECT_EQ(ra[k]->timestamp, rb[k]->timestamp);
  }
}

TEST(Store, RetrievedInEgoFrameAndClipped) {
  PriorStore s;
  VectorMap m;
  m.frame = Frame::global;
  m.instances.push_back(straight({100, 0}, {100, 200}, 11));
  insert_prior(s, {100, 100, 0}, m, 0);
  auto r = retrieve_priors(s, {101, 100, 0});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].frame, Frame::ego);
  PerceptionWindow w;
  for (const auto& inst : r[0].instances)
    for (const auto& p : inst.points) EXPECT_TRUE(w.contains(p.x, p.y, 1e-9));
}

TEST(Store, SaveLoad) {
  PriorStore s;
  insert_prior(s, {1, 2, 0.3}, world_map(1, 2), 5);
  insert_prior(s, {4, 2, 0.1}, world_map(4, 2), 6);
  std::stringstream ss;
  s.save(ss);
  auto t = PriorStore::load(ss);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.entries()[1].pose.yaw, 0.1);
  EXPECT_EQ(t.entries()[0].timestamp, 5.0);
  EXPECT_EQ(serialize_map(t.entries()[0].map), serialize_map(s.entries()[0].map));
}

TEST(Store, BadArguments) {
  PriorStore s;
  EXPECT_THROW(retrieve_priors(s, {0, 0, 0}, 0.0), UsageError);
  EXPECT_THROW(retrieve_priors(s, {0, 0, 0}, 5.0, 0), UsageError);
}

TEST(Merge, EmptyBundleIdentity) {
  auto g = grid(3, 4, 8);
  auto fp = FusionParams::random(16, 8, 1);
  const Array orig = compose_grid(g);
  std::vector<PriorFeatureBundle> none;
  std::vector<PriorFeatureBundle> empty_one(1);
  for (auto* bs : {&none, &empty_one}) {
    for (auto mode : {MergeMode::add, MergeMode::replace}) {
      auto r = merge(g, *bs, fp, mode);
      EXPECT_EQ(r.features, orig);
      EXPECT_EQ(r.prior_backed_count(), 0u);
    }
  }
}

TEST(Merge, ZeroProjectionAdd) {
  auto g = grid(3, 4, 8);
  auto fp = FusionParams::random(16, 8, 1);
  fp.projection.fill(0.0);
  std::vector<PriorFeatureBundle> b = {bundle(2, 3, 16, 0.7, -0.4)};
  auto r = merge_add(g, b, fp);
  EXPECT_EQ(r.features, compose_grid(g));
  EXPECT_EQ(r.prior_backed_count(), 6u);
}

TEST(Merge, ZeroFeaturesAdd) {
  auto g = grid(3, 4, 8);
  auto fp = FusionParams::random(16, 8, 1);
  std::vector<PriorFeatureBundle> b = {bundle(3, 4, 16, 0.0, 0.0)};
  EXPECT_EQ(merge_add(g, b, fp).features, compose_grid(g));
}

TEST(Merge, SlotCount) {
  auto g = grid(3, 4, 8);
  auto fp = FusionParams::random(16, 8, 1);
  std::vector<PriorFeatureBundle> b = {bundle(1, 2, 16, 1.0, 1.0)};
  for (auto mode : {MergeMode::add, MergeMode::replace, MergeMode::concat}) {
    auto r = merge(g, b, fp, mode);
    EXPECT_EQ(r.prior_backed_count(), 2u);
    EXPECT_TRUE(r.prior_backed[0] && r.prior_backed[1]);
    EXPECT_EQ(r.features.shape(), (Shape{3, 4, 8}));
  }
}

TEST(Merge, ReplaceFullCoverage) {
  auto g = grid(2, 3, 4);
  FusionParams fp = FusionParams::random(4, 4, 2);
  fp.projection = Array::identity(4);
  Rng rng(3);
  PriorFeatureBundle b = bundle(2, 3, 4, 0, 0);
  for (auto& v : b.f_ins.storage()) v = rng.normal();
  for (auto& v : b.f_pt.storage()) v = rng.normal();
  std::vector<PriorFeatureBundle> bs = {b};
  auto r = merge_replace(g, bs, fp);
  EXPECT_EQ(r.prior_backed_count(), 6u);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(r.features.at(i, j, k), b.f_ins.at(i, k) + b.f_pt.at(i, j, k));
}

TEST(Merge, TwoPriorsDisjointBlocks) {
  auto g = grid(4, 2, 2);
  FusionParams fp = FusionParams::random(2, 2, 2);
  fp.projection = Array::identity(2);
  std::vector<PriorFeatureBundle> bs = {bundle(2, 2, 2, 1.0, 0.0), bundle(3, 2, 2, 10.0, 0.0)};
  auto r = merge_replace(g, bs, fp);
  // prior 1 -> slots 0,1; prior 2 -> slots 2,3; its third instance is dropped
  EXPECT_EQ(r.features.at(0, 0, 0), 1.0);
  EXPECT_EQ(r.features.at(1, 1, 1), 1.0);
  EXPECT_EQ(r.features.at(2, 0, 0), 10.0);
  EXPECT_EQ(r.features.at(3, 1, 0), 10.0);
  EXPECT_EQ(r.dropped_instances, 1u);
  EXPECT_EQ(r.dropped_points, 2u);
  EXPECT_EQ(r.prior_backed_count(), 8u);
}

TEST(Merge, ExcessPointsDropped) {
  auto g = grid(2, 3, 2);
  auto fp = FusionParams::random(2, 2, 2);
  std::vector<PriorFeatureBundle> bs = {bundle(1, 5, 2, 1.0, 1.0)};
  auto r = merge_add(g, bs, fp);
  EXPECT_EQ(r.prior_backed_count(), 3u);
  EXPECT_EQ(r.dropped_points, 2u);
}

TEST(Merge, ConcatIdentityParameterization) {
  auto g = grid(3, 4, 8);
  auto fp = FusionParams::identity_concat(16, 8);
  std::vector<PriorFeatureBundle> bs = {bundle(2, 3, 16, 0.5, 0.25)};
  auto r = merge_concat(g, bs, fp);
  EXPECT_EQ(r.features, compose_grid(g));
  EXPECT_EQ(r.prior_backed_count(), 6u);
  auto e = merge_concat(g, std::vector<PriorFeatureBundle>{}, fp);
  EXPECT_EQ(e.features, compose_grid(g));
}

TEST(Merge, ConcatWidthAndUncoveredSlotsShareProjection) {
  auto g = grid(3, 4, 8);
  auto fp = FusionParams::random(16, 8, 9);
  std::vector<PriorFeatureBundle> bs = {bundle(1, 4, 16, 0.5, 0.25)};
  auto r = merge_concat(g, bs, fp);
  EXPECT_EQ(r.features.shape(), (Shape{3, 4, 8}));
  // an uncovered slot is [q_ij, null] times the down-projection
  for (std::size_t k = 0; k < 8; ++k) {
    double want = 0.0;
    for (std::size_t c = 0; c < 8; ++c) want += g.compose(2, 1, c) * fp.concat_projection.at(c, k);
    for (std::size_t c = 0; c < 8; ++c) want += fp.null_prior[c] * fp.concat_projection.at(8 + c, k);
    EXPECT_NEAR(r.features.at(2, 1, k), want, 1e-12);
  }
}

TEST(Merge, ModeParsingAndDefaults) {
  EXPECT_EQ(merge_mode_from_string("add"), MergeMode::add);
  EXPECT_THROW(merge_mode_from_string("sum"), UsageError);
  EXPECT_EQ(kDefaultMergeMode, MergeMode::concat);
  EXPECT_EQ(kDefaultSearchRange, 5.0);
  EXPECT_EQ(kDefaultPriorNum, 2u);
}

TEST(Merge, ProjectionShapeChecked) {
  auto g = grid(2, 2, 4);
  auto fp = FusionParams::random(8, 4, 1);
  std::vector<PriorFeatureBundle> bs = {bundle(1, 2, 16, 1, 1)};
  EXPECT_THROW(merge_add(g, bs, fp), ShapeError);
}
