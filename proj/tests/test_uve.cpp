// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace priormap;
using pmtest::ego_map;
using pmtest::straight;

namespace {
UveConfig small_cfg(std::size_t m_intra = 1, std::size_t n_inter = 1) {
  UveConfig c;
  c.m_intra = m_intra;
  c.n_inter = n_inter;
  c.dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.fourier_bands = 4;
  c.max_instances = 6;
  c.max_points = 8;
  return c;
}

VectorMap two_by_five() {
  return ego_map({straight({-3, -10}, {-2, 10}, 5), straight({4, -8}, {6, 9}, 5, ElementType::road_boundary)});
}

Array encode_states(const VectorMap& m, const UveConfig& cfg, const ParamStore& ps, const PaddingSpec& pad = {}) {
  const auto ts = tokenize(m, cfg, pad);
  Tape t;
  return encode_tokens(t, ts, cfg, ps).value();
}
}  // namespace

TEST(Config, Validation) {
  UveConfig c;
  c.validate();
  c.heads = 3;
  EXPECT_THROW(c.validate(), UsageError);
  c = UveConfig{};
  c.fourier_bands = 0;
  EXPECT_THROW(c.validate(), UsageError);
  EXPECT_EQ(UveConfig::from_json(UveConfig{}.to_json()), UveConfig{});
}

TEST(Fourier, OriginFeatures) {
  UveConfig c;
  auto f = point_features({0, 0, 0, 0, 0}, c);
  const std::size_t b = c.fourier_bands;
  ASSERT_EQ(f.size(), 8 * b);
  for (std::size_t blk = 0; blk < 4; ++blk)
    for (std::size_t k = 0; k < b; ++k) {
      EXPECT_EQ(f[2 * b * blk + k], 0.0);
      EXPECT_EQ(f[2 * b * blk + b + k], 1.0);
    }
}

TEST(Fourier, WindowEdgesDistinct) {
  UveConfig c;
  auto a = point_features({c.window.x_min, 0, 1, 0, 0}, c);
  auto b = point_features({c.window.x_max, 0, -1, 0, 0}, c);
  double diff_pos = 0, diff_dir = 0;
  for (std::size_t k = 0; k < 2 * c.fourier_bands; ++k) diff_pos += std::abs(a[k] - b[k]);
  for (std::size_t k = 4 * c.fourier_bands; k < 6 * c.fourier_bands; ++k) diff_dir += std::abs(a[k] - b[k]);
  EXPECT_GT(diff_pos, 1.0);
  EXPECT_GT(diff_dir, 1.0);
}

TEST(Tokens, EmptyMap) {
  auto ts = tokenize(ego_map({}), small_cfg());
  EXPECT_EQ(ts.size(), 0u);
  auto ps = init_uve_params(small_cfg(), 1);
  Tape t;
  EXPECT_EQ(hybrid_prior_embed(t, ts, small_cfg(), ps).value().size(), 0u);
  auto b = encode(ego_map({}), small_cfg(), ps);
  EXPECT_EQ(b.num_instances(), 0u);
}

TEST(Tokens, VecTokenFirst) {
  auto ts = tokenize(two_by_five(), UveConfig{});
  ASSERT_EQ(ts.size(), 12u);
  EXPECT_TRUE(ts.is_vec[0]);
  EXPECT_TRUE(ts.is_vec[6]);
  EXPECT_EQ(ts.position[1], 1u);
  EXPECT_EQ(ts.instance[7], 1u);
  EXPECT_EQ(ts.point_rows.size(), 10u);
}

TEST(Tokens, CapacityOverflow) {
  auto cfg = small_cfg();
  std::vector<VectorInstance> many;
  for (int i = 0; i < 7; ++i) many.push_back(straight({0, 0}, {0, 1}, 2));
  EXPECT_THROW(tokenize(ego_map(many), cfg), DataError);
  EXPECT_THROW(tokenize(ego_map({straight({0, 0}, {0, 1}, 9)}), cfg), DataError);
  try {
    tokenize(ego_map(many), cfg);
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("capacity overflow"), std::string::npos);
  }
}

TEST(Masks, BlockStructure) {
  auto m = ego_map({straight({0, 0}, {0, 1}, 2), straight({1, 0}, {1, 1}, 2)});
  auto ts = tokenize(m, UveConfig{});
  auto [intra, inter] = build_attention_masks(ts);
  ASSERT_EQ(intra.shape(), (Shape{6, 6}));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_EQ(intra.at(i, j), (i / 3 == j / 3) ? 0.0 : kMaskedLogit);
      EXPECT_EQ(inter.at(i, j), 0.0);
    }
}

TEST(Masks, SingleInstanceEqual) {
  auto ts = tokenize(ego_map({straight({0, 0}, {0, 1}, 4)}), UveConfig{});
  auto [intra, inter] = build_attention_masks(ts);
  EXPECT_EQ(intra, inter);
}

TEST(Masks, PaddingRowsBlocked) {
  auto ts = tokenize(ego_map({straight({0, 0}, {0, 1}, 3)}), UveConfig{}, {5, 2});
  auto [intra, inter] = build_attention_masks(ts);
  for (std::size_t i = 0; i < ts.size(); ++i)
    if (!ts.valid[i])
      for (std::size_t j = 0; j < ts.size(); ++j) {
        EXPECT_EQ(inter.at(i, j), kMaskedLogit);
        EXPECT_EQ(inter.at(j, i), kMaskedLogit);
      }
}

TEST(Embed, AdditiveStructure) {
  auto cfg = small_cfg();
  auto ps = init_uve_params(cfg, 3);
  // the same point in two instances of the same type
  auto m = ego_map({pmtest::line({{1, 1}, {2, 2}}), pmtest::line({{1, 1}, {2, 2}})});
  auto ts = tokenize(m, cfg);
  {
    Tape t;
    auto e = hybrid_prior_embed(t, ts, cfg, ps).value();
    bool differ = false;
    for (std::size_t k = 0; k < cfg.dim; ++k) differ |= e.at(1, k) != e.at(4, k);
    EXPECT_TRUE(differ);
  }
  ps.value("embed.instance").fill(0.0);
  ps.value("embed.position").fill(0.0);
  Tape t;
  auto e = hybrid_prior_embed(t, ts, cfg, ps).value();
  for (std::size_t k = 0; k < cfg.dim; ++k) EXPECT_EQ(e.at(1, k), e.at(4, k));
}

TEST(Encode, ShapeContract) {
  UveConfig cfg;
  auto ps = init_uve_params(cfg, 5);
  auto m = ego_map({straight({-5, -20}, {-5, 20}, 20), straight({0, -20}, {1, 20}, 20),
                    straight({5, -20}, {6, 20}, 20, ElementType::road_boundary)});
  auto b = encode(m, cfg, ps);
  EXPECT_EQ(b.f_ins.shape(), (Shape{3, 64}));
  EXPECT_EQ(b.f_pt.shape(), (Shape{3, 20, 64}));
  EXPECT_TRUE(b.f_ins.all_finite());
  EXPECT_TRUE(b.f_pt.all_finite());
}

TEST(Encode, ZeroParamsIdenticalEmbeddingsEncodeIdentically) {
  auto cfg = small_cfg();
  auto ps = init_uve_params(cfg, 5);
  for (auto& [name, p] : ps) p.value.fill(0.0);
  auto a = encode_states(two_by_five(), cfg, ps);
  auto b = encode_states(ego_map({straight({7, 1}, {-2, 3}, 5), straight({0, 0}, {0, 9}, 5, ElementType::road_boundary)}),
                         cfg, ps);
  EXPECT_EQ(a, b);
  for (double v : a.data()) EXPECT_EQ(v, 0.0);
}

TEST(Encode, IntraIsolation) {
  auto cfg = small_cfg(2, 0);
  auto ps = init_uve_params(cfg, 8);
  Rng rng(21);
  auto base = two_by_five();
  auto ref = encode_states(base, cfg, ps);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = base;
    for (auto& p : m.instances[1].points) {
      p.x = rng.uniform(-15, 15);
      p.y = rng.uniform(-30, 30);
    }
    auto out = encode_states(m, cfg, ps);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t k = 0; k < cfg.dim; ++k) ASSERT_EQ(out.at(r, k), ref.at(r, k));
  }
}

TEST(Encode, PaddingInvariance) {
  auto cfg = small_cfg(1, 2);
  auto ps = init_uve_params(cfg, 4);
  auto m = ego_map({straight({-3, -10}, {-2, 10}, 5), straight({4, -8}, {6, 9}, 3)});
  auto ts0 = tokenize(m, cfg);
  auto ts1 = tokenize(m, cfg, {8, 5});
  Tape t0, t1;
  auto a = encode_tokens(t0, ts0, cfg, ps).value();
  auto b = encode_tokens(t1, ts1, cfg, ps).value();
  ASSERT_EQ(ts0.point_rows.size(), ts1.point_rows.size());
  for (std::size_t r = 0; r < ts0.point_rows.size(); ++r)
    for (std::size_t k = 0; k < cfg.dim; ++k)
      EXPECT_NEAR(a.at(ts0.point_rows[r], k), b.at(ts1.point_rows[r], k), 1e-12);
  for (std::size_t i = 0; i < ts0.vec_rows.size(); ++i)
    for (std::size_t k = 0; k < cfg.dim; ++k) EXPECT_NEAR(a.at(ts0.vec_rows[i], k), b.at(ts1.vec_rows[i], k), 1e-12);
}

TEST(Encode, Deterministic) {
  auto cfg = small_cfg();
  auto a = encode(two_by_five(), cfg, init_uve_params(cfg, 99));
  auto b = encode(two_by_five(), cfg, init_uve_params(cfg, 99));
  EXPECT_EQ(a.f_pt, b.f_pt);
  EXPECT_EQ(a.f_ins, b.f_ins);
}

TEST(Params, CountMatchesClosedForm) {
  for (auto cfg : {UveConfig{}, small_cfg(), small_cfg(3, 0)}) {
    auto ps = init_uve_params(cfg, 0);
    EXPECT_EQ(ps.num_scalars(), uve_param_count(cfg));
  }
  EXPECT_EQ(uve_param_count(UveConfig{}), 192130u);
}

TEST(Decode, ShapeAndZeroWeights) {
  auto cfg = small_cfg();
  auto ps = init_uve_params(cfg, 2);
  auto m = two_by_five();
  auto ts = tokenize(m, cfg);
  {
    Tape t;
    auto xy = decode_coordinates(t, encode_tokens(t, ts, cfg, ps), ts, cfg, ps).value();
    EXPECT_EQ(xy.shape(), (Shape{10, 2}));
  }
  ps.value("head.coord.w").fill(0.0);
  ps.value("head.coord.b").fill(0.0);
  auto rec = reconstruct(m, cfg, ps);
  for (const auto& inst : rec.instances)
    for (const auto& p : inst.points) {
      EXPECT_EQ(p.x, 0.0);
      EXPECT_EQ(p.y, 0.0);
    }
}

TEST(GradCheck, SmallUve) {
  auto cfg = small_cfg();
  auto ps = init_uve_params(cfg, 17);
  auto m = two_by_five();
  auto ts = tokenize(m, cfg);
  const Array target = coordinate_targets(m);
  auto r = pmtest::grad_check(ps, [&](Tape& t, const ParamStore& p) {
    return reconstruction_loss(decode_coordinates(t, encode_tokens(t, ts, cfg, p), ts, cfg, p), target);
  });
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}
