// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "priormap/rng.hpp"
#include "priormap/tensor.hpp"

using namespace priormap;

namespace {
Array randn(Shape s, Rng& rng, double sd = 1.0) {
  Array a(std::move(s));
  for (auto& v : a.storage()) v = sd * rng.normal();
  return a;
}
}  // namespace

TEST(Array, ShapeContract) {
  EXPECT_THROW(Array(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Array(Shape{1, 1, 1, 1}), ShapeError);
  Array a(Shape{2, 3, 4});
  EXPECT_EQ(a.size(), 24u);
  a.at(1, 2, 3) = 7;
  EXPECT_EQ(a[23], 7.0);
}

TEST(Ops, SoftmaxSymmetric) {
  Tape t;
  auto s = softmax_last_dim(t.constant(Array::vector({0, 0})));
  EXPECT_EQ(s.value()[0], 0.5);
  EXPECT_EQ(s.value()[1], 0.5);
}

TEST(Ops, SoftmaxMaskExactZero) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    Tape t;
    Array logits = randn({4, 6}, rng, 30.0);
    Array mask(Shape{4, 6});
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 6; ++c)
        if (c != r && rng.bernoulli(0.5)) mask.at(r, c) = kMaskedLogit;
    auto s = softmax_last_dim(t.constant(logits), &mask);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < 6; ++c) {
        if (mask.at(r, c) != 0.0) {
          EXPECT_EQ(s.value().at(r, c), 0.0);
        }
        sum += s.value().at(r, c);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Ops, SoftmaxFullyMaskedRowIsUniform) {
  ParamStore ps;
  ps.add("x", Array::matrix(2, 4, {1, 2, 3, 4, 1, 2, 3, 9}));
  Array mask(Shape{2, 4}, 0.0);
  for (std::size_t c = 0; c < 4; ++c) mask[4 + c] = kMaskedLogit;
  Tape t;
  auto x = t.param(ps, "x");
  auto s = softmax_last_dim(x, &mask);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(s.value()[4 + c], 0.25);
  EXPECT_GT(s.value()[3], s.value()[0]);
  t.backward(sum(mul(s, t.constant(Array::matrix(2, 4, {1, 0, 0, 0, 1, 0, 0, 0})))), ps);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(ps.at("x").grad[4 + c], 0.0);
  EXPECT_NE(ps.at("x").grad[0], 0.0);
}

TEST(Ops, LayerNormConstantRow) {
  Tape t;
  auto y = layer_norm(t.constant(Array::matrix(2, 3, {5, 5, 5, -1, -1, -1})), t.constant(Array::vector({1, 1, 1})),
                      t.constant(Array::vector({0, 0, 0})));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, MatmulIdentity) {
  Rng rng(4);
  Tape t;
  Array x = randn({5, 3}, rng);
  auto y = matmul(t.constant(Array::identity(5)), t.constant(x));
  EXPECT_EQ(y.value(), x);
}

TEST(Ops, ConcatSplitRoundTrip) {
  Rng rng(6);
  Tape t;
  Array a = randn({3, 4}, rng), b = randn({3, 2}, rng);
  auto c = concat_last_dim({t.constant(a), t.constant(b)});
  EXPECT_EQ(c.shape(), (Shape{3, 6}));
  auto parts = split_last_dim(t.constant(a), 2);
  EXPECT_EQ(parts[1].value().at(2, 1), a.at(2, 3));
}

TEST(Ops, NonFiniteRaises) {
  Tape t;
  auto x = t.constant(Array::vector({1e308, 1e308}));
  EXPECT_THROW(mul(x, x), NumericError);
}

TEST(Ops, ShapeMismatchRaises) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Array(Shape{2, 3})), t.constant(Array(Shape{2, 3}))), ShapeError);
  EXPECT_THROW(add(t.constant(Array(Shape{2, 3})), t.constant(Array(Shape{3, 2}))), ShapeError);
}

TEST(Backward, Quadratic) {
  ParamStore ps;
  ps.add("p", Array::vector({1, 2}));
  Tape t;
  t.backward(sum(square(t.param(ps, "p"))), ps);
  EXPECT_EQ(ps.at("p").grad[0], 2.0);
  EXPECT_EQ(ps.at("p").grad[1], 4.0);
}

TEST(Backward, Mean) {
  ParamStore ps;
  ps.add("x", Array::vector({3, -1, 4, 1}));
  Tape t;
  t.backward(mean(t.param(ps, "x")), ps);
  for (double g : ps.at("x").grad.data()) EXPECT_EQ(g, 0.25);
}

TEST(Backward, NonScalarLossRejected) {
  ParamStore ps;
  ps.add("x", Array::vector({1, 2}));
  Tape t;
  EXPECT_THROW(t.backward(square(t.param(ps, "x")), ps), ShapeError);
}

TEST(Backward, PendingGradsGuard) {
  ParamStore ps;
  ps.add("x", Array::vector({1, 2}));
  {
    Tape t;
    t.backward(sum(t.param(ps, "x")), ps);
  }
  Tape t2;
  EXPECT_THROW(t2.backward(sum(t2.param(ps, "x")), ps), UsageError);
  Tape t3;
  t3.backward(sum(t3.param(ps, "x")), ps, GradMode::accumulate);
  EXPECT_EQ(ps.at("x").grad[0], 2.0);
}

TEST(GradCheck, PrimitiveComposition) {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    ParamStore ps;
    ps.add("a", randn({4, 6}, rng));
    ps.add("w", randn({6, 5}, rng, 0.5));
    ps.add("b", randn({5}, rng));
    ps.add("g", randn({5}, rng));
    ps.add("beta", randn({5}, rng));
    ps.add("table", randn({7, 5}, rng));
    const std::vector<std::size_t> idx = {3, 0, 3, 6};
    Array mask(Shape{4, 4});
    mask.at(0, 3) = kMaskedLogit;
    mask.at(2, 1) = kMaskedLogit;
    auto build = [&](Tape& t, const ParamStore& p) {
      Var h = add(matmul(t.param(p, "a"), t.param(p, "w")), t.param(p, "b"));
      h = add(h, embedding_lookup(t.param(p, "table"), idx));
      h = layer_norm(gelu(h), t.param(p, "g"), t.param(p, "beta"));
      Var att = softmax_last_dim(matmul_nt(h, h), &mask);
      Var o = matmul(att, h);
      auto parts = split_last_dim(slice_last_dim(concat_last_dim({o, h}), 0, 8), 2);
      Var z = mul(parts[0], parts[1]);
      return add(sqrt(add(mean(square(z)), t.constant(Array::scalar(0.1)))), scale(sum(sub(o, h)), 0.01));
    };
    auto r = pmtest::grad_check(ps, build);
    EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
    EXPECT_GT(r.checked, 100u);
  }
}

TEST(GradCheck, AttentionBlockDim8) {
  Rng rng(12);
  ParamStore ps;
  ps.add("x", randn({5, 8}, rng));
  for (int l = 0; l < 2; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    ps.add(p + "qkv", randn({8, 24}, rng, 0.3));
    ps.add(p + "out", randn({8, 8}, rng, 0.3));
    ps.add(p + "g", Array(Shape{8}, 1.0));
    ps.add(p + "b", Array(Shape{8}));
  }
  auto build = [&](Tape& t, const ParamStore& ps_) {
    Var x = t.param(ps_, "x");
    for (int l = 0; l < 2; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      Var h = layer_norm(x, t.param(ps_, p + "g"), t.param(ps_, p + "b"));
      auto qkv = split_last_dim(matmul(h, t.param(ps_, p + "qkv")), 3);
      std::vector<Var> heads;
      for (std::size_t k = 0; k < 2; ++k) {
        Var q = slice_last_dim(qkv[0], 4 * k, 4), kk = slice_last_dim(qkv[1], 4 * k, 4);
        Var v = slice_last_dim(qkv[2], 4 * k, 4);
        heads.push_back(matmul(softmax_last_dim(scale(matmul_nt(q, kk), 0.5)), v));
      }
      x = add(x, matmul(concat_last_dim(heads), t.param(ps_, p + "out")));
    }
    return mean(square(x));
  };
  auto r = pmtest::grad_check(ps, build);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(Adam, FirstStepIsLrTimesSign) {
  for (double g : {3.0, -0.02}) {
    ParamStore ps;
    ps.add("p", Array::vector({1.0}));
    ps.at("p").grad[0] = g;
    adam_step(ps, {1e-3});
    EXPECT_NEAR(ps.value("p")[0], 1.0 - 1e-3 * (g > 0 ? 1 : -1), 1e-9);
    EXPECT_EQ(ps.step(), 1u);
    EXPECT_EQ(ps.at("p").grad[0], 0.0);  // consumed
  }
}

TEST(Adam, ZeroGradLeavesParam) {
  ParamStore ps;
  ps.add("p", Array::vector({1.5, -2}));
  adam_step(ps, {1e-3});
  EXPECT_EQ(ps.value("p")[0], 1.5);
  EXPECT_EQ(ps.value("p")[1], -2.0);
}

TEST(Adam, NonFiniteGradNamed) {
  ParamStore ps;
  ps.add("layer.w", Array::vector({1}));
  ps.at("layer.w").grad[0] = NAN;
  try {
    adam_step(ps, {});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.w"), std::string::npos);
  }
}

TEST(Adam, DeterministicRuns) {
  auto run = [] {
    Rng rng(77);
    ParamStore ps;
    ps.add("w", randn({3, 3}, rng));
    ps.add("x", randn({2, 3}, rng));
    for (int s = 0; s < 10; ++s) {
      Tape t;
      t.backward(mean(square(matmul(t.param(ps, "x"), t.param(ps, "w")))), ps);
      adam_step(ps, {});
    }
    return ps;
  };
  auto a = run(), b = run();
  for (const auto& [name, p] : a) EXPECT_EQ(p.value, b.value(name));
}

TEST(ParamStore, UniqueSortedNames) {
  ParamStore ps;
  ps.add("b", Array::vector({1}));
  ps.add("a", Array::vector({1}));
  EXPECT_THROW(ps.add("a", Array::vector({2})), UsageError);
  EXPECT_EQ(ps.begin()->first, "a");
}

TEST(Rng, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
  EXPECT_EQ(derive_seed(9, "corpus"), derive_seed(9, "corpus"));
}
