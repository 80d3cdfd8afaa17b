/*
 * Copyright 2026 The elastic-hybrid Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "elastic/ops.hpp"
#include "elastic/optim.hpp"
#include "elastic/seq_ops.hpp"
#include "gradcheck.hpp"

using namespace elastic;
using elastic::testing::gradcheck;
using elastic::testing::random_tensor;
using elastic::testing::weighted_sum;

namespace {

void expect_grad_ok(const std::function<Tensor()>& f, std::vector<Tensor> in, double tol = 1e-2) {
  const auto r = gradcheck(f, std::move(in));
  EXPECT_LT(r.max_rel, tol) << "max abs " << r.max_abs;
  EXPECT_GE(r.checked, 5);
}

}  // namespace

TEST(Matmul, IdentityAndScalar) {
  auto i2 = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto b = Tensor::matrix(2, 2, {3, 4, 5, 6});
  EXPECT_EQ(matmul(i2, b).values(), (std::vector<float>{3, 4, 5, 6}));
  EXPECT_FLOAT_EQ(matmul(Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {3})).item(), 6.0f);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3})), ShapeError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  const auto r = gradcheck([&] { return sum(matmul(a, b)); }, {a, b}, 12);
  EXPECT_LT(r.max_abs, 1e-3);
}

TEST(Linear, Gradient) {
  Rng rng(2);
  auto x = random_tensor({5, 4}, rng);
  auto w = random_tensor({3, 4}, rng);
  auto b = random_tensor({3}, rng);
  expect_grad_ok([&] { return weighted_sum(linear(x, w, &b)); }, {x, w, b});
  // Agrees with the explicit transpose product.
  NoGradGuard ng;
  auto y1 = linear(x, w);
  auto y2 = matmul(x, transpose(w));
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_NEAR(y1[i], y2[i], 1e-5);
}

TEST(Elementwise, TrivialValues) {
  EXPECT_FLOAT_EQ(silu(Tensor::scalar(0)).item(), 0.0f);
  auto s = softmax_lastdim(Tensor::vector({0, 0}));
  EXPECT_FLOAT_EQ(s[0], 0.5f);
  EXPECT_FLOAT_EQ(s[1], 0.5f);
  EXPECT_FLOAT_EQ(leaky_relu(Tensor::scalar(-2)).item(), -0.02f);
}

TEST(Elementwise, NonFiniteInputsRejected) {
  const float inf = std::numeric_limits<float>::infinity();
  EXPECT_THROW(softmax_lastdim(Tensor::vector({0, inf})), NumericError);
  EXPECT_THROW(log(Tensor::vector({std::nanf("")})), NumericError);
  EXPECT_THROW(log(Tensor::vector({-1.0f})), NumericError);
  EXPECT_THROW(log_softmax_lastdim(Tensor::vector({std::nanf("")})), NumericError);
}

TEST(Elementwise, SoftmaxRowsSumToOneAndPositive) {
  Rng rng(3);
  auto x = random_tensor({6, 9}, rng, 5.0f, false);
  auto s = softmax_lastdim(x);
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GT(s.at(i, j), 0.0f);
      z += s.at(i, j);
    }
    EXPECT_NEAR(z, 1.0, 1e-6);
  }
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  auto a = random_tensor({4, 5}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto row = random_tensor({5}, rng);
  auto col = random_tensor({4, 1}, rng);
  auto pos = Tensor(Shape{4, 5});
  for (auto& v : pos.mutable_data()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  pos.set_requires_grad();
  expect_grad_ok([&] { return weighted_sum(add(a, b)); }, {a, b});
  expect_grad_ok([&] { return weighted_sum(sub(a, row)); }, {a, row});
  expect_grad_ok([&] { return weighted_sum(mul(a, b)); }, {a, b});
  expect_grad_ok([&] { return weighted_sum(mul(a, row)); }, {a, row});
  expect_grad_ok([&] { return weighted_sum(mul(a, col)); }, {a, col});
  expect_grad_ok([&] { return weighted_sum(silu(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(sigmoid(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(leaky_relu(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(exp(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(log(pos)); }, {pos});
  expect_grad_ok([&] { return weighted_sum(softplus(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(square(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(softmax_lastdim(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(log_softmax_lastdim(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(transpose(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(sum_rows(a)); }, {a});
  expect_grad_ok([&] { return weighted_sum(slice_cols(a, 1, 3)); }, {a});
  expect_grad_ok([&] { return weighted_sum(outer(row, sum_rows(b))); }, {row, b});
  expect_grad_ok([&] { return weighted_sum(stack({a, b})); }, {a, b});
  expect_grad_ok([&] { return weighted_sum(concat_rows({a, b})); }, {a, b});
  expect_grad_ok([&] { return mean(square(a)); }, {a});
}

TEST(Normalization, RmsnormGradientOn1x8) {
  Rng rng(5);
  auto x = random_tensor({1, 8}, rng);
  auto g = random_tensor({8}, rng);
  const auto r = gradcheck([&] { return weighted_sum(rmsnorm(x, g)); }, {x, g}, 8);
  EXPECT_LT(r.max_abs, 1e-3);
}

TEST(Normalization, LayernormAndMaskedRmsnormGradients) {
  Rng rng(6);
  auto x = random_tensor({3, 8}, rng);
  auto g = random_tensor({8}, rng);
  auto b = random_tensor({8}, rng);
  Tensor m(Shape{8});
  for (auto& v : m.mutable_data()) v = static_cast<float>(rng.uniform(0.2, 1.0));
  m.set_requires_grad();
  expect_grad_ok([&] { return weighted_sum(layernorm(x, g, b)); }, {x, g, b});
  expect_grad_ok([&] { return weighted_sum(masked_rmsnorm(x, g, m)); }, {x, g, m});
}

TEST(Normalization, MaskedRmsnormEqualsSlicedRmsnorm) {
  Rng rng(7);
  auto x = random_tensor({4, 8}, rng, 1.0f, false);
  auto g = random_tensor({8}, rng, 1.0f, false);
  const std::vector<std::int32_t> keep{0, 2, 3, 6};
  Tensor m(Shape{8}, 0.0f);
  for (auto k : keep) m.mutable_data()[k] = 1.0f;
  auto full = masked_rmsnorm(x, g, m);
  Tensor xs(Shape{4, 4}), gs(Shape{4});
  for (std::size_t j = 0; j < 4; ++j) {
    gs.mutable_data()[j] = g[keep[j]];
    for (std::size_t i = 0; i < 4; ++i) xs.mutable_data()[i * 4 + j] = x.at(i, keep[j]);
  }
  auto sliced = rmsnorm(xs, gs);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(full.at(i, keep[j]), sliced.at(i, j), 1e-6);
    EXPECT_EQ(full.at(i, 1), 0.0f);
  }
  Tensor ones(Shape{8}, 1.0f);
  EXPECT_EQ(masked_rmsnorm(x, g, ones).values(), rmsnorm(x, g).values());
}

TEST(Indexing, GatherScatterGradients) {
  Rng rng(8);
  auto table = random_tensor({6, 3}, rng);
  auto base = random_tensor({4, 3}, rng);
  auto src = random_tensor({3, 3}, rng);
  const std::vector<std::int32_t> ids{1, 4, 1, 5};
  const std::vector<std::int32_t> rows{0, 2, 2}, cols{2, 0, 2}, dst{3, 0, 3};
  expect_grad_ok([&] { return weighted_sum(gather_rows(table, ids)); }, {table});
  expect_grad_ok([&] { return weighted_sum(index_add_rows(base, src, dst)); }, {base, src});
  expect_grad_ok([&] { return weighted_sum(gather_elements(base, rows, cols)); }, {base});
  EXPECT_THROW(gather_rows(table, std::vector<std::int32_t>{6}), ShapeError);
}

TEST(Routing, TopkSoftmaxSelectsAndNormalizes) {
  auto l = Tensor::matrix(2, 4, {0.1f, 2.0f, 1.0f, 2.0f, -1.0f, 0.0f, 3.0f, 0.5f});
  std::vector<std::vector<std::int32_t>> sel;
  auto g = topk_softmax(l, 2, &sel);
  EXPECT_EQ(sel[0], (std::vector<std::int32_t>{1, 3}));
  EXPECT_EQ(sel[1], (std::vector<std::int32_t>{2, 3}));
  EXPECT_FLOAT_EQ(g.at(0, 1), 0.5f);
  EXPECT_FLOAT_EQ(g.at(0, 0), 0.0f);
  EXPECT_NEAR(g.at(1, 2) + g.at(1, 3), 1.0, 1e-6);
  Rng rng(9);
  auto x = random_tensor({3, 5}, rng);
  expect_grad_ok([&] { return weighted_sum(topk_softmax(x, 2)); }, {x});
}

TEST(Routing, AddLogMaskExcludesAndDifferentiates) {
  Rng rng(10);
  auto theta = random_tensor({3, 4}, rng);
  Tensor m = Tensor::vector({0.9f, 0.0f, 0.6f, 0.3f});
  m.set_requires_grad();
  auto y = add_log_mask(theta, m);
  EXPECT_EQ(y.at(0, 1), kMaskedLogit);
  auto p = softmax_lastdim(y);
  EXPECT_EQ(p.at(2, 1), 0.0f);
  // Zero entries are a kink; differentiate at a strictly positive mask.
  Tensor soft = Tensor::vector({0.9f, 0.5f, 0.6f, 0.3f});
  soft.set_requires_grad();
  expect_grad_ok([&] { return weighted_sum(softmax_lastdim(add_log_mask(theta, soft))); }, {theta, soft});
}

TEST(Sequence, ConvScanAttentionGradients) {
  Rng rng(11);
  const SeqLayout layout = SeqLayout::from_lengths(std::vector<std::size_t>{3, 4});
  auto x = random_tensor({7, 4}, rng);
  auto w = random_tensor({4, 3}, rng);
  auto b = random_tensor({4}, rng);
  expect_grad_ok([&] { return weighted_sum(causal_conv1d(x, w, b, layout)); }, {x, w, b});

  const ScanDims d{4, 2, 2, 3};
  auto xs = random_tensor({7, 8}, rng);
  Tensor dt(Shape{7, 4});
  for (auto& v : dt.mutable_data()) v = static_cast<float>(rng.uniform(0.1, 0.9));
  dt.set_requires_grad();
  Tensor A = Tensor::vector({-0.5f, -1.0f, -0.2f, -2.0f});
  A.set_requires_grad();
  auto B = random_tensor({7, 6}, rng);
  auto C = random_tensor({7, 6}, rng);
  auto D = random_tensor({4}, rng);
  expect_grad_ok([&] { return weighted_sum(ssm_scan(xs, dt, A, B, C, D, d, layout)); }, {xs, dt, A, B, C, D});

  const AttnDims ad{4, 2, 3};
  auto q = random_tensor({7, 12}, rng);
  auto k = random_tensor({7, 6}, rng);
  auto v = random_tensor({7, 6}, rng);
  expect_grad_ok([&] { return weighted_sum(causal_attention(q, k, v, ad, layout)); }, {q, k, v});
}

TEST(Sequence, BoundariesIsolateSequences) {
  Rng rng(12);
  auto q = random_tensor({5, 4}, rng, 1.0f, false);
  auto k = random_tensor({5, 4}, rng, 1.0f, false);
  auto v = random_tensor({5, 4}, rng, 1.0f, false);
  const AttnDims ad{2, 2, 2};
  auto packed = causal_attention(q, k, v, ad, SeqLayout::from_lengths(std::vector<std::size_t>{2, 3}));
  auto tail = [](const Tensor& t) { return Tensor(Shape{3, 4}, std::vector<float>(t.data().begin() + 8, t.data().end())); };
  auto alone = causal_attention(tail(q), tail(k), tail(v), ad, SeqLayout::single(3));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_FLOAT_EQ(packed[8 + i], alone[i]);
}

TEST(Sequence, IncrementalMatchesFullPass) {
  Rng rng(13);
  const ScanDims d{2, 2, 1, 3};
  auto x = random_tensor({6, 4}, rng, 1.0f, false);
  Tensor dt(Shape{6, 2}, 0.3f);
  auto A = Tensor::vector({-0.5f, -1.0f});
  auto B = random_tensor({6, 3}, rng, 1.0f, false);
  auto C = random_tensor({6, 3}, rng, 1.0f, false);
  auto D = Tensor::vector({0.1f, 0.2f});
  auto full = ssm_scan(x, dt, A, B, C, D, d, SeqLayout::single(6));
  auto rows = [](const Tensor& t, std::size_t a, std::size_t n) {
    return Tensor(Shape{n, t.cols()}, std::vector<float>(t.data().begin() + a * t.cols(), t.data().begin() + (a + n) * t.cols()));
  };
  std::vector<float> state;
  auto first = ssm_scan(rows(x, 0, 4), rows(dt, 0, 4), A, rows(B, 0, 4), rows(C, 0, 4), D, d, SeqLayout::single(4), nullptr, &state);
  auto second = ssm_scan(rows(x, 4, 2), rows(dt, 4, 2), A, rows(B, 4, 2), rows(C, 4, 2), D, d, SeqLayout::single(2), &state);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(second[i], full[16 + i], 1e-6);

  auto w = random_tensor({4, 4}, rng, 1.0f, false);
  auto b = random_tensor({4}, rng, 1.0f, false);
  auto cfull = causal_conv1d(x, w, b, SeqLayout::single(6));
  std::vector<float> hist(x.data().begin() + 4, x.data().begin() + 16);
  auto cpart = causal_conv1d(rows(x, 4, 2), w, b, SeqLayout::single(2), &hist);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(cpart[i], cfull[16 + i], 1e-6);

  const AttnDims ad{2, 1, 2};
  auto q = random_tensor({6, 4}, rng, 1.0f, false);
  auto k = random_tensor({6, 2}, rng, 1.0f, false);
  auto v = random_tensor({6, 2}, rng, 1.0f, false);
  auto afull = causal_attention(q, k, v, ad, SeqLayout::single(6));
  KVHistory past;
  past.k.assign(k.data().begin(), k.data().begin() + 8);
  past.v.assign(v.data().begin(), v.data().begin() + 8);
  past.length = 4;
  auto apart = causal_attention(rows(q, 4, 2), rows(k, 4, 2), rows(v, 4, 2), ad, SeqLayout::single(2), &past);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(apart[i], afull[16 + i], 1e-6);
}

TEST(Backward, TrivialCases) {
  Tensor w = Tensor::vector({0.3f, -1.0f, 2.0f});
  w.set_requires_grad();
  backward(sum(w));
  EXPECT_EQ(w.grad_tensor().values(), (std::vector<float>{1, 1, 1}));
  Tensor u = Tensor::vector({1.0f, 2.0f});
  u.set_requires_grad();
  backward(sum(mul(u, u)));
  EXPECT_EQ(u.grad_tensor().values(), (std::vector<float>{2, 4}));
}

TEST(Backward, NonScalarAndSecondCallAreErrors) {
  Tensor w = Tensor::vector({1.0f, 2.0f});
  w.set_requires_grad();
  EXPECT_THROW(backward(mul(w, w)), ContractError);
  auto loss = sum(mul(w, w));
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
}

TEST(Backward, DuplicatedSubgraphAccumulates) {
  Tensor w = Tensor::vector({1.5f, -0.5f});
  w.set_requires_grad();
  auto s = sum(square(w));
  backward(add(s, s));
  EXPECT_FLOAT_EQ(w.grad()[0], 6.0f);
  EXPECT_FLOAT_EQ(w.grad()[1], -2.0f);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tensor w = Tensor::vector({1.0f});
  w.set_requires_grad();
  NoGradGuard ng;
  EXPECT_FALSE(square(w).requires_grad());
}

TEST(Backward, DeterministicGivenSeed) {
  auto run = [] {
    Rng rng(21);
    auto a = random_tensor({4, 4}, rng);
    auto l = sum(softmax_lastdim(matmul(a, a)));
    backward(l);
    return a.grad_tensor().values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor w = Tensor::vector({0.7f, -0.2f});
  w.set_requires_grad();
  Adam opt({{"w", w}});
  backward(scale(sum(w), 0.0f));
  opt.step(0.1f);
  EXPECT_EQ(w.values(), (std::vector<float>{0.7f, -0.2f}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor w = Tensor::scalar(1.0f);
  w.set_requires_grad();
  Adam opt({{"w", w}});
  backward(sum(w));
  opt.step(0.1f);
  EXPECT_NEAR(w.item(), 0.9f, 1e-5);
}

TEST(Adam, ConvergesOnQuadratic) {
  Tensor w = Tensor::scalar(0.0f);
  w.set_requires_grad();
  Adam opt({{"w", w}}, AdamOptions{0.9f, 0.99f});
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    backward(square(add_scalar(w, -3.0f)));
    opt.step(0.3f * (1.0f - static_cast<float>(i) / 100.0f));
  }
  EXPECT_LT(std::fabs(w.item() - 3.0f), 1e-2);
}

TEST(Adam, NanGradientNamesParameter) {
  Tensor w = Tensor::scalar(1.0f);
  w.set_requires_grad();
  Adam opt({{"layers.0.mixer", w}});
  backward(sum(w));
  w.impl_ptr()->grad[0] = std::nanf("");
  try {
    opt.step(0.1f);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.0.mixer"), std::string::npos);
  }
}
