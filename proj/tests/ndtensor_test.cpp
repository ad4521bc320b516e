// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.h"
#include "titanlab/ndtensor/float8.h"
#include "titanlab/ndtensor/ops.h"
#include "titanlab/ndtensor/rng.h"
#include "titanlab/ndtensor/tensor.h"

namespace titanlab {
namespace {

using testing::dot;
using testing::grad_rel_err;
using testing::numeric_grad;
using testing::random_tensor;

constexpr double kFdTol = 1e-6;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.nbytes(), 48);
}

TEST(Tensor, F32RoundsOnConversion) {
  Tensor t({1}, {0.1});
  EXPECT_EQ(t.to(DType::kF32)[0], static_cast<double>(0.1f));
  EXPECT_EQ(dtype_size(DType::kF32), 4);
  EXPECT_EQ(dtype_size(DType::kF8E4M3), 1);
}

TEST(Tensor, NonFiniteIsReported) {
  Tensor t({2}, {1.0, std::nan("")});
  EXPECT_THROW(t.check_finite("test"), NonFiniteError);
  Tensor big({1}, {1e300});
  EXPECT_THROW(ops::mul(big, big), NonFiniteError);
}

TEST(Matmul, Identity) {
  Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  Tensor b = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_TRUE(ops::matmul(eye, b).bit_equal(b));
}

TEST(Matmul, HandArithmetic) {
  Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  Tensor b = Tensor::from_rows({{5}, {6}});
  Tensor c = ops::matmul(a, b);
  EXPECT_EQ(c.shape(), Shape({2, 1}));
  EXPECT_EQ(c[0], 17);
  EXPECT_EQ(c[1], 39);
}

TEST(Matmul, Errors) {
  EXPECT_THROW(ops::matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  EXPECT_THROW(ops::matmul(Tensor({2, 3}), Tensor({3, 2}, DType::kF32)), ShapeError);
}

TEST(Matmul, BackwardFiniteDifference) {
  std::mt19937_64 gen(1);
  Tensor a = random_tensor({3, 4}, gen);
  Tensor b = random_tensor({4, 2}, gen);
  Tensor proj = random_tensor({3, 2}, gen);
  auto g = ops::matmul_backward(a, b, proj);
  auto fa = [&](const Tensor& x) { return dot(ops::matmul(x, b), proj); };
  auto fb = [&](const Tensor& x) { return dot(ops::matmul(a, x), proj); };
  EXPECT_LE(grad_rel_err(g.d_a, numeric_grad(fa, a)), kFdTol);
  EXPECT_LE(grad_rel_err(g.d_b, numeric_grad(fb, b)), kFdTol);
}

TEST(Linear, BackwardFiniteDifference) {
  std::mt19937_64 gen(2);
  Tensor x = random_tensor({2, 3, 4}, gen);
  Tensor w = random_tensor({4, 5}, gen);
  Tensor proj = random_tensor({2, 3, 5}, gen);
  auto fx = [&](const Tensor& t) { return dot(ops::linear(t, w), proj); };
  auto fw = [&](const Tensor& t) { return dot(ops::linear(x, t), proj); };
  EXPECT_LE(grad_rel_err(ops::linear_backward_input(w, proj), numeric_grad(fx, x)), kFdTol);
  EXPECT_LE(grad_rel_err(ops::linear_backward_weight(x, proj), numeric_grad(fw, w)), kFdTol);
}

TEST(Sdpa, SingleTokenReturnsValue) {
  std::mt19937_64 gen(3);
  Tensor q = random_tensor({2, 1, 4}, gen);
  Tensor k = random_tensor({2, 1, 4}, gen);
  Tensor v = random_tensor({2, 1, 4}, gen);
  EXPECT_LE(max_abs_diff(ops::sdpa(q, k, v, true).out, v), 0.0);
}

TEST(Sdpa, CausalUniformScoresArePrefixMeans) {
  Tensor q({1, 3, 2});
  std::mt19937_64 gen(4);
  Tensor k = random_tensor({1, 3, 2}, gen);
  Tensor v = random_tensor({1, 3, 2}, gen);
  Tensor out = ops::sdpa(q, k, v, true).out;
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t c = 0; c < 2; ++c) {
      double mean = 0.0;
      for (int64_t j = 0; j <= i; ++j) mean += v[j * 2 + c];
      EXPECT_NEAR(out[i * 2 + c], mean / static_cast<double>(i + 1), 1e-15);
    }
  }
}

TEST(Sdpa, ShapeMismatch) {
  EXPECT_THROW(ops::sdpa(Tensor({2, 3, 4}), Tensor({2, 3, 5}), Tensor({2, 3, 4}), false), ShapeError);
  EXPECT_THROW(ops::sdpa(Tensor({2, 3, 4}), Tensor({1, 3, 4}), Tensor({1, 3, 4}), false), ShapeError);
}

class SdpaGrad : public ::testing::TestWithParam<bool> {};

TEST_P(SdpaGrad, FiniteDifference) {
  const bool causal = GetParam();
  std::mt19937_64 gen(5);
  Tensor q = random_tensor({2, 5, 3}, gen);
  Tensor k = random_tensor({2, 5, 3}, gen);
  Tensor v = random_tensor({2, 5, 3}, gen);
  Tensor proj = random_tensor({2, 5, 3}, gen);
  auto fwd = ops::sdpa(q, k, v, causal);
  auto g = ops::sdpa_backward(q, k, v, causal, fwd, proj);
  auto fq = [&](const Tensor& t) { return dot(ops::sdpa(t, k, v, causal).out, proj); };
  auto fk = [&](const Tensor& t) { return dot(ops::sdpa(q, t, v, causal).out, proj); };
  auto fv = [&](const Tensor& t) { return dot(ops::sdpa(q, k, t, causal).out, proj); };
  EXPECT_LE(grad_rel_err(g.d_q, numeric_grad(fq, q)), kFdTol);
  EXPECT_LE(grad_rel_err(g.d_k, numeric_grad(fk, k)), kFdTol);
  EXPECT_LE(grad_rel_err(g.d_v, numeric_grad(fv, v)), kFdTol);
}

INSTANTIATE_TEST_SUITE_P(Masks, SdpaGrad, ::testing::Bool());

TEST(Attention, MergeOfBlocksEqualsFull) {
  std::mt19937_64 gen(6);
  Tensor q = random_tensor({2, 6, 4}, gen);
  Tensor k = random_tensor({2, 6, 4}, gen);
  Tensor v = random_tensor({2, 6, 4}, gen);
  std::vector<int64_t> qp = {0, 1, 2, 3, 4, 5};
  std::vector<int64_t> kp_a = {0, 1, 2}, kp_b = {3, 4, 5};
  auto full = ops::attention_block(q, k, v, qp, qp, false);
  std::vector<ops::AttentionPartial> parts = {
      ops::attention_block(q, ops::narrow(k, 1, 0, 3), ops::narrow(v, 1, 0, 3), qp, kp_a, false),
      ops::attention_block(q, ops::narrow(k, 1, 3, 3), ops::narrow(v, 1, 3, 3), qp, kp_b, false)};
  auto merged = ops::merge_attention(parts);
  EXPECT_LE(max_abs_diff(merged.out, full.out), 1e-14);
  std::swap(parts[0], parts[1]);
  EXPECT_LE(max_abs_diff(ops::merge_attention(parts).out, full.out), 1e-14);
}

TEST(RmsNorm, OnesAreFixedPoint) {
  Tensor x = Tensor::full({4}, 1.0);
  Tensor out = ops::rms_norm(x, Tensor::full({4}, 1.0), 0.0).out;
  EXPECT_TRUE(out.bit_equal(x));
}

TEST(RmsNorm, ScaleInvariant) {
  std::mt19937_64 gen(7);
  Tensor x = random_tensor({3, 5}, gen);
  Tensor w = random_tensor({5}, gen);
  Tensor a = ops::rms_norm(x, w, 0.0).out;
  Tensor b = ops::rms_norm(ops::scale(x, 3.7), w, 0.0).out;
  EXPECT_LE(max_rel_diff(b, a, 1e-12), 1e-14);
}

TEST(RmsNorm, Errors) {
  EXPECT_THROW(ops::rms_norm(Tensor({2, 0}), Tensor({0}), 1e-6), ShapeError);
  EXPECT_THROW(ops::rms_norm(Tensor({2, 3}), Tensor({4}), 1e-6), ShapeError);
}

TEST(RmsNorm, BackwardFiniteDifference) {
  std::mt19937_64 gen(8);
  Tensor x = random_tensor({3, 6}, gen);
  Tensor w = random_tensor({6}, gen);
  Tensor proj = random_tensor({3, 6}, gen);
  const double eps = 1e-5;
  auto fwd = ops::rms_norm(x, w, eps);
  auto g = ops::rms_norm_backward(x, w, fwd.rstd, proj);
  auto fx = [&](const Tensor& t) { return dot(ops::rms_norm(t, w, eps).out, proj); };
  auto fw = [&](const Tensor& t) { return dot(ops::rms_norm(x, t, eps).out, proj); };
  EXPECT_LE(grad_rel_err(g.d_x, numeric_grad(fx, x)), kFdTol);
  EXPECT_LE(grad_rel_err(g.d_w, numeric_grad(fw, w)), kFdTol);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 gen(9);
  Tensor p = ops::softmax_rows(random_tensor({16, 33}, gen, 5.0));
  for (int64_t r = 0; r < 16; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < 33; ++c) s += p[r * 33 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  std::vector<int64_t> targets = {0, 5, 15};
  auto out = ops::softmax_cross_entropy(Tensor({3, 16}), targets);
  EXPECT_NEAR(out.loss, std::log(16.0), 1e-15);
}

TEST(CrossEntropy, ConfidentLogitsGiveZero) {
  Tensor logits({2, 4});
  std::vector<int64_t> targets = {1, 3};
  logits[1] = 1e6;
  logits[7] = 1e6;
  EXPECT_NEAR(ops::softmax_cross_entropy(logits, targets).loss, 0.0, 1e-12);
}

TEST(CrossEntropy, OutOfRangeTarget) {
  std::vector<int64_t> targets = {4};
  EXPECT_THROW(ops::softmax_cross_entropy(Tensor({1, 4}), targets), std::out_of_range);
}

TEST(CrossEntropy, BackwardFiniteDifference) {
  std::mt19937_64 gen(10);
  Tensor logits = random_tensor({4, 7}, gen);
  std::vector<int64_t> targets = {0, 6, 3, 3};
  auto out = ops::softmax_cross_entropy(logits, targets);
  Tensor g = ops::softmax_cross_entropy_backward(out.probs, targets);
  auto f = [&](const Tensor& t) { return ops::softmax_cross_entropy(t, targets).loss; };
  EXPECT_LE(grad_rel_err(g, numeric_grad(f, logits)), kFdTol);
}

TEST(Elementwise, SiluZero) { EXPECT_EQ(ops::silu(Tensor({1}))[0], 0.0); }

TEST(Elementwise, BackwardFiniteDifference) {
  std::mt19937_64 gen(11);
  Tensor a = random_tensor({3, 4}, gen);
  Tensor b = random_tensor({3, 4}, gen);
  Tensor proj = random_tensor({3, 4}, gen);
  auto fs = [&](const Tensor& t) { return dot(ops::silu(t), proj); };
  EXPECT_LE(grad_rel_err(ops::silu_backward(a, proj), numeric_grad(fs, a)), kFdTol);
  // mul: d/da = proj * b; add: d/da = proj
  auto fm = [&](const Tensor& t) { return dot(ops::mul(t, b), proj); };
  EXPECT_LE(grad_rel_err(ops::mul(proj, b), numeric_grad(fm, a)), kFdTol);
  auto fa = [&](const Tensor& t) { return dot(ops::add(t, b), proj); };
  EXPECT_LE(grad_rel_err(proj, numeric_grad(fa, a)), kFdTol);
}

TEST(Elementwise, TransposeBackwardIsTranspose) {
  std::mt19937_64 gen(12);
  Tensor x = random_tensor({2, 3, 4}, gen);
  Tensor proj = random_tensor({4, 3, 2}, gen);
  auto f = [&](const Tensor& t) { return dot(ops::transpose(t, 0, 2), proj); };
  EXPECT_LE(grad_rel_err(ops::transpose(proj, 0, 2), numeric_grad(f, x)), kFdTol);
  EXPECT_TRUE(ops::transpose(ops::transpose(x, 0, 2), 0, 2).bit_equal(x));
  EXPECT_TRUE(x.reshape({6, 4}).reshape({2, 3, 4}).bit_equal(x));
}

TEST(Rotary, PositionZeroIsIdentity) {
  std::mt19937_64 gen(13);
  Tensor x = random_tensor({2, 1, 8}, gen);
  Tensor freqs = ops::rotary_freqs(1, 8);
  EXPECT_TRUE(ops::rotary_apply(x, freqs).bit_equal(x));
}

TEST(Rotary, BackwardFiniteDifference) {
  std::mt19937_64 gen(14);
  Tensor x = random_tensor({2, 5, 6}, gen);
  Tensor proj = random_tensor({2, 5, 6}, gen);
  Tensor freqs = ops::rotary_freqs(5, 6);
  auto f = [&](const Tensor& t) { return dot(ops::rotary_apply(t, freqs), proj); };
  EXPECT_LE(grad_rel_err(ops::rotary_apply(proj, freqs, true), numeric_grad(f, x)), kFdTol);
}

TEST(Embedding, BackwardMatchesOneHotMatmul) {
  std::mt19937_64 gen(15);
  const int64_t vocab = 6, dim = 3;
  Tensor table = random_tensor({vocab, dim}, gen);
  std::vector<int64_t> ids = {1, 4, 1, 0, 5};
  Tensor d_out = random_tensor({5, dim}, gen);
  Tensor onehot({5, vocab});
  for (int64_t i = 0; i < 5; ++i) onehot[i * vocab + ids[i]] = 1.0;
  Tensor expect = ops::matmul_tn(onehot, d_out);
  Tensor got = ops::embedding_backward(table.shape(), DType::kF64, ids, d_out);
  EXPECT_LE(max_abs_diff(got, expect), 1e-15);
  EXPECT_TRUE(ops::embedding(table, ids, {5}).bit_equal(ops::matmul(onehot, table)));
}

TEST(Embedding, ShardedRowsProduceZeros) {
  Tensor table = Tensor::from_rows({{1, 2}, {3, 4}});
  std::vector<int64_t> ids = {0, 2, 3};
  Tensor out = ops::embedding(table, ids, {3}, 2);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[2], 1.0);
  EXPECT_EQ(out[5], 4.0);
}

TEST(InitParam, Deterministic) {
  Tensor a = init_param("layers.0.attention.wq.weight", {8, 8}, 7);
  Tensor b = init_param("layers.0.attention.wq.weight", {8, 8}, 7);
  EXPECT_TRUE(a.bit_equal(b));
}

TEST(InitParam, TruncatedAtTwoSigma) {
  Tensor a = init_param("w", {64, 64}, 1);
  double sum2 = 0.0;
  for (double v : a.data()) {
    EXPECT_LE(std::abs(v), 2 * kInitStd);
    sum2 += v * v;
  }
  const double std = std::sqrt(sum2 / static_cast<double>(a.numel()));
  // truncation at 2 sigma shrinks the std by a factor of about 0.88
  EXPECT_NEAR(std / kInitStd, 0.88, 0.03);
}

TEST(InitParam, NormsAreOnes) {
  Tensor n = init_param("layers.1.ffn_norm.weight", {16}, 3);
  for (double v : n.data()) EXPECT_EQ(v, 1.0);
}

TEST(InitParam, ShardConsistency) {
  const Shape shape = {7, 5};
  Tensor full = init_param("output.weight", shape, 11);
  for (int64_t split : {1, 2, 3, 4, 7}) {
    std::vector<Tensor> parts;
    const int64_t size = (7 + split - 1) / split;
    for (int64_t off = 0; off < 7; off += size) {
      const int64_t len = std::min(size, 7 - off);
      parts.push_back(init_param_slice("output.weight", shape, {off, 0}, {len, 5}, 11));
    }
    EXPECT_TRUE(ops::cat(parts, 0).bit_equal(full)) << split;
  }
  Tensor cols = init_param_slice("output.weight", shape, {2, 1}, {3, 2}, 11);
  EXPECT_TRUE(cols.bit_equal(ops::narrow(ops::narrow(full, 0, 2, 3), 1, 1, 2)));
}

TEST(InitParam, DistinctNamesDiffer) {
  Tensor a = init_param("a.weight", {32, 32}, 5);
  Tensor b = init_param("b.weight", {32, 32}, 5);
  int64_t differ = 0;
  for (int64_t i = 0; i < a.numel(); ++i) differ += a[i] != b[i];
  EXPECT_GT(differ, 1000);
}

TEST(Float8, MaxIs448ByEnumeration) {
  double best = 0.0;
  for (int bits = 0; bits < 256; ++bits) {
    const auto b = static_cast<uint8_t>(bits);
    if (fp8::is_nan_e4m3(b)) continue;
    best = std::max(best, std::abs(fp8::decode_e4m3(b)));
  }
  EXPECT_EQ(best, 448.0);
  EXPECT_EQ(fp8::e4m3_max(), 448.0);
}

TEST(Float8, RepresentableValuesRoundTrip) {
  for (int bits = 0; bits < 256; ++bits) {
    const auto b = static_cast<uint8_t>(bits);
    if (fp8::is_nan_e4m3(b)) continue;
    const double v = fp8::decode_e4m3(b);
    EXPECT_EQ(fp8::quantize_e4m3(v), v) << bits;
  }
}

TEST(Float8, SaturatesAndRoundsToNearestEven) {
  EXPECT_EQ(fp8::quantize_e4m3(1e6), 448.0);
  EXPECT_EQ(fp8::quantize_e4m3(-1e6), -448.0);
  // between 1.0 and 1.125 the midpoint goes to the even mantissa (1.0)
  EXPECT_EQ(fp8::quantize_e4m3(1.0625), 1.0);
  EXPECT_EQ(fp8::quantize_e4m3(1.1875), 1.25);
}

TEST(Float8, RelativeErrorBoundOverNormalRange) {
  // sweep normal-range magnitudes between consecutive representable values
  const double min_normal = std::ldexp(1.0, 1 - fp8::kExponentBias);
  for (int bits = 0; bits < 0x7E; ++bits) {
    const double lo = fp8::decode_e4m3(static_cast<uint8_t>(bits));
    const double hi = fp8::decode_e4m3(static_cast<uint8_t>(bits + 1));
    if (lo < min_normal) continue;
    for (int s = 0; s <= 16; ++s) {
      const double x = lo + (hi - lo) * s / 16.0;
      EXPECT_LE(std::abs(fp8::quantize_e4m3(x) - x), 0.25 * x);
      EXPECT_LE(std::abs(fp8::quantize_e4m3(-x) + x), 0.25 * x);
    }
  }
}

TEST(Tensor, F8TensorsHoldRepresentableValues) {
  std::mt19937_64 gen(16);
  Tensor t = random_tensor({64}, gen, 10.0).to(DType::kF8E4M3);
  for (double v : t.data()) EXPECT_EQ(fp8::quantize_e4m3(v), v);
}

}  // namespace
}  // namespace titanlab
