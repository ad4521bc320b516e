// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/ndtensor/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace titanlab::ops {
namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                     dtype_name(b.dtype()));
  }
}

Tensor finish(Tensor t, const char* op) {
  t.round_in_place();
  t.check_finite(op);
  return t;
}

// Strides for a row-major shape.
std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (size_t d = shape.size(); d-- > 1;) s[d - 1] = s[d] * shape[d];
  return s;
}

}  // namespace

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: expects 2-D operands, got " +
                                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
  require(a.dim(1) == b.dim(0), "matmul: inner dims differ: " + shape_str(a.shape()) + " @ " +
                                    shape_str(b.shape()));
  require_same_dtype(a, b, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n}, a.dtype());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (int64_t i = 0; i < m; ++i) {
    double* row = o.data() + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = x[static_cast<size_t>(i * k + p)];
      const double* brow = y.data() + p * n;
      for (int64_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return finish(std::move(out), "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul_nt: expects 2-D operands");
  require(a.dim(1) == b.dim(1), "matmul_nt: inner dims differ: " + shape_str(a.shape()) + " @ " +
                                    shape_str(b.shape()) + "^T");
  require_same_dtype(a, b, "matmul_nt");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out({m, n}, a.dtype());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = x.data() + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = y.data() + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      o[static_cast<size_t>(i * n + j)] = acc;
    }
  }
  return finish(std::move(out), "matmul_nt");
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul_tn: expects 2-D operands");
  require(a.dim(0) == b.dim(0), "matmul_tn: inner dims differ: " + shape_str(a.shape()) + "^T @ " +
                                    shape_str(b.shape()));
  require_same_dtype(a, b, "matmul_tn");
  const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor out({m, n}, a.dtype());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = x.data() + p * m;
    const double* brow = y.data() + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* row = o.data() + i * n;
      for (int64_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return finish(std::move(out), "matmul_tn");
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& d_out) {
  require(d_out.rank() == 2 && d_out.dim(0) == a.dim(0) && d_out.dim(1) == b.dim(1),
          "matmul_backward: d_out shape " + shape_str(d_out.shape()));
  return {matmul_nt(d_out, b), matmul_tn(a, d_out)};
}

namespace {
Tensor as_rows(const Tensor& x) {
  require(x.rank() >= 1, "linear: scalar input");
  const int64_t cols = x.dim(-1);
  return x.reshape({cols == 0 ? 0 : x.numel() / cols, cols});
}
Shape with_last(const Shape& s, int64_t last) {
  Shape out = s;
  out.back() = last;
  return out;
}
}  // namespace

Tensor linear(const Tensor& x, const Tensor& w) {
  return matmul(as_rows(x), w).reshape(with_last(x.shape(), w.dim(1)));
}

Tensor linear_backward_input(const Tensor& w, const Tensor& d_out) {
  return matmul_nt(as_rows(d_out), w).reshape(with_last(d_out.shape(), w.dim(0)));
}

Tensor linear_backward_weight(const Tensor& x, const Tensor& d_out) {
  return matmul_tn(as_rows(x), as_rows(d_out));
}

// ---- attention ------------------------------------------------------------

namespace {
void check_attention_shapes(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const int64_t> q_pos, std::span<const int64_t> k_pos) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3,
          "attention: expects [heads, seq, head_dim] operands");
  require(q.dim(0) == k.dim(0) && k.dim(0) == v.dim(0), "attention: head counts differ");
  require(q.dim(2) == k.dim(2), "attention: q/k head dims differ");
  require(k.dim(1) == v.dim(1), "attention: k/v sequence lengths differ");
  require(static_cast<int64_t>(q_pos.size()) == q.dim(1), "attention: q positions mismatch");
  require(static_cast<int64_t>(k_pos.size()) == k.dim(1), "attention: k positions mismatch");
  require(q.dim(1) >= 1 && k.dim(1) >= 1, "attention: empty sequence");
  require_same_dtype(q, k, "attention");
  require_same_dtype(k, v, "attention");
}
}  // namespace

AttentionPartial attention_block(const Tensor& q, const Tensor& k, const Tensor& v,
                                 std::span<const int64_t> q_pos, std::span<const int64_t> k_pos,
                                 bool causal) {
  check_attention_shapes(q, k, v, q_pos, k_pos);
  const int64_t heads = q.dim(0), sq = q.dim(1), sk = k.dim(1), hd = q.dim(2), dv = v.dim(2);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  AttentionPartial res{Tensor({heads, sq, dv}, q.dtype()), std::vector<double>(heads * sq)};
  auto o = res.out.mutable_data();
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  std::vector<double> scores(static_cast<size_t>(sk));
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < sq; ++i) {
      const double* qi = qd.data() + (h * sq + i) * hd;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < sk; ++j) {
        if (causal && k_pos[j] > q_pos[i]) {
          scores[j] = -std::numeric_limits<double>::infinity();
          continue;
        }
        const double* kj = kd.data() + (h * sk + j) * hd;
        double s = 0.0;
        for (int64_t p = 0; p < hd; ++p) s += qi[p] * kj[p];
        scores[j] = s * scale;
        mx = std::max(mx, scores[j]);
      }
      if (!std::isfinite(mx)) {
        throw ShapeError("attention: query at position " + std::to_string(q_pos[i]) +
                         " sees no keys");
      }
      double sum = 0.0;
      for (int64_t j = 0; j < sk; ++j) {
        scores[j] = std::isfinite(scores[j]) ? std::exp(scores[j] - mx) : 0.0;
        sum += scores[j];
      }
      double* oi = o.data() + (h * sq + i) * dv;
      for (int64_t j = 0; j < sk; ++j) {
        if (scores[j] == 0.0) continue;
        const double p = scores[j] / sum;
        const double* vj = vd.data() + (h * sk + j) * dv;
        for (int64_t c = 0; c < dv; ++c) oi[c] += p * vj[c];
      }
      res.lse[static_cast<size_t>(h * sq + i)] = mx + std::log(sum);
    }
  }
  res.out = finish(std::move(res.out), "attention");
  return res;
}

AttentionGrads attention_block_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                        std::span<const int64_t> q_pos,
                                        std::span<const int64_t> k_pos, bool causal,
                                        const Tensor& out, std::span<const double> lse,
                                        const Tensor& d_out) {
  check_attention_shapes(q, k, v, q_pos, k_pos);
  const int64_t heads = q.dim(0), sq = q.dim(1), sk = k.dim(1), hd = q.dim(2), dv = v.dim(2);
  require(out.shape() == Shape({heads, sq, dv}) && d_out.shape() == out.shape(),
          "attention_backward: output shape mismatch");
  require(static_cast<int64_t>(lse.size()) == heads * sq, "attention_backward: lse length");
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  AttentionGrads g{Tensor(q.shape(), q.dtype()), Tensor(k.shape(), k.dtype()),
                   Tensor(v.shape(), v.dtype())};
  auto dq = g.d_q.mutable_data();
  auto dk = g.d_k.mutable_data();
  auto dvv = g.d_v.mutable_data();
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  auto od = out.data();
  auto dod = d_out.data();
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < sq; ++i) {
      const double* qi = qd.data() + (h * sq + i) * hd;
      const double* oi = od.data() + (h * sq + i) * dv;
      const double* doi = dod.data() + (h * sq + i) * dv;
      double delta = 0.0;
      for (int64_t c = 0; c < dv; ++c) delta += doi[c] * oi[c];
      const double l = lse[static_cast<size_t>(h * sq + i)];
      double* dqi = dq.data() + (h * sq + i) * hd;
      for (int64_t j = 0; j < sk; ++j) {
        if (causal && k_pos[j] > q_pos[i]) continue;
        const double* kj = kd.data() + (h * sk + j) * hd;
        const double* vj = vd.data() + (h * sk + j) * dv;
        double s = 0.0;
        for (int64_t p = 0; p < hd; ++p) s += qi[p] * kj[p];
        const double prob = std::exp(s * scale - l);
        double dp = 0.0;
        for (int64_t c = 0; c < dv; ++c) dp += doi[c] * vj[c];
        double* dvj = dvv.data() + (h * sk + j) * dv;
        for (int64_t c = 0; c < dv; ++c) dvj[c] += prob * doi[c];
        const double ds = prob * (dp - delta) * scale;
        double* dkj = dk.data() + (h * sk + j) * hd;
        for (int64_t p = 0; p < hd; ++p) {
          dqi[p] += ds * kj[p];
          dkj[p] += ds * qi[p];
        }
      }
    }
  }
  g.d_q = finish(std::move(g.d_q), "attention_backward");
  g.d_k = finish(std::move(g.d_k), "attention_backward");
  g.d_v = finish(std::move(g.d_v), "attention_backward");
  return g;
}

AttentionPartial merge_attention(std::span<const AttentionPartial> parts) {
  require(!parts.empty(), "merge_attention: no partials");
  AttentionPartial acc = parts[0];
  auto o = acc.out.mutable_data();
  const int64_t rows = static_cast<int64_t>(acc.lse.size());
  const int64_t width = rows ? acc.out.numel() / rows : 0;
  for (size_t p = 1; p < parts.size(); ++p) {
    const AttentionPartial& next = parts[p];
    require(next.out.shape() == acc.out.shape(), "merge_attention: shape mismatch");
    auto no = next.out.data();
    for (int64_t r = 0; r < rows; ++r) {
      const double a = acc.lse[r];
      const double b = next.lse[r];
      const double mx = std::max(a, b);
      const double merged = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
      const double wa = std::exp(a - merged);
      const double wb = std::exp(b - merged);
      for (int64_t c = 0; c < width; ++c) {
        o[r * width + c] = wa * o[r * width + c] + wb * no[r * width + c];
      }
      acc.lse[r] = merged;
    }
  }
  acc.out = finish(std::move(acc.out), "merge_attention");
  return acc;
}

namespace {
std::vector<int64_t> iota_positions(int64_t n) {
  std::vector<int64_t> pos(static_cast<size_t>(n));
  std::iota(pos.begin(), pos.end(), 0);
  return pos;
}
}  // namespace

AttentionPartial sdpa(const Tensor& q, const Tensor& k, const Tensor& v, bool causal) {
  require(q.rank() == 3 && k.rank() == 3, "sdpa: expects [heads, seq, head_dim] operands");
  const auto qp = iota_positions(q.dim(1));
  const auto kp = iota_positions(k.dim(1));
  return attention_block(q, k, v, qp, kp, causal);
}

AttentionGrads sdpa_backward(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                             const AttentionPartial& fwd, const Tensor& d_out) {
  const auto qp = iota_positions(q.dim(1));
  const auto kp = iota_positions(k.dim(1));
  return attention_block_backward(q, k, v, qp, kp, causal, fwd.out, fwd.lse, d_out);
}

// ---- normalization / loss -------------------------------------------------

RmsNormOut rms_norm(const Tensor& x, const Tensor& w, double eps) {
  require(x.rank() >= 1 && w.rank() == 1, "rms_norm: bad ranks");
  const int64_t d = x.dim(-1);
  if (d == 0) throw ShapeError("rms_norm: trailing dim is zero");
  require(w.dim(0) == d, "rms_norm: weight length " + std::to_string(w.dim(0)) +
                             " != trailing dim " + std::to_string(d));
  require_same_dtype(x, w, "rms_norm");
  const int64_t rows = x.numel() / d;
  RmsNormOut res{Tensor(x.shape(), x.dtype()), std::vector<double>(static_cast<size_t>(rows))};
  auto o = res.out.mutable_data();
  auto xd = x.data();
  auto wd = w.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double ss = 0.0;
    for (int64_t c = 0; c < d; ++c) ss += xr[c] * xr[c];
    const double rstd = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    res.rstd[r] = rstd;
    for (int64_t c = 0; c < d; ++c) o[r * d + c] = xr[c] * rstd * wd[c];
  }
  res.out = finish(std::move(res.out), "rms_norm");
  return res;
}

RmsNormGrads rms_norm_backward(const Tensor& x, const Tensor& w, std::span<const double> rstd,
                               const Tensor& d_out) {
  require(d_out.shape() == x.shape(), "rms_norm_backward: d_out shape mismatch");
  const int64_t d = x.dim(-1);
  const int64_t rows = d ? x.numel() / d : 0;
  require(static_cast<int64_t>(rstd.size()) == rows, "rms_norm_backward: rstd length");
  RmsNormGrads g{Tensor(x.shape(), x.dtype()), Tensor(w.shape(), w.dtype())};
  auto dx = g.d_x.mutable_data();
  auto dw = g.d_w.mutable_data();
  auto xd = x.data();
  auto wd = w.data();
  auto dyd = d_out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    const double* dy = dyd.data() + r * d;
    const double rs = rstd[r];
    double dot = 0.0;
    for (int64_t c = 0; c < d; ++c) dot += dy[c] * wd[c] * xr[c];
    const double coef = rs * rs * rs * dot / static_cast<double>(d);
    for (int64_t c = 0; c < d; ++c) {
      dx[r * d + c] = rs * wd[c] * dy[c] - coef * xr[c];
      dw[c] += dy[c] * xr[c] * rs;
    }
  }
  g.d_x = finish(std::move(g.d_x), "rms_norm_backward");
  g.d_w = finish(std::move(g.d_w), "rms_norm_backward");
  return g;
}

Tensor softmax_rows(const Tensor& logits) {
  require(logits.rank() == 2, "softmax_rows: expects 2-D logits");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  Tensor out(logits.shape(), logits.dtype());
  auto o = out.mutable_data();
  auto x = logits.data();
  for (int64_t r = 0; r < n; ++r) {
    const double* xr = x.data() + r * v;
    const double mx = *std::max_element(xr, xr + v);
    double sum = 0.0;
    for (int64_t c = 0; c < v; ++c) sum += std::exp(xr[c] - mx);
    for (int64_t c = 0; c < v; ++c) o[r * v + c] = std::exp(xr[c] - mx) / sum;
  }
  return finish(std::move(out), "softmax");
}

CrossEntropyOut softmax_cross_entropy(const Tensor& logits, std::span<const int64_t> targets) {
  require(logits.rank() == 2, "softmax_cross_entropy: expects [batch, vocab] logits");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == n, "softmax_cross_entropy: target count");
  require(n > 0, "softmax_cross_entropy: empty batch");
  auto x = logits.data();
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const int64_t t = targets[r];
    if (t < 0 || t >= v) {
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) +
                              " outside vocab " + std::to_string(v));
    }
    const double* xr = x.data() + r * v;
    const double mx = *std::max_element(xr, xr + v);
    double sum = 0.0;
    for (int64_t c = 0; c < v; ++c) sum += std::exp(xr[c] - mx);
    total += (mx + std::log(sum)) - xr[t];
  }
  const double loss = round_to(logits.dtype(), total / static_cast<double>(n));
  if (!std::isfinite(loss)) throw NonFiniteError("softmax_cross_entropy: non-finite loss");
  return {loss, softmax_rows(logits)};
}

Tensor softmax_cross_entropy_backward(const Tensor& probs, std::span<const int64_t> targets,
                                      double scale) {
  const int64_t n = probs.dim(0), v = probs.dim(1);
  Tensor g = probs;
  auto gd = g.mutable_data();
  for (int64_t r = 0; r < n; ++r) gd[r * v + targets[r]] -= 1.0;
  const double f = scale / static_cast<double>(n);
  for (double& e : gd) e *= f;
  return finish(std::move(g), "softmax_cross_entropy_backward");
}

// ---- elementwise and layout ----------------------------------------------

namespace {
template <typename F>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  require_same_dtype(a, b, op);
  Tensor out(a.shape(), a.dtype());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
  return finish(std::move(out), op);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (double& e : out.mutable_data()) e *= s;
  return finish(std::move(out), "scale");
}

Tensor silu(const Tensor& x) {
  Tensor out = x;
  for (double& e : out.mutable_data()) e = e * sigmoid(e);
  return finish(std::move(out), "silu");
}

Tensor silu_backward(const Tensor& x, const Tensor& d_out) {
  return binary(x, d_out, "silu_backward", [](double v, double g) {
    const double s = sigmoid(v);
    return g * s * (1.0 + v * (1.0 - s));
  });
}

void accumulate(Tensor& out, const Tensor& a) {
  require(out.shape() == a.shape(), "accumulate: shape mismatch " + shape_str(out.shape()) +
                                        " vs " + shape_str(a.shape()));
  require_same_dtype(out, a, "accumulate");
  auto o = out.mutable_data();
  auto x = a.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] += x[i];
  out.round_in_place();
  out.check_finite("accumulate");
}

Tensor embedding(const Tensor& table, std::span<const int64_t> ids, const Shape& ids_shape,
                 int64_t row_offset) {
  require(table.rank() == 2, "embedding: table must be 2-D");
  require(numel_of(ids_shape) == static_cast<int64_t>(ids.size()), "embedding: ids shape");
  const int64_t rows = table.dim(0), d = table.dim(1);
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor out(out_shape, table.dtype());
  auto o = out.mutable_data();
  auto t = table.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    const int64_t r = ids[i] - row_offset;
    if (ids[i] < 0) throw std::out_of_range("embedding: negative token id");
    if (r < 0 || r >= rows) continue;
    std::copy_n(t.data() + r * d, d, o.data() + static_cast<int64_t>(i) * d);
  }
  return out;
}

Tensor embedding_backward(const Shape& table_shape, DType dtype, std::span<const int64_t> ids,
                          const Tensor& d_out, int64_t row_offset) {
  require(table_shape.size() == 2, "embedding_backward: table must be 2-D");
  const int64_t rows = table_shape[0], d = table_shape[1];
  require(d_out.numel() == static_cast<int64_t>(ids.size()) * d, "embedding_backward: d_out size");
  Tensor g(table_shape, dtype);
  auto gd = g.mutable_data();
  auto dd = d_out.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    const int64_t r = ids[i] - row_offset;
    if (r < 0 || r >= rows) continue;
    for (int64_t c = 0; c < d; ++c) gd[r * d + c] += dd[static_cast<int64_t>(i) * d + c];
  }
  return finish(std::move(g), "embedding_backward");
}

Tensor rotary_freqs(int64_t seq_len, int64_t head_dim, double theta) {
  require(head_dim % 2 == 0, "rotary_freqs: head_dim must be even");
  const int64_t half = head_dim / 2;
  Tensor f({seq_len, half, 2});
  auto fd = f.mutable_data();
  for (int64_t p = 0; p < seq_len; ++p) {
    for (int64_t i = 0; i < half; ++i) {
      const double inv = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * inv;
      fd[(p * half + i) * 2] = std::cos(angle);
      fd[(p * half + i) * 2 + 1] = std::sin(angle);
    }
  }
  return f;
}

Tensor rotary_apply(const Tensor& x, const Tensor& freqs, bool inverse) {
  require(x.rank() == 3, "rotary_apply: expects [heads, seq, head_dim]");
  require(freqs.rank() == 3 && freqs.dim(0) == x.dim(1) && freqs.dim(1) * 2 == x.dim(2) &&
              freqs.dim(2) == 2,
          "rotary_apply: freqs shape " + shape_str(freqs.shape()) + " incompatible with " +
              shape_str(x.shape()));
  const int64_t heads = x.dim(0), seq = x.dim(1), hd = x.dim(2), half = hd / 2;
  Tensor out(x.shape(), x.dtype());
  auto o = out.mutable_data();
  auto xd = x.data();
  auto fd = freqs.data();
  const double sgn = inverse ? -1.0 : 1.0;
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t p = 0; p < seq; ++p) {
      const int64_t base = (h * seq + p) * hd;
      for (int64_t i = 0; i < half; ++i) {
        const double c = fd[(p * half + i) * 2];
        const double s = sgn * fd[(p * half + i) * 2 + 1];
        const double x0 = xd[base + 2 * i];
        const double x1 = xd[base + 2 * i + 1];
        o[base + 2 * i] = x0 * c - x1 * s;
        o[base + 2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
  return finish(std::move(out), "rotary_apply");
}

Tensor transpose2d(const Tensor& x) {
  require(x.rank() == 2, "transpose2d: expects 2-D");
  return transpose(x, 0, 1);
}

Tensor transpose(const Tensor& x, int64_t a, int64_t b) {
  const int64_t r = x.rank();
  if (a < 0) a += r;
  if (b < 0) b += r;
  require(a >= 0 && a < r && b >= 0 && b < r, "transpose: dim out of range");
  Shape out_shape = x.shape();
  std::swap(out_shape[a], out_shape[b]);
  Tensor out(out_shape, x.dtype());
  const auto in_strides = strides_of(x.shape());
  const int64_t n = out.numel();
  auto o = out.mutable_data();
  auto xd = x.data();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t src = 0;
    for (int64_t d = 0; d < r; ++d) {
      int64_t sd = d == a ? b : (d == b ? a : d);
      src += idx[d] * in_strides[sd];
    }
    o[i] = xd[src];
    for (int64_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

Tensor narrow(const Tensor& x, int64_t dim, int64_t start, int64_t length) {
  if (dim < 0) dim += x.rank();
  require(dim >= 0 && dim < x.rank(), "narrow: dim out of range");
  require(start >= 0 && length >= 0 && start + length <= x.dim(dim),
          "narrow: [" + std::to_string(start) + ", +" + std::to_string(length) + ") outside " +
              shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[dim] = length;
  Tensor out(out_shape, x.dtype());
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < dim; ++d) outer *= x.dim(d);
  for (int64_t d = dim + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const int64_t src_span = x.dim(dim) * inner;
  auto o = out.mutable_data();
  auto xd = x.data();
  for (int64_t i = 0; i < outer; ++i) {
    std::copy_n(xd.data() + i * src_span + start * inner, length * inner,
                o.data() + i * length * inner);
  }
  return out;
}

void narrow_assign(Tensor& dst, int64_t dim, int64_t start, const Tensor& part) {
  if (dim < 0) dim += dst.rank();
  require(part.rank() == dst.rank(), "narrow_assign: rank mismatch");
  for (int64_t d = 0; d < dst.rank(); ++d) {
    if (d != dim) require(part.dim(d) == dst.dim(d), "narrow_assign: shape mismatch");
  }
  const int64_t length = part.dim(dim);
  require(start >= 0 && start + length <= dst.dim(dim), "narrow_assign: range outside target");
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < dim; ++d) outer *= dst.dim(d);
  for (int64_t d = dim + 1; d < dst.rank(); ++d) inner *= dst.dim(d);
  const int64_t dst_span = dst.dim(dim) * inner;
  auto o = dst.mutable_data();
  auto pd = part.data();
  for (int64_t i = 0; i < outer; ++i) {
    std::copy_n(pd.data() + i * length * inner, length * inner,
                o.data() + i * dst_span + start * inner);
  }
}

Tensor cat(std::span<const Tensor> parts, int64_t dim) {
  require(!parts.empty(), "cat: no inputs");
  const Tensor& first = parts[0];
  if (dim < 0) dim += first.rank();
  Shape out_shape = first.shape();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == first.rank(), "cat: rank mismatch");
    require(p.dtype() == first.dtype(), "cat: dtype mismatch");
    for (int64_t d = 0; d < first.rank(); ++d) {
      if (d != dim) {
        require(p.dim(d) == first.dim(d), "cat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                              shape_str(first.shape()));
      }
    }
    total += p.dim(dim);
  }
  out_shape[dim] = total;
  Tensor out(out_shape, first.dtype());
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    narrow_assign(out, dim, offset, p);
    offset += p.dim(dim);
  }
  return out;
}

}  // namespace titanlab::ops
