// Copyright 2026 The ModalFuse Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "modalfuse/tensor.hpp"

namespace modalfuse {

inline constexpr double kRmsNormEps = 1e-5;

namespace detail {

template <class S>
bool tracing2(const TensorT<S>& a, const TensorT<S>& b) {
  return TapeT<S>::active() != nullptr && (a.requires_grad() || b.requires_grad());
}

template <class S>
bool tracing1(const TensorT<S>& a) {
  return TapeT<S>::active() != nullptr && a.requires_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and broadcast ops

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  const S* av = a.value().data();
  const S* bv = b.value().data();
  S* ov = out.value().data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  if (detail::tracing2(a, b)) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [as, bs, os, n]() {
      const S* go = os->grad.data();
      if (as->requires_grad) {
        S* ga = as->grad.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (bs->requires_grad) {
        S* gb = bs->grad.data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

// y[r][c] = x[r][c] + bias[c]
template <class S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& bias) {
  if (x.ndim() < 1 || bias.ndim() != 1 || x.shape().back() != bias.dim(0))
    throw std::invalid_argument("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(bias.shape()));
  const int c = bias.dim(0);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(c);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* xv = x.value().data();
  const S* bv = bias.value().data();
  S* ov = out.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < c; ++j) ov[r * c + j] = xv[r * c + j] + bv[j];
  if (detail::tracing2(x, bias)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), bs = bias.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, bs, os, rows, c]() {
      const S* go = os->grad.data();
      if (xs->requires_grad) {
        S* gx = xs->grad.data();
        const std::size_t n = rows * static_cast<std::size_t>(c);
        for (std::size_t i = 0; i < n; ++i) gx[i] += go[i];
      }
      if (bs->requires_grad) {
        S* gb = bs->grad.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (int j = 0; j < c; ++j) gb[j] += go[r * c + j];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, double k) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  const S* xv = x.value().data();
  S* ov = out.value().data();
  const S ks = static_cast<S>(k);
  for (std::size_t i = 0; i < n; ++i) ov[i] = xv[i] * ks;
  if (detail::tracing1(x)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, os, n, ks]() {
      if (!xs->requires_grad) return;
      const S* go = os->grad.data();
      S* gx = xs->grad.data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * ks;
    });
  }
  return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  const S* av = a.value().data();
  const S* bv = b.value().data();
  S* ov = out.value().data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  if (detail::tracing2(a, b)) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [as, bs, os, n]() {
      const S* go = os->grad.data();
      if (as->requires_grad) {
        S* ga = as->grad.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * bs->value[i];
      }
      if (bs->requires_grad) {
        S* gb = bs->grad.data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * as->value[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  double acc = 0.0;
  for (S v : x.value()) acc += static_cast<double>(v);
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));
  if (detail::tracing1(x)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, os]() {
      if (!xs->requires_grad) return;
      const S g = os->grad[0];
      for (S& gx : xs->grad) gx += g;
    });
  }
  return out;
}

template <class S>
TensorT<S> silu(const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::size_t n = x.numel();
  const S* xv = x.value().data();
  S* ov = out.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(xv[i]);
    ov[i] = static_cast<S>(v / (1.0 + std::exp(-v)));
  }
  if (detail::tracing1(x)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, os, n]() {
      if (!xs->requires_grad) return;
      const S* go = os->grad.data();
      S* gx = xs->grad.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(xs->value[i]);
        const double sig = 1.0 / (1.0 + std::exp(-v));
        gx[i] += go[i] * static_cast<S>(sig * (1.0 + v * (1.0 - sig)));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<S> out = TensorT<S>::zeros({m, n});
  const S* av = a.value().data();
  const S* bv = b.value().data();
  S* ov = out.value().data();
  for (int i = 0; i < m; ++i) {
    S* orow = ov + static_cast<std::size_t>(i) * n;
    const S* arow = av + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S av_ip = arow[p];
      const S* brow = bv + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av_ip * brow[j];
    }
  }
  if (detail::tracing2(a, b)) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [as, bs, os, m, k, n]() {
      const S* go = os->grad.data();
      if (as->requires_grad) {
        // dA = dOut * B^T : row i of dA is n-length dots against rows of B
        S* ga = as->grad.data();
        const S* bv2 = bs->value.data();
        for (int i = 0; i < m; ++i) {
          const S* grow = go + static_cast<std::size_t>(i) * n;
          S* garow = ga + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const S* brow = bv2 + static_cast<std::size_t>(p) * n;
            S acc = S(0);
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[p] += acc;
          }
        }
      }
      if (bs->requires_grad) {
        // dB = A^T * dOut : accumulate outer products row by row
        S* gb = bs->grad.data();
        const S* av2 = as->value.data();
        for (int i = 0; i < m; ++i) {
          const S* arow = av2 + static_cast<std::size_t>(i) * k;
          const S* grow = go + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const S a_ip = arow[p];
            S* gbrow = gb + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += a_ip * grow[j];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// row indexing

template <class S>
TensorT<S> embedding_rows(const TensorT<S>& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding_rows: table must be 2-D");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding_rows: id " + std::to_string(id) + " out of range [0, " +
                                  std::to_string(v) + ")");
  const int r = static_cast<int>(ids.size());
  TensorT<S> out = TensorT<S>::zeros({r, d});
  const S* tv = table.value().data();
  S* ov = out.value().data();
  for (int i = 0; i < r; ++i)
    std::copy_n(tv + static_cast<std::size_t>(ids[i]) * d, d, ov + static_cast<std::size_t>(i) * d);
  if (detail::tracing1(table)) {
    out.set_requires_grad(true);
    auto ts = table.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [ts, os, ids, d]() {
      if (!ts->requires_grad) return;
      const S* go = os->grad.data();
      S* gt = ts->grad.data();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        S* trow = gt + static_cast<std::size_t>(ids[i]) * d;
        const S* grow = go + i * d;
        for (int j = 0; j < d; ++j) trow[j] += grow[j];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> gather_rows(const TensorT<S>& x, const std::vector<int>& idx) {
  if (x.ndim() != 2) throw std::invalid_argument("gather_rows: input must be 2-D");
  const int n = x.dim(0), d = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= n) throw std::invalid_argument("gather_rows: row index out of range");
  const int r = static_cast<int>(idx.size());
  TensorT<S> out = TensorT<S>::zeros({r, d});
  const S* xv = x.value().data();
  S* ov = out.value().data();
  for (int i = 0; i < r; ++i)
    std::copy_n(xv + static_cast<std::size_t>(idx[i]) * d, d, ov + static_cast<std::size_t>(i) * d);
  if (detail::tracing1(x)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, os, idx, d]() {
      if (!xs->requires_grad) return;
      const S* go = os->grad.data();
      S* gx = xs->grad.data();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        S* xrow = gx + static_cast<std::size_t>(idx[i]) * d;
        const S* grow = go + i * d;
        for (int j = 0; j < d; ++j) xrow[j] += grow[j];
      }
    });
  }
  return out;
}

// Places row r of x at row idx[r] of an n-row zero tensor. Indices must be
// distinct.
template <class S>
TensorT<S> scatter_rows(const TensorT<S>& x, const std::vector<int>& idx, int n) {
  if (x.ndim() != 2) throw std::invalid_argument("scatter_rows: input must be 2-D");
  if (static_cast<int>(idx.size()) != x.dim(0))
    throw std::invalid_argument("scatter_rows: index count does not match rows");
  const int d = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= n) throw std::invalid_argument("scatter_rows: row index out of range");
  TensorT<S> out = TensorT<S>::zeros({n, d});
  const S* xv = x.value().data();
  S* ov = out.value().data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(xv + i * d, d, ov + static_cast<std::size_t>(idx[i]) * d);
  if (detail::tracing1(x)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, os, idx, d]() {
      if (!xs->requires_grad) return;
      const S* go = os->grad.data();
      S* gx = xs->grad.data();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const S* grow = go + static_cast<std::size_t>(idx[i]) * d;
        S* xrow = gx + i * d;
        for (int j = 0; j < d; ++j) xrow[j] += grow[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax / losses

// Each trailing-dim slice is divided by sqrt(mean(x^2) + eps) and scaled by
// the learned gain (no mean subtraction, no bias).
template <class S>
TensorT<S> rmsnorm(const TensorT<S>& x, const TensorT<S>& gain, double eps = kRmsNormEps) {
  if (gain.ndim() != 1 || x.shape().back() != gain.dim(0))
    throw std::invalid_argument("rmsnorm: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(gain.shape()));
  const int d = gain.dim(0);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* xv = x.value().data();
  const S* gv = gain.value().data();
  S* ov = out.value().data();
  std::vector<S> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xrow = xv + r * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += static_cast<double>(xrow[j]) * static_cast<double>(xrow[j]);
    ms /= d;
    const S s = static_cast<S>(1.0 / std::sqrt(ms + eps));
    inv_rms[r] = s;
    S* orow = ov + r * d;
    for (int j = 0; j < d; ++j) orow[j] = xrow[j] * s * gv[j];
  }
  if (detail::tracing2(x, gain)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), gs = gain.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, gs, os, rows, d, inv_rms = std::move(inv_rms)]() {
      const S* go = os->grad.data();
      const S* xv2 = xs->value.data();
      const S* gv2 = gs->value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const S* xrow = xv2 + r * d;
        const S* grow = go + r * d;
        const S s = inv_rms[r];
        if (gs->requires_grad) {
          S* gg = gs->grad.data();
          for (int j = 0; j < d; ++j) gg[j] += grow[j] * xrow[j] * s;
        }
        if (xs->requires_grad) {
          // dx_k = s*dy_k*g_k - (s^3 x_k / d) * sum_j dy_j g_j x_j
          double dot = 0.0;
          for (int j = 0; j < d; ++j)
            dot += static_cast<double>(grow[j]) * static_cast<double>(gv2[j]) * static_cast<double>(xrow[j]);
          const double s3_over_d = static_cast<double>(s) * static_cast<double>(s) * static_cast<double>(s) / d;
          S* gx = xs->grad.data() + r * d;
          for (int j = 0; j < d; ++j)
            gx[j] += static_cast<S>(static_cast<double>(s) * static_cast<double>(grow[j]) *
                                        static_cast<double>(gv2[j]) -
                                    s3_over_d * static_cast<double>(xrow[j]) * dot);
        }
      }
    });
  }
  return out;
}

// Numerically stabilized softmax over the last axis. Entries equal to -inf
// are treated as masked and map to exactly 0; a fully masked slice yields an
// all-zero slice.
template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
  if (x.ndim() < 1 || x.shape().back() < 1)
    throw std::invalid_argument("softmax_lastdim: last extent must be >= 1");
  const int d = x.shape().back();
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* xv = x.value().data();
  S* ov = out.value().data();
  const S neg_inf = -std::numeric_limits<S>::infinity();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xrow = xv + r * d;
    S* orow = ov + r * d;
    S m = neg_inf;
    for (int j = 0; j < d; ++j) m = std::max(m, xrow[j]);
    if (m == neg_inf) continue;  // fully masked slice stays all-zero
    double denom = 0.0;
    for (int j = 0; j < d; ++j) {
      const double e = (xrow[j] == neg_inf) ? 0.0 : std::exp(static_cast<double>(xrow[j] - m));
      orow[j] = static_cast<S>(e);
      denom += e;
    }
    const S inv = static_cast<S>(1.0 / denom);
    for (int j = 0; j < d; ++j) orow[j] *= inv;
  }
  if (detail::tracing1(x)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, os, rows, d]() {
      if (!xs->requires_grad) return;
      const S* go = os->grad.data();
      const S* ov2 = os->value.data();
      S* gx = xs->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const S* prow = ov2 + r * d;
        const S* grow = go + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += static_cast<double>(prow[j]) * static_cast<double>(grow[j]);
        S* gxrow = gx + r * d;
        for (int j = 0; j < d; ++j)
          gxrow[j] += static_cast<S>(static_cast<double>(prow[j]) * (static_cast<double>(grow[j]) - dot));
      }
    });
  }
  return out;
}

// Mean over unmasked rows of -log softmax(logits)[target]. Zero unmasked
// rows yields an exact 0 with no gradient (a text-free batch).
template <class S>
TensorT<S> cross_entropy_logits(const TensorT<S>& logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& mask) {
  if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy_logits: logits must be 2-D");
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n)
    throw std::invalid_argument("cross_entropy_logits: targets/mask length mismatch");
  int count = 0;
  for (int r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || targets[r] >= v)
      throw std::invalid_argument("cross_entropy_logits: target " + std::to_string(targets[r]) +
                                  " out of range [0, " + std::to_string(v) + ")");
    ++count;
  }
  if (count == 0) return TensorT<S>::scalar(S(0));
  const S* lv = logits.value().data();
  std::vector<double> lse(static_cast<std::size_t>(n), 0.0);
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    const S* row = lv + static_cast<std::size_t>(r) * v;
    double m = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < v; ++j) m = std::max(m, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - m);
    lse[static_cast<std::size_t>(r)] = m + std::log(denom);
    total += lse[static_cast<std::size_t>(r)] - static_cast<double>(row[targets[r]]);
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(total / count));
  if (detail::tracing1(logits)) {
    out.set_requires_grad(true);
    auto ls = logits.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [ls, os, targets, mask, lse = std::move(lse), n, v, count]() {
      if (!ls->requires_grad) return;
      const double g = static_cast<double>(os->grad[0]) / count;
      const S* lv2 = ls->value.data();
      S* gl = ls->grad.data();
      for (int r = 0; r < n; ++r) {
        if (!mask[r]) continue;
        const S* row = lv2 + static_cast<std::size_t>(r) * v;
        S* grow = gl + static_cast<std::size_t>(r) * v;
        const double l = lse[static_cast<std::size_t>(r)];
        for (int j = 0; j < v; ++j) {
          double p = std::exp(static_cast<double>(row[j]) - l);
          if (j == targets[r]) p -= 1.0;
          grow[j] += static_cast<S>(g * p);
        }
      }
    });
  }
  return out;
}

// sum over coordinates of (pred - target)^2; target is a constant.
template <class S>
TensorT<S> sum_sq_diff(const TensorT<S>& pred, const std::vector<S>& target) {
  if (pred.numel() != target.size())
    throw std::invalid_argument("sum_sq_diff: size mismatch " + std::to_string(pred.numel()) + " vs " +
                                std::to_string(target.size()));
  const std::size_t n = pred.numel();
  const S* pv = pred.value().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pv[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));
  if (detail::tracing1(pred)) {
    out.set_requires_grad(true);
    auto ps = pred.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [ps, os, target, n]() {
      if (!ps->requires_grad) return;
      const S g = os->grad[0];
      S* gp = ps->grad.data();
      for (std::size_t i = 0; i < n; ++i) gp[i] += S(2) * (ps->value[i] - target[i]) * g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// rotary position encoding

// Rotates (even, odd) pairs within each head of x by the per-position angles
// of the standard rotary scheme. x is [n x n_heads*head_dim].
template <class S>
TensorT<S> rope(const TensorT<S>& x, const std::vector<int>& positions, int head_dim, double base = 10000.0) {
  if (x.ndim() != 2) throw std::invalid_argument("rope: input must be 2-D");
  if (head_dim % 2 != 0) throw std::invalid_argument("rope: head_dim must be even");
  const int n = x.dim(0), w = x.dim(1);
  if (w % head_dim != 0) throw std::invalid_argument("rope: width not a multiple of head_dim");
  if (static_cast<int>(positions.size()) != n) throw std::invalid_argument("rope: positions length mismatch");
  const int n_heads = w / head_dim;
  const int half = head_dim / 2;
  std::vector<S> cs(static_cast<std::size_t>(n) * half), sn(static_cast<std::size_t>(n) * half);
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < half; ++p) {
      const double freq = std::pow(base, -2.0 * p / head_dim);
      const double ang = positions[i] * freq;
      cs[static_cast<std::size_t>(i) * half + p] = static_cast<S>(std::cos(ang));
      sn[static_cast<std::size_t>(i) * half + p] = static_cast<S>(std::sin(ang));
    }
  }
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S* xv = x.value().data();
  S* ov = out.value().data();
  for (int i = 0; i < n; ++i) {
    for (int h = 0; h < n_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(i) * w + static_cast<std::size_t>(h) * head_dim;
      for (int p = 0; p < half; ++p) {
        const S c = cs[static_cast<std::size_t>(i) * half + p];
        const S s = sn[static_cast<std::size_t>(i) * half + p];
        const S x0 = xv[off + 2 * p], x1 = xv[off + 2 * p + 1];
        ov[off + 2 * p] = x0 * c - x1 * s;
        ov[off + 2 * p + 1] = x0 * s + x1 * c;
      }
    }
  }
  if (detail::tracing1(x)) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [xs, os, cs = std::move(cs), sn = std::move(sn), n, w, n_heads, head_dim,
                                     half]() {
      if (!xs->requires_grad) return;
      const S* go = os->grad.data();
      S* gx = xs->grad.data();
      for (int i = 0; i < n; ++i) {
        for (int h = 0; h < n_heads; ++h) {
          const std::size_t off = static_cast<std::size_t>(i) * w + static_cast<std::size_t>(h) * head_dim;
          for (int p = 0; p < half; ++p) {
            const S c = cs[static_cast<std::size_t>(i) * half + p];
            const S s = sn[static_cast<std::size_t>(i) * half + p];
            const S g0 = go[off + 2 * p], g1 = go[off + 2 * p + 1];
            gx[off + 2 * p] += g0 * c + g1 * s;  // inverse rotation
            gx[off + 2 * p + 1] += -g0 * s + g1 * c;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// masked multi-head attention

// q, k, v are [n x n_heads*head_dim]; mask is a row-major n*n byte matrix
// where mask[query*n + key] != 0 allows attention. Disallowed keys are never
// read, so perturbing them cannot change an output row even at the bit level.
template <class S>
TensorT<S> multihead_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                               const std::vector<std::uint8_t>& mask, int n_heads) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.ndim() != 2)
    throw std::invalid_argument("multihead_attention: q/k/v shape mismatch");
  const int n = q.dim(0), w = q.dim(1);
  if (w % n_heads != 0) throw std::invalid_argument("multihead_attention: width not divisible by heads");
  if (static_cast<int>(mask.size()) != n * n) throw std::invalid_argument("multihead_attention: mask size mismatch");
  const int hd = w / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  TensorT<S> out = TensorT<S>::zeros(q.shape());
  const S* qv = q.value().data();
  const S* kv = k.value().data();
  const S* vv = v.value().data();
  S* ov = out.value().data();
  // probabilities retained for the backward pass
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n_heads) * n * n, S(0));
  std::vector<double> srow(static_cast<std::size_t>(n));
  for (int h = 0; h < n_heads; ++h) {
    const int hoff = h * hd;
    for (int i = 0; i < n; ++i) {
      const S* qrow = qv + static_cast<std::size_t>(i) * w + hoff;
      double m = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        if (!mask[static_cast<std::size_t>(i) * n + j]) continue;
        const S* krow = kv + static_cast<std::size_t>(j) * w + hoff;
        double dot = 0.0;
        for (int d = 0; d < hd; ++d) dot += static_cast<double>(qrow[d]) * static_cast<double>(krow[d]);
        srow[static_cast<std::size_t>(j)] = dot * scale;
        m = std::max(m, srow[static_cast<std::size_t>(j)]);
      }
      if (m == -std::numeric_limits<double>::infinity()) continue;  // no visible keys
      double denom = 0.0;
      for (int j = 0; j < n; ++j) {
        if (!mask[static_cast<std::size_t>(i) * n + j]) continue;
        denom += std::exp(srow[static_cast<std::size_t>(j)] - m);
      }
      S* prow = probs->data() + (static_cast<std::size_t>(h) * n + i) * n;
      S* orow = ov + static_cast<std::size_t>(i) * w + hoff;
      for (int j = 0; j < n; ++j) {
        if (!mask[static_cast<std::size_t>(i) * n + j]) continue;
        const S p = static_cast<S>(std::exp(srow[static_cast<std::size_t>(j)] - m) / denom);
        prow[j] = p;
        const S* vrow = vv + static_cast<std::size_t>(j) * w + hoff;
        for (int d = 0; d < hd; ++d) orow[d] += p * vrow[d];
      }
    }
  }
  if (TapeT<S>::active() && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    out.set_requires_grad(true);
    auto qs = q.storage(), ks = k.storage(), vs = v.storage(), os = out.storage();
    TapeT<S>::active()->record(out, [qs, ks, vs, os, probs, mask, n, w, n_heads, hd, scale]() {
      const S* go = os->grad.data();
      std::vector<double> dp(static_cast<std::size_t>(n));
      for (int h = 0; h < n_heads; ++h) {
        const int hoff = h * hd;
        for (int i = 0; i < n; ++i) {
          const S* prow = probs->data() + (static_cast<std::size_t>(h) * n + i) * n;
          const S* grow = go + static_cast<std::size_t>(i) * w + hoff;
          double sum_pdp = 0.0;
          for (int j = 0; j < n; ++j) {
            if (!mask[static_cast<std::size_t>(i) * n + j]) continue;
            const S* vrow = vs->value.data() + static_cast<std::size_t>(j) * w + hoff;
            double d = 0.0;
            for (int t = 0; t < hd; ++t) d += static_cast<double>(grow[t]) * static_cast<double>(vrow[t]);
            dp[static_cast<std::size_t>(j)] = d;
            sum_pdp += static_cast<double>(prow[j]) * d;
            if (vs->requires_grad) {
              S* gv = vs->grad.data() + static_cast<std::size_t>(j) * w + hoff;
              for (int t = 0; t < hd; ++t) gv[t] += prow[j] * grow[t];
            }
          }
          if (!qs->requires_grad && !ks->requires_grad) continue;
          const S* qrow = qs->value.data() + static_cast<std::size_t>(i) * w + hoff;
          S* gq = qs->requires_grad ? qs->grad.data() + static_cast<std::size_t>(i) * w + hoff : nullptr;
          for (int j = 0; j < n; ++j) {
            if (!mask[static_cast<std::size_t>(i) * n + j]) continue;
            const double ds = static_cast<double>(prow[j]) * (dp[static_cast<std::size_t>(j)] - sum_pdp) * scale;
            const S* krow = ks->value.data() + static_cast<std::size_t>(j) * w + hoff;
            if (gq)
              for (int t = 0; t < hd; ++t) gq[t] += static_cast<S>(ds * static_cast<double>(krow[t]));
            if (ks->requires_grad) {
              S* gk = ks->grad.data() + static_cast<std::size_t>(j) * w + hoff;
              for (int t = 0; t < hd; ++t) gk[t] += static_cast<S>(ds * static_cast<double>(qrow[t]));
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace modalfuse
