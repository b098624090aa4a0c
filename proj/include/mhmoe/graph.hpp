// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mhmoe/kernels.hpp"
#include "mhmoe/tensor.hpp"
#include "mhmoe/vmath.hpp"

namespace mhmoe {

// Reverse-mode tape. Operations are recorded in construction order, so every
// node's inputs precede it; backward() walks the tape in exact reverse order.
//
// A node is recorded only when some input requires a gradient. A Graph built
// with grad disabled records nothing and is suitable for evaluation.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t i) const { return nodes_.at(i).op; }

  // ---- linear algebra ----------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
      throw DimensionError("matmul: inner extents differ, " + to_string(a.shape()) + " x " +
                           to_string(b.shape()));
    }
    auto out = Tensor::zeros({m, n});
    kernels::gemm_nn_acc(m, k, n, a.data(), b.data(), out.data());
    if (track({&a, &b})) {
      record("matmul", out, [a = a, b = b, out, m, k, n]() mutable {
        const double* go = out.grad().data();
        if (a.requires_grad()) kernels::gemm_nt_acc(m, n, k, go, b.data(), a.grad().data());
        if (b.requires_grad()) kernels::gemm_tn_acc(m, k, n, a.data(), go, b.grad().data());
      });
    }
    return out;
  }

  // x * w^T (+ bias). w is [out x in], as stored by a fully connected layer.
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
    require_matrix(x, "linear");
    require_matrix(w, "linear");
    const std::size_t m = x.rows(), k = x.cols(), n = w.rows();
    if (w.cols() != k) {
      throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                           to_string(w.shape()));
    }
    if (bias.defined() && bias.size() != n) {
      throw DimensionError("linear: bias " + to_string(bias.shape()) + " for " + std::to_string(n) +
                           " outputs");
    }
    auto out = Tensor::zeros({m, n});
    double* o = out.data();
    if (bias.defined()) {
      for (std::size_t i = 0; i < m; ++i) std::copy(bias.data(), bias.data() + n, o + i * n);
    }
    kernels::gemm_nt_acc(m, k, n, x.data(), w.data(), o);
    if (track({&x, &w, &bias})) {
      record("linear", out, [x = x, w = w, bias = bias, out, m, k, n]() mutable {
        const double* go = out.grad().data();
        if (x.requires_grad()) kernels::gemm_nn_acc(m, n, k, go, w.data(), x.grad().data());
        if (w.requires_grad()) kernels::gemm_tn_acc(m, n, k, go, x.data(), w.grad().data());
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
        }
      });
    }
    return out;
  }

  // ---- elementwise -------------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "add");
    auto out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    if (track({&a, &b})) {
      record("add", out, [a = a, b = b, out]() mutable {
        auto go = out.grad();
        if (a.requires_grad()) axpy(a.grad(), go, 1.0);
        if (b.requires_grad()) axpy(b.grad(), go, 1.0);
      });
    }
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "mul");
    auto out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    if (track({&a, &b})) {
      record("mul", out, [a = a, b = b, out]() mutable {
        auto go = out.grad();
        if (a.requires_grad()) {
          auto ga = a.grad();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * b[i];
        }
        if (b.requires_grad()) {
          auto gb = b.grad();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * a[i];
        }
      });
    }
    return out;
  }

  Tensor scale(const Tensor& a, double c) {
    auto out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
    if (track({&a})) {
      record("scale", out, [a = a, out, c]() mutable { axpy(a.grad(), out.grad(), c); });
    }
    return out;
  }

  // x[m x n] + b[n] broadcast over rows.
  Tensor add_bias(const Tensor& x, const Tensor& b) {
    const std::size_t m = x.rows(), n = x.cols();
    if (b.size() != n) {
      throw DimensionError("add_bias: bias " + to_string(b.shape()) + " for input " + to_string(x.shape()));
    }
    auto out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
    if (track({&x, &b})) {
      record("add_bias", out, [x = x, b = b, out, m, n]() mutable {
        auto go = out.grad();
        if (x.requires_grad()) axpy(x.grad(), go, 1.0);
        if (b.requires_grad()) {
          auto gb = b.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
        }
      });
    }
    return out;
  }

  // Exact (erf) GELU.
  Tensor gelu(const Tensor& x) {
    auto out = Tensor::zeros(x.shape());
    vmath::gelu(x.data(), out.data(), x.size());
    if (track({&x})) {
      record("gelu", out, [x = x, out]() mutable {
        std::vector<double> tmp(x.size());
        vmath::gelu_backward(x.data(), out.grad().data(), tmp.data(), tmp.size());
        axpy(x.grad(), tmp, 1.0);
      });
    }
    return out;
  }

  // x * w + b with w stored [in x out].
  Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    auto pre = affine_forward(x, w, b, "dense");
    if (track({&x, &w, &b})) {
      const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
      record("dense", pre, [x = x, w = w, b = b, pre, m, k, n]() mutable {
        affine_backward(x, w, b, pre.grad().data(), m, k, n);
      });
    }
    return pre;
  }

  // GELU(x * w + b). Only the pre-activation is kept for backward.
  Tensor dense_gelu(const Tensor& x, const Tensor& w, const Tensor& b) {
    auto pre = affine_forward(x, w, b, "dense_gelu");
    auto out = Tensor::zeros(pre.shape());
    vmath::gelu(pre.data(), out.data(), pre.size());
    if (track({&x, &w, &b})) {
      const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
      record("dense_gelu", out, [x = x, w = w, b = b, pre = std::move(pre), out, m, k, n]() mutable {
        std::vector<double> gpre(m * n);
        vmath::gelu_backward(pre.data(), out.grad().data(), gpre.data(), gpre.size());
        affine_backward(x, w, b, gpre.data(), m, k, n);
      });
    }
    return out;
  }

  // ---- row-wise ----------------------------------------------------------

  Tensor softmax_rows(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    auto out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i) {
      const double* xi = x.data() + i * n;
      double* yi = out.data() + i * n;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (std::isnan(xi[j])) throw NumericError("softmax_rows: NaN input in row " + std::to_string(i));
        mx = std::max(mx, xi[j]);
      }
      if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite input in row " + std::to_string(i));
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        yi[j] = std::exp(xi[j] - mx);
        z += yi[j];
      }
      for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
    }
    if (track({&x})) {
      record("softmax_rows", out, [x = x, out, m, n]() mutable {
        auto go = out.grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * out[i * n + j];
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += out[i * n + j] * (go[i * n + j] - dot);
        }
      });
    }
    return out;
  }

  // Each row scaled to unit L2 norm (rows with norm below eps are divided by eps).
  Tensor normalize_rows(const Tensor& x, double eps = 1e-12) {
    const std::size_t m = x.rows(), n = x.cols();
    auto out = Tensor::zeros(x.shape());
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
      norms[i] = std::max(std::sqrt(s), eps);
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] / norms[i];
    }
    if (track({&x})) {
      record("normalize_rows", out, [x = x, out, m, n, norms = std::move(norms), eps]() mutable {
        auto go = out.grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < m; ++i) {
          if (norms[i] <= eps) {
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[i * n + j] / eps;
            continue;
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * out[i * n + j];
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += (go[i * n + j] - out[i * n + j] * dot) / norms[i];
        }
      });
    }
    return out;
  }

  // x / s for a one-element tensor s.
  Tensor div_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("div_scalar: divisor shape " + to_string(s.shape()));
    const double d = s[0];
    if (d == 0.0 || !std::isfinite(d)) throw NumericError("div_scalar: divisor is zero or non-finite");
    auto out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / d;
    if (track({&x, &s})) {
      record("div_scalar", out, [x = x, s = s, out, d]() mutable {
        auto go = out.grad();
        if (x.requires_grad()) axpy(x.grad(), go, 1.0 / d);
        if (s.requires_grad()) {
          double acc = 0.0;
          for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * x[i];
          s.grad()[0] += -acc / (d * d);
        }
      });
    }
    return out;
  }

  // y[i, :] = s[i] * x[i, :], with s holding one value per row.
  Tensor scale_rows(const Tensor& x, const Tensor& s) {
    const std::size_t m = x.rows(), n = x.cols();
    if (s.size() != m) {
      throw DimensionError("scale_rows: " + to_string(s.shape()) + " scales for " + to_string(x.shape()));
    }
    auto out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = s[i] * x[i * n + j];
    if (track({&x, &s})) {
      record("scale_rows", out, [x = x, s = s, out, m, n]() mutable {
        auto go = out.grad();
        if (x.requires_grad()) {
          auto gx = x.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += s[i] * go[i * n + j];
        }
        if (s.requires_grad()) {
          auto gs = s.grad();
          for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * x[i * n + j];
            gs[i] += acc;
          }
        }
      });
    }
    return out;
  }

  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.size() != n || beta.size() != n) {
      throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(n));
    }
    auto out = Tensor::zeros(x.shape());
    std::vector<double> xhat(m * n), rstd(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double* xi = x.data() + i * n;
      double mu = 0.0;
      for (std::size_t j = 0; j < n; ++j) mu += xi[j];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
      var /= static_cast<double>(n);
      rstd[i] = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < n; ++j) {
        xhat[i * n + j] = (xi[j] - mu) * rstd[i];
        out[i * n + j] = xhat[i * n + j] * gamma[j] + beta[j];
      }
    }
    if (track({&x, &gamma, &beta})) {
      record("layer_norm", out,
             [x = x, gamma = gamma, beta = beta, out, m, n, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
               auto go = out.grad();
               if (gamma.requires_grad()) {
                 auto gg = gamma.grad();
                 for (std::size_t i = 0; i < m; ++i)
                   for (std::size_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * xhat[i * n + j];
               }
               if (beta.requires_grad()) {
                 auto gb = beta.grad();
                 for (std::size_t i = 0; i < m; ++i)
                   for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
               }
               if (x.requires_grad()) {
                 auto gx = x.grad();
                 const double inv_n = 1.0 / static_cast<double>(n);
                 for (std::size_t i = 0; i < m; ++i) {
                   double s1 = 0.0, s2 = 0.0;
                   for (std::size_t j = 0; j < n; ++j) {
                     const double dxh = go[i * n + j] * gamma[j];
                     s1 += dxh;
                     s2 += dxh * xhat[i * n + j];
                   }
                   for (std::size_t j = 0; j < n; ++j) {
                     const double dxh = go[i * n + j] * gamma[j];
                     gx[i * n + j] += rstd[i] * (dxh - s1 * inv_n - xhat[i * n + j] * s2 * inv_n);
                   }
                 }
               }
             });
    }
    return out;
  }

  // Multi-head causal scaled dot-product attention over q, k, v of shape [l x d].
  Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    require_matrix(q, "causal_attention");
    same_shape(q, k, "causal_attention");
    same_shape(q, v, "causal_attention");
    const std::size_t l = q.rows(), d = q.cols();
    if (heads == 0 || d % heads != 0) {
      throw ContractError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    using kernels::View;
    auto out = Tensor::zeros({l, d});
    // probs[h] is [l x l], zero above the diagonal.
    std::vector<double> probs(heads * l * l, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      double* ph = probs.data() + h * l * l;
      kernels::gemm(l, l, dh, View{q.data() + off, d, 1}, View{k.data() + off, 1, d}, ph, l);
      for (std::size_t i = 0; i < l; ++i) {
        double* p = ph + i * l;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] *= scl;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        for (std::size_t j = 0; j <= i; ++j) p[j] /= z;
        for (std::size_t j = i + 1; j < l; ++j) p[j] = 0.0;
      }
      kernels::gemm(l, dh, l, View{ph, l, 1}, View{v.data() + off, d, 1}, out.data() + off, d);
    }
    if (track({&q, &k, &v})) {
      record("causal_attention", out,
             [q = q, k = k, v = v, out, l, d, heads, dh, scl, probs = std::move(probs)]() mutable {
               const double* go = out.grad().data();
               std::vector<double> ds(l * l);
               for (std::size_t h = 0; h < heads; ++h) {
                 const std::size_t off = h * dh;
                 const double* ph = probs.data() + h * l * l;
                 if (v.requires_grad()) {
                   kernels::gemm(l, dh, l, View{ph, 1, l}, View{go + off, d, 1}, v.grad().data() + off, d);
                 }
                 std::fill(ds.begin(), ds.end(), 0.0);
                 kernels::gemm(l, l, dh, View{go + off, d, 1}, View{v.data() + off, 1, d}, ds.data(), l);
                 for (std::size_t i = 0; i < l; ++i) {
                   const double* p = ph + i * l;
                   double* r = ds.data() + i * l;
                   double dot = 0.0;
                   for (std::size_t j = 0; j <= i; ++j) dot += p[j] * r[j];
                   for (std::size_t j = 0; j <= i; ++j) r[j] = p[j] * (r[j] - dot) * scl;
                   for (std::size_t j = i + 1; j < l; ++j) r[j] = 0.0;
                 }
                 if (q.requires_grad()) {
                   kernels::gemm(l, dh, l, View{ds.data(), l, 1}, View{k.data() + off, d, 1}, q.grad().data() + off, d);
                 }
                 if (k.requires_grad()) {
                   kernels::gemm(l, dh, l, View{ds.data(), 1, l}, View{q.data() + off, d, 1}, k.grad().data() + off, d);
                 }
               }
             });
    }
    return out;
  }

  // ---- indexing ----------------------------------------------------------

  Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
    const std::size_t m = x.rows(), n = x.cols();
    if (index.empty()) throw ContractError("gather_rows: empty index");
    for (auto r : index) {
      if (r >= m) throw DimensionError("gather_rows: row " + std::to_string(r) + " out of " + std::to_string(m));
    }
    auto out = Tensor::zeros({index.size(), n});
    for (std::size_t i = 0; i < index.size(); ++i)
      std::copy_n(x.data() + index[i] * n, n, out.data() + i * n);
    if (track({&x})) {
      record("gather_rows", out, [x = x, out, n, idx = std::vector<std::size_t>(index.begin(), index.end())]() mutable {
        auto go = out.grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < n; ++j) gx[idx[i] * n + j] += go[i * n + j];
      });
    }
    return out;
  }

  // out[rows x n] with out[index[i]] += x[i].
  Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t rows) {
    const std::size_t n = x.cols();
    if (index.size() != x.rows()) throw DimensionError("scatter_add_rows: index length differs from row count");
    for (auto r : index) {
      if (r >= rows) throw DimensionError("scatter_add_rows: row " + std::to_string(r) + " out of " + std::to_string(rows));
    }
    auto out = Tensor::zeros({rows, n});
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) out[index[i] * n + j] += x[i * n + j];
    if (track({&x})) {
      record("scatter_add_rows", out,
             [x = x, out, n, idx = std::vector<std::size_t>(index.begin(), index.end())]() mutable {
               auto go = out.grad();
               auto gx = x.grad();
               for (std::size_t i = 0; i < idx.size(); ++i)
                 for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[idx[i] * n + j];
             });
    }
    return out;
  }

  // Column vector [index.size() x 1] of x's flat entries at index.
  Tensor take(const Tensor& x, std::span<const std::size_t> flat_index) {
    if (flat_index.empty()) throw ContractError("take: empty index");
    auto out = Tensor::zeros({flat_index.size(), 1});
    for (std::size_t i = 0; i < flat_index.size(); ++i) {
      if (flat_index[i] >= x.size()) throw DimensionError("take: index out of range");
      out[i] = x[flat_index[i]];
    }
    if (track({&x})) {
      record("take", out, [x = x, out, idx = std::vector<std::size_t>(flat_index.begin(), flat_index.end())]() mutable {
        auto go = out.grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += go[i];
      });
    }
    return out;
  }

  // ---- reductions --------------------------------------------------------

  Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto out = Tensor::scalar(s);
    if (track({&x})) {
      record("sum", out, [x = x, out]() mutable {
        const double g = out.grad()[0];
        for (auto& gx : x.grad()) gx += g;
      });
    }
    return out;
  }

  Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

  // [m x n] -> [1 x n] column means.
  Tensor column_mean(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    auto out = Tensor::zeros({1, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    if (track({&x})) {
      record("column_mean", out, [x = x, out, m, n]() mutable {
        auto go = out.grad();
        auto gx = x.grad();
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j] * inv;
      });
    }
    return out;
  }

  // Mean cross-entropy of row-wise softmax(logits) against integer targets.
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    const std::size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m) {
      throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                           std::to_string(m) + " rows");
    }
    std::vector<double> probs(m * n);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const int t = targets[i];
      if (t < 0 || static_cast<std::size_t>(t) >= n) {
        throw ContractError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(n) + ")");
      }
      const double* zi = logits.data() + i * n;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, zi[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        probs[i * n + j] = std::exp(zi[j] - mx);
        z += probs[i * n + j];
      }
      for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
      total += (std::log(z) + mx) - zi[t];
    }
    auto out = Tensor::scalar(total / static_cast<double>(m));
    if (track({&logits})) {
      record("cross_entropy", out,
             [logits = logits, out, m, n, probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end())]() mutable {
               const double g = out.grad()[0] / static_cast<double>(m);
               auto gl = logits.grad();
               for (std::size_t i = 0; i < m; ++i) {
                 for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += g * probs[i * n + j];
                 gl[i * n + static_cast<std::size_t>(tg[i])] -= g;
               }
             });
    }
    return out;
  }

  // ---- backward ----------------------------------------------------------

  // Seeds d(loss) = 1 and propagates through the tape in reverse order.
  // Leaf gradients accumulate across calls; callers zero them between steps.
  void backward(Tensor loss) {
    if (loss.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    loss.grad()[0] += 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.output.has_grad()) continue;
      node.backward();
    }
  }

 private:
  struct Node {
    std::string_view op;
    Tensor output;
    std::function<void()> backward;
  };

  bool track(std::initializer_list<const Tensor*> inputs) const {
    if (!grad_enabled_) return false;
    for (const Tensor* t : inputs) {
      if (t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::string_view op, Tensor& out, std::function<void()> fn) {
    out.set_requires_grad(true);
    nodes_.push_back(Node{op, out, std::move(fn)});
  }

  static Tensor affine_forward(const Tensor& x, const Tensor& w, const Tensor& b, const char* what) {
    require_matrix(x, what);
    require_matrix(w, what);
    const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
    if (w.rows() != k) {
      throw DimensionError(std::string(what) + ": input " + to_string(x.shape()) + " incompatible with weight " +
                           to_string(w.shape()));
    }
    if (b.size() != n) {
      throw DimensionError(std::string(what) + ": bias " + to_string(b.shape()) + " for " + std::to_string(n) +
                           " outputs");
    }
    auto out = Tensor::zeros({m, n});
    double* o = out.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(b.data(), b.data() + n, o + i * n);
    kernels::gemm_nn_acc(m, k, n, x.data(), w.data(), o);
    return out;
  }

  static void affine_backward(Tensor& x, Tensor& w, Tensor& b, const double* go, std::size_t m, std::size_t k,
                              std::size_t n) {
    if (x.requires_grad()) kernels::gemm_nt_acc(m, n, k, go, w.data(), x.grad().data());
    if (w.requires_grad()) kernels::gemm_tn_acc(m, k, n, x.data(), go, w.grad().data());
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
    }
  }

  static void same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
      throw DimensionError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " +
                           to_string(b.shape()) + " differ");
    }
  }

  static void axpy(std::span<double> y, std::span<const double> x, double a) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace mhmoe
