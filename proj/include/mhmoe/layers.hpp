// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhmoe/graph.hpp"
#include "mhmoe/parameters.hpp"
#include "mhmoe/random.hpp"
#include "mhmoe/routing.hpp"
#include "mhmoe/telemetry.hpp"

namespace mhmoe {

// Expert hidden width for a scale factor beta: round(4 * beta * d), at least 1.
inline std::size_t inner_dim_for(double beta, std::size_t d) {
  if (!(beta > 0.0)) throw ContractError("beta must be positive");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(4.0 * beta * static_cast<double>(d))));
}

// ---------------------------------------------------------------------------
// Token splitting / merging. Both are reshapes of the row-major buffer: row
// i*h + j of the split form is the j-th contiguous d/h slice of token i.
// ---------------------------------------------------------------------------

inline Tensor split_tokens(const Tensor& x, std::size_t h) {
  require_matrix(x, "split_tokens");
  const std::size_t l = x.rows(), d = x.cols();
  if (h == 0 || d % h != 0) {
    throw ContractError("split_tokens: d = " + std::to_string(d) + " not divisible by h = " + std::to_string(h));
  }
  return x.reshape({l * h, d / h});
}

inline Tensor merge_tokens(const Tensor& o, std::size_t h) {
  require_matrix(o, "merge_tokens");
  const std::size_t rows = o.rows(), w = o.cols();
  if (h == 0 || rows % h != 0) {
    throw ContractError("merge_tokens: row count " + std::to_string(rows) + " not divisible by h = " +
                        std::to_string(h));
  }
  return o.reshape({rows / h, w * h});
}

// ---------------------------------------------------------------------------
// Expert feed-forward network: GELU(x W1 + b1) W2 + b2.
// ---------------------------------------------------------------------------

struct ExpertFFN {
  Tensor w1;  // [in x inner]
  Tensor b1;  // [inner]
  Tensor w2;  // [inner x in]
  Tensor b2;  // [in]

  static ExpertFFN make(std::size_t in_dim, std::size_t inner_dim, Rng& rng) {
    ExpertFFN e;
    e.w1 = xavier_uniform_matrix(in_dim, inner_dim, rng);
    e.b1 = Tensor::zeros({inner_dim}, true);
    e.w2 = xavier_uniform_matrix(inner_dim, in_dim, rng);
    e.b2 = Tensor::zeros({in_dim}, true);
    return e;
  }

  std::size_t in_dim() const { return w1.rows(); }
  std::size_t inner_dim() const { return w1.cols(); }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".b2", b2});
  }
};

inline Tensor expert_ffn_forward(Graph& g, const ExpertFFN& e, const Tensor& x) {
  require_matrix(x, "expert_ffn_forward");
  if (x.cols() != e.in_dim()) {
    throw DimensionError("expert_ffn_forward: input " + to_string(x.shape()) + " for expert width " +
                         std::to_string(e.in_dim()));
  }
  return g.dense(g.dense_gelu(x, e.w1, e.b1), e.w2, e.b2);
}

struct MoEOptions {
  std::size_t k = 2;
  BalanceCounting counting = BalanceCounting::hard;
  double capacity_factor = 0.0;
};

struct MoEOutput {
  Tensor y;
  Tensor balance_loss;        // training objective term (configured counting mode)
  double balance_soft = 0.0;  // soft-mode value, for monitoring
  AssignmentLog log;
  std::size_t dropped = 0;    // assignments lost to the capacity limit
};

namespace detail {

struct RoutedResult {
  Tensor out;
  Tensor balance_loss;
  double balance_soft = 0.0;
  RoutingDecision decision;
  std::size_t dropped = 0;
};

// o = x + sum_{p in topk(x)} g_p(x) f_p(x) for every routed row of x.
// Gradient reaches the router through the selected gate values (and the
// balance loss); the top-k choice itself is treated as a constant.
inline RoutedResult route_through_experts(Graph& g, const Router& router, const std::vector<ExpertFFN>& experts,
                                          const MoEOptions& opt, const Tensor& x,
                                          std::span<const std::uint8_t> row_mask) {
  const std::size_t rows = x.rows(), n = experts.size();
  Tensor gates = gate_scores(g, router, x);
  RoutedResult r;
  r.decision = topk_select(gates, opt.k);
  const auto plan = plan_dispatch(r.decision, {opt.capacity_factor, row_mask});
  r.dropped = plan.dropped;

  r.out = x;
  for (std::size_t p = 0; p < n; ++p) {
    const auto& batch = plan.experts[p];
    if (batch.rows.empty()) continue;
    std::vector<std::size_t> gate_index(batch.rows.size());
    for (std::size_t i = 0; i < batch.rows.size(); ++i) gate_index[i] = batch.rows[i] * n + p;
    Tensor expert_out = expert_ffn_forward(g, experts[p], g.gather_rows(x, batch.rows));
    Tensor weighted = g.scale_rows(expert_out, g.take(gates, gate_index));
    r.out = g.add(r.out, g.scatter_add_rows(weighted, batch.rows, rows));
  }

  if (plan.routed_rows > 0) {
    r.balance_loss = load_balance_loss(g, gates, r.decision, opt.counting, row_mask);
    Graph probe(/*grad_enabled=*/false);
    r.balance_soft = load_balance_loss(probe, gates, r.decision, BalanceCounting::soft, row_mask).item();
  } else {
    r.balance_loss = Tensor::scalar(0.0);
  }
  return r;
}

inline void check_moe_args(std::size_t d, std::size_t n, const MoEOptions& opt) {
  if (d == 0) throw ContractError("MoE layer: d must be >= 1");
  if (n == 0) throw ContractError("MoE layer: need at least one expert");
  if (opt.k < 1 || opt.k > n) throw ContractError("MoE layer: k must lie in [1, N]");
}

}  // namespace detail

// Token-level sparse MoE: Y[i] = X[i] + sum_{p in topk} g_p(X[i]) f_p(X[i]).
class SMoELayer {
 public:
  SMoELayer() = default;

  SMoELayer(std::size_t d, std::size_t num_experts, const MoEOptions& options, const RouterConfig& router_cfg,
            Rng& rng)
      : options_(options) {
    detail::check_moe_args(d, num_experts, options);
    router = Router::make(router_cfg, num_experts, d, rng);
    for (std::size_t p = 0; p < num_experts; ++p) experts.push_back(ExpertFFN::make(d, 4 * d, rng));
  }

  Router router;
  std::vector<ExpertFFN> experts;

  const MoEOptions& options() const { return options_; }
  std::size_t width() const { return router.input_dim; }
  std::size_t num_experts() const { return experts.size(); }

  MoEOutput forward(Graph& g, const Tensor& x, std::span<const std::uint8_t> token_mask = {},
                    std::size_t layer_id = 0) const {
    require_matrix(x, "smoe_forward");
    if (x.cols() != width()) {
      throw DimensionError("smoe_forward: input " + to_string(x.shape()) + " for width " + std::to_string(width()));
    }
    auto r = detail::route_through_experts(g, router, experts, options_, x, token_mask);
    MoEOutput out{r.out, r.balance_loss, r.balance_soft, {}, r.dropped};
    out.log = make_log(r.decision, token_mask, layer_id);
    return out;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    collect_router(router, prefix + ".router", out);
    for (std::size_t p = 0; p < experts.size(); ++p) experts[p].collect(prefix + ".experts." + std::to_string(p), out);
  }

  static void collect_router(const Router& r, const std::string& prefix, ParameterList& out) {
    out.push_back({prefix + ".embeddings", r.embeddings});
    if (r.mode == RouterMode::reduced) {
      out.push_back({prefix + ".reduction", r.reduction});
      out.push_back({prefix + ".temperature", r.temperature});
    }
  }

 private:
  AssignmentLog make_log(const RoutingDecision& d, std::span<const std::uint8_t> mask, std::size_t layer_id) const {
    AssignmentLog log;
    log.layer = layer_id;
    log.num_experts = experts.size();
    log.k = options_.k;
    for (std::size_t i = 0; i < d.rows(); ++i) {
      if (!row_active(mask, i)) continue;
      log.add_event(i, 0, d.experts(i));
      ++log.tokens;
    }
    return log;
  }

  MoEOptions options_;
};

// Multi-head MoE:
//   X^ = X W_head^T + b_head
//   split each token into h sub-tokens of width d/h
//   o = x + sum_{p in topk} g_p(x) f_p(x) per sub-token
//   merge sub-tokens back in their original order
//   Y = X_bar W_merge^T + b_merge
class MHMoELayer {
 public:
  MHMoELayer() = default;

  MHMoELayer(std::size_t d, std::size_t num_experts, std::size_t heads, double beta, const MoEOptions& options,
             const RouterConfig& router_cfg, Rng& rng)
      : heads_(heads), options_(options) {
    detail::check_moe_args(d, num_experts, options);
    if (heads == 0 || d % heads != 0) {
      throw ContractError("MH-MoE: d = " + std::to_string(d) + " not divisible by h = " + std::to_string(heads));
    }
    const std::size_t sub = d / heads;
    // Multi-head and merge projections, initialised as torch's nn.Linear
    // followed by xavier_uniform_ (gain 1/sqrt(2) on the head projection) and
    // a zeroed merge bias.
    w_head = Tensor::zeros({d, d}, true);
    xavier_uniform(w_head, rng, 1.0 / std::sqrt(2.0));
    b_head = Tensor::zeros({d}, true);
    fill_uniform(b_head, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    w_merge = Tensor::zeros({d, d}, true);
    xavier_uniform(w_merge, rng);
    b_merge = Tensor::zeros({d}, true);

    RouterConfig sub_cfg = router_cfg;
    sub_cfg.reduced_dim = std::max<std::size_t>(1, router_cfg.reduced_dim / heads);
    router = Router::make(sub_cfg, num_experts, sub, rng);
    const std::size_t inner = inner_dim_for(beta, d);
    for (std::size_t p = 0; p < num_experts; ++p) experts.push_back(ExpertFFN::make(sub, inner, rng));
  }

  Tensor w_head, b_head, w_merge, b_merge;
  Router router;
  std::vector<ExpertFFN> experts;

  std::size_t heads() const { return heads_; }
  const MoEOptions& options() const { return options_; }
  std::size_t width() const { return w_head.rows(); }
  std::size_t num_experts() const { return experts.size(); }

  MoEOutput forward(Graph& g, const Tensor& x, std::span<const std::uint8_t> token_mask = {},
                    std::size_t layer_id = 0) const {
    require_matrix(x, "mhmoe_forward");
    const std::size_t l = x.rows(), d = width();
    if (x.cols() != d) {
      throw DimensionError("mhmoe_forward: input " + to_string(x.shape()) + " for width " + std::to_string(d));
    }
    if (!token_mask.empty() && token_mask.size() != l) throw DimensionError("mhmoe_forward: mask length differs from l");
    std::vector<std::uint8_t> sub_mask;
    if (!token_mask.empty()) {
      sub_mask.reserve(l * heads_);
      for (std::size_t i = 0; i < l; ++i) sub_mask.insert(sub_mask.end(), heads_, token_mask[i]);
    }

    Tensor projected = g.linear(x, w_head, b_head);
    Tensor sub_tokens = split_tokens(projected, heads_);
    auto r = detail::route_through_experts(g, router, experts, options_, sub_tokens, sub_mask);
    Tensor merged = merge_tokens(r.out, heads_);
    MoEOutput out{g.linear(merged, w_merge, b_merge), r.balance_loss, r.balance_soft, {}, r.dropped};

    out.log.layer = layer_id;
    out.log.num_experts = experts.size();
    out.log.k = options_.k;
    out.log.heads = heads_;
    out.log.has_heads = true;
    for (std::size_t row = 0; row < r.decision.rows(); ++row) {
      if (!row_active(sub_mask, row)) continue;
      out.log.add_event(row / heads_, row % heads_, r.decision.experts(row));
    }
    for (std::size_t i = 0; i < l; ++i) out.log.tokens += row_active(token_mask, i) ? 1 : 0;
    return out;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".w_head", w_head});
    out.push_back({prefix + ".b_head", b_head});
    out.push_back({prefix + ".w_merge", w_merge});
    out.push_back({prefix + ".b_merge", b_merge});
    SMoELayer::collect_router(router, prefix + ".router", out);
    for (std::size_t p = 0; p < experts.size(); ++p) experts[p].collect(prefix + ".experts." + std::to_string(p), out);
  }

 private:
  std::size_t heads_ = 1;
  MoEOptions options_;
};

}  // namespace mhmoe
