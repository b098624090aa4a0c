// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mhmoe/graph.hpp"
#include "mhmoe/random.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

enum class RouterMode { direct, reduced };

// How the per-expert load t_p in the balance loss is measured.
//   hard: fraction of top-k selections that went to expert p
//   soft: mean gate probability of expert p
enum class BalanceCounting { hard, soft };

inline constexpr double kMinTemperature = 1e-3;

struct RouterConfig {
  RouterMode mode = RouterMode::direct;
  std::size_t reduced_dim = 16;  // expert embedding width in reduced mode
  double initial_temperature = 0.3;
};

// Learnable expert embeddings producing a softmax distribution over experts.
//
// direct:  logits = x . e_p
// reduced: logits = cos(x R, e_p) / tau, tau learnable and kept >= kMinTemperature
struct Router {
  std::size_t num_experts = 0;
  std::size_t input_dim = 0;
  RouterMode mode = RouterMode::direct;
  Tensor embeddings;   // [N x embed_dim]
  Tensor reduction;    // [input_dim x r], reduced mode only
  Tensor temperature;  // [1], reduced mode only

  static Router make_direct(std::size_t num_experts, std::size_t input_dim, Rng& rng) {
    check_sizes(num_experts, input_dim);
    Router r;
    r.num_experts = num_experts;
    r.input_dim = input_dim;
    r.embeddings = Tensor::zeros({num_experts, input_dim}, true);
    xavier_uniform(r.embeddings, rng);
    return r;
  }

  static Router make_reduced(std::size_t num_experts, std::size_t input_dim, std::size_t reduced_dim, double tau0,
                             Rng& rng) {
    check_sizes(num_experts, input_dim);
    if (reduced_dim == 0) throw ContractError("router: reduced dimension must be >= 1");
    if (!(tau0 > 0.0)) throw ContractError("router: initial temperature must be positive");
    Router r;
    r.num_experts = num_experts;
    r.input_dim = input_dim;
    r.mode = RouterMode::reduced;
    r.reduction = Tensor::zeros({input_dim, reduced_dim}, true);
    xavier_uniform(r.reduction, rng);
    r.embeddings = Tensor::zeros({num_experts, reduced_dim}, true);
    xavier_uniform(r.embeddings, rng);
    r.temperature = Tensor::scalar(std::max(tau0, kMinTemperature), true);
    return r;
  }

  static Router make(const RouterConfig& cfg, std::size_t num_experts, std::size_t input_dim, Rng& rng) {
    return cfg.mode == RouterMode::direct
               ? make_direct(num_experts, input_dim, rng)
               : make_reduced(num_experts, input_dim, cfg.reduced_dim, cfg.initial_temperature, rng);
  }

  std::size_t embed_dim() const { return embeddings.cols(); }

  void clamp_temperature() {
    if (mode == RouterMode::reduced && temperature[0] < kMinTemperature) temperature[0] = kMinTemperature;
  }

 private:
  static void check_sizes(std::size_t n, std::size_t dim) {
    if (n == 0) throw ContractError("router: need at least one expert");
    if (dim == 0) throw ContractError("router: input dimension must be >= 1");
  }
};

// Gate distribution [T x N] for each row of x.
inline Tensor gate_scores(Graph& g, const Router& router, const Tensor& x) {
  require_matrix(x, "gate_scores");
  if (x.cols() != router.input_dim) {
    throw DimensionError("gate_scores: input " + to_string(x.shape()) + " but router expects width " +
                         std::to_string(router.input_dim));
  }
  if (router.mode == RouterMode::direct) return g.softmax_rows(g.linear(x, router.embeddings));
  Tensor projected = g.normalize_rows(g.matmul(x, router.reduction));
  Tensor experts = g.normalize_rows(router.embeddings);
  return g.softmax_rows(g.div_scalar(g.linear(projected, experts), router.temperature));
}

// Top-k selection per row. indices/gates are row-major [T x k], ordered by
// descending gate with ties going to the lower expert id. Gate values are the
// raw softmax entries (no renormalisation over the selected set).
struct RoutingDecision {
  std::size_t k = 0;
  std::size_t num_experts = 0;
  std::vector<std::size_t> indices;
  std::vector<double> gates;

  std::size_t rows() const { return k ? indices.size() / k : 0; }
  std::span<const std::size_t> experts(std::size_t row) const { return {indices.data() + row * k, k}; }
  std::span<const double> weights(std::size_t row) const { return {gates.data() + row * k, k}; }
};

inline RoutingDecision topk_select(const Tensor& gates, std::size_t k) {
  require_matrix(gates, "topk_select");
  const std::size_t t = gates.rows(), n = gates.cols();
  if (k < 1 || k > n) {
    throw ContractError("topk_select: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  RoutingDecision d;
  d.k = k;
  d.num_experts = n;
  d.indices.resize(t * k);
  d.gates.resize(t * k);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < t; ++i) {
    const double* row = gates.data() + i * n;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    for (std::size_t s = 0; s < k; ++s) {
      d.indices[i * k + s] = order[s];
      d.gates[i * k + s] = row[order[s]];
    }
  }
  return d;
}

struct DispatchOptions {
  // 0 disables the limit. Otherwise each expert accepts at most
  // ceil(capacity_factor * routed_rows * k / N) assignments, first come first
  // served in row order; overflow assignments contribute nothing (residual only).
  double capacity_factor = 0.0;
  // Rows whose mask entry is 0 are not routed at all. Empty means all rows.
  std::span<const std::uint8_t> row_mask = {};
};

// Which (row, slot) assignments each expert processes, and where each
// assignment landed. Expert batches are ordered by row, then slot.
struct DispatchPlan {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  struct Batch {
    std::vector<std::size_t> rows;
    std::vector<std::size_t> slots;
  };
  struct Location {
    std::size_t expert = npos;
    std::size_t position = npos;
  };

  std::size_t k = 0;
  std::vector<Batch> experts;
  std::vector<Location> inverse;  // indexed by row * k + slot
  std::size_t routed_rows = 0;
  std::size_t dropped = 0;
};

inline bool row_active(std::span<const std::uint8_t> mask, std::size_t row) { return mask.empty() || mask[row]; }

inline DispatchPlan plan_dispatch(const RoutingDecision& decision, const DispatchOptions& options = {}) {
  const std::size_t t = decision.rows(), k = decision.k, n = decision.num_experts;
  if (!options.row_mask.empty() && options.row_mask.size() != t) {
    throw DimensionError("dispatch: mask length " + std::to_string(options.row_mask.size()) + " for " +
                         std::to_string(t) + " rows");
  }
  DispatchPlan plan;
  plan.k = k;
  plan.experts.resize(n);
  plan.inverse.resize(t * k);
  for (std::size_t i = 0; i < t; ++i) plan.routed_rows += row_active(options.row_mask, i) ? 1 : 0;
  std::size_t capacity = std::numeric_limits<std::size_t>::max();
  if (options.capacity_factor > 0.0) {
    capacity = static_cast<std::size_t>(
        std::ceil(options.capacity_factor * static_cast<double>(plan.routed_rows * k) / static_cast<double>(n)));
  }
  for (std::size_t i = 0; i < t; ++i) {
    if (!row_active(options.row_mask, i)) continue;
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t e = decision.indices[i * k + s];
      auto& batch = plan.experts[e];
      if (batch.rows.size() >= capacity) {
        ++plan.dropped;
        continue;
      }
      plan.inverse[i * k + s] = {e, batch.rows.size()};
      batch.rows.push_back(i);
      batch.slots.push_back(s);
    }
  }
  return plan;
}

struct ExpertBatches {
  DispatchPlan plan;
  std::vector<Tensor> inputs;  // undefined for experts that received nothing
};

inline ExpertBatches dispatch(const Tensor& x, const RoutingDecision& decision, const DispatchOptions& options = {}) {
  require_matrix(x, "dispatch");
  if (x.rows() != decision.rows()) {
    throw DimensionError("dispatch: " + std::to_string(x.rows()) + " rows but decision covers " +
                         std::to_string(decision.rows()));
  }
  ExpertBatches out{plan_dispatch(decision, options), {}};
  Graph g(/*grad_enabled=*/false);
  for (const auto& batch : out.plan.experts) {
    out.inputs.push_back(batch.rows.empty() ? Tensor{} : g.gather_rows(x, batch.rows));
  }
  return out;
}

// o[row] = x[row] + sum over processed slots of gate * expert output.
inline Tensor combine(const Tensor& x, const RoutingDecision& decision, const DispatchPlan& plan,
                      std::span<const Tensor> expert_outputs) {
  const std::size_t t = x.rows(), c = x.cols(), k = decision.k;
  if (expert_outputs.size() != plan.experts.size()) throw DimensionError("combine: one output per expert required");
  Tensor out = x.clone();
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t s = 0; s < k; ++s) {
      const auto loc = plan.inverse[i * k + s];
      if (loc.expert == DispatchPlan::npos) continue;
      const Tensor& y = expert_outputs[loc.expert];
      if (y.rows() != plan.experts[loc.expert].rows.size() || y.cols() != c) {
        throw DimensionError("combine: expert " + std::to_string(loc.expert) + " output has shape " +
                             to_string(y.shape()));
      }
      const double gate = decision.gates[i * k + s];
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += gate * y[loc.position * c + j];
    }
  }
  return out;
}

// N * sum_p t_p * mean_row(gates[., p]) over the routed rows.
inline Tensor load_balance_loss(Graph& g, const Tensor& gates, const RoutingDecision& decision,
                                BalanceCounting counting, std::span<const std::uint8_t> row_mask = {}) {
  require_matrix(gates, "load_balance_loss");
  const std::size_t t = gates.rows(), n = gates.cols();
  if (decision.rows() != t) throw DimensionError("load_balance_loss: decision and gates disagree on row count");
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < t; ++i) {
    if (row_active(row_mask, i)) active.push_back(i);
  }
  if (active.empty()) throw ContractError("load_balance_loss: empty batch");

  Tensor routed = active.size() == t ? gates : g.gather_rows(gates, active);
  Tensor mean_gate = g.column_mean(routed);
  const double nd = static_cast<double>(n);
  if (counting == BalanceCounting::soft) return g.scale(g.sum(g.mul(mean_gate, mean_gate)), nd);

  std::vector<std::size_t> counts(n, 0);
  for (auto i : active)
    for (auto e : decision.experts(i)) ++counts[e];
  Tensor fraction = Tensor::zeros({1, n});
  const double total = static_cast<double>(active.size() * decision.k);
  for (std::size_t p = 0; p < n; ++p) fraction[p] = static_cast<double>(counts[p]) / total;
  return g.scale(g.sum(g.mul(fraction, mean_gate)), nd);
}

}  // namespace mhmoe
