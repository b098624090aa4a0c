// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mhmoe/layers.hpp"
#include "mhmoe/model_config.hpp"
#include "mhmoe/parameters.hpp"

namespace mhmoe {

// ---------------------------------------------------------------------------
// Analytic parameter counts per MoE layer (bias-free).
//   SMoE:   router d*N, experts 8 d^2 N
//   MH-MoE: head d^2, merge d^2, router (d/h) N, experts 2 (d/h) round(4 beta d) N
// ---------------------------------------------------------------------------

struct LayerParams {
  std::uint64_t router = 0;
  std::uint64_t experts = 0;
  std::uint64_t head = 0;
  std::uint64_t merge = 0;

  std::uint64_t total() const { return router + experts + head + merge; }

  LayerParams times(std::uint64_t layers) const {
    return {router * layers, experts * layers, head * layers, merge * layers};
  }
};

inline LayerParams smoe_params(std::uint64_t d, std::uint64_t n) {
  if (d == 0 || n == 0) throw ContractError("smoe_params: d and N must be >= 1");
  return {d * n, 8 * d * d * n, 0, 0};
}

inline LayerParams mhmoe_params(std::uint64_t d, std::uint64_t n, std::uint64_t h, double beta) {
  if (d == 0 || n == 0) throw ContractError("mhmoe_params: d and N must be >= 1");
  if (h == 0 || d % h != 0) {
    throw ContractError("mhmoe_params: d = " + std::to_string(d) + " not divisible by h = " + std::to_string(h));
  }
  const std::uint64_t inner = inner_dim_for(beta, d);
  return {d / h * n, 2 * (d / h) * inner * n, d * d, d * d};
}

enum class BetaTarget {
  layer_total,   // target covers head + merge + router + experts
  experts_only,  // target covers the expert networks alone
};

struct BetaSolution {
  double beta = 0.0;
  std::uint64_t inner = 0;
  std::uint64_t params = 0;  // counted under the chosen target scope
  std::uint64_t target = 0;
  std::uint64_t gap = 0;     // target - params
};

// Largest expert width whose parameter count stays within target; beta = inner / (4d).
inline BetaSolution solve_beta(std::uint64_t d, std::uint64_t n, std::uint64_t h, std::uint64_t target,
                               BetaTarget scope = BetaTarget::layer_total) {
  if (d == 0 || n == 0) throw ContractError("solve_beta: d and N must be >= 1");
  if (h == 0 || d % h != 0) {
    throw ContractError("solve_beta: d = " + std::to_string(d) + " not divisible by h = " + std::to_string(h));
  }
  const std::uint64_t fixed = scope == BetaTarget::layer_total ? 2 * d * d + d / h * n : 0;
  const std::uint64_t per_inner = 2 * (d / h) * n;
  if (target < fixed + per_inner) {
    throw ContractError("solve_beta: target " + std::to_string(target) + " infeasible; minimum achievable is " +
                        std::to_string(fixed + per_inner));
  }
  // params(inner) = fixed + per_inner * inner is strictly increasing, so the
  // largest feasible width is the floor quotient.
  BetaSolution s;
  s.inner = (target - fixed) / per_inner;
  s.beta = static_cast<double>(s.inner) / (4.0 * static_cast<double>(d));
  s.params = fixed + per_inner * s.inner;
  s.target = target;
  s.gap = target - s.params;
  return s;
}

// ---------------------------------------------------------------------------
// Multiply-accumulate counts for a sequence of length l.
// ---------------------------------------------------------------------------

struct FlopReport {
  double l = 1.0;
  double d = 0.0, n = 0.0, h = 0.0, beta = 0.0;
  // SMoE
  double smoe_router = 0.0, smoe_experts = 0.0, smoe_total = 0.0;
  // MH-MoE
  double mh_head = 0.0, mh_router = 0.0, mh_experts = 0.0, mh_merge = 0.0;
  double mh_parts_sum = 0.0;   // head + router + experts + merge
  double mh_total = 0.0;       // l d (N + 8 beta d + N/h), as published
  double delta = 0.0;          // smoe_total - mh_total
  double epsilon = 0.0;        // 8 d (1 - beta) - N/h
  std::vector<std::string> warnings;
};

inline FlopReport flops_per_token(double d, double n, double h, double beta, double l = 1.0) {
  if (!(d > 0 && n > 0 && h > 0 && beta > 0 && l > 0)) throw ContractError("flops_per_token: arguments must be positive");
  FlopReport r;
  r.l = l;
  r.d = d;
  r.n = n;
  r.h = h;
  r.beta = beta;
  r.smoe_router = l * d * n;
  r.smoe_experts = 8.0 * l * d * d;
  r.smoe_total = l * d * (n + 8.0 * d);
  r.mh_head = l * d * d;
  r.mh_router = h * l * (d / h) * n;
  r.mh_experts = 8.0 * beta * l * d * d;
  r.mh_merge = l * d * d;
  r.mh_parts_sum = r.mh_head + r.mh_router + r.mh_experts + r.mh_merge;
  r.mh_total = l * d * (n + 8.0 * beta * d + n / h);
  r.delta = r.smoe_total - r.mh_total;
  r.epsilon = 8.0 * d * (1.0 - beta) - n / h;
  if (beta > 1.0) {
    r.warnings.push_back("beta = " + std::to_string(beta) +
                         " > 1: the cost comparison presumes beta <= 1; MH-MoE is more expensive here (delta < 0)");
  }
  if (r.delta < 0.0 && beta <= 1.0) r.warnings.push_back("delta < 0: MH-MoE costs more than SMoE at this setting");
  return r;
}

// ---------------------------------------------------------------------------
// Config-level report and comparison against a constructed parameter layout.
// ---------------------------------------------------------------------------

// beta actually used by an MH-MoE config: the configured value, or the
// parameter-parity solution against the SMoE layer of the same config.
inline BetaSolution resolve_beta(const ModelConfig& c) {
  if (c.beta) {
    const auto inner = inner_dim_for(*c.beta, c.d);
    const auto p = mhmoe_params(c.d, c.num_experts, c.heads, *c.beta);
    return {*c.beta, inner, p.total(), p.total(), 0};
  }
  return solve_beta(c.d, c.num_experts, c.heads, smoe_params(c.d, c.num_experts).total());
}

inline double effective_beta(const ModelConfig& c) {
  if (c.variant != Variant::mhmoe) return 1.0;
  return resolve_beta(c).beta;
}

struct BudgetReport {
  ModelConfig config;
  std::size_t moe_layers = 0;
  double beta = 1.0;
  LayerParams per_layer;
  LayerParams total;
  FlopReport flops;
  std::vector<std::string> warnings;
};

inline BudgetReport budget_report(const ModelConfig& c) {
  c.validate();
  BudgetReport r;
  r.config = c;
  r.moe_layers = c.moe_layers();
  r.beta = effective_beta(c);
  if (c.variant == Variant::smoe) r.per_layer = smoe_params(c.d, c.num_experts);
  if (c.variant == Variant::mhmoe) r.per_layer = mhmoe_params(c.d, c.num_experts, c.heads, r.beta);
  r.total = r.per_layer.times(r.moe_layers);
  if (c.variant != Variant::dense) {
    const double h = c.variant == Variant::mhmoe ? static_cast<double>(c.heads) : 1.0;
    r.flops = flops_per_token(static_cast<double>(c.d), static_cast<double>(c.num_experts), h, r.beta);
    if (c.variant == Variant::mhmoe) r.warnings = r.flops.warnings;
  }
  return r;
}

enum class Bucket { expert, expert_bias, router, router_extra, head_merge, head_merge_bias, non_expert };

inline const char* to_string(Bucket b) {
  switch (b) {
    case Bucket::expert: return "expert";
    case Bucket::expert_bias: return "expert_bias";
    case Bucket::router: return "router";
    case Bucket::router_extra: return "router_extra";
    case Bucket::head_merge: return "head_merge";
    case Bucket::head_merge_bias: return "head_merge_bias";
    case Bucket::non_expert: return "non_expert";
  }
  return "?";
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline Bucket classify_parameter(const std::string& name) {
  const bool in_expert = name.find(".experts.") != std::string::npos;
  if (in_expert) return ends_with(name, ".w1") || ends_with(name, ".w2") ? Bucket::expert : Bucket::expert_bias;
  if (ends_with(name, ".router.embeddings")) return Bucket::router;
  if (name.find(".router.") != std::string::npos) return Bucket::router_extra;
  if (ends_with(name, ".w_head") || ends_with(name, ".w_merge")) return Bucket::head_merge;
  if (ends_with(name, ".b_head") || ends_with(name, ".b_merge")) return Bucket::head_merge_bias;
  return Bucket::non_expert;
}

struct BucketCheck {
  Bucket bucket;
  std::uint64_t formula = 0;
  std::uint64_t measured = 0;
  bool in_formula_scope = false;
  bool match() const { return !in_formula_scope || formula == measured; }
};

struct DiscrepancyReport {
  std::vector<BucketCheck> buckets;
  std::vector<std::string> excluded;  // parameters outside every formula (listed by name)
  std::uint64_t measured_total = 0;
  bool all_match() const {
    for (const auto& b : buckets) {
      if (!b.match()) return false;
    }
    return true;
  }
  const BucketCheck& at(Bucket b) const {
    for (const auto& c : buckets) {
      if (c.bucket == b) return c;
    }
    throw ContractError(std::string("no bucket ") + to_string(b));
  }
};

inline DiscrepancyReport verify_against_layout(const ParameterLayout& layout, const ModelConfig& c) {
  const auto report = budget_report(c);
  std::uint64_t measured[7] = {};
  DiscrepancyReport out;
  for (const auto& p : layout) {
    const Bucket b = classify_parameter(p.name);
    const auto n = static_cast<std::uint64_t>(numel(p.shape));
    measured[static_cast<int>(b)] += n;
    out.measured_total += n;
    if (b == Bucket::non_expert || b == Bucket::expert_bias || b == Bucket::head_merge_bias ||
        b == Bucket::router_extra) {
      out.excluded.push_back(p.name);
    }
  }
  const bool direct = c.router.mode == RouterMode::direct;
  auto add = [&](Bucket b, std::uint64_t formula, bool scope) {
    out.buckets.push_back({b, formula, measured[static_cast<int>(b)], scope});
  };
  add(Bucket::expert, report.total.experts, true);
  add(Bucket::router, report.total.router, direct);
  add(Bucket::head_merge, report.total.head + report.total.merge, true);
  add(Bucket::expert_bias, 0, false);
  add(Bucket::router_extra, 0, false);
  add(Bucket::head_merge_bias, 0, false);
  add(Bucket::non_expert, 0, false);
  return out;
}

}  // namespace mhmoe
