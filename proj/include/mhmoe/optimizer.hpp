// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mhmoe/graph.hpp"
#include "mhmoe/model.hpp"

namespace mhmoe {

// Linear warmup to max_lr, then linear decay to zero at total_steps.
struct LrSchedule {
  double max_lr = 3e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 3000;

  double at(std::size_t step) const {
    if (step < warmup_steps) return max_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps || step >= total_steps) return 0.0;
    return max_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double clip_norm = 1.0;
};

// Adam with bias correction. Moment buffers are laid out parallel to
// Model::parameters().
class Adam {
 public:
  Adam() = default;
  Adam(const ParameterList& params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::size_t step() const { return step_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_step(std::size_t s) { step_ = s; }

  void update(ParameterList& params, double lr) {
    if (params.size() != m_.size()) throw ContractError("Adam: parameter list changed shape");
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& t = params[i].tensor;
      if (m_[i].size() != t.size()) throw ContractError("Adam: moment shape mismatch for " + params[i].name);
      if (!t.has_grad()) continue;
      auto g = t.grad();
      auto w = t.values();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

struct StepMetrics {
  double task_loss = 0.0;
  double balance_loss = 0.0;  // mean over MoE layers, configured counting mode
  double balance_soft = 0.0;
  double total_loss = 0.0;
  double grad_norm = 0.0;     // before clipping
  double lr = 0.0;
};

// One optimiser step over a batch of sequences. Each sequence holds l + 1
// tokens (inputs and shifted targets). Every sequence is its own graph; its
// loss is scaled by 1/batch and gradients accumulate in sequence order.
inline StepMetrics train_step(Model& model, std::span<const std::vector<int>> batch, Adam& opt,
                              const LrSchedule& schedule) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  auto params = model.parameters();
  for (auto& p : params) p.tensor.zero_grad();

  StepMetrics m;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const double alpha = model.config().alpha;
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw DataError("train_step: sequence needs at least 2 tokens");
    std::span<const int> s(seq);
    Graph g;
    auto out = model.forward(g, s.first(s.size() - 1));
    auto terms = loss_total(g, out.logits, s.subspan(1), out.balance_losses, alpha);
    m.task_loss += terms.task * inv_b;
    m.balance_loss += terms.balance * inv_b;
    if (!out.balance_soft.empty()) {
      double soft = 0.0;
      for (double v : out.balance_soft) soft += v;
      m.balance_soft += soft / static_cast<double>(out.balance_soft.size()) * inv_b;
    }
    m.total_loss += terms.total.item() * inv_b;
    g.backward(g.scale(terms.total, inv_b));
  }

  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double v : p.tensor.grad()) sq += v * v;
  }
  m.grad_norm = std::sqrt(sq);
  if (!std::isfinite(m.total_loss) || !std::isfinite(m.grad_norm)) {
    std::string culprit = "none";
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      bool bad = false;
      for (double v : p.tensor.grad()) bad = bad || !std::isfinite(v);
      if (bad) {
        culprit = p.name;
        break;
      }
    }
    throw NumericError("non-finite loss (" + std::to_string(m.total_loss) +
                       "); first non-finite parameter gradient: " + culprit);
  }
  const double clip = opt.config().clip_norm;
  if (clip > 0.0 && m.grad_norm > clip) {
    const double s = clip / m.grad_norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (auto& v : p.tensor.grad()) v *= s;
    }
  }
  m.lr = schedule.at(opt.step());
  opt.update(params, m.lr);
  model.clamp_router_temperatures();
  return m;
}

}  // namespace mhmoe
