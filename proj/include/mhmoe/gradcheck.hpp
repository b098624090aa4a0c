// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "mhmoe/graph.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

// A scalar-valued function of one tensor, built on the supplied graph.
using TensorFunction = std::function<Tensor(Graph&, const Tensor&)>;

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double gradcheck(const TensorFunction& f, const Tensor& x, double epsilon = 1e-5) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw ContractError("gradcheck: epsilon must lie in (0, 1e-2]");

  Tensor probe = x.clone(/*requires_grad=*/true);
  std::vector<double> analytic;
  {
    Graph g;
    Tensor y = f(g, probe);
    if (y.size() != 1) throw ContractError("gradcheck: function must return a scalar");
    require_finite(y.values(), "gradcheck");
    g.backward(y);
    analytic.assign(probe.size(), 0.0);
    if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());
  }

  auto eval = [&](const Tensor& at) {
    Graph g(/*grad_enabled=*/false);
    Tensor y = f(g, at);
    require_finite(y.values(), "gradcheck");
    return y.item();
  };

  double worst = 0.0;
  Tensor shifted = x.clone();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = shifted[i];
    shifted[i] = orig + epsilon;
    const double up = eval(shifted);
    shifted[i] = orig - epsilon;
    const double down = eval(shifted);
    shifted[i] = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

// Same check against a tensor the loss closure reads directly (typically a
// layer parameter). The tensor is perturbed in place and restored. Gradients
// the closure accumulates into other tensors are left for the caller to clear.
inline double gradcheck_in_place(const std::function<Tensor(Graph&)>& loss, Tensor& param,
                                 double epsilon = 1e-5) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw ContractError("gradcheck: epsilon must lie in (0, 1e-2]");
  const bool had = param.requires_grad();
  param.set_requires_grad(true);
  param.clear_grad();
  std::vector<double> analytic(param.size(), 0.0);
  {
    Graph g;
    Tensor y = loss(g);
    require_finite(y.values(), "gradcheck");
    g.backward(y);
    if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());
  }
  param.clear_grad();
  param.set_requires_grad(had);

  auto eval = [&] {
    Graph g(/*grad_enabled=*/false);
    Tensor y = loss(g);
    require_finite(y.values(), "gradcheck");
    return y.item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double orig = param[i];
    param[i] = orig + epsilon;
    const double up = eval();
    param[i] = orig - epsilon;
    const double down = eval();
    param[i] = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace mhmoe
