// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "mhmoe/tensor.hpp"

namespace mhmoe {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

// Name and shape of a parameter without its storage.
struct ParameterShape {
  std::string name;
  Shape shape;
};

using ParameterLayout = std::vector<ParameterShape>;

inline ParameterLayout layout_of(const ParameterList& params) {
  ParameterLayout out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.tensor.shape()});
  return out;
}

inline std::size_t count_parameters(const ParameterLayout& layout) {
  std::size_t n = 0;
  for (const auto& p : layout) n += numel(p.shape);
  return n;
}

}  // namespace mhmoe
