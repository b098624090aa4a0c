// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mhmoe/tensor.hpp"

namespace mhmoe {

// Seeded generator with distribution mappings written out explicitly, so draws
// are identical across standard library implementations (std::mt19937_64 is
// fully specified; std::*_distribution is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Box-Muller; one variate per call.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw FormatError("malformed RNG state");
  }

 private:
  std::mt19937_64 engine_;
};

inline void fill_uniform(Tensor& t, Rng& rng, double bound) {
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
}

inline void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
}

// torch.nn.init.xavier_uniform_ semantics for a [fan_out x fan_in] or
// [fan_in x fan_out] matrix (the bound is symmetric in the two fans).
inline void xavier_uniform(Tensor& t, Rng& rng, double gain = 1.0) {
  require_matrix(t, "xavier_uniform");
  const double fan_sum = static_cast<double>(t.rows() + t.cols());
  fill_uniform(t, rng, gain * std::sqrt(6.0 / fan_sum));
}

// Allocates and fills in one pass; draws match xavier_uniform on a zeros tensor.
inline Tensor xavier_uniform_matrix(std::size_t rows, std::size_t cols, Rng& rng, double gain = 1.0,
                                    bool requires_grad = true) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> v;
  v.reserve(rows * cols);
  for (std::size_t i = 0; i < rows * cols; ++i) v.push_back(rng.uniform(-bound, bound));
  return Tensor({rows, cols}, std::move(v), requires_grad);
}

}  // namespace mhmoe
