// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "mhmoe/routing.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

enum class Variant { dense, smoe, mhmoe };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::dense: return "dense";
    case Variant::smoe: return "smoe";
    case Variant::mhmoe: return "mhmoe";
  }
  return "?";
}

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d = 128;
  std::size_t n_blocks = 4;
  std::size_t n_attn_heads = 4;
  std::size_t moe_every = 2;
  std::size_t num_experts = 8;
  std::size_t k = 2;
  std::size_t heads = 4;              // sub-token heads h (mhmoe only)
  std::optional<double> beta;         // empty = solve for parameter parity with SMoE
  double alpha = 1e-2;                // balance-loss coefficient
  Variant variant = Variant::mhmoe;
  RouterConfig router;
  BalanceCounting counting = BalanceCounting::hard;
  double capacity_factor = 0.0;
  std::size_t context = 128;
  std::uint64_t seed = 1;

  bool is_moe_block(std::size_t block) const {
    return variant != Variant::dense && block % moe_every == moe_every - 1;
  }

  std::size_t moe_layers() const {
    std::size_t n = 0;
    for (std::size_t b = 0; b < n_blocks; ++b) n += is_moe_block(b) ? 1 : 0;
    return n;
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (vocab_size == 0) fail("vocab_size must be >= 1");
    if (d == 0) fail("d must be >= 1");
    if (n_blocks == 0) fail("n_blocks must be >= 1");
    if (n_attn_heads == 0 || d % n_attn_heads != 0) {
      fail("d = " + std::to_string(d) + " not divisible by n_attn_heads = " + std::to_string(n_attn_heads));
    }
    if (moe_every == 0) fail("moe_every must be >= 1");
    if (context == 0) fail("context must be >= 1");
    if (alpha < 0.0) fail("alpha must be >= 0");
    if (capacity_factor < 0.0) fail("capacity_factor must be >= 0");
    if (variant == Variant::dense) return;
    if (num_experts == 0) fail("num_experts must be >= 1");
    if (k < 1 || k > num_experts) fail("k = " + std::to_string(k) + " outside [1, num_experts]");
    if (router.mode == RouterMode::reduced && router.reduced_dim == 0) fail("router_dim must be >= 1");
    if (router.mode == RouterMode::reduced && !(router.initial_temperature > 0.0)) fail("tau0 must be positive");
    if (variant == Variant::mhmoe) {
      if (heads == 0 || d % heads != 0) {
        fail("d not divisible by h (d = " + std::to_string(d) + ", h = " + std::to_string(heads) + ")");
      }
      if (beta && !(*beta > 0.0)) fail("beta must be positive");
    }
  }
};

}  // namespace mhmoe
