// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <vector>

#include "mhmoe/random.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe::harness {

// Byte-level token stream: every byte of the file is one token in [0, 255].
inline std::vector<int> load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read corpus " + path.string());
  std::vector<int> tokens;
  for (auto it = std::istreambuf_iterator<char>(is); it != std::istreambuf_iterator<char>(); ++it) {
    tokens.push_back(static_cast<unsigned char>(*it));
  }
  if (tokens.empty()) throw DataError("corpus " + path.string() + " is empty");
  return tokens;
}

struct Split {
  std::span<const int> train;
  std::span<const int> val;
};

// Contiguous split; the validation part is the trailing fraction.
inline Split split_corpus(std::span<const int> tokens, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ContractError("split_corpus: fraction must lie in (0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(tokens.size())));
  const std::size_t n_train = tokens.size() - n_val;
  return {tokens.first(n_train), tokens.subspan(n_train)};
}

// Uniformly placed windows of length + 1 tokens (inputs plus shifted targets).
inline std::vector<std::vector<int>> sample_batch(std::span<const int> train, std::size_t batch, std::size_t length,
                                                  Rng& rng) {
  if (train.size() < length + 1) {
    throw DataError("training split has " + std::to_string(train.size()) + " tokens; need at least " +
                    std::to_string(length + 1));
  }
  std::vector<std::vector<int>> out(batch);
  for (auto& seq : out) {
    const auto start = rng.below(train.size() - length);
    seq.assign(train.begin() + static_cast<std::ptrdiff_t>(start),
               train.begin() + static_cast<std::ptrdiff_t>(start + length + 1));
  }
  return out;
}

}  // namespace mhmoe::harness
