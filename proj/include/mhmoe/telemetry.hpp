// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mhmoe/tensor.hpp"

namespace mhmoe {

// Routing events of one MoE layer for one forward pass. Each event is one
// routed (sub-)token: the token it came from, its head (always 0 for SMoE),
// and the k experts it selected.
struct AssignmentLog {
  std::size_t layer = 0;
  std::size_t num_experts = 0;
  std::size_t k = 0;
  std::size_t heads = 1;
  bool has_heads = false;  // true for MH-MoE logs
  std::size_t tokens = 0;  // routed tokens (padding excluded)
  std::vector<std::uint32_t> token;
  std::vector<std::uint32_t> head;
  std::vector<std::uint32_t> experts;  // events() * k

  std::size_t events() const { return token.size(); }

  void add_event(std::size_t tok, std::size_t hd, std::span<const std::size_t> selected) {
    token.push_back(static_cast<std::uint32_t>(tok));
    head.push_back(static_cast<std::uint32_t>(hd));
    for (auto e : selected) experts.push_back(static_cast<std::uint32_t>(e));
  }
};

enum class RatioNormalization {
  per_routing_event,  // count / (tokens * heads): rows sum to k
  per_token,          // count / tokens: rows sum to k * heads
};

inline const char* to_string(RatioNormalization n) {
  return n == RatioNormalization::per_token ? "per_token" : "per_routing_event";
}

// Mergeable per-layer selection counts; accumulating logs in any order gives
// the same totals.
class ActivationCounts {
 public:
  void add(const AssignmentLog& log) {
    if (log.num_experts == 0 || log.k == 0) throw ContractError("activation counts: log without experts");
    auto& c = layers_[log.layer];
    if (c.counts.empty()) {
      c.counts.assign(log.num_experts, 0);
      c.k = log.k;
      c.heads = log.heads;
    } else if (c.counts.size() != log.num_experts || c.k != log.k || c.heads != log.heads) {
      throw ContractError("activation counts: inconsistent logs for layer " + std::to_string(log.layer));
    }
    for (auto e : log.experts) {
      if (e >= log.num_experts) throw ContractError("activation counts: expert id out of range");
      ++c.counts[e];
    }
    c.events += log.events();
    c.tokens += log.tokens;
  }

  void merge(const ActivationCounts& other) {
    for (const auto& [layer, oc] : other.layers_) {
      auto& c = layers_[layer];
      if (c.counts.empty()) {
        c = oc;
        continue;
      }
      for (std::size_t p = 0; p < c.counts.size(); ++p) c.counts[p] += oc.counts[p];
      c.events += oc.events;
      c.tokens += oc.tokens;
    }
  }

  bool empty() const { return layers_.empty(); }

  struct Layer {
    std::vector<std::uint64_t> counts;
    std::uint64_t events = 0;
    std::uint64_t tokens = 0;
    std::size_t k = 0;
    std::size_t heads = 1;
  };
  const std::map<std::size_t, Layer>& layers() const { return layers_; }

 private:
  std::map<std::size_t, Layer> layers_;
};

// layers x N selection ratios, rows ordered by layer id.
struct ActivationMatrix {
  std::vector<std::size_t> layer_ids;
  std::size_t num_experts = 0;
  std::size_t k = 0;
  double row_total = 0.0;  // what every row sums to
  RatioNormalization normalization = RatioNormalization::per_routing_event;
  std::vector<double> ratios;  // row-major

  std::size_t layers() const { return layer_ids.size(); }
  double at(std::size_t layer_row, std::size_t expert) const { return ratios[layer_row * num_experts + expert]; }
};

inline ActivationMatrix activation_ratios(const ActivationCounts& counts,
                                          RatioNormalization norm = RatioNormalization::per_routing_event) {
  if (counts.empty()) throw ContractError("activation_ratios: empty log");
  ActivationMatrix m;
  m.normalization = norm;
  for (const auto& [layer, c] : counts.layers()) {
    if (m.num_experts == 0) {
      m.num_experts = c.counts.size();
      m.k = c.k;
    } else if (m.num_experts != c.counts.size()) {
      throw ContractError("activation_ratios: layers disagree on expert count");
    }
    const std::uint64_t denom = norm == RatioNormalization::per_token ? c.tokens : c.events;
    if (denom == 0) throw ContractError("activation_ratios: layer " + std::to_string(layer) + " has no tokens");
    m.layer_ids.push_back(layer);
    for (auto v : c.counts) m.ratios.push_back(static_cast<double>(v) / static_cast<double>(denom));
    m.row_total = static_cast<double>(c.k) * (norm == RatioNormalization::per_token ? static_cast<double>(c.heads) : 1.0);
  }
  return m;
}

inline ActivationMatrix activation_ratios(std::span<const AssignmentLog> logs,
                                          RatioNormalization norm = RatioNormalization::per_routing_event) {
  if (logs.empty()) throw ContractError("activation_ratios: empty log");
  ActivationCounts counts;
  for (const auto& log : logs) counts.add(log);
  return activation_ratios(counts, norm);
}

struct ActivationPercentage {
  double threshold = 0.0;
  std::vector<double> per_layer;  // fraction of experts above threshold
  double overall = 0.0;
};

// Default threshold: a quarter of the uniform k=1 share.
inline double default_activation_threshold(std::size_t num_experts) {
  return 1.0 / (4.0 * static_cast<double>(num_experts));
}

inline ActivationPercentage activation_percentage(const ActivationMatrix& m, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("activation_percentage: threshold must lie in (0, 1)");
  ActivationPercentage out;
  out.threshold = threshold;
  std::size_t above_total = 0;
  for (std::size_t l = 0; l < m.layers(); ++l) {
    std::size_t above = 0;
    for (std::size_t p = 0; p < m.num_experts; ++p) above += m.at(l, p) > threshold ? 1 : 0;
    above_total += above;
    out.per_layer.push_back(static_cast<double>(above) / static_cast<double>(m.num_experts));
  }
  if (m.layers() > 0) out.overall = static_cast<double>(above_total) / static_cast<double>(m.layers() * m.num_experts);
  return out;
}

// Distinct experts reached by each token's sub-tokens in one layer.
inline std::vector<std::size_t> distinct_experts_per_token(const AssignmentLog& log) {
  if (!log.has_heads) throw ContractError("assign_diversity: log carries no head information");
  std::map<std::uint32_t, std::vector<std::uint32_t>> seen;
  for (std::size_t e = 0; e < log.events(); ++e) {
    auto& s = seen[log.token[e]];
    for (std::size_t s_i = 0; s_i < log.k; ++s_i) s.push_back(log.experts[e * log.k + s_i]);
  }
  std::vector<std::size_t> out;
  out.reserve(seen.size());
  for (auto& [tok, ids] : seen) {
    std::sort(ids.begin(), ids.end());
    out.push_back(static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin()));
  }
  return out;
}

// Per-token distinct-expert count averaged over the given layers. All logs
// must describe the same forward pass (same token set).
inline std::vector<double> assign_diversity(std::span<const AssignmentLog> logs, std::size_t heads) {
  if (heads == 0) throw ContractError("assign_diversity: h must be >= 1");
  if (logs.empty()) throw ContractError("assign_diversity: empty log");
  std::vector<double> sum;
  for (const auto& log : logs) {
    if (!log.has_heads) throw ContractError("assign_diversity: log carries no head information");
    if (log.heads != heads) throw ContractError("assign_diversity: log head count differs from h");
    auto per = distinct_experts_per_token(log);
    if (sum.empty()) sum.assign(per.size(), 0.0);
    if (per.size() != sum.size()) throw ContractError("assign_diversity: logs cover different token sets");
    for (std::size_t i = 0; i < per.size(); ++i) sum[i] += static_cast<double>(per[i]);
  }
  for (auto& v : sum) v /= static_cast<double>(logs.size());
  return sum;
}

// Per-layer histogram of distinct-expert counts: row = layer, column c
// counts tokens that reached c + 1 distinct experts.
class DiversityHistogram {
 public:
  explicit DiversityHistogram(std::size_t max_value) : max_value_(max_value) {}

  void add(const AssignmentLog& log) {
    auto& row = rows_[log.layer];
    if (row.empty()) row.assign(max_value_, 0);
    for (auto v : distinct_experts_per_token(log)) {
      if (v == 0 || v > max_value_) throw ContractError("diversity histogram: value out of range");
      ++row[v - 1];
    }
  }

  std::size_t max_value() const { return max_value_; }
  const std::map<std::size_t, std::vector<std::uint64_t>>& rows() const { return rows_; }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << "layer";
    for (std::size_t v = 1; v <= max_value_; ++v) os << ',' << v;
    os << '\n';
    for (const auto& [layer, row] : rows_) {
      os << layer;
      for (auto c : row) os << ',' << c;
      os << '\n';
    }
    if (!os) throw DataError("write failed for " + path.string());
  }

 private:
  std::size_t max_value_;
  std::map<std::size_t, std::vector<std::uint64_t>> rows_;
};

inline int heatmap_pixel(double ratio, double row_total) {
  const double v = row_total > 0.0 ? std::min(ratio / row_total, 1.0) : 0.0;
  return static_cast<int>(std::lround(255.0 * std::max(v, 0.0)));
}

// Writes <stem>.csv (header "layer,0,1,...") and <stem>.pgm (ASCII P2, one
// pixel per (layer, expert), value round(255 * min(ratio / row_total, 1))).
inline void export_heatmap(const ActivationMatrix& m, const std::filesystem::path& stem) {
  auto csv_path = stem;
  csv_path += ".csv";
  auto pgm_path = stem;
  pgm_path += ".pgm";
  {
    std::ofstream os(csv_path);
    if (!os) throw DataError("cannot write " + csv_path.string());
    os << "layer";
    for (std::size_t p = 0; p < m.num_experts; ++p) os << ',' << p;
    os << '\n';
    char buf[32];
    for (std::size_t l = 0; l < m.layers(); ++l) {
      os << m.layer_ids[l];
      for (std::size_t p = 0; p < m.num_experts; ++p) {
        std::snprintf(buf, sizeof buf, "%.17g", m.at(l, p));
        os << ',' << buf;
      }
      os << '\n';
    }
    if (!os) throw DataError("write failed for " + csv_path.string());
  }
  {
    std::ofstream os(pgm_path);
    if (!os) throw DataError("cannot write " + pgm_path.string());
    os << "P2\n" << m.num_experts << ' ' << m.layers() << "\n255\n";
    for (std::size_t l = 0; l < m.layers(); ++l) {
      for (std::size_t p = 0; p < m.num_experts; ++p) {
        if (p) os << ' ';
        os << heatmap_pixel(m.at(l, p), m.row_total);
      }
      os << '\n';
    }
    if (!os) throw DataError("write failed for " + pgm_path.string());
  }
}

// Reads back the ratios written by export_heatmap's CSV.
inline ActivationMatrix read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  ActivationMatrix m;
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": missing header");
  m.num_experts = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    m.layer_ids.push_back(std::stoul(cell));
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      m.ratios.push_back(std::stod(cell));
      ++n;
    }
    if (n != m.num_experts) throw FormatError(path.string() + ": ragged row");
  }
  return m;
}

}  // namespace mhmoe
