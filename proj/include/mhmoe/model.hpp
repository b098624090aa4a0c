// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mhmoe/budget.hpp"
#include "mhmoe/graph.hpp"
#include "mhmoe/layers.hpp"
#include "mhmoe/model_config.hpp"
#include "mhmoe/parameters.hpp"
#include "mhmoe/random.hpp"
#include "mhmoe/telemetry.hpp"

namespace mhmoe {

struct LayerNormParams {
  Tensor gamma, beta;

  static LayerNormParams make(std::size_t d) {
    return {Tensor::filled({d}, 1.0).clone(true), Tensor::zeros({d}, true)};
  }
  Tensor operator()(Graph& g, const Tensor& x) const { return g.layer_norm(x, gamma, beta); }
};

struct SelfAttention {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // weights [d x d] as (out, in)
  std::size_t heads = 1;

  static SelfAttention make(std::size_t d, std::size_t heads, Rng& rng) {
    SelfAttention a;
    a.heads = heads;
    for (Tensor* w : {&a.wq, &a.wk, &a.wv, &a.wo}) {
      *w = Tensor::zeros({d, d}, true);
      xavier_uniform(*w, rng);
    }
    for (Tensor* b : {&a.bq, &a.bk, &a.bv, &a.bo}) *b = Tensor::zeros({d}, true);
    return a;
  }

  Tensor operator()(Graph& g, const Tensor& x) const {
    Tensor q = g.linear(x, wq, bq);
    Tensor k = g.linear(x, wk, bk);
    Tensor v = g.linear(x, wv, bv);
    return g.linear(g.causal_attention(q, k, v, heads), wo, bo);
  }
};

using FeedForward = std::variant<ExpertFFN, SMoELayer, MHMoELayer>;

struct Block {
  LayerNormParams ln1;
  SelfAttention attn;
  LayerNormParams ln2;
  FeedForward ffn;
};

struct LMOutput {
  Tensor logits;                       // [l x vocab]
  std::vector<Tensor> balance_losses;  // one per MoE layer
  std::vector<double> balance_soft;    // soft-mode value per MoE layer
  std::vector<AssignmentLog> logs;     // one per MoE layer
};

// Pre-norm causal decoder: x += Attn(LN(x)); x += FFN-or-MoE(LN(x)).
class Model {
 public:
  explicit Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const std::size_t d = config_.d;
    token_embedding_ = Tensor::zeros({config_.vocab_size, d}, true);
    fill_normal(token_embedding_, rng, 0.02);
    position_embedding_ = Tensor::zeros({config_.context, d}, true);
    fill_normal(position_embedding_, rng, 0.02);
    const double beta = effective_beta(config_);
    const MoEOptions moe{config_.k, config_.counting, config_.capacity_factor};
    for (std::size_t b = 0; b < config_.n_blocks; ++b) {
      Block blk{LayerNormParams::make(d), SelfAttention::make(d, config_.n_attn_heads, rng), LayerNormParams::make(d),
                ExpertFFN{}};
      if (!config_.is_moe_block(b)) {
        blk.ffn = ExpertFFN::make(d, 4 * d, rng);
      } else if (config_.variant == Variant::smoe) {
        blk.ffn = SMoELayer(d, config_.num_experts, moe, config_.router, rng);
      } else {
        blk.ffn = MHMoELayer(d, config_.num_experts, config_.heads, beta, moe, config_.router, rng);
      }
      blocks_.push_back(std::move(blk));
    }
    final_norm_ = LayerNormParams::make(d);
    output_ = Tensor::zeros({config_.vocab_size, d}, true);
    fill_normal(output_, rng, 0.02);
    output_bias_ = Tensor::zeros({config_.vocab_size}, true);
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  ParameterList parameters() const {
    ParameterList out;
    out.push_back({"embed.tokens", token_embedding_});
    out.push_back({"embed.positions", position_embedding_});
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& blk = blocks_[b];
      const std::string p = "blocks." + std::to_string(b);
      out.push_back({p + ".ln1.gamma", blk.ln1.gamma});
      out.push_back({p + ".ln1.beta", blk.ln1.beta});
      const auto& a = blk.attn;
      out.push_back({p + ".attn.wq", a.wq});
      out.push_back({p + ".attn.bq", a.bq});
      out.push_back({p + ".attn.wk", a.wk});
      out.push_back({p + ".attn.bk", a.bk});
      out.push_back({p + ".attn.wv", a.wv});
      out.push_back({p + ".attn.bv", a.bv});
      out.push_back({p + ".attn.wo", a.wo});
      out.push_back({p + ".attn.bo", a.bo});
      out.push_back({p + ".ln2.gamma", blk.ln2.gamma});
      out.push_back({p + ".ln2.beta", blk.ln2.beta});
      if (const auto* ffn = std::get_if<ExpertFFN>(&blk.ffn)) {
        ffn->collect(p + ".ffn", out);
      } else if (const auto* s = std::get_if<SMoELayer>(&blk.ffn)) {
        s->collect(p + ".moe", out);
      } else {
        std::get<MHMoELayer>(blk.ffn).collect(p + ".moe", out);
      }
    }
    out.push_back({"final_norm.gamma", final_norm_.gamma});
    out.push_back({"final_norm.beta", final_norm_.beta});
    out.push_back({"head.weight", output_});
    out.push_back({"head.bias", output_bias_});
    return out;
  }

  std::size_t parameter_count() const { return count_parameters(layout_of(parameters())); }

  // Keeps learnable router temperatures within their lower bound.
  void clamp_router_temperatures() {
    for (auto& blk : blocks_) {
      if (auto* s = std::get_if<SMoELayer>(&blk.ffn)) s->router.clamp_temperature();
      if (auto* m = std::get_if<MHMoELayer>(&blk.ffn)) m->router.clamp_temperature();
    }
  }

  LMOutput forward(Graph& g, std::span<const int> tokens) const {
    const std::size_t l = tokens.size();
    if (l == 0) throw DataError("forward: empty token sequence");
    if (l > config_.context) {
      throw DataError("forward: sequence length " + std::to_string(l) + " exceeds context " +
                      std::to_string(config_.context));
    }
    std::vector<std::size_t> ids(l), positions(l);
    for (std::size_t i = 0; i < l; ++i) {
      if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config_.vocab_size) {
        throw DataError("forward: token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                        " outside vocabulary of " + std::to_string(config_.vocab_size));
      }
      ids[i] = static_cast<std::size_t>(tokens[i]);
      positions[i] = i;
    }

    LMOutput out;
    Tensor x = g.add(g.gather_rows(token_embedding_, ids), g.gather_rows(position_embedding_, positions));
    std::size_t moe_index = 0;
    for (const auto& blk : blocks_) {
      x = g.add(x, blk.attn(g, blk.ln1(g, x)));
      Tensor h = blk.ln2(g, x);
      if (const auto* ffn = std::get_if<ExpertFFN>(&blk.ffn)) {
        x = g.add(x, expert_ffn_forward(g, *ffn, h));
        continue;
      }
      MoEOutput m = std::holds_alternative<SMoELayer>(blk.ffn)
                        ? std::get<SMoELayer>(blk.ffn).forward(g, h, {}, moe_index)
                        : std::get<MHMoELayer>(blk.ffn).forward(g, h, {}, moe_index);
      ++moe_index;
      x = g.add(x, m.y);
      out.balance_losses.push_back(m.balance_loss);
      out.balance_soft.push_back(m.balance_soft);
      out.logs.push_back(std::move(m.log));
    }
    out.logits = g.linear(final_norm_(g, x), output_, output_bias_);
    return out;
  }

 private:
  ModelConfig config_;
  Tensor token_embedding_, position_embedding_;
  std::vector<Block> blocks_;
  LayerNormParams final_norm_;
  Tensor output_, output_bias_;
};

inline Model build_model(const ModelConfig& config) { return Model(config); }

// Names and shapes build_model would allocate, without allocating them.
inline ParameterLayout model_layout(const ModelConfig& c) {
  c.validate();
  ParameterLayout out;
  const std::size_t d = c.d;
  out.push_back({"embed.tokens", {c.vocab_size, d}});
  out.push_back({"embed.positions", {c.context, d}});
  auto expert = [&](const std::string& p, std::size_t in, std::size_t inner) {
    out.push_back({p + ".w1", {in, inner}});
    out.push_back({p + ".b1", {inner}});
    out.push_back({p + ".w2", {inner, in}});
    out.push_back({p + ".b2", {in}});
  };
  auto router = [&](const std::string& p, std::size_t in, std::size_t r) {
    if (c.router.mode == RouterMode::direct) {
      out.push_back({p + ".embeddings", {c.num_experts, in}});
    } else {
      out.push_back({p + ".embeddings", {c.num_experts, r}});
      out.push_back({p + ".reduction", {in, r}});
      out.push_back({p + ".temperature", {1}});
    }
  };
  const double beta = effective_beta(c);
  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    out.push_back({p + ".ln1.gamma", {d}});
    out.push_back({p + ".ln1.beta", {d}});
    for (const char* n : {"q", "k", "v", "o"}) {
      out.push_back({p + ".attn.w" + n, {d, d}});
      out.push_back({p + ".attn.b" + n, {d}});
    }
    out.push_back({p + ".ln2.gamma", {d}});
    out.push_back({p + ".ln2.beta", {d}});
    if (!c.is_moe_block(b)) {
      expert(p + ".ffn", d, 4 * d);
    } else if (c.variant == Variant::smoe) {
      router(p + ".moe.router", d, c.router.reduced_dim);
      for (std::size_t e = 0; e < c.num_experts; ++e) expert(p + ".moe.experts." + std::to_string(e), d, 4 * d);
    } else {
      out.push_back({p + ".moe.w_head", {d, d}});
      out.push_back({p + ".moe.b_head", {d}});
      out.push_back({p + ".moe.w_merge", {d, d}});
      out.push_back({p + ".moe.b_merge", {d}});
      router(p + ".moe.router", d / c.heads, std::max<std::size_t>(1, c.router.reduced_dim / c.heads));
      const std::size_t inner = inner_dim_for(beta, d);
      for (std::size_t e = 0; e < c.num_experts; ++e) {
        expert(p + ".moe.experts." + std::to_string(e), d / c.heads, inner);
      }
    }
  }
  out.push_back({"final_norm.gamma", {d}});
  out.push_back({"final_norm.beta", {d}});
  out.push_back({"head.weight", {c.vocab_size, d}});
  out.push_back({"head.bias", {c.vocab_size}});
  return out;
}

inline DiscrepancyReport verify_against_model(const Model& model) {
  return verify_against_layout(layout_of(model.parameters()), model.config());
}

struct LossTerms {
  Tensor total;
  double task = 0.0;
  double balance = 0.0;  // mean over MoE layers, before alpha
};

// task cross-entropy + alpha * mean(balance losses)
inline LossTerms loss_total(Graph& g, const Tensor& logits, std::span<const int> targets,
                            std::span<const Tensor> balance_losses, double alpha) {
  LossTerms t;
  Tensor task = g.cross_entropy(logits, targets);
  t.task = task.item();
  if (balance_losses.empty()) {
    t.total = task;
    return t;
  }
  Tensor sum = balance_losses[0];
  for (std::size_t i = 1; i < balance_losses.size(); ++i) sum = g.add(sum, balance_losses[i]);
  Tensor mean = g.scale(sum, 1.0 / static_cast<double>(balance_losses.size()));
  t.balance = mean.item();
  t.total = alpha == 0.0 ? task : g.add(task, g.scale(mean, alpha));
  return t;
}

// Non-overlapping windows over a token stream: window w predicts tokens
// [w*ctx + 1, (w+1)*ctx] from the preceding ones, so every token after the
// first is predicted exactly once. max_predictions = 0 means no cap.
struct Window {
  std::size_t begin = 0;
  std::size_t length = 0;  // input length; targets are the next `length` tokens
};

inline std::vector<Window> eval_windows(std::size_t n_tokens, std::size_t context, std::size_t max_predictions = 0) {
  std::vector<Window> out;
  std::size_t predicted = 0;
  for (std::size_t begin = 0; begin + 1 < n_tokens; begin += context) {
    std::size_t len = std::min(context, n_tokens - 1 - begin);
    if (max_predictions && predicted + len > max_predictions) len = max_predictions - predicted;
    if (len == 0) break;
    out.push_back({begin, len});
    predicted += len;
  }
  return out;
}

struct EvalResult {
  double mean_loss = 0.0;
  double perplexity = 0.0;
  std::size_t predictions = 0;
  double balance_soft = 0.0;  // mean over windows and layers
  ActivationCounts counts;
  std::vector<AssignmentLog> last_logs;
};

// Evaluation pass without gradient tracking; on_logs sees the routing logs of
// every window.
template <typename OnLogs>
EvalResult evaluate(const Model& model, std::span<const int> tokens, std::size_t max_predictions, OnLogs&& on_logs) {
  if (tokens.size() < 2) throw DataError("perplexity: corpus needs at least 2 tokens");
  EvalResult r;
  double weighted = 0.0;
  double soft_sum = 0.0;
  std::size_t soft_n = 0;
  for (const auto& w : eval_windows(tokens.size(), model.config().context, max_predictions)) {
    Graph g(/*grad_enabled=*/false);
    auto out = model.forward(g, tokens.subspan(w.begin, w.length));
    auto loss = g.cross_entropy(out.logits, tokens.subspan(w.begin + 1, w.length));
    weighted += loss.item() * static_cast<double>(w.length);
    r.predictions += w.length;
    for (double s : out.balance_soft) {
      soft_sum += s;
      ++soft_n;
    }
    for (const auto& log : out.logs) r.counts.add(log);
    on_logs(out.logs);
    r.last_logs = std::move(out.logs);
  }
  r.mean_loss = weighted / static_cast<double>(r.predictions);
  r.perplexity = std::exp(r.mean_loss);
  r.balance_soft = soft_n ? soft_sum / static_cast<double>(soft_n) : 0.0;
  return r;
}

inline EvalResult evaluate(const Model& model, std::span<const int> tokens, std::size_t max_predictions = 0) {
  return evaluate(model, tokens, max_predictions, [](const std::vector<AssignmentLog>&) {});
}

inline double perplexity(const Model& model, std::span<const int> tokens) { return evaluate(model, tokens).perplexity; }

}  // namespace mhmoe
