// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhmoe/budget.hpp"
#include "mhmoe/harness/checkpoint.hpp"
#include "mhmoe/harness/config.hpp"
#include "mhmoe/harness/corpus.hpp"
#include "mhmoe/model.hpp"
#include "mhmoe/optimizer.hpp"
#include "mhmoe/telemetry.hpp"

namespace mhmoe::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// Exit codes shared by the command-line front end.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitData = 4;

inline constexpr const char* kMetricsFile = "metrics.jsonl";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kFinalFile = "final.json";
inline constexpr const char* kConfigEcho = "config.txt";

inline double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
  if (!os) throw DataError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Validation summary shared by train, eval and report.
// ---------------------------------------------------------------------------

struct ValidationSummary {
  double loss = 0.0;
  double ppl = 0.0;
  std::size_t predictions = 0;
  std::optional<ActivationPercentage> activation;  // absent for dense models
};

inline ValidationSummary validate_model(const Model& model, std::span<const int> val, std::size_t max_predictions,
                                        double threshold) {
  const auto r = evaluate(model, val, max_predictions);
  ValidationSummary s{r.mean_loss, r.perplexity, r.predictions, std::nullopt};
  if (!r.counts.empty()) s.activation = activation_percentage(activation_ratios(r.counts), threshold);
  return s;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  bool resume = false;
  std::size_t stop_after = 0;  // stop (with a checkpoint) once this step completes; 0 = run to the end
  std::ostream* log = &std::cerr;
};

// Train-loss accumulator over the steps since the last metrics line. Kept in
// the checkpoint so a resumed run logs exactly what an uninterrupted one would.
struct Window {
  std::size_t steps = 0;
  double task = 0.0, balance = 0.0, soft = 0.0, grad_norm = 0.0, lr = 0.0;

  void add(const StepMetrics& m) {
    ++steps;
    task += m.task_loss;
    balance += m.balance_loss;
    soft += m.balance_soft;
    grad_norm += m.grad_norm;
    lr = m.lr;
  }
  json to_json() const {
    return {{"steps", steps}, {"task", task}, {"balance", balance}, {"soft", soft}, {"grad_norm", grad_norm}, {"lr", lr}};
  }
  static Window from_json(const json& j) {
    Window w;
    w.steps = j.at("steps").get<std::size_t>();
    w.task = j.at("task").get<double>();
    w.balance = j.at("balance").get<double>();
    w.soft = j.at("soft").get<double>();
    w.grad_norm = j.at("grad_norm").get<double>();
    w.lr = j.at("lr").get<double>();
    return w;
  }
};

inline json metrics_line(std::size_t step, const Window& w, const ValidationSummary& v, double lr_now) {
  json j;
  j["step"] = step;
  auto mean = [&](double s) { return w.steps ? json(s / static_cast<double>(w.steps)) : json(nullptr); };
  j["task_loss"] = mean(w.task);
  j["balance_loss"] = mean(w.balance);
  j["balance_soft"] = mean(w.soft);
  j["grad_norm"] = mean(w.grad_norm);
  j["lr"] = w.steps ? w.lr : lr_now;
  j["val_loss"] = v.loss;
  j["val_ppl"] = v.ppl;
  if (v.activation) {
    j["activation_pct"] = v.activation->per_layer;
    j["activation_overall"] = v.activation->overall;
    j["threshold"] = v.activation->threshold;
  } else {
    j["activation_pct"] = json::array();
    j["activation_overall"] = nullptr;
    j["threshold"] = nullptr;
  }
  return j;
}

// Keeps metrics lines up to and including `step`, dropping the rest.
inline void truncate_metrics(const fs::path& path, std::size_t step) {
  std::ifstream is(path);
  if (!is) return;
  std::string kept, line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<std::size_t>() > step) break;
    kept += line + "\n";
  }
  is.close();
  write_text(path, kept);
}

inline void append_line(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw DataError("cannot append to " + path.string());
  os << j.dump() << "\n";
}

inline constexpr const char* kCpuFile = "cpu_seconds.txt";

// Header-side state saved next to parameters and moments. CPU time lives in
// a sidecar file so checkpoints stay byte-identical across runs.
inline std::string train_state(const Rng& rng, const Window& w) {
  return json{{"rng", rng.state()}, {"window", w.to_json()}}.dump();
}

inline int cmd_train(const RunConfig& cfg, const TrainOptions& opt = {}) {
  std::ostream& log = *opt.log;
  validate(cfg);
  if (cfg.corpus.empty()) throw ConfigError("key 'corpus': no corpus configured");
  if (!fs::is_regular_file(cfg.corpus)) throw ConfigError("key 'corpus': cannot read '" + cfg.corpus + "'");
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  const fs::path metrics = out / kMetricsFile;
  const fs::path ckpt = out / kCheckpointFile;

  const auto tokens = load_corpus(cfg.corpus);
  const auto split = split_corpus(tokens, cfg.split);
  if (split.val.size() < 2) throw DataError("validation split has fewer than 2 tokens");

  std::unique_ptr<Model> model;
  Adam adam;
  Rng data_rng(cfg.model.seed ^ 0x9E3779B97F4A7C15ULL);
  Window window;
  std::size_t step = 0;
  double cpu_before = 0.0;
  const bool resumed = opt.resume && fs::exists(ckpt);

  if (resumed) {
    auto ck = load_checkpoint(ckpt);
    if (to_text(ck.config) != to_text(cfg)) {
      throw ConfigError("resume: configuration differs from the one stored in " + ckpt.string());
    }
    const auto state = json::parse(ck.rng_state);
    data_rng.restore(state.at("rng").get<std::string>());
    window = Window::from_json(state.at("window"));
    if (std::ifstream cpu_in(out / kCpuFile); cpu_in) cpu_in >> cpu_before;
    model = std::move(ck.model);
    adam = std::move(ck.optimizer);
    step = ck.step;
    truncate_metrics(metrics, step);
    log << "resumed at step " << step << "\n";
  } else {
    model = std::make_unique<Model>(cfg.model);
    adam = Adam(model->parameters());
    write_text(metrics, "");
  }
  write_text(out / kConfigEcho, to_text(cfg));

  const LrSchedule schedule{cfg.max_lr, cfg.warmup, cfg.steps};
  const double threshold = cfg.activation_threshold();
  const double cpu_start = cpu_seconds();
  auto cpu_total = [&] { return cpu_before + (cpu_seconds() - cpu_start); };
  auto checkpoint = [&] {
    save_checkpoint(ckpt, cfg, *model, adam, step, train_state(data_rng, window));
    write_text(out / kCpuFile, detail::format_double(cpu_total()) + "\n");
  };
  auto record = [&] {
    const auto v = validate_model(*model, split.val, cfg.eval_tokens, threshold);
    append_line(metrics, metrics_line(step, window, v, schedule.at(step)));
    log << "step " << step << "  val_ppl " << v.ppl;
    if (window.steps) log << "  task_loss " << window.task / static_cast<double>(window.steps);
    log << "\n";
    window = Window{};
  };

  if (!resumed) {
    record();
    checkpoint();
  }

  while (step < cfg.steps) {
    const auto batch = sample_batch(split.train, cfg.batch, cfg.model.context, data_rng);
    StepMetrics m;
    try {
      m = train_step(*model, batch, adam, schedule);
    } catch (const NumericError& e) {
      log << "error at step " << step + 1 << ": " << e.what() << "\n"
          << "last good checkpoint kept at " << ckpt.string() << "\n";
      return kExitNumeric;
    }
    ++step;
    window.add(m);
    if (step % cfg.eval_interval == 0 || step == cfg.steps) record();
    const bool periodic = cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0;
    if (periodic || step == cfg.steps || step == opt.stop_after) checkpoint();
    if (step == opt.stop_after && step < cfg.steps) {
      log << "stopped after step " << step << "\n";
      return kExitOk;
    }
  }

  // Final summary over the whole validation split.
  const auto v = validate_model(*model, split.val, 0, threshold);
  json fin;
  fin["variant"] = to_string(cfg.model.variant);
  fin["seed"] = cfg.model.seed;
  fin["steps"] = cfg.steps;
  fin["beta"] = effective_beta(cfg.model);
  fin["parameters"] = model->parameter_count();
  fin["val_loss"] = v.loss;
  fin["val_ppl"] = v.ppl;
  fin["val_predictions"] = v.predictions;
  fin["activation_overall"] = v.activation ? json(v.activation->overall) : json(nullptr);
  fin["activation_pct"] = v.activation ? json(v.activation->per_layer) : json::array();
  fin["threshold"] = threshold;
  fin["cpu_seconds"] = cpu_total();
  write_text(out / kFinalFile, fin.dump(2) + "\n");
  log << "final val_ppl " << v.ppl << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval / report
// ---------------------------------------------------------------------------

struct AnalysisOptions {
  double threshold = 0.0;  // 0 = the checkpoint's configured threshold
  bool per_token = false;
  bool val_only = false;   // evaluate only the trailing validation split of the corpus
  std::size_t max_predictions = 0;
};

struct Analysis {
  ValidationSummary summary;
  std::optional<ActivationMatrix> matrix;
  std::optional<DiversityHistogram> diversity;
  std::vector<double> mean_diversity;  // distinct experts per token, per MoE layer (mhmoe only)
  std::vector<std::string> files;
};

inline Analysis analyze(const Checkpoint& ck, std::span<const int> tokens, const AnalysisOptions& o, const fs::path& out_dir) {
  const auto& mc = ck.config.model;
  const double threshold = o.threshold > 0.0 ? o.threshold : ck.config.activation_threshold();
  std::optional<DiversityHistogram> hist;
  if (mc.variant == Variant::mhmoe) hist.emplace(std::min(mc.num_experts, mc.heads * mc.k));
  const auto r = evaluate(*ck.model, tokens, o.max_predictions, [&](const std::vector<AssignmentLog>& logs) {
    if (hist) {
      for (const auto& l : logs) hist->add(l);
    }
  });
  Analysis a;
  a.summary = {r.mean_loss, r.perplexity, r.predictions, std::nullopt};
  if (r.counts.empty()) return a;  // dense: perplexity only

  fs::create_directories(out_dir);
  const auto norm = o.per_token ? RatioNormalization::per_token : RatioNormalization::per_routing_event;
  a.matrix = activation_ratios(r.counts, norm);
  a.summary.activation = activation_percentage(a.matrix.value(), threshold);
  const auto stem = out_dir / (o.per_token ? "activation_per_token" : "activation");
  export_heatmap(*a.matrix, stem);
  a.files.push_back(stem.string() + ".csv");
  a.files.push_back(stem.string() + ".pgm");
  if (hist) {
    const auto path = out_dir / "diversity.csv";
    hist->write_csv(path);
    a.files.push_back(path.string());
    for (const auto& [layer, row] : hist->rows()) {
      double tokens_seen = 0.0, weighted = 0.0;
      for (std::size_t v = 0; v < row.size(); ++v) {
        tokens_seen += static_cast<double>(row[v]);
        weighted += static_cast<double>(row[v]) * static_cast<double>(v + 1);
      }
      a.mean_diversity.push_back(tokens_seen > 0.0 ? weighted / tokens_seen : 0.0);
    }
    a.diversity = std::move(hist);
  }
  return a;
}

inline std::vector<int> analysis_tokens(const Checkpoint& ck, const std::string& corpus, bool val_only,
                                        std::vector<int>& storage) {
  const std::string path = corpus.empty() ? ck.config.corpus : corpus;
  if (path.empty()) throw ConfigError("no corpus given and none stored in the checkpoint");
  storage = load_corpus(path);
  if (!val_only) return storage;
  const auto s = split_corpus(storage, ck.config.split);
  return {s.val.begin(), s.val.end()};
}

inline int cmd_eval(const fs::path& checkpoint, const std::string& corpus, const fs::path& out_dir,
                    const AnalysisOptions& o = {}, std::ostream& os = std::cout) {
  const auto ck = load_checkpoint(checkpoint);
  std::vector<int> storage;
  const auto tokens = analysis_tokens(ck, corpus, o.val_only, storage);
  const auto a = analyze(ck, tokens, o, out_dir);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", a.summary.ppl);
  os << "perplexity " << buf << " over " << a.summary.predictions << " predictions\n";
  for (const auto& f : a.files) os << "wrote " << f << "\n";
  return kExitOk;
}

inline int cmd_report(const fs::path& checkpoint, const std::string& corpus, const fs::path& out_dir,
                      const AnalysisOptions& o = {}, std::ostream& os = std::cout) {
  const auto ck = load_checkpoint(checkpoint);
  std::vector<int> storage;
  const auto tokens = analysis_tokens(ck, corpus, o.val_only, storage);
  const auto a = analyze(ck, tokens, o, out_dir);
  json j;
  j["variant"] = to_string(ck.config.model.variant);
  j["step"] = ck.step;
  j["perplexity"] = a.summary.ppl;
  j["predictions"] = a.summary.predictions;
  std::ostringstream text;
  text << "variant       " << to_string(ck.config.model.variant) << "\n"
       << "step          " << ck.step << "\n"
       << "perplexity    " << a.summary.ppl << "\n";
  if (a.matrix) {
    const auto& act = *a.summary.activation;
    j["normalization"] = to_string(a.matrix->normalization);
    j["threshold"] = act.threshold;
    j["activation_pct"] = act.per_layer;
    j["activation_overall"] = act.overall;
    json rows = json::array();
    for (std::size_t l = 0; l < a.matrix->layers(); ++l) {
      rows.push_back(std::vector<double>(a.matrix->ratios.begin() + static_cast<std::ptrdiff_t>(l * a.matrix->num_experts),
                                         a.matrix->ratios.begin() + static_cast<std::ptrdiff_t>((l + 1) * a.matrix->num_experts)));
    }
    j["ratios"] = rows;
    text << "normalization " << to_string(a.matrix->normalization) << "\n"
         << "threshold     " << act.threshold << "\n";
    for (std::size_t l = 0; l < act.per_layer.size(); ++l) {
      text << "layer " << a.matrix->layer_ids[l] << "       activation " << 100.0 * act.per_layer[l] << "%\n";
    }
    text << "overall       activation " << 100.0 * act.overall << "%\n";
  } else {
    text << "no MoE layers: telemetry not applicable\n";
  }
  if (!a.mean_diversity.empty()) {
    j["mean_diversity"] = a.mean_diversity;
    for (std::size_t l = 0; l < a.mean_diversity.size(); ++l) {
      text << "layer " << a.matrix->layer_ids[l] << "       mean distinct experts per token " << a.mean_diversity[l] << "\n";
    }
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "report.json", j.dump(2) + "\n");
  write_text(out_dir / "report.txt", text.str());
  os << text.str();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// budget
// ---------------------------------------------------------------------------

inline json to_json(const LayerParams& p) {
  return {{"router", p.router}, {"experts", p.experts}, {"head", p.head}, {"merge", p.merge}, {"total", p.total()}};
}

inline json to_json(const FlopReport& f) {
  return {{"l", f.l},
          {"smoe", {{"router", f.smoe_router}, {"experts", f.smoe_experts}, {"total", f.smoe_total}}},
          {"mhmoe",
           {{"head", f.mh_head},
            {"router", f.mh_router},
            {"experts", f.mh_experts},
            {"merge", f.mh_merge},
            {"parts_sum", f.mh_parts_sum},
            {"total", f.mh_total}}},
          {"delta", f.delta},
          {"epsilon", f.epsilon},
          {"warnings", f.warnings}};
}

struct Table7Row {
  std::uint64_t experts = 0;
  double published_smoe_experts = 0.0;  // millions, as printed
  double published_mhmoe_experts = 0.0;
};

// The six expert counts of the English language-modeling setting.
inline const std::vector<Table7Row>& table7_rows() {
  static const std::vector<Table7Row> rows = {
      {8, 227, 213}, {16, 454, 430}, {32, 908, 898}, {64, 1815, 1797}, {128, 3631, 3624}, {256, 7263, 7230},
  };
  return rows;
}

inline constexpr std::uint64_t kTable7Width = 768;
inline constexpr std::uint64_t kTable7Layers = 6;
inline constexpr std::uint64_t kTable7Heads = 4;

inline json table7_report() {
  json rows = json::array();
  for (const auto& r : table7_rows()) {
    const auto smoe = smoe_params(kTable7Width, r.experts).times(kTable7Layers);
    const auto overhead = 2 * kTable7Width * kTable7Width * kTable7Layers;
    const auto target = static_cast<std::uint64_t>(std::llround(r.published_mhmoe_experts * 1e6 / kTable7Layers));
    const auto fit = solve_beta(kTable7Width, r.experts, kTable7Heads, target, BetaTarget::experts_only);
    const auto parity = solve_beta(kTable7Width, r.experts, kTable7Heads, smoe_params(kTable7Width, r.experts).total());
    const auto flops = flops_per_token(kTable7Width, static_cast<double>(r.experts), kTable7Heads, parity.beta);
    rows.push_back({{"experts", r.experts},
                    {"smoe_expert_params", smoe.experts},
                    {"published_smoe_expert_params_m", r.published_smoe_experts},
                    {"relative_gap", static_cast<double>(smoe.experts) / (r.published_smoe_experts * 1e6) - 1.0},
                    {"mhmoe_head_merge_params", overhead},
                    {"published_mhmoe_expert_params_m", r.published_mhmoe_experts},
                    {"beta_fit_to_published_experts", fit.beta},
                    {"beta_parity", parity.beta},
                    {"delta_at_parity", flops.delta},
                    {"warnings", flops.warnings}});
  }
  return {{"d", kTable7Width}, {"layers", kTable7Layers}, {"h", kTable7Heads}, {"rows", rows}};
}

inline std::string table7_text(const json& t) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s %16s %10s %9s %14s %10s %10s %14s\n", "experts", "smoe_experts", "pub(M)",
                "gap", "head+merge", "beta_fit", "beta_par", "delta_par");
  os << buf;
  for (const auto& r : t.at("rows")) {
    std::snprintf(buf, sizeof buf, "%-8llu %16llu %10.0f %+8.3f%% %14llu %10.4f %10.4f %14.0f\n",
                  static_cast<unsigned long long>(r.at("experts").get<std::uint64_t>()),
                  static_cast<unsigned long long>(r.at("smoe_expert_params").get<std::uint64_t>()),
                  r.at("published_smoe_expert_params_m").get<double>(), 100.0 * r.at("relative_gap").get<double>(),
                  static_cast<unsigned long long>(r.at("mhmoe_head_merge_params").get<std::uint64_t>()),
                  r.at("beta_fit_to_published_experts").get<double>(), r.at("beta_parity").get<double>(),
                  r.at("delta_at_parity").get<double>());
    os << buf;
  }
  os << "warning: every parity beta exceeds 1, so MH-MoE costs more per token than SMoE (delta < 0)\n";
  return os.str();
}

inline json budget_json(const RunConfig& cfg) {
  const auto r = budget_report(cfg.model);
  json j;
  j["variant"] = to_string(cfg.model.variant);
  j["d"] = cfg.model.d;
  j["num_experts"] = cfg.model.num_experts;
  j["h"] = cfg.model.variant == Variant::mhmoe ? cfg.model.heads : 1;
  j["beta"] = r.beta;
  j["moe_layers"] = r.moe_layers;
  j["per_layer"] = to_json(r.per_layer);
  j["total"] = to_json(r.total);
  if (cfg.model.variant != Variant::dense) j["flops_per_token"] = to_json(r.flops);
  j["warnings"] = r.warnings;
  const Model model(cfg.model);
  const auto check = verify_against_model(model);
  json buckets = json::array();
  for (const auto& b : check.buckets) {
    buckets.push_back({{"bucket", to_string(b.bucket)},
                       {"formula", b.formula},
                       {"measured", b.measured},
                       {"in_formula_scope", b.in_formula_scope},
                       {"match", b.match()}});
  }
  j["measured"] = {{"total", check.measured_total}, {"buckets", buckets}, {"excluded", check.excluded}};
  return j;
}

inline std::string budget_text(const json& j) {
  std::ostringstream os;
  char buf[256];
  os << "variant " << j.at("variant").get<std::string>() << "  d " << j.at("d") << "  N " << j.at("num_experts")
     << "  h " << j.at("h") << "  beta " << j.at("beta").get<double>() << "  moe_layers " << j.at("moe_layers") << "\n";
  std::snprintf(buf, sizeof buf, "%-10s %14s %14s\n", "part", "per_layer", "total");
  os << buf;
  for (const char* part : {"router", "experts", "head", "merge", "total"}) {
    std::snprintf(buf, sizeof buf, "%-10s %14llu %14llu\n", part,
                  static_cast<unsigned long long>(j.at("per_layer").at(part).get<std::uint64_t>()),
                  static_cast<unsigned long long>(j.at("total").at(part).get<std::uint64_t>()));
    os << buf;
  }
  if (j.contains("flops_per_token")) {
    const auto& f = j.at("flops_per_token");
    os << "MACs per token: smoe " << f.at("smoe").at("total").get<double>() << ", mhmoe "
       << f.at("mhmoe").at("total").get<double>() << " (parts sum " << f.at("mhmoe").at("parts_sum").get<double>()
       << "), delta " << f.at("delta").get<double>() << ", epsilon " << f.at("epsilon").get<double>() << "\n";
  }
  os << "measured buckets:\n";
  for (const auto& b : j.at("measured").at("buckets")) {
    std::snprintf(buf, sizeof buf, "  %-16s formula %12llu  measured %12llu  %s\n", b.at("bucket").get<std::string>().c_str(),
                  static_cast<unsigned long long>(b.at("formula").get<std::uint64_t>()),
                  static_cast<unsigned long long>(b.at("measured").get<std::uint64_t>()),
                  b.at("in_formula_scope").get<bool>() ? (b.at("match").get<bool>() ? "match" : "MISMATCH") : "outside formulas");
    os << buf;
  }
  os << "measured total " << j.at("measured").at("total") << "\n";
  for (const auto& w : j.at("warnings")) os << "warning: " << w.get<std::string>() << "\n";
  return os.str();
}

inline int cmd_budget(const RunConfig& cfg, bool table7, const fs::path& out_dir, std::ostream& os = std::cout) {
  validate(cfg);
  fs::create_directories(out_dir);
  json j;
  std::string text;
  if (table7) {
    j = table7_report();
    text = table7_text(j);
  } else {
    j = budget_json(cfg);
    text = budget_text(j);
  }
  const std::string stem = table7 ? "budget_table7" : "budget";
  write_text(out_dir / (stem + ".json"), j.dump(2) + "\n");
  write_text(out_dir / (stem + ".txt"), text);
  os << text;
  return kExitOk;
}

}  // namespace mhmoe::harness
