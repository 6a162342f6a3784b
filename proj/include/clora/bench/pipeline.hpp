#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "clora/baselines.hpp"
#include "clora/bench/dataset.hpp"
#include "clora/bench/report.hpp"
#include "clora/checkpoint.hpp"
#include "clora/errors.hpp"
#include "clora/fewshot.hpp"
#include "clora/lora.hpp"
#include "clora/model.hpp"

namespace clora::bench {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline const std::vector<std::size_t>& shot_grid() {
  static const std::vector<std::size_t> s = {1, 2, 4, 8, 16};
  return s;
}

inline const std::vector<std::string>& finetune_methods() {
  static const std::vector<std::string> m = {"lora", "soft-prompt", "adapter", "bias-only"};
  return m;
}

struct SoftPromptSettings {
  std::size_t context_len = 4;
  double lr = 2e-3;
};

struct AdapterSettings {
  std::size_t bottleneck = 8;
  double alpha = 0.2;
  double lr = 1e-3;
};

struct BiasOnlySettings {
  double lr = 1e-3;
};

/// Cross product of matrix groups x ranks x spans x encoder sets.
struct AblationGridSpec {
  std::vector<std::string> groups;
  std::vector<std::size_t> ranks;
  std::vector<std::string> spans;
  std::vector<std::string> encoders;

  std::vector<PlacementConfig> cells(const PlacementConfig& base) const {
    std::vector<PlacementConfig> out;
    for (const auto& g : groups)
      for (std::size_t r : ranks)
        for (const auto& s : spans)
          for (const auto& e : encoders) {
            PlacementConfig p = base;
            p.group = MatrixGroup::parse(g);
            p.rank = r;
            p.span = parse_layer_span(s);
            p.encoders = parse_encoder_set(e);
            out.push_back(p);
          }
    return out;
  }
};

/// Substitute for the unlisted matrix groups: singletons plus nested defaults.
inline const std::vector<std::string>& default_ablation_groups() {
  static const std::vector<std::string> g = {"q", "k", "v", "o", "qk", "qkv", "qkvo"};
  return g;
}

/// 7 groups x ranks {1,2,4,8,16} on every layer, plus the 7 groups on the
/// bottom and upper halves at rank 2: 49 cells.
inline std::vector<PlacementConfig> default_ablation_cells(const PlacementConfig& base) {
  AblationGridSpec rank_sweep{default_ablation_groups(), {1, 2, 4, 8, 16}, {"all"}, {"both"}};
  AblationGridSpec span_sweep{default_ablation_groups(), {2}, {"bottom", "up"}, {"both"}};
  auto cells = rank_sweep.cells(base);
  for (auto& c : span_sweep.cells(base)) cells.push_back(c);
  return cells;
}

/// Every key of the configuration file with its default value.
struct BenchConfig {
  std::uint64_t seed = 0;
  SyntheticSpec dataset;
  ModelConfig model;
  std::uint64_t model_seed = 7;
  PretrainConfig pretrain = [] {
    PretrainConfig p;
    p.epochs = 30;
    return p;
  }();
  TrainConfig train;  // lr 2e-4, batch 32, 500 x shots iterations
  PlacementConfig lora;
  std::size_t shots = 4;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  SoftPromptSettings soft_prompt;
  AdapterSettings adapter;
  BiasOnlySettings bias_only;
  bool use_default_grid = true;
  AblationGridSpec grid{{"qkv"}, {2}, {"all"}, {"both"}};
  std::size_t workers = 1;
  bool report_seconds = false;
};

inline json to_json(const BenchConfig& c) {
  return {
      {"seed", c.seed},
      {"dataset", to_json(c.dataset)},
      {"model", clora::to_json(c.model)},
      {"model_seed", c.model_seed},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"lr", c.pretrain.lr},
        {"weight_decay", c.pretrain.weight_decay},
        {"min_tau", c.pretrain.min_tau}}},
      {"finetune",
       {{"lr", c.train.lr},
        {"batch_size", c.train.batch_size},
        {"iterations_per_shot", c.train.iterations_per_shot},
        {"iterations_override", c.train.iterations_override},
        {"weight_decay", c.train.weight_decay},
        {"shots", c.shots},
        {"seeds", c.seeds}}},
      {"lora",
       {{"group", c.lora.group.str()},
        {"rank", c.lora.rank},
        {"span", std::string(to_string(c.lora.span))},
        {"encoders", std::string(to_string(c.lora.encoders))},
        {"scale", c.lora.scale},
        {"dropout", c.lora.dropout}}},
      {"soft_prompt", {{"context_len", c.soft_prompt.context_len}, {"lr", c.soft_prompt.lr}}},
      {"adapter", {{"bottleneck", c.adapter.bottleneck}, {"alpha", c.adapter.alpha}, {"lr", c.adapter.lr}}},
      {"bias_only", {{"lr", c.bias_only.lr}}},
      {"ablation",
       {{"use_default_grid", c.use_default_grid},
        {"groups", c.grid.groups},
        {"ranks", c.grid.ranks},
        {"spans", c.grid.spans},
        {"encoders", c.grid.encoders},
        {"workers", c.workers}}},
      {"report_seconds", c.report_seconds},
  };
}

/// Reads a (possibly partial) configuration; absent keys keep defaults and
/// unknown top-level keys are rejected.
inline BenchConfig bench_config_from_json(const json& j) {
  BenchConfig c;
  static const std::set<std::string> known = {"seed",        "dataset", "model",     "model_seed", "pretrain",
                                              "finetune",    "lora",    "soft_prompt", "adapter",  "bias_only",
                                              "ablation",    "report_seconds"};
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("unknown configuration key '" + k + "'");
  }
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("dataset")) c.dataset = synthetic_spec_from_json(j.at("dataset"));
    if (j.contains("model")) {
      json m = clora::to_json(c.model);
      m.merge_patch(j.at("model"));
      c.model = model_config_from_json(m);
    }
    c.model_seed = j.value("model_seed", c.model_seed);
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      c.pretrain.epochs = p.value("epochs", c.pretrain.epochs);
      c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
      c.pretrain.lr = p.value("lr", c.pretrain.lr);
      c.pretrain.weight_decay = p.value("weight_decay", c.pretrain.weight_decay);
      c.pretrain.min_tau = p.value("min_tau", c.pretrain.min_tau);
    }
    if (j.contains("finetune")) {
      const auto& f = j.at("finetune");
      c.train.lr = f.value("lr", c.train.lr);
      c.train.batch_size = f.value("batch_size", c.train.batch_size);
      c.train.iterations_per_shot = f.value("iterations_per_shot", c.train.iterations_per_shot);
      c.train.iterations_override = f.value("iterations_override", c.train.iterations_override);
      c.train.weight_decay = f.value("weight_decay", c.train.weight_decay);
      c.shots = f.value("shots", c.shots);
      c.seeds = f.value("seeds", c.seeds);
    }
    if (j.contains("lora")) {
      const auto& l = j.at("lora");
      if (l.contains("group")) c.lora.group = MatrixGroup::parse(l.at("group").get<std::string>());
      c.lora.rank = l.value("rank", c.lora.rank);
      if (l.contains("span")) c.lora.span = parse_layer_span(l.at("span").get<std::string>());
      if (l.contains("encoders")) c.lora.encoders = parse_encoder_set(l.at("encoders").get<std::string>());
      c.lora.scale = l.value("scale", c.lora.scale);
      c.lora.dropout = l.value("dropout", c.lora.dropout);
    }
    if (j.contains("soft_prompt")) {
      const auto& s = j.at("soft_prompt");
      c.soft_prompt.context_len = s.value("context_len", c.soft_prompt.context_len);
      c.soft_prompt.lr = s.value("lr", c.soft_prompt.lr);
    }
    if (j.contains("adapter")) {
      const auto& a = j.at("adapter");
      c.adapter.bottleneck = a.value("bottleneck", c.adapter.bottleneck);
      c.adapter.alpha = a.value("alpha", c.adapter.alpha);
      c.adapter.lr = a.value("lr", c.adapter.lr);
    }
    if (j.contains("bias_only")) c.bias_only.lr = j.at("bias_only").value("lr", c.bias_only.lr);
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      c.use_default_grid = a.value("use_default_grid", c.use_default_grid);
      c.grid.groups = a.value("groups", c.grid.groups);
      c.grid.ranks = a.value("ranks", c.grid.ranks);
      c.grid.spans = a.value("spans", c.grid.spans);
      c.grid.encoders = a.value("encoders", c.grid.encoders);
      c.workers = a.value("workers", c.workers);
    }
    c.report_seconds = j.value("report_seconds", c.report_seconds);
  } catch (const json::exception& e) {
    throw ConfigError("invalid configuration: " + std::string(e.what()));
  }
  c.model.validate();
  c.lora.validate();
  c.dataset.validate();
  return c;
}

inline BenchConfig load_bench_config(const fs::path& path) {
  const std::string text = read_text_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("configuration " + path.string() + " is not valid JSON: " + e.what());
  }
  return bench_config_from_json(j);
}

inline void check_shots(std::size_t shots) {
  const auto& g = shot_grid();
  if (std::find(g.begin(), g.end(), shots) == g.end()) {
    throw ConfigError("shots must be one of 1, 2, 4, 8, 16 (got " + std::to_string(shots) + ")");
  }
}

/// Fresh model for the dataset's vocabulary, then contrastive pretraining.
inline DualEncoderModel<float> pretrain_model(const SyntheticDataset& ds, const BenchConfig& cfg, TrainingHistory* log) {
  auto model = DualEncoderModel<float>::create(cfg.model, ds.make_vocabulary(), cfg.model_seed);
  PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed;
  const auto pairs = pretrain_pairs(ds, model.vocabulary(), cfg.model.max_text_len);
  TrainingHistory h = contrastive_pretrain(model, pairs, pc);
  if (log) *log = std::move(h);
  return model;
}

inline std::string history_csv(const TrainingHistory& h) {
  std::string out = "step,lr,loss\n";
  char buf[96];
  for (const auto& s : h.steps) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", s.step, s.lr, s.loss);
    out += buf;
  }
  return out;
}

/// Frozen model accuracy on the whole task split.
inline RunReport run_zero_shot(DualEncoderModel<float>& model, const SyntheticDataset& ds, std::uint64_t seed) {
  const ImageSet<float> pool = ds.image_set(Split::task);
  if (pool.size() == 0) throw DomainError("dataset has no task-split images");
  const Tensor<float> l = zero_shot_logits(model, pool.images, ds.class_names);
  RunReport r;
  r.method = "zero-shot";
  r.config = "prompt=a photo of a";
  r.shots = 0;
  r.seed = seed;
  r.zs_acc = r.acc = accuracy(predict(l), pool.labels);
  r.total = model.parameter_count();
  return r;
}

/// Extra outputs of a fine-tuning run.
struct FinetuneArtifacts {
  fs::path dir;  // empty: write nothing
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Dynamic and merged logits must agree before a LoRA run is reported.
inline void check_merge(AdaptedModel<float>& adapted, const FewShotTask<float>& task) {
  DualEncoderModel<float> merged = adapted.merged_copy();
  std::vector<ClassPrompt> prompts;
  for (const auto& c : task.class_names) prompts.push_back(make_prompt(merged, c));
  const std::span<const ClassPrompt> ps(prompts);
  const Tensor<float> dyn = class_logits(adapted.base(), task.query.images, ps, adapted.forward_options(false, nullptr));
  const Tensor<float> mer = class_logits(merged, task.query.images, ps);
  const double diff = max_abs_diff(dyn, mer);
  if (!(diff < 1e-5)) throw StateError("merged model disagrees with the dynamic LoRA model (max |diff| " + std::to_string(diff) + ")");
}

}  // namespace detail

/// Trains one method on one support set and evaluates it on the query set.
/// `base` is never modified.
inline RunReport run_method(const DualEncoderModel<float>& base, const SyntheticDataset& ds, const std::string& method,
                            std::size_t shots, std::uint64_t seed, const BenchConfig& cfg,
                            const PlacementConfig& placement, const FinetuneArtifacts& art = {}) {
  check_shots(shots);
  const auto t0 = std::chrono::steady_clock::now();
  const ImageSet<float> pool = ds.image_set(Split::task);
  const FewShotTask<float> task = sample_support_set(pool, ds.class_names, shots, seed);
  DualEncoderModel<float> model = base;
  model.set_adapter_attached(false);
  model.set_trainable(false);

  RunReport r;
  r.method = method;
  r.shots = shots;
  r.seed = seed;
  r.total = model.parameter_count();
  r.zs_acc = evaluate(model, task);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, hash_string(method));
  TrainingHistory hist;
  const std::string tag = "seed" + std::to_string(seed);

  if (method == "lora") {
    r.config = placement.digest();
    tc.seed = derive_seed(seed, hash_string(r.config));
    auto adapted = AdaptedModel<float>::inject(model, placement, tc.seed);
    r.trainable = adapted.trainable_count();
    hist = finetune_lora(adapted, task, tc);
    r.acc = evaluate(adapted, task);
    detail::check_merge(adapted, task);
    if (!art.dir.empty()) {
      adapted.save(art.dir / ("lora_" + tag));
      save_checkpoint(adapted.merged_copy(), art.dir / ("merged_" + tag));
    }
  } else if (method == "soft-prompt") {
    auto sp = SoftPrompt<float>::create(model, cfg.soft_prompt.context_len, tc.seed);
    r.config = "context=" + std::to_string(cfg.soft_prompt.context_len);
    r.trainable = sp.trainable_count();
    tc.lr = cfg.soft_prompt.lr;
    hist = finetune_soft_prompt(model, sp, task, tc);
    r.acc = evaluate_soft_prompt(model, sp, task);
  } else if (method == "adapter") {
    auto ad = FeatureAdapter<float>::create(cfg.model.embed_dim, cfg.adapter.bottleneck, cfg.adapter.alpha, tc.seed);
    r.config = "bottleneck=" + std::to_string(cfg.adapter.bottleneck) + ";alpha=" + format_fixed(cfg.adapter.alpha, 2);
    r.trainable = ad.trainable_count();
    tc.lr = cfg.adapter.lr;
    hist = finetune_adapter(model, ad, task, tc);
    r.acc = evaluate_adapter(model, ad, task);
  } else if (method == "bias-only") {
    r.config = "biases=attn+mlp";
    r.trainable = bias_parameter_count(model);
    tc.lr = cfg.bias_only.lr;
    hist = finetune_bias_only(model, task, tc);
    r.acc = evaluate(model, task);
  } else {
    throw ConfigError("unknown method '" + method + "' (expected lora, soft-prompt, adapter or bias-only)");
  }
  r.iters = hist.iterations();
  if (!art.dir.empty()) write_text_file(art.dir / ("history_" + method + "_" + tag + ".csv"), history_csv(hist));
  r.seconds = cfg.report_seconds ? detail::seconds_since(t0) : 0.0;
  return r;
}

/// One row per seed followed by their mean.
inline std::vector<RunReport> run_finetune(const DualEncoderModel<float>& base, const SyntheticDataset& ds,
                                           const std::string& method, std::size_t shots, const BenchConfig& cfg,
                                           const FinetuneArtifacts& art = {}) {
  std::vector<RunReport> rows;
  for (std::uint64_t s : cfg.seeds) rows.push_back(run_method(base, ds, method, shots, s, cfg, cfg.lora, art));
  if (!rows.empty()) rows.push_back(mean_row(rows));
  return rows;
}

/// Runs every (cell, seed) pair on a bounded pool of `workers` threads. Rows
/// come back ordered by cell then seed regardless of scheduling; a cell whose
/// configuration is invalid yields nan rows carrying the error message.
inline std::vector<AblationRow> run_ablation(const DualEncoderModel<float>& base, const SyntheticDataset& ds,
                                             const std::vector<PlacementConfig>& cells, const BenchConfig& cfg) {
  if (cells.empty()) throw ConfigError("ablation grid is empty");
  if (cfg.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::set<std::string> keys;
  for (const auto& c : cells) {
    if (!keys.insert(c.digest()).second) throw ConfigError("ablation grid lists cell '" + c.digest() + "' twice");
  }
  const std::size_t jobs = cells.size() * cfg.seeds.size();
  std::vector<AblationRow> rows(jobs);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t j = next++; j < jobs; j = next++) {
      const PlacementConfig& cell = cells[j / cfg.seeds.size()];
      const std::uint64_t seed = cfg.seeds[j % cfg.seeds.size()];
      AblationRow& row = rows[j];
      row.group = cell.group.str();
      row.rank = cell.rank;
      row.span = std::string(to_string(cell.span));
      row.encoders = std::string(to_string(cell.encoders));
      try {
        row.run = run_method(base, ds, "lora", cfg.shots, seed, cfg, cell);
      } catch (const Error& e) {
        row.run.method = "lora";
        row.run.config = cell.digest();
        row.run.shots = cfg.shots;
        row.run.seed = seed;
        row.run.zs_acc = row.run.acc = std::nan("");
        row.run.total = base.parameter_count();
        row.error = e.what();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(cfg.workers, jobs));
  if (n == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(work);
  }
  return rows;
}

/// Per-cell mean over seeds, ordered like the grid.
inline std::vector<AblationRow> ablation_means(const std::vector<AblationRow>& rows) {
  std::vector<AblationRow> out;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    std::vector<RunReport> group;
    while (j < rows.size() && rows[j].run.config == rows[i].run.config) group.push_back(rows[j++].run);
    AblationRow m = rows[i];
    m.run = mean_row(group);
    out.push_back(std::move(m));
    i = j;
  }
  return out;
}

}  // namespace clora::bench
