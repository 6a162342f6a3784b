// clora-bench: synthetic data, pretraining, few-shot fine-tuning, ablation and reporting.

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "clora/bench/dataset.hpp"
#include "clora/bench/pipeline.hpp"
#include "clora/bench/report.hpp"
#include "clora/checkpoint.hpp"

namespace {

using namespace clora;
using namespace clora::bench;

constexpr int exit_ok = 0;
constexpr int exit_usage = 1;
constexpr int exit_runtime = 2;

/// Thrown for bad command-line input detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string ckpt;
  std::string input;
  std::string json_out;
  std::string summary;
  std::string method = "lora";
  std::size_t shots = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> groups;
  std::vector<std::size_t> ranks;
  std::vector<std::string> spans;
  std::vector<std::string> encoders;
  std::size_t workers = 0;
  std::size_t iterations = 0;
  std::size_t epochs = 0;
  std::int64_t seed = -1;
  bool timing = false;
};

BenchConfig resolve_config(const Options& o) {
  BenchConfig c = o.config.empty() ? BenchConfig{} : load_bench_config(o.config);
  if (o.seed >= 0) {
    c.seed = static_cast<std::uint64_t>(o.seed);
    c.dataset.seed = c.seed;
  }
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (o.shots) c.shots = o.shots;
  if (o.iterations) c.train.iterations_override = o.iterations;
  if (o.epochs) c.pretrain.epochs = o.epochs;
  if (o.workers) c.workers = o.workers;
  if (o.timing) c.report_seconds = true;
  return c;
}

std::vector<PlacementConfig> grid_cells(const Options& o, const BenchConfig& c) {
  const bool custom = !o.groups.empty() || !o.ranks.empty() || !o.spans.empty() || !o.encoders.empty();
  if (!custom && c.use_default_grid) return default_ablation_cells(c.lora);
  AblationGridSpec g = c.grid;
  if (!o.groups.empty()) g.groups = o.groups;
  if (!o.ranks.empty()) g.ranks = o.ranks;
  if (!o.spans.empty()) g.spans = o.spans;
  if (!o.encoders.empty()) g.encoders = o.encoders;
  return g.cells(c.lora);
}

int cmd_gen(const Options& o) {
  const BenchConfig c = resolve_config(o);
  const SyntheticDataset ds = generate_synthetic(c.dataset);
  write_dataset(ds, o.out);
  std::cout << "wrote " << ds.size() << " images, " << ds.class_names.size() << " classes to " << o.out << '\n';
  return exit_ok;
}

int cmd_pretrain(const Options& o) {
  const BenchConfig c = resolve_config(o);
  const SyntheticDataset ds = read_dataset(o.data);
  TrainingHistory log;
  auto model = pretrain_model(ds, c, &log);
  save_checkpoint(model, o.out);
  write_text_file(fs::path(o.out) / "pretrain_log.csv", history_csv(log));
  std::cout << "pretrained " << log.iterations() << " steps, final loss " << log.steps.back().loss << ", tau "
            << model.tau() << "; checkpoint in " << o.out << '\n';
  return exit_ok;
}

void emit(const std::string& csv, const std::string& out) {
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text_file(out, csv);
    std::cout << "wrote " << out << '\n';
  }
}

int cmd_zeroshot(const Options& o) {
  const BenchConfig c = resolve_config(o);
  const SyntheticDataset ds = read_dataset(o.data);
  auto model = load_checkpoint<float>(o.ckpt);
  emit(run_csv({run_zero_shot(model, ds, c.seed)}), o.out);
  return exit_ok;
}

int cmd_finetune(const Options& o) {
  const auto& methods = finetune_methods();
  if (std::find(methods.begin(), methods.end(), o.method) == methods.end()) {
    throw UsageError("unknown method '" + o.method + "' (expected lora, soft-prompt, adapter or bias-only)");
  }
  const BenchConfig c = resolve_config(o);
  check_shots(c.shots);
  const SyntheticDataset ds = read_dataset(o.data);
  const auto model = load_checkpoint<float>(o.ckpt);
  FinetuneArtifacts art;
  if (!o.out.empty()) art.dir = o.out;
  const auto rows = run_finetune(model, ds, o.method, c.shots, c, art);
  emit(run_csv(rows), o.out.empty() ? "" : (fs::path(o.out) / "runs.csv").string());
  return exit_ok;
}

int cmd_ablate(const Options& o) {
  const BenchConfig c = resolve_config(o);
  const auto cells = grid_cells(o, c);
  const SyntheticDataset ds = read_dataset(o.data);
  const auto model = load_checkpoint<float>(o.ckpt);
  const auto rows = run_ablation(model, ds, cells, c);
  for (const auto& r : rows) {
    if (!r.error.empty()) std::cerr << "cell " << r.run.config << " seed " << *r.run.seed << ": " << r.error << '\n';
  }
  emit(ablation_csv(rows), o.out);
  if (!o.summary.empty()) emit(ablation_csv(ablation_means(rows)), o.summary);
  return exit_ok;
}

int cmd_report(const Options& o) {
  const auto rows = parse_run_csv(read_text_file(o.input));
  const SummaryTable t = summarize(rows);
  std::cout << render_text(t);
  if (!o.json_out.empty()) write_text_file(o.json_out, to_json(t).dump(2) + '\n');
  return exit_ok;
}

int cmd_print_config(const Options& o) {
  std::cout << to_json(resolve_config(o)).dump(2) << '\n';
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot low-rank adaptation of a dual encoder: data, training, ablation, reports"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON configuration (missing keys keep defaults)")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "Master seed (overrides the config)");
  };

  auto* gen = app.add_subcommand("gen", "Generate the synthetic dataset");
  add_config(gen);
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Contrastive pretraining; writes a model checkpoint");
  add_config(pre);
  pre->add_option("--data", o.data, "Dataset directory")->required();
  pre->add_option("--out", o.out, "Checkpoint directory")->required();
  pre->add_option("--epochs", o.epochs, "Override pretraining epochs");

  auto* zs = app.add_subcommand("zeroshot", "Zero-shot accuracy on the task split");
  add_config(zs);
  zs->add_option("--ckpt", o.ckpt, "Model checkpoint")->required();
  zs->add_option("--data", o.data, "Dataset directory")->required();
  zs->add_option("--shots", o.shots, "Accepted and ignored");
  zs->add_option("--out", o.out, "CSV path (stdout when omitted)");

  auto* ft = app.add_subcommand("finetune", "Few-shot fine-tuning over seeds");
  add_config(ft);
  ft->add_option("--ckpt", o.ckpt, "Model checkpoint")->required();
  ft->add_option("--data", o.data, "Dataset directory")->required();
  ft->add_option("--method", o.method, "lora, soft-prompt, adapter or bias-only");
  ft->add_option("--shots", o.shots, "Shots per class (1, 2, 4, 8 or 16)");
  ft->add_option("--seeds", o.seeds, "Seeds (default 0 1 2)")->delimiter(',');
  ft->add_option("--iterations", o.iterations, "Fixed iteration count instead of 500 x shots");
  ft->add_option("--out", o.out, "Output directory (runs.csv, histories, checkpoints)");
  ft->add_flag("--timing", o.timing, "Report wall-clock seconds instead of 0");

  auto* ab = app.add_subcommand("ablate", "LoRA placement/rank grid");
  add_config(ab);
  ab->add_option("--ckpt", o.ckpt, "Model checkpoint")->required();
  ab->add_option("--data", o.data, "Dataset directory")->required();
  ab->add_option("--groups", o.groups, "Matrix groups, e.g. q,qkv")->delimiter(',');
  ab->add_option("--ranks", o.ranks, "Ranks, e.g. 1,2,4")->delimiter(',');
  ab->add_option("--spans", o.spans, "Layer spans: bottom, up, all")->delimiter(',');
  ab->add_option("--encoders", o.encoders, "Encoder sets: vision, text, both")->delimiter(',');
  ab->add_option("--shots", o.shots, "Shots per class (default 4)");
  ab->add_option("--seeds", o.seeds, "Seeds (default 0 1 2)")->delimiter(',');
  ab->add_option("--workers", o.workers, "Concurrent jobs");
  ab->add_option("--iterations", o.iterations, "Fixed iteration count instead of 500 x shots");
  ab->add_option("--out", o.out, "CSV path (stdout when omitted)");
  ab->add_option("--summary", o.summary, "Also write per-cell means to this CSV");
  ab->add_flag("--timing", o.timing, "Report wall-clock seconds instead of 0");

  auto* rep = app.add_subcommand("report", "Method x shots summary of a run CSV");
  rep->add_option("--in", o.input, "Run or ablation CSV")->required()->check(CLI::ExistingFile);
  rep->add_option("--json", o.json_out, "Write the summary as JSON");

  auto* pc = app.add_subcommand("print-config", "Print the effective configuration as JSON");
  add_config(pc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_usage;
  }

  try {
    if (*gen) return cmd_gen(o);
    if (*pre) return cmd_pretrain(o);
    if (*zs) return cmd_zeroshot(o);
    if (*ft) return cmd_finetune(o);
    if (*ab) return cmd_ablate(o);
    if (*rep) return cmd_report(o);
    if (*pc) return cmd_print_config(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return exit_usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_runtime;
  }
  return exit_usage;
}
