// normlab: command-line front end for the normalization lab.
//
// Exit codes: 0 success, 1 finished with a divergence flag, 2 usage or
// config/checkpoint error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "normlab/diagnostics.hpp"
#include "normlab/io.hpp"
#include "normlab/trainer.hpp"

namespace {

using nlohmann::json;
using namespace normlab;

constexpr int kExitOk = 0;
constexpr int kExitDiverged = 1;
constexpr int kExitUsage = 2;
constexpr const char* kOutputEnv = "NORMLAB_OUTPUT_DIR";

std::string output_dir(const std::string& configured) {
  const char* env = std::getenv(kOutputEnv);
  return env != nullptr && *env != '\0' ? std::string(env) : configured;
}

std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

/// Adds or replaces one run entry in <dir>/manifest.json.
void record_manifest(const std::string& dir, const std::string& run, const RunConfig& cfg,
                     json extra, const std::vector<std::string>& outputs) {
  const std::string path = join(dir, "manifest.json");
  json manifest = json::object();
  if (std::filesystem::exists(path)) {
    try {
      manifest = json::parse(read_file(path));
    } catch (const json::exception&) {
      manifest = json::object();
    }
  }
  if (!manifest.is_object()) manifest = json::object();
  manifest["code_version"] = NORMLAB_VERSION;
  manifest["config_version"] = kConfigVersion;
  extra["config_hash"] = config_hash(cfg);
  extra["seeds"] = {{"params", cfg.params_seed}, {"data", cfg.data_seed}};
  extra["outputs"] = outputs;
  extra["config"] = to_json(cfg);
  manifest["runs"][run] = std::move(extra);
  write_file_atomic(path, pretty(manifest));
}

struct SeedOverrides {
  std::optional<std::uint64_t> params;
  std::optional<std::uint64_t> data;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--params-seed", params, "Override seeds.params");
    cmd->add_option("--data-seed", data, "Override seeds.data");
  }
  void apply(RunConfig& cfg) const {
    if (params) cfg.params_seed = *params;
    if (data) cfg.data_seed = *data;
  }
};

RunConfig load_config(const std::string& path, const SeedOverrides& seeds) {
  RunConfig cfg = load_run_config(path);
  seeds.apply(cfg);
  cfg.resolve();
  cfg.validate();
  return cfg;
}

Batch probe_batch(const RunConfig& cfg) {
  return sample_batch(cfg.task, 1, cfg.train.batch_size_tokens);
}

int cmd_coeffs(int enc, int dec) {
  if (enc < 1 || dec < 1) throw ConfigError("--enc and --dec must be positive");
  const DeepNormCoeffs k = deepnorm_coeffs(enc, dec);
  std::printf("alpha_enc %.6f\nbeta_enc %.6f\nalpha_dec %.6f\nbeta_dec %.6f\nL %d\n",
              k.alpha_encoder, k.beta_encoder, k.alpha_decoder, k.beta_decoder, 2 * enc + 3 * dec);
  return kExitOk;
}

int cmd_probe(const std::string& config_path, const SeedOverrides& seeds,
              const std::string& strategy, const std::vector<std::int64_t>& steps) {
  RunConfig cfg = load_run_config(config_path);
  seeds.apply(cfg);
  if (!strategy.empty()) cfg.model.strategy.kind = parse_norm_kind(strategy);
  cfg.resolve();
  cfg.validate();
  std::vector<std::int64_t> ts = steps.empty() ? std::vector<std::int64_t>{cfg.probe_step} : steps;
  for (auto t : ts) {
    if (t < 0) throw ConfigError("--step must be nonnegative");
  }

  Model model(cfg.model);
  const Batch batch = probe_batch(cfg);
  std::vector<json> lines;
  bool diverged = false;
  for (auto t : ts) {
    ProbeReport r = grad_probe(model, batch, t, cfg.train.label_smoothing);
    diverged = diverged || r.diverged;
    lines.push_back(to_json(r));
  }

  const std::string dir = output_dir(cfg.output_dir);
  const std::string name = "probe-" + std::string(to_string(cfg.model.strategy.kind)) + ".jsonl";
  write_file_atomic(join(dir, name), to_jsonl(lines));
  record_manifest(dir, "probe-" + std::string(to_string(cfg.model.strategy.kind)), cfg,
                  {{"command", "probe"}, {"steps", ts}}, {name});
  std::printf("wrote %s (%zu steps)%s\n", join(dir, name).c_str(), ts.size(),
              diverged ? " diverged" : "");
  return diverged ? kExitDiverged : kExitOk;
}

int cmd_train(const std::string& config_path, const SeedOverrides& seeds) {
  const RunConfig cfg = load_config(config_path, seeds);
  TrainResult r = train(cfg.model, cfg.train, cfg.task);

  std::vector<json> lines;
  lines.reserve(r.records.size());
  for (const auto& rec : r.records) lines.push_back(to_json(rec));
  const std::string checksum = parameter_checksum(r.model);
  const json summary = {{"steps", r.steps},
                        {"diverged", r.diverged},
                        {"initial_loss", r.initial_loss},
                        {"final_loss", r.final_loss},
                        {"parameter_checksum", checksum}};

  const std::string dir = output_dir(cfg.output_dir);
  write_file_atomic(join(dir, "train.jsonl"), to_jsonl(lines));
  save_checkpoint(join(dir, "model.ckpt"), r.model, cfg, r.steps);
  write_file_atomic(join(dir, "summary.json"), pretty(summary));
  record_manifest(dir, "train", cfg, {{"command", "train"}},
                  {"train.jsonl", "model.ckpt", "summary.json"});
  std::printf("steps %lld final_loss %.6g diverged %s checksum %s\n",
              static_cast<long long>(r.steps), r.final_loss, r.diverged ? "true" : "false",
              checksum.c_str());
  return r.diverged ? kExitDiverged : kExitOk;
}

std::string cell_file(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cell-%03zu.jsonl", index);
  return std::string("cells/") + buf;
}

int cmd_sweep(const std::string& config_path, const SeedOverrides& seeds,
              std::optional<std::size_t> workers) {
  const RunConfig cfg = load_config(config_path, seeds);
  const std::size_t n_workers = workers.value_or(cfg.workers);
  if (n_workers < 1) throw ConfigError("--workers must be at least 1");
  auto rows = sweep(cfg.grid, cfg.model, cfg.train, cfg.task, n_workers);

  const std::string dir = output_dir(cfg.output_dir);
  std::vector<std::string> outputs{"sweep.csv"};
  bool any_diverged = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<json> lines;
    for (const auto& rec : rows[i].records) lines.push_back(to_json(rec));
    outputs.push_back(cell_file(i));
    write_file_atomic(join(dir, outputs.back()), to_jsonl(lines));
    any_diverged = any_diverged || rows[i].diverged;
  }
  const std::string csv = sweep_csv(rows);
  write_file_atomic(join(dir, "sweep.csv"), csv);
  record_manifest(dir, "sweep", cfg, {{"command", "sweep"}, {"cells", rows.size()}}, outputs);
  std::cout << csv;
  return any_diverged ? kExitDiverged : kExitOk;
}

int cmd_analyze(const std::string& checkpoint_path, std::optional<std::uint64_t> data_seed) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  RunConfig cfg = ck.config;
  if (data_seed) {
    cfg.data_seed = *data_seed;
    cfg.resolve();
  }
  const AnalysisReport report = analyze(ck.model, probe_batch(cfg), ck.step);

  const std::string dir = output_dir(cfg.output_dir);
  write_file_atomic(join(dir, "analysis.json"), pretty(to_json(report)));
  record_manifest(dir, "analyze", cfg,
                  {{"command", "analyze"}, {"checkpoint_step", ck.step}}, {"analysis.json"});
  std::printf("wrote %s\n", join(dir, "analysis.json").c_str());
  return kExitOk;
}

int cmd_oracle(const std::string& config_path, const SeedOverrides& seeds,
               const std::string& strategy, std::int64_t step) {
  RunConfig cfg = load_run_config(config_path);
  seeds.apply(cfg);
  if (!strategy.empty()) cfg.model.strategy.kind = parse_norm_kind(strategy);
  cfg.resolve();
  cfg.validate();
  if (step < 0) throw ConfigError("--step must be nonnegative");
  Model model(cfg.model);
  const ChainOracleReport r =
      jacobian_chain_oracle(model, probe_batch(cfg), step, cfg.train.label_smoothing);
  std::printf("strategy %s step %lld sublayers %zu max_relative_error %.3e max_factored_error %.3e\n",
              std::string(to_string(cfg.model.strategy.kind)).c_str(), static_cast<long long>(step),
              r.relative_errors.size(), r.max_relative_error, r.max_factored_error);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"normlab: Post-LN, Pre-LN, DeepNorm and BranchNorm on a small autodiff core"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(NORMLAB_VERSION));

  int enc = 0, dec = 0;
  auto* coeffs = app.add_subcommand("coeffs", "Print the DeepNorm alpha/beta table");
  coeffs->add_option("--enc", enc, "Encoder layers N")->required();
  coeffs->add_option("--dec", dec, "Decoder layers M")->required();

  std::string config_path, strategy;
  std::vector<std::int64_t> steps;
  SeedOverrides seeds;
  auto* probe = app.add_subcommand("probe", "Per-sublayer gradient norms at fixed training steps");
  probe->add_option("config", config_path, "Run config JSON")->required();
  probe->add_option("--strategy", strategy, "postln, preln, deepnorm or branchnorm");
  probe->add_option("--step", steps, "BranchNorm step t (repeatable)");
  seeds.add_to(probe);

  auto* train_cmd = app.add_subcommand("train", "Train on the synthetic task");
  train_cmd->add_option("config", config_path, "Run config JSON")->required();
  seeds.add_to(train_cmd);

  std::optional<std::size_t> workers;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run the configured grid and write sweep.csv");
  sweep_cmd->add_option("config", config_path, "Run config JSON")->required();
  sweep_cmd->add_option("--workers", workers, "Parallel cells (overrides sweep.workers)");
  seeds.add_to(sweep_cmd);

  std::string checkpoint_path;
  std::optional<std::uint64_t> analyze_seed;
  auto* analyze_cmd = app.add_subcommand("analyze", "Representation similarity and ReLU sparsity");
  analyze_cmd->add_option("checkpoint", checkpoint_path, "Checkpoint written by train")->required();
  analyze_cmd->add_option("--data-seed", analyze_seed, "Data seed for the analysis batch");

  std::int64_t oracle_step = 0;
  auto* oracle = app.add_subcommand("oracle", "Compare the Jacobian chain against autodiff");
  oracle->add_option("config", config_path, "Run config JSON (small model)")->required();
  oracle->add_option("--strategy", strategy, "postln, preln, deepnorm or branchnorm");
  oracle->add_option("--step", oracle_step, "BranchNorm step t");
  seeds.add_to(oracle);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*coeffs) return cmd_coeffs(enc, dec);
    if (*probe) return cmd_probe(config_path, seeds, strategy, steps);
    if (*train_cmd) return cmd_train(config_path, seeds);
    if (*sweep_cmd) return cmd_sweep(config_path, seeds, workers);
    if (*analyze_cmd) return cmd_analyze(checkpoint_path, analyze_seed);
    if (*oracle) return cmd_oracle(config_path, seeds, strategy, oracle_step);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return kExitUsage;
}
