// Command-line front end: train one run, verify the proposition suite, or
// sweep the paired forgetting benchmark. Record streams are deterministic
// given the config, so repeated runs produce byte-identical files.
#include <CLI11.hpp>

#include "procl/harness.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace {

namespace fs = std::filesystem;
using procl::harness::ExperimentConfig;

std::ofstream open_record_file(const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  const fs::path path = dir / name;
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw procl::ConfigError("cannot open output file " + path.string());
  }
  return out;
}

int run_train(const std::string& config_path, std::uint64_t seed, bool seed_set,
              const std::string& out_dir, bool out_set) {
  ExperimentConfig cfg = procl::harness::parse_config(config_path);
  if (seed_set) {
    cfg.train.seed = seed;
  }
  if (out_set) {
    cfg.output = out_dir;
  }
  const auto result = procl::harness::run_experiment(cfg);
  const std::string name =
      "train_" + cfg.method + "_seed" + std::to_string(cfg.train.seed) + ".jsonl";
  auto out = open_record_file(cfg.output, name);
  procl::harness::write_run_records(result, cfg, out);
  std::cout << "method=" << cfg.method << " seed=" << cfg.train.seed
            << " average_accuracy=" << result.average_acc
            << " forgetting=" << result.forgetting << "\n"
            << "records: " << (fs::path(cfg.output) / name).string() << "\n";
  return 0;
}

int run_verify(std::uint64_t seed, const std::string& out_dir) {
  auto out = open_record_file(out_dir, "theory_records.jsonl");
  const auto outcome = procl::harness::verify_theory(seed, &out);
  std::cout << "decomposition_residual_max=" << outcome.max_decomposition_residual << "\n"
            << "interference_slack_min=" << outcome.min_slack << "\n"
            << "beta_range=[" << outcome.beta_min << ", " << outcome.beta_max << "]\n"
            << "disjoint_routing_j_max=" << outcome.max_disjoint_j << "\n"
            << "single_head_equality_gap=" << outcome.max_equality_gap << "\n"
            << "deterministic_decay_err=" << outcome.max_det_decay_err << "\n"
            << "fixed_point_residual=" << outcome.fixed_point_residual << "\n"
            << "stochastic_rate=" << outcome.stochastic_rate
            << " target=" << outcome.stochastic_target
            << " fit_points=" << outcome.stochastic_fit_points << "\n"
            << "violations=" << outcome.violations << "\n";
  return outcome.violations == 0 ? 0 : 1;
}

int run_bench(const std::string& config_path, int seeds, const std::string& out_dir,
              bool out_set) {
  ExperimentConfig cfg = procl::harness::parse_config(config_path);
  if (out_set) {
    cfg.output = out_dir;
  }
  const auto summary = procl::harness::bench_forgetting(cfg, seeds);
  auto summary_out = open_record_file(cfg.output, "bench_summary.jsonl");
  auto table_out = open_record_file(cfg.output, "bench_accuracy.csv");
  procl::harness::write_bench_records(summary, cfg, summary_out, table_out);
  std::cout << "seeds=" << seeds << "\n"
            << "median_average_accuracy: procl=" << summary.median_aa_procl
            << " seq_lora=" << summary.median_aa_seq_lora << "\n"
            << "median_forgetting: procl=" << summary.median_forgetting_procl
            << " seq_lora=" << summary.median_forgetting_seq_lora << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"program-memory adapter experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  int seeds = 10;

  auto* train = app.add_subcommand("train", "train one run and write its record stream");
  train->add_option("--config", config_path, "config file")->required();
  auto* train_seed = train->add_option("--seed", seed, "override [train] seed");
  auto* train_out = train->add_option("--out", out_dir, "override output directory");

  auto* verify = app.add_subcommand("verify-theory", "run the proposition checks");
  verify->add_option("--seed", seed, "base seed for the generated instances");
  verify->add_option("--out", out_dir, "output directory")->default_val("runs");

  auto* bench = app.add_subcommand("bench-forgetting", "paired multi-seed benchmark");
  bench->add_option("--config", config_path, "config file")->required();
  bench->add_option("--seeds", seeds, "number of paired seeds")->check(CLI::PositiveNumber);
  auto* bench_out = bench->add_option("--out", out_dir, "override output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return run_train(config_path, seed, train_seed->count() > 0, out_dir,
                       train_out->count() > 0);
    }
    if (verify->parsed()) {
      return run_verify(seed, out_dir);
    }
    return run_bench(config_path, seeds, out_dir, bench_out->count() > 0);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
