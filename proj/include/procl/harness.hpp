#pragma once

#include "procl/theory.hpp"
#include "procl/training.hpp"

#include <iosfwd>
#include <limits>
#include <string>

namespace procl::harness {

/// Desk-scale stand-in for a task stream with engineered distribution shift:
/// task t draws inputs around separation * e_t and regresses a task-specific
/// linear map plus Gaussian noise.
struct SyntheticTaskSpec {
  int id = 0;
  Vector input_mean;
  Scalar input_scale = 1.0;
  Matrix target_map;  // D_out x D
  Scalar noise_std = 0.0;
  int n_train = 0;
  int n_eval = 0;
};

struct SyntheticTask {
  SyntheticTaskSpec spec;
  Dataset train;
  Dataset eval;
};

std::vector<SyntheticTask> generate_tasks(std::uint64_t seed, int task_count, Index dim,
                                          Index out_dim, Scalar separation, Scalar input_scale,
                                          Scalar noise_std, int n_train, int n_eval);

enum class Metric { kMse, kThresholdAccuracy };

/// Per-sample prediction error: |y_hat - y|^2 / D_out.
Vector per_sample_errors(ModelState& state, const Dataset& data);

/// Infer-mode metric. kMse averages per-sample errors; kThresholdAccuracy is
/// the fraction of samples whose error falls below `threshold`.
Scalar evaluate(ModelState& state, const Dataset& data, Metric metric, Scalar threshold = 0.0);

/// acc[round][task] for task <= round; strictly lower-triangular occupancy.
struct AccuracyMatrix {
  std::vector<std::vector<Scalar>> acc;
};

/// Mean over rounds of the mean over tasks seen so far.
Scalar average_accuracy(const AccuracyMatrix& m);

/// Average drop of task 1 relative to its round-1 score over rounds 2 and 3.
Scalar forgetting_first_task(const AccuracyMatrix& m);

Scalar median(std::vector<Scalar> values);

struct ExperimentConfig {
  TrainConfig train;
  int task_count = 3;
  Index dim = 8;
  Index out_dim = 4;
  Scalar separation = 4.0;
  Scalar input_scale = 1.0;
  Scalar noise_std = 0.02;
  int train_per_task = 512;
  int eval_per_task = 256;
  std::string method = "procl";  // procl | seq_lora
  Metric metric = Metric::kThresholdAccuracy;
  Scalar threshold = 0.0;  // <= 0: median untrained error on task 1
  std::string output = "runs";
};

/// Parses the key=value config format (see README for the grammar). Unknown
/// sections, unknown keys, and out-of-range values are rejected with the
/// offending line number.
ExperimentConfig parse_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin);

/// Canonical text form; parse-serialize is idempotent.
std::string serialize_config(const ExperimentConfig& cfg);

struct ExperimentResult {
  RunLog log;
  AccuracyMatrix acc;
  Scalar average_acc = 0.0;
  Scalar forgetting = std::numeric_limits<Scalar>::quiet_NaN();  // NaN below 3 rounds
  Scalar threshold = 0.0;             // resolved value actually used
  std::vector<Scalar> final_entropy;  // per task, mean over heads
  std::uint64_t dataset_checksum = 0;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Line-delimited record stream: meta, one line per batch, one per round,
/// one summary. Byte-identical for identical configs.
void write_run_records(const ExperimentResult& result, const ExperimentConfig& cfg,
                       std::ostream& out);

/// Routing-specialization diagnostic: mean pairwise Jaccard overlap of the
/// per-task dominant-slot sets (argmax slot of each head on the task's eval
/// inputs). Smaller after training means sharper task separation.
Scalar routing_overlap(const ModelState& state, const std::vector<SyntheticTask>& tasks);

struct BenchArm {
  Scalar average_acc = 0.0;
  Scalar forgetting = 0.0;
  AccuracyMatrix acc;
};

struct BenchSeedResult {
  std::uint64_t seed = 0;
  BenchArm procl;
  BenchArm seq_lora;
};

struct BenchSummary {
  std::vector<BenchSeedResult> per_seed;
  Scalar median_aa_procl = 0.0;
  Scalar median_aa_seq_lora = 0.0;
  Scalar median_forgetting_procl = 0.0;
  Scalar median_forgetting_seq_lora = 0.0;
};

/// Paired arms over seeds base_seed .. base_seed + n_seeds - 1; both arms of
/// a seed consume identical datasets.
BenchSummary bench_forgetting(const ExperimentConfig& base, int n_seeds);

void write_bench_records(const BenchSummary& summary, const ExperimentConfig& base,
                         std::ostream& summary_out, std::ostream& table_out);

/// Aggregate result of the executable proposition checks.
struct TheoryOutcome {
  int violations = 0;

  Scalar max_decomposition_residual = 0.0;
  Scalar min_slack = std::numeric_limits<Scalar>::infinity();
  Scalar beta_min = std::numeric_limits<Scalar>::infinity();
  Scalar beta_max = -std::numeric_limits<Scalar>::infinity();
  Scalar max_disjoint_j = 0.0;
  Scalar max_equality_gap = 0.0;

  Scalar max_det_decay_err = 0.0;  // |err_t - (1-lambda)^t err_0| / max(1, err_0)
  Scalar max_det_rel_err = 0.0;    // relative error where the signal is resolvable
  Scalar fixed_point_residual = 0.0;
  Scalar stochastic_rate = 0.0;
  Scalar stochastic_target = 0.0;
  int stochastic_fit_points = 0;
};

/// Runs the interference and consolidation check suites; if `records` is
/// non-null, streams one record per check. Violated bounds increment
/// `violations`.
TheoryOutcome verify_theory(std::uint64_t seed, std::ostream* records);

}  // namespace procl::harness
