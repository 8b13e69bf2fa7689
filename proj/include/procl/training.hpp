#pragma once

#include "procl/program_memory.hpp"
#include "procl/routing.hpp"

#include <functional>
#include <optional>

namespace procl {

struct TrainConfig {
  int num_programs = 4;
  int key_dim = 16;
  Scalar lambda = 0.9;
  int rank = 8;
  Scalar learning_rate = 0.01;
  int epochs_per_task = 1;
  int batch_size = 16;
  std::uint64_t seed = 0;
  bool train_gamma = true;
};

/// Monotone counters over routing work; inference must leave them untouched.
struct OpCounter {
  long long routing_evaluations = 0;
  long long compositions = 0;

  void reset() noexcept { routing_evaluations = compositions = 0; }
};

/// Row-per-sample supervised data (single-token samples).
struct Dataset {
  Matrix x;  // n x D
  Matrix y;  // n x D_out

  Index size() const noexcept { return x.rows(); }
};

enum class Mode { kTrain, kInfer };

/// One adapted linear layer y = z (w0 + a * w_exec)^T over pooled inputs z.
/// The adapter supplies the second factor of the update; `a` is the plain
/// trainable factor; w0 stays frozen for the lifetime of the state.
struct ModelState {
  Matrix w0;  // D_out x D, frozen
  Matrix a;   // D_out x R
  AdapterTensor adapter;
  FrozenAnchor anchor;
  TaskEncoder encoder;
  KeyBank keys;
  ScalingParams scaling;
  OpCounter counter;
  std::uint64_t w0_checksum = 0;

  ModelState(Matrix w0_in, Matrix a_in, AdapterTensor adapter_in, TaskEncoder encoder_in,
             KeyBank keys_in, ScalingParams scaling_in);

  static ModelState init(Index dim, Index out_dim, const TrainConfig& cfg);

  Index dim() const noexcept { return w0.cols(); }
  Index out_dim() const noexcept { return w0.rows(); }
};

struct ForwardResult {
  Matrix y;       // B x D_out
  Matrix w_exec;  // R x D
  std::optional<RoutingState> routing;
  Matrix pooled;  // B x D
};

struct Gradients {
  Matrix a;
  Matrix adapter;  // full R x D field assembled from per-slot gradients
  Vector s;
  Scalar gamma_logit = 0.0;
  Matrix encoder_weight;
  Vector encoder_bias;
  std::vector<Matrix> keys;
  Matrix exec;  // dL/dW_exec, kept for diagnostics; not a trainable leaf
};

/// Train mode routes the batch and composes the execution weight from the
/// anchor plus the soft program mixture; infer mode uses the stored adapter
/// directly and performs no routing work.
ForwardResult forward(ModelState& state, const std::vector<Matrix>& x_batch, Mode mode);

/// Half-scaled batch-mean squared error: (1 / 2B) * |y - y_star|_F^2.
Scalar loss_mse(const ConstMatrixRef& y, const ConstMatrixRef& y_star);

/// Hand-derived gradients for every trainable leaf. `routing` and `w_exec`
/// must come from the same train-mode forward pass over `x_batch`.
Gradients backward(const ModelState& state, const std::vector<Matrix>& x_batch,
                   const ConstMatrixRef& y_star, const RoutingState& routing,
                   const ConstMatrixRef& w_exec);

/// Plain-LoRA gradients: adapter and `a` only, no routing terms.
Gradients backward_seq_lora(const ModelState& state, const std::vector<Matrix>& x_batch,
                            const ConstMatrixRef& y_star);

/// Plain SGD over the trainable leaves; the anchor and w0 are never touched.
void sgd_step(ModelState& state, const Gradients& grads, Scalar lr, bool train_gamma = true);

struct TaskLog {
  int task_index = 0;
  std::vector<Scalar> losses;       // per batch
  Matrix entropy;                   // batches x N, per-head entropy of batch_alpha
  std::uint64_t anchor_checksum = 0;
  std::uint64_t weight_checksum_end = 0;
};

struct RunLog {
  std::string method;
  std::vector<TaskLog> tasks;
  std::vector<std::vector<Scalar>> accuracy;  // accuracy[round][task], task <= round
};

using Evaluator = std::function<Scalar(ModelState&, int task_index)>;

/// One task of the inner loop: per batch, forward(train) -> loss -> backward
/// -> sgd_step -> consolidate with the pre-step execution weight.
TaskLog train_task(ModelState& state, const Dataset& data, const TrainConfig& cfg,
                   int task_index = 0);

/// Outer loop: snapshot the anchor at each task start, train the task, then
/// evaluate every task seen so far (infer mode) via `evaluate`.
RunLog train_sequence(ModelState& state, const std::vector<Dataset>& tasks,
                      const TrainConfig& cfg, const Evaluator& evaluate);

/// Baseline: same state shape, adapter and `a` trained directly across tasks;
/// routing, anchoring, and consolidation disabled.
RunLog train_seq_lora(ModelState& state, const std::vector<Dataset>& tasks,
                      const TrainConfig& cfg, const Evaluator& evaluate);

/// Split rows of a sample matrix into single-token samples.
std::vector<Matrix> rows_as_samples(const ConstMatrixRef& x);

/// Infer-mode predictions for row-per-sample inputs.
Matrix predict(ModelState& state, const ConstMatrixRef& x_rows);

}  // namespace procl
