#include "procl/training.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace procl {

namespace {

void validate_config(const TrainConfig& cfg) {
  if (cfg.num_programs < 1) {
    throw ConfigError("TrainConfig: num_programs must be positive");
  }
  if (cfg.key_dim < 1) {
    throw ConfigError("TrainConfig: key_dim must be positive");
  }
  if (cfg.rank < 1) {
    throw ConfigError("TrainConfig: rank must be positive");
  }
  if (cfg.rank % cfg.num_programs != 0) {
    std::ostringstream os;
    os << "TrainConfig: num_programs " << cfg.num_programs << " does not divide rank "
       << cfg.rank;
    throw ConfigError(os.str());
  }
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) {
    throw ConfigError("TrainConfig: lambda must lie in [0, 1]");
  }
  if (cfg.batch_size < 1) {
    throw ConfigError("TrainConfig: batch_size must be positive");
  }
  if (cfg.epochs_per_task < 1) {
    throw ConfigError("TrainConfig: epochs_per_task must be positive");
  }
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) {
    throw ConfigError("TrainConfig: learning_rate must be finite and nonnegative");
  }
}

// Seed stream tags; order is part of the determinism contract.
enum : std::uint64_t {
  kSeedBase = 0,
  kSeedAdapter = 1,
  kSeedLora = 2,
  kSeedEncoder = 3,
  kSeedKeys = 4,
};

}  // namespace

ModelState::ModelState(Matrix w0_in, Matrix a_in, AdapterTensor adapter_in,
                       TaskEncoder encoder_in, KeyBank keys_in, ScalingParams scaling_in)
    : w0(std::move(w0_in)),
      a(std::move(a_in)),
      adapter(std::move(adapter_in)),
      encoder(std::move(encoder_in)),
      keys(std::move(keys_in)),
      scaling(std::move(scaling_in)) {
  const int n = adapter.num_programs();
  if (a.cols() != adapter.rank()) {
    throw ShapeError("ModelState", Shape{a.rows(), adapter.rank()}, Shape{a.rows(), a.cols()});
  }
  if (w0.cols() != adapter.dim() || w0.rows() != a.rows()) {
    throw ShapeError("ModelState", Shape{a.rows(), adapter.dim()},
                     Shape{w0.rows(), w0.cols()});
  }
  if (encoder.num_programs != n || keys.num_heads() != n || scaling.s.size() != n) {
    throw ConfigError("ModelState: program count disagreement between components");
  }
  if (encoder.weight.cols() != adapter.dim()) {
    throw ShapeError("ModelState", Shape{encoder.weight.rows(), adapter.dim()},
                     Shape{encoder.weight.rows(), encoder.weight.cols()});
  }
  for (const Matrix& k : keys.keys) {
    if (k.rows() != n || k.cols() != encoder.key_dim) {
      throw ShapeError("ModelState", Shape{n, encoder.key_dim}, Shape{k.rows(), k.cols()});
    }
  }
  anchor = snapshot_anchor(adapter, scaling);
  w0_checksum = checksum(w0);
}

ModelState ModelState::init(Index dim, Index out_dim, const TrainConfig& cfg) {
  validate_config(cfg);
  if (dim < 1 || out_dim < 1) {
    throw ConfigError("ModelState::init: dimensions must be positive");
  }
  const Scalar in_std = 1.0 / std::sqrt(static_cast<Scalar>(dim));

  Rng rng_base(derive_seed(cfg.seed, kSeedBase));
  Matrix w0 = rng_base.gaussian_matrix(out_dim, dim, in_std);

  Rng rng_adapter(derive_seed(cfg.seed, kSeedAdapter));
  Matrix w = rng_adapter.gaussian_matrix(cfg.rank, dim, in_std);

  Rng rng_lora(derive_seed(cfg.seed, kSeedLora));
  Matrix a = rng_lora.gaussian_matrix(out_dim, cfg.rank,
                                      1.0 / std::sqrt(static_cast<Scalar>(cfg.rank)));

  Rng rng_encoder(derive_seed(cfg.seed, kSeedEncoder));
  TaskEncoder encoder = TaskEncoder::init(cfg.num_programs, cfg.key_dim, dim, rng_encoder);

  Rng rng_keys(derive_seed(cfg.seed, kSeedKeys));
  KeyBank keys = KeyBank::init(cfg.num_programs, cfg.key_dim, rng_keys);

  ScalingParams scaling;
  scaling.s = Vector::Zero(cfg.num_programs);
  scaling.gamma_logit = init_gamma_logit(w);

  return ModelState(std::move(w0), std::move(a), AdapterTensor(std::move(w), cfg.num_programs),
                    std::move(encoder), std::move(keys), std::move(scaling));
}

ForwardResult forward(ModelState& state, const std::vector<Matrix>& x_batch, Mode mode) {
  ForwardResult out;
  out.pooled = pool_batch(x_batch);
  if (out.pooled.cols() != state.dim()) {
    throw ShapeError("forward", Shape{out.pooled.rows(), state.dim()},
                     Shape{out.pooled.rows(), out.pooled.cols()});
  }
  if (mode == Mode::kTrain) {
    RoutingState routing = route_pooled(out.pooled, state.encoder, state.keys);
    state.counter.routing_evaluations += 1;
    // The anchor blend tracks the live (possibly trained) gamma.
    state.anchor.gamma = state.scaling.gamma();
    const Matrix w_hat = compose_all_heads(routing.batch_alpha, state.scaling, state.adapter);
    state.counter.compositions += 1;
    out.w_exec = compose_exec(state.anchor, w_hat);
    out.routing = std::move(routing);
  } else {
    out.w_exec = state.adapter.weight();
  }
  out.y.noalias() = out.pooled * (state.w0 + state.a * out.w_exec).transpose();
  return out;
}

Scalar loss_mse(const ConstMatrixRef& y, const ConstMatrixRef& y_star) {
  if (y.rows() != y_star.rows() || y.cols() != y_star.cols()) {
    throw ShapeError("loss_mse", Shape{y.rows(), y.cols()}, Shape{y_star.rows(), y_star.cols()});
  }
  if (y.rows() == 0) {
    throw EmptyInputError("loss_mse: empty batch");
  }
  return 0.5 * (y - y_star).squaredNorm() / static_cast<Scalar>(y.rows());
}

Gradients backward(const ModelState& state, const std::vector<Matrix>& x_batch,
                   const ConstMatrixRef& y_star, const RoutingState& routing,
                   const ConstMatrixRef& w_exec) {
  const Matrix pooled = pool_batch(x_batch);
  const Index batch = pooled.rows();
  const int n = state.adapter.num_programs();
  const Index slot_rows = state.adapter.slot_rows();
  const Index key_dim = state.encoder.key_dim;

  if (y_star.rows() != batch || y_star.cols() != state.out_dim()) {
    throw ShapeError("backward", Shape{batch, state.out_dim()},
                     Shape{y_star.rows(), y_star.cols()});
  }
  if (w_exec.rows() != state.adapter.rank() || w_exec.cols() != state.adapter.dim()) {
    throw ShapeError("backward", Shape{state.adapter.rank(), state.adapter.dim()},
                     Shape{w_exec.rows(), w_exec.cols()});
  }
  if (routing.batch_tag != checksum(pooled)) {
    throw ContractError("backward: routing state is stale for this batch");
  }
  if (routing.batch_alpha.rows() != n || static_cast<int>(routing.per_sample_alpha.size()) != n) {
    throw ContractError("backward: routing head count does not match the adapter");
  }

  Gradients g;

  // y = pooled * (w0 + a * w_exec)^T, L = (1/2B) |y - y_star|^2.
  const Matrix gy = (pooled * (state.w0 + state.a * w_exec).transpose() - y_star) /
                    static_cast<Scalar>(batch);
  const Matrix gp = gy.transpose() * pooled;  // dL/d(w0 + a w_exec)
  g.a.noalias() = gp * w_exec.transpose();
  g.exec.noalias() = state.a.transpose() * gp;

  const Scalar gamma = state.scaling.gamma();
  g.gamma_logit = frobenius_inner(g.exec, state.anchor.w_orig) * gamma * (1.0 - gamma);

  // Slot, gate, and attention fields share the per-(head, slot) inner products
  // <exec block h, slot n>.
  g.adapter = Matrix::Zero(state.adapter.rank(), state.adapter.dim());
  g.s = Vector::Zero(n);
  Matrix d_batch_alpha(n, n);
  for (int h = 0; h < n; ++h) {
    const auto exec_block = g.exec.middleRows(static_cast<Index>(h) * slot_rows, slot_rows);
    for (int slot = 0; slot < n; ++slot) {
      const Scalar alpha = routing.batch_alpha(h, slot);
      const Scalar gate = sigmoid(state.scaling.s(slot));
      const Scalar inner = frobenius_inner(exec_block, state.adapter.slot(slot));
      g.adapter.middleRows(static_cast<Index>(slot) * slot_rows, slot_rows) +=
          gate * alpha * exec_block;
      g.s(slot) += sigmoid_derivative(state.scaling.s(slot)) * alpha * inner;
      d_batch_alpha(h, slot) = gate * inner;
    }
  }

  // Attention backward: batch mean, softmax Jacobian, then the bilinear logit
  // map l_h = keys_h * q_h shared by the key bank and the encoder.
  g.encoder_weight = Matrix::Zero(state.encoder.weight.rows(), state.encoder.weight.cols());
  g.encoder_bias = Vector::Zero(state.encoder.bias.size());
  g.keys.assign(static_cast<std::size_t>(n), Matrix::Zero(n, key_dim));
  Vector dq_flat(static_cast<Index>(n) * key_dim);
  for (Index b = 0; b < batch; ++b) {
    const Vector z = pooled.row(b).transpose();
    const Matrix q = encode(z, state.encoder);
    for (int h = 0; h < n; ++h) {
      const Vector alpha =
          routing.per_sample_alpha[static_cast<std::size_t>(h)].row(b).transpose();
      const Vector d_alpha = d_batch_alpha.row(h).transpose() / static_cast<Scalar>(batch);
      const Scalar pulled = alpha.dot(d_alpha);
      const Vector d_logits = alpha.array() * (d_alpha.array() - pulled);
      const Vector q_h = q.row(h).transpose();
      g.keys[static_cast<std::size_t>(h)].noalias() += d_logits * q_h.transpose();
      dq_flat.segment(static_cast<Index>(h) * key_dim, key_dim) =
          state.keys.keys[static_cast<std::size_t>(h)].transpose() * d_logits;
    }
    g.encoder_weight.noalias() += dq_flat * z.transpose();
    g.encoder_bias += dq_flat;
  }

  return g;
}

Gradients backward_seq_lora(const ModelState& state, const std::vector<Matrix>& x_batch,
                            const ConstMatrixRef& y_star) {
  const Matrix pooled = pool_batch(x_batch);
  const Index batch = pooled.rows();
  if (y_star.rows() != batch || y_star.cols() != state.out_dim()) {
    throw ShapeError("backward_seq_lora", Shape{batch, state.out_dim()},
                     Shape{y_star.rows(), y_star.cols()});
  }
  const Matrix& w = state.adapter.weight();
  const Matrix gy =
      (pooled * (state.w0 + state.a * w).transpose() - y_star) / static_cast<Scalar>(batch);
  const Matrix gp = gy.transpose() * pooled;

  Gradients g;
  g.a.noalias() = gp * w.transpose();
  g.adapter.noalias() = state.a.transpose() * gp;
  g.exec = g.adapter;
  g.s = Vector::Zero(state.scaling.s.size());
  g.gamma_logit = 0.0;
  g.encoder_weight = Matrix::Zero(state.encoder.weight.rows(), state.encoder.weight.cols());
  g.encoder_bias = Vector::Zero(state.encoder.bias.size());
  g.keys.assign(state.keys.keys.size(), Matrix::Zero(state.adapter.num_programs(),
                                                     state.encoder.key_dim));
  return g;
}

void sgd_step(ModelState& state, const Gradients& grads, Scalar lr, bool train_gamma) {
  if (grads.a.rows() != state.a.rows() || grads.a.cols() != state.a.cols()) {
    throw ShapeError("sgd_step", Shape{state.a.rows(), state.a.cols()},
                     Shape{grads.a.rows(), grads.a.cols()});
  }
  if (grads.adapter.rows() != state.adapter.rank() ||
      grads.adapter.cols() != state.adapter.dim()) {
    throw ShapeError("sgd_step", Shape{state.adapter.rank(), state.adapter.dim()},
                     Shape{grads.adapter.rows(), grads.adapter.cols()});
  }
  state.a -= lr * grads.a;
  state.adapter.weight() -= lr * grads.adapter;
  state.scaling.s -= lr * grads.s;
  if (train_gamma) {
    state.scaling.gamma_logit -= lr * grads.gamma_logit;
  }
  state.encoder.weight -= lr * grads.encoder_weight;
  state.encoder.bias -= lr * grads.encoder_bias;
  for (std::size_t h = 0; h < grads.keys.size(); ++h) {
    state.keys.keys[h] -= lr * grads.keys[h];
  }
}

namespace {

std::vector<std::pair<Index, Index>> batch_ranges(Index total, int batch_size) {
  std::vector<std::pair<Index, Index>> ranges;
  for (Index at = 0; at < total; at += batch_size) {
    ranges.emplace_back(at, std::min<Index>(batch_size, total - at));
  }
  return ranges;
}

Matrix stack_entropy_rows(const std::vector<Vector>& rows, int n) {
  Matrix out(static_cast<Index>(rows.size()), n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Index>(i)) = rows[i].transpose();
  }
  return out;
}

}  // namespace

TaskLog train_task(ModelState& state, const Dataset& data, const TrainConfig& cfg,
                   int task_index) {
  validate_config(cfg);
  if (data.size() == 0) {
    throw EmptyInputError("train_task: empty dataset");
  }
  if (data.y.rows() != data.x.rows()) {
    throw ShapeError("train_task", Shape{data.x.rows(), data.y.cols()},
                     Shape{data.y.rows(), data.y.cols()});
  }

  TaskLog log;
  log.task_index = task_index;
  log.anchor_checksum = checksum(state.anchor.w_orig);
  std::vector<Vector> entropy_rows;

  const auto ranges = batch_ranges(data.size(), cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
    for (const auto& [start, count] : ranges) {
      const std::vector<Matrix> samples = rows_as_samples(data.x.middleRows(start, count));
      const Matrix y_star = data.y.middleRows(start, count);

      const ForwardResult fwd = forward(state, samples, Mode::kTrain);
      log.losses.push_back(loss_mse(fwd.y, y_star));

      Vector entropy(state.adapter.num_programs());
      for (int h = 0; h < state.adapter.num_programs(); ++h) {
        entropy(h) = routing_entropy(fwd.routing->batch_alpha.row(h).transpose());
      }
      entropy_rows.push_back(std::move(entropy));

      const Gradients grads = backward(state, samples, y_star, *fwd.routing, fwd.w_exec);
      sgd_step(state, grads, cfg.learning_rate, cfg.train_gamma);
      if (checksum(state.anchor.w_orig) != log.anchor_checksum) {
        throw ContractError("train_task: anchor mutated during an optimizer step");
      }
      // Algorithm line order: the EMA uses the execution weight of the
      // pre-update forward pass, applied after the gradient step.
      consolidate(state.adapter, fwd.w_exec, cfg.lambda);
    }
  }

  log.entropy = stack_entropy_rows(entropy_rows, state.adapter.num_programs());
  log.weight_checksum_end = checksum(state.adapter.weight());
  return log;
}

RunLog train_sequence(ModelState& state, const std::vector<Dataset>& tasks,
                      const TrainConfig& cfg, const Evaluator& evaluate) {
  if (tasks.empty()) {
    throw EmptyInputError("train_sequence: no tasks");
  }
  RunLog run;
  run.method = "procl";
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    state.anchor = snapshot_anchor(state.adapter, state.scaling);
    run.tasks.push_back(train_task(state, tasks[t], cfg, static_cast<int>(t)));
    std::vector<Scalar> row;
    for (std::size_t k = 0; k <= t; ++k) {
      row.push_back(evaluate(state, static_cast<int>(k)));
    }
    run.accuracy.push_back(std::move(row));
  }
  return run;
}

RunLog train_seq_lora(ModelState& state, const std::vector<Dataset>& tasks,
                      const TrainConfig& cfg, const Evaluator& evaluate) {
  validate_config(cfg);
  if (tasks.empty()) {
    throw EmptyInputError("train_seq_lora: no tasks");
  }
  RunLog run;
  run.method = "seq_lora";
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const Dataset& data = tasks[t];
    if (data.size() == 0) {
      throw EmptyInputError("train_seq_lora: empty dataset");
    }
    TaskLog log;
    log.task_index = static_cast<int>(t);
    log.anchor_checksum = checksum(state.anchor.w_orig);
    std::vector<Vector> entropy_rows;

    const auto ranges = batch_ranges(data.size(), cfg.batch_size);
    for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
      for (const auto& [start, count] : ranges) {
        const std::vector<Matrix> samples = rows_as_samples(data.x.middleRows(start, count));
        const Matrix y_star = data.y.middleRows(start, count);
        const ForwardResult fwd = forward(state, samples, Mode::kInfer);
        log.losses.push_back(loss_mse(fwd.y, y_star));
        entropy_rows.push_back(Vector::Zero(state.adapter.num_programs()));
        const Gradients grads = backward_seq_lora(state, samples, y_star);
        sgd_step(state, grads, cfg.learning_rate, false);
      }
    }

    log.entropy = stack_entropy_rows(entropy_rows, state.adapter.num_programs());
    log.weight_checksum_end = checksum(state.adapter.weight());
    run.tasks.push_back(std::move(log));

    std::vector<Scalar> row;
    for (std::size_t k = 0; k <= t; ++k) {
      row.push_back(evaluate(state, static_cast<int>(k)));
    }
    run.accuracy.push_back(std::move(row));
  }
  return run;
}

std::vector<Matrix> rows_as_samples(const ConstMatrixRef& x) {
  std::vector<Matrix> samples;
  samples.reserve(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    samples.push_back(x.row(i));
  }
  return samples;
}

Matrix predict(ModelState& state, const ConstMatrixRef& x_rows) {
  return forward(state, rows_as_samples(x_rows), Mode::kInfer).y;
}

}  // namespace procl
