#include "procl/theory.hpp"

#include <algorithm>
#include <cmath>

namespace procl::theory {

namespace {

void validate_record_inputs(const ConstMatrixRef& raw_grad, const ConstMatrixRef& alpha,
                            const ConstVectorRef& gates) {
  const Index n = alpha.rows();
  if (n < 1 || alpha.cols() != n) {
    throw ShapeError("make_task_gradient_record", Shape{n, n}, Shape{n, alpha.cols()});
  }
  if (gates.size() != n) {
    throw ShapeError("make_task_gradient_record", Shape{n, 1}, Shape{gates.size(), 1});
  }
  if (raw_grad.rows() % n != 0 || raw_grad.rows() == 0) {
    throw ConfigError("make_task_gradient_record: head count does not tile the gradient rows");
  }
  for (Index h = 0; h < n; ++h) {
    Scalar total = 0.0;
    for (Index j = 0; j < n; ++j) {
      if (alpha(h, j) < 0.0) {
        throw ValueError("make_task_gradient_record: negative routing weight");
      }
      total += alpha(h, j);
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ValueError("make_task_gradient_record: routing row does not sum to 1");
    }
  }
  for (Index j = 0; j < n; ++j) {
    if (!(gates(j) > 0.0 && gates(j) < 1.0)) {
      throw ValueError("make_task_gradient_record: gate outside (0, 1)");
    }
  }
}

void require_compatible(const TaskGradientRecord& rec_t, const TaskGradientRecord& rec_t2,
                        std::string_view op) {
  if (rec_t.alpha.rows() != rec_t2.alpha.rows() ||
      rec_t.raw_grad.rows() != rec_t2.raw_grad.rows() ||
      rec_t.raw_grad.cols() != rec_t2.raw_grad.cols()) {
    throw ShapeError(op, Shape{rec_t.raw_grad.rows(), rec_t.raw_grad.cols()},
                     Shape{rec_t2.raw_grad.rows(), rec_t2.raw_grad.cols()});
  }
}

}  // namespace

Eigen::Ref<const Matrix> TaskGradientRecord::head_block(int h) const {
  if (h < 0 || h >= num_heads()) {
    throw ValueError("TaskGradientRecord::head_block: head index out of range");
  }
  return raw_grad.middleRows(static_cast<Index>(h) * slot_rows(), slot_rows());
}

TaskGradientRecord make_task_gradient_record(const ConstMatrixRef& raw_grad,
                                             const ConstMatrixRef& alpha,
                                             const ConstVectorRef& gates, int task_id) {
  validate_record_inputs(raw_grad, alpha, gates);
  TaskGradientRecord rec;
  rec.task_id = task_id;
  rec.alpha = alpha;
  rec.gates = gates;
  rec.raw_grad = raw_grad;

  const Index n = alpha.rows();
  const Index rank = raw_grad.rows();
  const Index slot_rows = rank / n;
  rec.routed_grad = Matrix::Zero(n * rank, raw_grad.cols());
  for (Index slot = 0; slot < n; ++slot) {
    for (Index h = 0; h < n; ++h) {
      rec.routed_grad.middleRows(slot * rank + h * slot_rows, slot_rows) =
          gates(slot) * alpha(h, slot) * raw_grad.middleRows(h * slot_rows, slot_rows);
    }
  }
  return rec;
}

TaskGradientRecord record_from_linear_model(const ConstMatrixRef& x,
                                            const ConstMatrixRef& y_star,
                                            const ConstMatrixRef& w_exec,
                                            const ConstMatrixRef& alpha,
                                            const ConstVectorRef& gates, int task_id) {
  if (x.rows() == 0) {
    throw EmptyInputError("record_from_linear_model: empty batch");
  }
  if (x.cols() != w_exec.cols()) {
    throw ShapeError("record_from_linear_model", Shape{x.rows(), w_exec.cols()},
                     Shape{x.rows(), x.cols()});
  }
  if (y_star.rows() != x.rows() || y_star.cols() != w_exec.rows()) {
    throw ShapeError("record_from_linear_model", Shape{x.rows(), w_exec.rows()},
                     Shape{y_star.rows(), y_star.cols()});
  }
  // y = x w_exec^T, L = (1/2B) |y - y_star|_F^2.
  const Matrix raw =
      (x * w_exec.transpose() - y_star).transpose() * x / static_cast<Scalar>(x.rows());
  return make_task_gradient_record(raw, alpha, gates, task_id);
}

Matrix residual_target(const ConstMatrixRef& y_star, const ConstMatrixRef& x,
                       const FrozenAnchor& anchor, const ConstMatrixRef& a) {
  if (a.cols() != anchor.w_orig.rows()) {
    throw ShapeError("residual_target", Shape{a.rows(), anchor.w_orig.rows()},
                     Shape{a.rows(), a.cols()});
  }
  if (x.cols() != anchor.w_orig.cols()) {
    throw ShapeError("residual_target", Shape{x.rows(), anchor.w_orig.cols()},
                     Shape{x.rows(), x.cols()});
  }
  if (y_star.rows() != x.rows() || y_star.cols() != a.rows()) {
    throw ShapeError("residual_target", Shape{x.rows(), a.rows()},
                     Shape{y_star.rows(), y_star.cols()});
  }
  return y_star - anchor.gamma * x * (a * anchor.w_orig).transpose();
}

Scalar beta(int head, const TaskGradientRecord& rec_t, const TaskGradientRecord& rec_t2) {
  require_compatible(rec_t, rec_t2, "beta");
  if (head < 0 || head >= rec_t.num_heads()) {
    throw ValueError("beta: head index out of range");
  }
  Scalar total = 0.0;
  for (Index slot = 0; slot < rec_t.alpha.cols(); ++slot) {
    total += rec_t.gates(slot) * rec_t2.gates(slot) * rec_t.alpha(head, slot) *
             rec_t2.alpha(head, slot);
  }
  return total;
}

Scalar cross_task_j(const ConstMatrixRef& g_t, const ConstMatrixRef& g_t2) {
  return std::abs(frobenius_inner(g_t, g_t2));
}

Scalar per_head_s(const TaskGradientRecord& rec_t, const TaskGradientRecord& rec_t2) {
  require_compatible(rec_t, rec_t2, "per_head_s");
  Scalar total = 0.0;
  for (int h = 0; h < rec_t.num_heads(); ++h) {
    total += std::abs(frobenius_inner(rec_t.head_block(h), rec_t2.head_block(h)));
  }
  return total;
}

Scalar check_decomposition(const TaskGradientRecord& rec_t, const TaskGradientRecord& rec_t2) {
  require_compatible(rec_t, rec_t2, "check_decomposition");
  const Scalar lhs = frobenius_inner(rec_t.routed_grad, rec_t2.routed_grad);
  Scalar rhs = 0.0;
  for (int h = 0; h < rec_t.num_heads(); ++h) {
    rhs += beta(h, rec_t, rec_t2) * frobenius_inner(rec_t.head_block(h), rec_t2.head_block(h));
  }
  return std::abs(lhs - rhs);
}

InterferenceReport check_interference_bound(const TaskGradientRecord& rec_t,
                                            const TaskGradientRecord& rec_t2) {
  require_compatible(rec_t, rec_t2, "check_interference_bound");
  InterferenceReport report;
  report.beta.resize(rec_t.num_heads());
  for (int h = 0; h < rec_t.num_heads(); ++h) {
    report.beta(h) = beta(h, rec_t, rec_t2);
  }
  report.j_procl = cross_task_j(rec_t.routed_grad, rec_t2.routed_grad);
  report.s = per_head_s(rec_t, rec_t2);
  report.bound_rhs = report.beta.maxCoeff() * report.s;
  report.slack = report.bound_rhs - report.j_procl;
  report.decomposition_residual = check_decomposition(rec_t, rec_t2);
  return report;
}

namespace {

struct LeafView {
  Scalar* data = nullptr;
  Index rows = 0;
  Index cols = 0;
};

LeafView leaf_view(ModelState& state, LeafSelector selector) {
  switch (selector.leaf) {
    case Leaf::kA:
      return {state.a.data(), state.a.rows(), state.a.cols()};
    case Leaf::kAdapter:
      return {state.adapter.weight().data(), state.adapter.weight().rows(),
              state.adapter.weight().cols()};
    case Leaf::kGateLogits:
      return {state.scaling.s.data(), state.scaling.s.size(), 1};
    case Leaf::kGammaLogit:
      return {&state.scaling.gamma_logit, 1, 1};
    case Leaf::kEncoderWeight:
      return {state.encoder.weight.data(), state.encoder.weight.rows(),
              state.encoder.weight.cols()};
    case Leaf::kEncoderBias:
      return {state.encoder.bias.data(), state.encoder.bias.size(), 1};
    case Leaf::kKeys: {
      if (selector.head < 0 || selector.head >= state.keys.num_heads()) {
        throw ValueError("finite_diff_gradient: key head out of range");
      }
      Matrix& k = state.keys.keys[static_cast<std::size_t>(selector.head)];
      return {k.data(), k.rows(), k.cols()};
    }
  }
  throw ValueError("finite_diff_gradient: unknown leaf");
}

}  // namespace

Matrix finite_diff_gradient(ModelState& state, const std::vector<Matrix>& x_batch,
                            const ConstMatrixRef& y_star, LeafSelector selector,
                            Scalar epsilon) {
  if (!(epsilon > 0.0)) {
    throw ValueError("finite_diff_gradient: epsilon must be positive");
  }
  const LeafView view = leaf_view(state, selector);
  const auto probe = [&]() {
    const Scalar loss = loss_mse(forward(state, x_batch, Mode::kTrain).y, y_star);
    if (!std::isfinite(loss)) {
      throw ValueError("finite_diff_gradient: non-finite loss during probing");
    }
    return loss;
  };

  Matrix grad(view.rows, view.cols);
  for (Index i = 0; i < view.rows * view.cols; ++i) {
    Scalar& coeff = view.data[i];
    const Scalar saved = coeff;
    coeff = saved + epsilon;
    const Scalar up = probe();
    coeff = saved - epsilon;
    const Scalar down = probe();
    coeff = saved;
    grad(i / view.cols, i % view.cols) = (up - down) / (2.0 * epsilon);
  }
  return grad;
}

namespace {

Matrix composed_mixture(const ModelState& state, const WeightedBatch& batch) {
  const RoutingState routing = route_batch(batch.samples, state.encoder, state.keys);
  return compose_all_heads(routing.batch_alpha, state.scaling, state.adapter);
}

std::vector<Scalar> normalized_weights(const std::vector<WeightedBatch>& distribution) {
  if (distribution.empty()) {
    throw EmptyInputError("consolidation: empty input distribution");
  }
  Scalar total = 0.0;
  for (const WeightedBatch& batch : distribution) {
    if (!(batch.weight > 0.0)) {
      throw ValueError("consolidation: batch weights must be positive");
    }
    total += batch.weight;
  }
  std::vector<Scalar> weights;
  weights.reserve(distribution.size());
  for (const WeightedBatch& batch : distribution) {
    weights.push_back(batch.weight / total);
  }
  return weights;
}

}  // namespace

Matrix consolidation_fixed_point(const ModelState& state,
                                 const std::vector<WeightedBatch>& distribution) {
  const std::vector<Scalar> weights = normalized_weights(distribution);
  Matrix expected = Matrix::Zero(state.adapter.rank(), state.adapter.dim());
  for (std::size_t i = 0; i < distribution.size(); ++i) {
    expected += weights[i] * composed_mixture(state, distribution[i]);
  }
  return state.scaling.gamma() * state.anchor.w_orig + expected;
}

ConsolidationTrace consolidation_recursion_check(const ModelState& state,
                                                 const std::vector<WeightedBatch>& distribution,
                                                 Scalar lambda, int t_max, int n_runs,
                                                 std::uint64_t seed) {
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw ValueError("consolidation_recursion_check: lambda must lie in (0, 1)");
  }
  if (t_max < 1 || n_runs < 1) {
    throw ValueError("consolidation_recursion_check: t_max and n_runs must be positive");
  }
  const std::vector<Scalar> weights = normalized_weights(distribution);

  // Routing and gates are frozen (late-training stationarity), so each
  // batch's execution weight is fixed and can be precomputed.
  const Scalar gamma = state.scaling.gamma();
  std::vector<Matrix> exec_weights;
  exec_weights.reserve(distribution.size());
  for (const WeightedBatch& batch : distribution) {
    exec_weights.push_back(gamma * state.anchor.w_orig + composed_mixture(state, batch));
  }

  ConsolidationTrace trace;
  trace.lambda = lambda;
  trace.w_star = consolidation_fixed_point(state, distribution);

  std::vector<Scalar> cumulative(weights.size());
  Scalar acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    cumulative[i] = acc;
  }

  std::vector<Matrix> mean_w(static_cast<std::size_t>(t_max) + 1,
                             Matrix::Zero(state.adapter.rank(), state.adapter.dim()));
  for (int run = 0; run < n_runs; ++run) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(run)));
    Matrix w = state.adapter.weight();
    mean_w[0] += w;
    for (int t = 1; t <= t_max; ++t) {
      const Scalar u = rng.uniform();
      std::size_t pick = 0;
      while (pick + 1 < cumulative.size() && u > cumulative[pick]) {
        ++pick;
      }
      w = (1.0 - lambda) * w + lambda * exec_weights[pick];
      mean_w[static_cast<std::size_t>(t)] += w;
    }
  }

  trace.error_norms.reserve(mean_w.size());
  for (Matrix& w : mean_w) {
    w /= static_cast<Scalar>(n_runs);
    trace.error_norms.push_back((w - trace.w_star).norm());
  }
  trace.noise_floor = trace.error_norms.back();

  // Fit log |E^(t)| = a + rate * t over the span where the signal clears both
  // the Monte-Carlo floor and double-precision headroom.
  const Scalar initial = trace.error_norms.front();
  const Scalar cutoff = std::max({50.0 * trace.noise_floor, 1e-12 * initial, 1e-300});
  Scalar sum_t = 0.0, sum_y = 0.0, sum_tt = 0.0, sum_ty = 0.0;
  int points = 0;
  for (std::size_t t = 0; t < trace.error_norms.size(); ++t) {
    const Scalar value = trace.error_norms[t];
    if (value < cutoff) {
      break;
    }
    const Scalar y = std::log(value);
    const Scalar ts = static_cast<Scalar>(t);
    sum_t += ts;
    sum_y += y;
    sum_tt += ts * ts;
    sum_ty += ts * y;
    ++points;
  }
  trace.fit_points = points;
  if (points >= 2) {
    const Scalar denom = points * sum_tt - sum_t * sum_t;
    trace.fitted_rate = (points * sum_ty - sum_t * sum_y) / denom;
  } else {
    trace.fitted_rate = 0.0;
  }
  return trace;
}

}  // namespace procl::theory
