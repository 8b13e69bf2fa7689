#pragma once

#include "procl/training.hpp"

namespace procl::theory {

/// Frozen per-task snapshot of the quantities entering the interference
/// analysis. `raw_grad` is the adapter-space gradient dL/dW_exec, whose head
/// blocks (rows [h*r, (h+1)*r)) have disjoint supports by construction.
///
/// `routed_grad` is the gradient after routing through the programs, kept in
/// stacked form: an (N*R) x D matrix whose slot-section n, head-block h holds
/// gates[n] * alpha(h, n) * (raw head block h). The decomposition identity
/// <routed_t, routed_t'> = sum_h beta_h <g_h,t, g_h,t'> relies on every
/// (slot, head) contribution occupying disjoint coordinates; summing the head
/// axis into the slot rows (as the weight update itself does) would introduce
/// cross-head terms the identity excludes. This is a construction choice
/// documented here, not a re-derivation.
struct TaskGradientRecord {
  int task_id = 0;
  Matrix alpha;        // N x N, row h = batch-averaged attention of head h
  Vector gates;        // sigmoid(s_n) snapshot
  Matrix raw_grad;     // R x D
  Matrix routed_grad;  // (N*R) x D

  int num_heads() const noexcept { return static_cast<int>(alpha.rows()); }
  Index slot_rows() const noexcept {
    return alpha.rows() > 0 ? raw_grad.rows() / alpha.rows() : 0;
  }
  Eigen::Ref<const Matrix> head_block(int h) const;
};

struct InterferenceReport {
  Vector beta;
  Scalar j_procl = 0.0;
  Scalar s = 0.0;
  Scalar bound_rhs = 0.0;
  Scalar slack = 0.0;
  Scalar decomposition_residual = 0.0;
};

struct ConsolidationTrace {
  Scalar lambda = 0.0;
  Matrix w_star;
  std::vector<Scalar> error_norms;  // |mean W^(t) - W*|_F for t = 0..t_max
  Scalar fitted_rate = 0.0;         // slope of log |E^(t)| over the fit window
  int fit_points = 0;
  Scalar noise_floor = 0.0;
};

/// Builds the routed stacked gradient from a raw adapter-space gradient and a
/// routing/gate snapshot. Validates that alpha rows are distributions.
TaskGradientRecord make_task_gradient_record(const ConstMatrixRef& raw_grad,
                                             const ConstMatrixRef& alpha,
                                             const ConstVectorRef& gates, int task_id = 0);

/// Raw gradient of the direct linear model y = x w_exec^T under half-scaled
/// batch-mean squared error, packaged with the given routing snapshot. The
/// interference analysis works on this model; the full pipeline's gradients
/// are covered by the finite-difference oracle instead.
TaskGradientRecord record_from_linear_model(const ConstMatrixRef& x,
                                            const ConstMatrixRef& y_star,
                                            const ConstMatrixRef& w_exec,
                                            const ConstMatrixRef& alpha,
                                            const ConstVectorRef& gates, int task_id = 0);

/// Novel-task signal: y_star - gamma * x * (a * w_orig)^T.
Matrix residual_target(const ConstMatrixRef& y_star, const ConstMatrixRef& x,
                       const FrozenAnchor& anchor, const ConstMatrixRef& a);

/// Routing-induced gating coefficient
/// beta_h = sum_n gates_t[n] gates_t'[n] alpha_t(h,n) alpha_t'(h,n).
Scalar beta(int head, const TaskGradientRecord& rec_t, const TaskGradientRecord& rec_t2);

/// |<g_t, g_t'>_F| for same-shape gradient matrices.
Scalar cross_task_j(const ConstMatrixRef& g_t, const ConstMatrixRef& g_t2);

/// S(t,t') = sum_h |<raw head block h of t, same of t'>|.
Scalar per_head_s(const TaskGradientRecord& rec_t, const TaskGradientRecord& rec_t2);

/// |<routed_t, routed_t'> - sum_h beta_h <g_h,t, g_h,t'>|.
Scalar check_decomposition(const TaskGradientRecord& rec_t, const TaskGradientRecord& rec_t2);

InterferenceReport check_interference_bound(const TaskGradientRecord& rec_t,
                                            const TaskGradientRecord& rec_t2);

enum class Leaf {
  kA,
  kAdapter,
  kGateLogits,
  kGammaLogit,
  kEncoderWeight,
  kEncoderBias,
  kKeys,
};

struct LeafSelector {
  Leaf leaf = Leaf::kA;
  int head = 0;  // which key bank, for Leaf::kKeys
};

/// Central finite differences of the train-mode loss with respect to one
/// leaf, recomputing the full forward (routing included) per probe. Returns
/// the gradient in the leaf's natural shape (vectors as n x 1).
Matrix finite_diff_gradient(ModelState& state, const std::vector<Matrix>& x_batch,
                            const ConstMatrixRef& y_star, LeafSelector selector,
                            Scalar epsilon = 1e-5);

/// Finite input distribution standing in for the data stream.
struct WeightedBatch {
  Scalar weight = 1.0;
  std::vector<Matrix> samples;
};

/// W* = gamma * w_orig + E[composed program mixture], the expectation taken
/// exactly over the finite weighted input set. Routing and gates are read
/// from the state and treated as frozen.
Matrix consolidation_fixed_point(const ModelState& state,
                                 const std::vector<WeightedBatch>& distribution);

/// Monte-Carlo check of the EMA error recursion with gradient updates
/// disabled: runs n_runs independent input streams, averages the weight
/// trajectory, and fits the decay rate of |mean W^(t) - W*|.
ConsolidationTrace consolidation_recursion_check(const ModelState& state,
                                                 const std::vector<WeightedBatch>& distribution,
                                                 Scalar lambda, int t_max, int n_runs,
                                                 std::uint64_t seed);

}  // namespace procl::theory
