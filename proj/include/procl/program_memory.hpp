#pragma once

#include "procl/numerics.hpp"

namespace procl {

/// Persistent low-rank factor partitioned row-wise into equal program slots.
/// Slot n is rows [n*r, (n+1)*r) of the weight; views alias the storage.
class AdapterTensor {
 public:
  AdapterTensor(Matrix weight, int num_programs);

  Index rank() const noexcept { return weight_.rows(); }
  Index dim() const noexcept { return weight_.cols(); }
  int num_programs() const noexcept { return num_programs_; }
  Index slot_rows() const noexcept { return slot_rows_; }

  Eigen::Ref<Matrix> slot(int n);
  Eigen::Ref<const Matrix> slot(int n) const;

  Matrix& weight() noexcept { return weight_; }
  const Matrix& weight() const noexcept { return weight_; }

 private:
  Matrix weight_;
  int num_programs_;
  Index slot_rows_;
};

std::vector<Eigen::Ref<const Matrix>> partition(const AdapterTensor& adapter);
std::vector<Eigen::Ref<Matrix>> partition_mut(AdapterTensor& adapter);

/// Per-program gate logits plus the anchor blend stored pre-sigmoid, so the
/// effective values live in (0,1) structurally.
struct ScalingParams {
  Vector s;
  Scalar gamma_logit = 0.0;

  Vector gates() const;
  Scalar gamma() const { return sigmoid(gamma_logit); }
};

/// Deep copy of the adapter taken at a task boundary. `gamma` is the effective
/// blend weight applied to w_orig when forming the execution weight.
struct FrozenAnchor {
  Matrix w_orig;
  Scalar gamma = 0.5;
};

/// Soft composition for one head: sum_n alpha_bar[n] * sigmoid(s[n]) * slot n.
Matrix compose_head(const ConstVectorRef& alpha_bar, const ScalingParams& scaling,
                    const std::vector<Eigen::Ref<const Matrix>>& slots);

/// Stack per-head compositions into the full R x D composed weight. Row h of
/// batch_alpha is head h's averaged attention over the N slots.
Matrix compose_all_heads(const ConstMatrixRef& batch_alpha, const ScalingParams& scaling,
                         const AdapterTensor& adapter);

/// Execution weight: gamma * w_orig + w_hat.
Matrix compose_exec(const FrozenAnchor& anchor, const ConstMatrixRef& w_hat);

/// Norm-adaptive blend init: sigmoid(-log rms(w)). Larger adapters start with
/// a smaller anchor share.
Scalar init_gamma_logit(const ConstMatrixRef& w);
Scalar init_gamma(const ConstMatrixRef& w);

/// EMA pull of the stored weight toward the execution weight.
void consolidate(AdapterTensor& adapter, const ConstMatrixRef& w_exec, Scalar lambda);

FrozenAnchor snapshot_anchor(const AdapterTensor& adapter, const ScalingParams& scaling);

}  // namespace procl
