#include "procl/program_memory.hpp"

#include <cmath>
#include <sstream>

namespace procl {

AdapterTensor::AdapterTensor(Matrix weight, int num_programs)
    : weight_(std::move(weight)), num_programs_(num_programs) {
  if (weight_.size() == 0) {
    throw ConfigError("AdapterTensor: empty weight");
  }
  if (num_programs_ < 1) {
    throw ConfigError("AdapterTensor: num_programs must be positive");
  }
  if (weight_.rows() % num_programs_ != 0) {
    std::ostringstream os;
    os << "AdapterTensor: num_programs " << num_programs_ << " does not divide rank "
       << weight_.rows();
    throw ConfigError(os.str());
  }
  slot_rows_ = weight_.rows() / num_programs_;
}

Eigen::Ref<Matrix> AdapterTensor::slot(int n) {
  if (n < 0 || n >= num_programs_) {
    throw ValueError("AdapterTensor::slot: index out of range");
  }
  return weight_.middleRows(static_cast<Index>(n) * slot_rows_, slot_rows_);
}

Eigen::Ref<const Matrix> AdapterTensor::slot(int n) const {
  if (n < 0 || n >= num_programs_) {
    throw ValueError("AdapterTensor::slot: index out of range");
  }
  return weight_.middleRows(static_cast<Index>(n) * slot_rows_, slot_rows_);
}

std::vector<Eigen::Ref<const Matrix>> partition(const AdapterTensor& adapter) {
  std::vector<Eigen::Ref<const Matrix>> slots;
  slots.reserve(static_cast<std::size_t>(adapter.num_programs()));
  for (int n = 0; n < adapter.num_programs(); ++n) {
    slots.emplace_back(adapter.slot(n));
  }
  return slots;
}

std::vector<Eigen::Ref<Matrix>> partition_mut(AdapterTensor& adapter) {
  std::vector<Eigen::Ref<Matrix>> slots;
  slots.reserve(static_cast<std::size_t>(adapter.num_programs()));
  for (int n = 0; n < adapter.num_programs(); ++n) {
    slots.emplace_back(adapter.slot(n));
  }
  return slots;
}

Vector ScalingParams::gates() const {
  Vector g(s.size());
  for (Index n = 0; n < s.size(); ++n) {
    g(n) = sigmoid(s(n));
  }
  return g;
}

Matrix compose_head(const ConstVectorRef& alpha_bar, const ScalingParams& scaling,
                    const std::vector<Eigen::Ref<const Matrix>>& slots) {
  const Index n_slots = static_cast<Index>(slots.size());
  if (alpha_bar.size() != n_slots) {
    throw ShapeError("compose_head", Shape{n_slots, 1}, Shape{alpha_bar.size(), 1});
  }
  if (scaling.s.size() != n_slots) {
    throw ShapeError("compose_head", Shape{n_slots, 1}, Shape{scaling.s.size(), 1});
  }
  if (n_slots == 0) {
    throw EmptyInputError("compose_head: no slots");
  }
  Matrix out = Matrix::Zero(slots.front().rows(), slots.front().cols());
  for (Index n = 0; n < n_slots; ++n) {
    const auto& block = slots[static_cast<std::size_t>(n)];
    if (block.rows() != out.rows() || block.cols() != out.cols()) {
      throw ShapeError("compose_head", Shape{out.rows(), out.cols()},
                       Shape{block.rows(), block.cols()});
    }
    out.noalias() += alpha_bar(n) * sigmoid(scaling.s(n)) * block;
  }
  return out;
}

Matrix compose_all_heads(const ConstMatrixRef& batch_alpha, const ScalingParams& scaling,
                         const AdapterTensor& adapter) {
  const int n_heads = adapter.num_programs();
  if (batch_alpha.rows() != n_heads || batch_alpha.cols() != n_heads) {
    throw ShapeError("compose_all_heads", Shape{n_heads, n_heads},
                     Shape{batch_alpha.rows(), batch_alpha.cols()});
  }
  const auto slots = partition(adapter);
  Matrix out(adapter.rank(), adapter.dim());
  for (int h = 0; h < n_heads; ++h) {
    out.middleRows(static_cast<Index>(h) * adapter.slot_rows(), adapter.slot_rows()) =
        compose_head(batch_alpha.row(h).transpose(), scaling, slots);
  }
  return out;
}

Matrix compose_exec(const FrozenAnchor& anchor, const ConstMatrixRef& w_hat) {
  if (anchor.w_orig.rows() != w_hat.rows() || anchor.w_orig.cols() != w_hat.cols()) {
    throw ShapeError("compose_exec", Shape{anchor.w_orig.rows(), anchor.w_orig.cols()},
                     Shape{w_hat.rows(), w_hat.cols()});
  }
  return anchor.gamma * anchor.w_orig + w_hat;
}

Scalar init_gamma_logit(const ConstMatrixRef& w) {
  const Scalar scale = rms(w);
  if (scale <= 0.0) {
    throw InitError("init_gamma: adapter is all zero; re-initialize the weight");
  }
  return -std::log(scale);
}

Scalar init_gamma(const ConstMatrixRef& w) { return sigmoid(init_gamma_logit(w)); }

void consolidate(AdapterTensor& adapter, const ConstMatrixRef& w_exec, Scalar lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ValueError("consolidate: lambda must lie in [0, 1]");
  }
  Matrix& w = adapter.weight();
  if (w.rows() != w_exec.rows() || w.cols() != w_exec.cols()) {
    throw ShapeError("consolidate", Shape{w.rows(), w.cols()},
                     Shape{w_exec.rows(), w_exec.cols()});
  }
  w = (1.0 - lambda) * w + lambda * w_exec;
}

FrozenAnchor snapshot_anchor(const AdapterTensor& adapter, const ScalingParams& scaling) {
  return FrozenAnchor{adapter.weight(), scaling.gamma()};
}

}  // namespace procl
