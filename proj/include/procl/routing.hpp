#pragma once

#include "procl/numerics.hpp"

namespace procl {

/// Affine map from a pooled input to N stacked task keys of width key_dim.
struct TaskEncoder {
  Matrix weight;  // (N*key_dim) x D
  Vector bias;    // N*key_dim
  int num_programs = 0;
  int key_dim = 0;

  static TaskEncoder init(int num_programs, int key_dim, Index dim, Rng& rng);
};

/// N learnable key vectors per head, one head per program slot.
struct KeyBank {
  std::vector<Matrix> keys;  // head h -> N x key_dim

  static KeyBank init(int num_programs, int key_dim, Rng& rng);
  int num_heads() const noexcept { return static_cast<int>(keys.size()); }
};

struct RoutingState {
  std::vector<Matrix> per_sample_alpha;  // head h -> B x N, row b = alpha_h^(b)
  Matrix batch_alpha;                    // N x N, row h = mean over the batch
  std::uint64_t batch_tag = 0;           // checksum of the pooled batch, staleness guard

  Index batch_size() const noexcept {
    return per_sample_alpha.empty() ? 0 : per_sample_alpha.front().rows();
  }
};

/// Mean pooling over the token axis.
Vector pool_input(const ConstMatrixRef& x);

/// Pool every sample of a batch into a B x D matrix, one row per sample.
Matrix pool_batch(const std::vector<Matrix>& x_batch);

/// Task keys for one pooled input: reshape(weight*z + bias) as N x key_dim.
Matrix encode(const ConstVectorRef& z, const TaskEncoder& enc);

/// Attention of one task key over one head's key bank. Raw dot-product
/// logits, deliberately without a 1/sqrt(key_dim) factor.
Vector head_attention(const ConstVectorRef& q_h, const ConstMatrixRef& keys_h);

RoutingState route_batch(const std::vector<Matrix>& x_batch, const TaskEncoder& enc,
                         const KeyBank& keys);

/// Same pipeline when the pooled rows are already available.
RoutingState route_pooled(const ConstMatrixRef& pooled, const TaskEncoder& enc,
                          const KeyBank& keys);

/// Shannon entropy in nats of a routing distribution.
Scalar routing_entropy(const ConstVectorRef& alpha);

}  // namespace procl
