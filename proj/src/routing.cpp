#include "procl/routing.hpp"

#include <cmath>

namespace procl {

TaskEncoder TaskEncoder::init(int num_programs, int key_dim, Index dim, Rng& rng) {
  if (num_programs < 1 || key_dim < 1 || dim < 1) {
    throw ConfigError("TaskEncoder::init: dimensions must be positive");
  }
  TaskEncoder enc;
  enc.num_programs = num_programs;
  enc.key_dim = key_dim;
  const Index out = static_cast<Index>(num_programs) * key_dim;
  enc.weight = rng.gaussian_matrix(out, dim, 1.0 / std::sqrt(static_cast<Scalar>(dim)));
  enc.bias = Vector::Zero(out);
  return enc;
}

KeyBank KeyBank::init(int num_programs, int key_dim, Rng& rng) {
  if (num_programs < 1 || key_dim < 1) {
    throw ConfigError("KeyBank::init: dimensions must be positive");
  }
  KeyBank bank;
  bank.keys.reserve(static_cast<std::size_t>(num_programs));
  const Scalar stddev = 1.0 / std::sqrt(static_cast<Scalar>(key_dim));
  for (int h = 0; h < num_programs; ++h) {
    bank.keys.push_back(rng.gaussian_matrix(num_programs, key_dim, stddev));
  }
  return bank;
}

Vector pool_input(const ConstMatrixRef& x) {
  if (x.rows() == 0) {
    throw EmptyInputError("pool_input: no tokens");
  }
  return mean_rows(x);
}

Matrix pool_batch(const std::vector<Matrix>& x_batch) {
  if (x_batch.empty()) {
    throw EmptyInputError("pool_batch: empty batch");
  }
  const Index dim = x_batch.front().cols();
  Matrix pooled(static_cast<Index>(x_batch.size()), dim);
  for (std::size_t b = 0; b < x_batch.size(); ++b) {
    if (x_batch[b].cols() != dim) {
      throw ShapeError("pool_batch", Shape{x_batch[b].rows(), dim},
                       Shape{x_batch[b].rows(), x_batch[b].cols()});
    }
    pooled.row(static_cast<Index>(b)) = pool_input(x_batch[b]).transpose();
  }
  return pooled;
}

Matrix encode(const ConstVectorRef& z, const TaskEncoder& enc) {
  if (z.size() != enc.weight.cols()) {
    throw ShapeError("encode", Shape{enc.weight.cols(), 1}, Shape{z.size(), 1});
  }
  const Vector flat = enc.weight * z + enc.bias;
  // Row-major reshape: key row h of the output is the h-th key_dim chunk.
  Matrix q(enc.num_programs, enc.key_dim);
  for (Index h = 0; h < q.rows(); ++h) {
    q.row(h) = flat.segment(h * enc.key_dim, enc.key_dim).transpose();
  }
  return q;
}

Vector head_attention(const ConstVectorRef& q_h, const ConstMatrixRef& keys_h) {
  if (q_h.size() != keys_h.cols()) {
    throw ShapeError("head_attention", Shape{keys_h.rows(), q_h.size()},
                     Shape{keys_h.rows(), keys_h.cols()});
  }
  return softmax(keys_h * q_h);
}

RoutingState route_pooled(const ConstMatrixRef& pooled, const TaskEncoder& enc,
                          const KeyBank& keys) {
  if (pooled.rows() == 0) {
    throw EmptyInputError("route_pooled: empty batch");
  }
  const int n_heads = keys.num_heads();
  if (n_heads != enc.num_programs) {
    throw ConfigError("route_pooled: encoder and key bank disagree on head count");
  }
  const Index batch = pooled.rows();
  RoutingState state;
  state.per_sample_alpha.assign(static_cast<std::size_t>(n_heads),
                                Matrix(batch, n_heads));
  for (Index b = 0; b < batch; ++b) {
    const Matrix q = encode(pooled.row(b).transpose(), enc);
    for (int h = 0; h < n_heads; ++h) {
      state.per_sample_alpha[static_cast<std::size_t>(h)].row(b) =
          head_attention(q.row(h).transpose(), keys.keys[static_cast<std::size_t>(h)])
              .transpose();
    }
  }
  state.batch_alpha.resize(n_heads, n_heads);
  for (int h = 0; h < n_heads; ++h) {
    state.batch_alpha.row(h) =
        state.per_sample_alpha[static_cast<std::size_t>(h)].colwise().mean();
  }
  state.batch_tag = checksum(pooled);
  return state;
}

RoutingState route_batch(const std::vector<Matrix>& x_batch, const TaskEncoder& enc,
                         const KeyBank& keys) {
  return route_pooled(pool_batch(x_batch), enc, keys);
}

Scalar routing_entropy(const ConstVectorRef& alpha) {
  Scalar h = 0.0;
  for (Index i = 0; i < alpha.size(); ++i) {
    const Scalar p = alpha(i);
    if (p < 0.0) {
      throw ValueError("routing_entropy: negative probability");
    }
    if (p > 0.0) {
      h -= p * std::log(p);
    }
  }
  return h;
}

}  // namespace procl
