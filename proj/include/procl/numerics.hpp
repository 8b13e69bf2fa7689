#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace procl {

// All arithmetic is double precision; the theory checks need ~1e-10 slack.
using Scalar = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using ConstMatrixRef = Eigen::Ref<const Matrix>;
using ConstVectorRef = Eigen::Ref<const Vector>;

struct Shape {
  Index rows = 0;
  Index cols = 0;
};

std::string to_string(const Shape& s);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension mismatch; carries both operand shapes.
class ShapeError : public Error {
 public:
  ShapeError(std::string_view op, Shape expected, Shape actual);
  const Shape& expected() const noexcept { return expected_; }
  const Shape& actual() const noexcept { return actual_; }

 private:
  Shape expected_;
  Shape actual_;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument value (range violations, non-finite data).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Rejected at configuration/construction time, not call time.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A call-ordering contract was violated (e.g. stale routing state).
class ContractError : public Error {
 public:
  using Error::Error;
};

class InitError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Dense kernel. Thin shape-checked layer over Eigen expressions; every entry
// point validates operand shapes and reports both sides on mismatch.
// ---------------------------------------------------------------------------

Matrix matmul(const ConstMatrixRef& a, const ConstMatrixRef& b);

/// Row-wise softmax with per-row max subtraction.
Matrix softmax_rows(const ConstMatrixRef& logits);

/// Softmax of a single logit vector.
Vector softmax(const ConstVectorRef& logits);

Scalar sigmoid(Scalar v) noexcept;
Scalar sigmoid_derivative(Scalar v) noexcept;

Vector mean_rows(const ConstMatrixRef& x);

/// Root mean square over all entries.
Scalar rms(const ConstMatrixRef& m);

Scalar frobenius_inner(const ConstMatrixRef& a, const ConstMatrixRef& b);

Matrix concat_rows(const std::vector<Matrix>& blocks);

bool all_finite(const ConstMatrixRef& m) noexcept;
void require_finite(const ConstMatrixRef& m, std::string_view op);

/// FNV-1a over the raw row-major bytes.
std::uint64_t checksum(const ConstMatrixRef& m) noexcept;

// ---------------------------------------------------------------------------
// Deterministic counter-based generator (splitmix64 over a Weyl sequence).
// Identical seed => bit-identical sample stream. Gaussian samples via
// Box-Muller from uniforms.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1).
  Scalar uniform() noexcept;

  /// Standard normal.
  Scalar gaussian() noexcept;

  Matrix gaussian_matrix(Index rows, Index cols, Scalar stddev);
  Vector gaussian_vector(Index n, Scalar stddev);

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  Scalar spare_ = 0.0;
};

/// Stable derivation of independent sub-streams from one base seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) noexcept;

}  // namespace procl
