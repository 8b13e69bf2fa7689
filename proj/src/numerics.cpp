#include "procl/numerics.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

namespace procl {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s.rows << "x" << s.cols;
  return os.str();
}

namespace {

std::string shape_message(std::string_view op, const Shape& expected, const Shape& actual) {
  std::ostringstream os;
  os << op << ": shape mismatch, expected " << to_string(expected) << ", got "
     << to_string(actual);
  return os.str();
}

}  // namespace

ShapeError::ShapeError(std::string_view op, Shape expected, Shape actual)
    : Error(shape_message(op, expected, actual)), expected_(expected), actual_(actual) {}

Matrix matmul(const ConstMatrixRef& a, const ConstMatrixRef& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul", Shape{a.cols(), b.cols()}, Shape{b.rows(), b.cols()});
  }
  return a * b;
}

Matrix softmax_rows(const ConstMatrixRef& logits) {
  if (logits.cols() == 0) {
    throw EmptyInputError("softmax_rows: zero categories");
  }
  require_finite(logits, "softmax_rows");
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const Scalar peak = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - peak).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Vector softmax(const ConstVectorRef& logits) {
  if (logits.size() == 0) {
    throw EmptyInputError("softmax: zero categories");
  }
  Matrix row = logits.transpose();
  return softmax_rows(row).row(0).transpose();
}

Scalar sigmoid(Scalar v) noexcept {
  // Split on sign so exp never overflows.
  if (v >= 0.0) {
    return 1.0 / (1.0 + std::exp(-v));
  }
  const Scalar e = std::exp(v);
  return e / (1.0 + e);
}

Scalar sigmoid_derivative(Scalar v) noexcept {
  const Scalar s = sigmoid(v);
  return s * (1.0 - s);
}

Vector mean_rows(const ConstMatrixRef& x) {
  if (x.rows() == 0) {
    throw EmptyInputError("mean_rows: no rows to average");
  }
  return x.colwise().mean().transpose();
}

Scalar rms(const ConstMatrixRef& m) {
  if (m.size() == 0) {
    throw EmptyInputError("rms: empty matrix");
  }
  return std::sqrt(m.squaredNorm() / static_cast<Scalar>(m.size()));
}

Scalar frobenius_inner(const ConstMatrixRef& a, const ConstMatrixRef& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("frobenius_inner", Shape{a.rows(), a.cols()}, Shape{b.rows(), b.cols()});
  }
  return a.cwiseProduct(b).sum();
}

Matrix concat_rows(const std::vector<Matrix>& blocks) {
  if (blocks.empty()) {
    throw EmptyInputError("concat_rows: no blocks");
  }
  const Index cols = blocks.front().cols();
  Index rows = 0;
  for (const Matrix& block : blocks) {
    if (block.cols() != cols) {
      throw ShapeError("concat_rows", Shape{block.rows(), cols},
                       Shape{block.rows(), block.cols()});
    }
    rows += block.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Matrix& block : blocks) {
    out.middleRows(at, block.rows()) = block;
    at += block.rows();
  }
  return out;
}

bool all_finite(const ConstMatrixRef& m) noexcept { return m.allFinite(); }

void require_finite(const ConstMatrixRef& m, std::string_view op) {
  if (!m.allFinite()) {
    throw ValueError(std::string(op) + ": non-finite input");
  }
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

std::uint64_t fnv1a(const unsigned char* data, std::size_t n,
                    std::uint64_t h = kFnvOffset) noexcept {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= kFnvPrime;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t checksum(const ConstMatrixRef& m) noexcept {
  // Ref may carry an outer stride; hash row by row off the dense core.
  std::uint64_t h = kFnvOffset;
  for (Index i = 0; i < m.rows(); ++i) {
    h = fnv1a(reinterpret_cast<const unsigned char*>(m.row(i).data()),
              static_cast<std::size_t>(m.cols()) * sizeof(Scalar), h);
  }
  return h;
}

std::uint64_t Rng::next_u64() noexcept {
  state_ += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Scalar Rng::uniform() noexcept {
  return static_cast<Scalar>(next_u64() >> 11) * 0x1.0p-53;
}

Scalar Rng::gaussian() noexcept {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] so the log is finite.
  const Scalar u1 = static_cast<Scalar>((next_u64() >> 11) + 1) * 0x1.0p-53;
  const Scalar u2 = static_cast<Scalar>(next_u64() >> 11) * 0x1.0p-53;
  const Scalar radius = std::sqrt(-2.0 * std::log(u1));
  const Scalar angle = 2.0 * std::numbers::pi_v<Scalar> * u2;
  spare_ = radius * std::sin(angle);
  have_spare_ = true;
  return radius * std::cos(angle);
}

Matrix Rng::gaussian_matrix(Index rows, Index cols, Scalar stddev) {
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      out(i, j) = stddev * gaussian();
    }
  }
  return out;
}

Vector Rng::gaussian_vector(Index n, Scalar stddev) {
  Vector out(n);
  for (Index i = 0; i < n; ++i) {
    out(i) = stddev * gaussian();
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) noexcept {
  return splitmix64(splitmix64(seed) ^ splitmix64(tag * 0x9e3779b97f4a7c15ull + 1));
}

}  // namespace procl
