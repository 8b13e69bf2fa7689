#include "procl/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace procl::io {

namespace {

constexpr char kAdapterMagic[8] = {'P', 'R', 'O', 'C', 'L', 'A', 'D', '1'};
constexpr char kModelMagic[8] = {'P', 'R', 'O', 'C', 'L', 'M', 'D', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) {
    bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) {
    throw Error("checkpoint: truncated file");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  }
  return v;
}

void write_scalar(std::ostream& out, Scalar v) {
  static_assert(sizeof(Scalar) == 8);
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

Scalar read_scalar(std::istream& in) {
  const std::uint64_t bits = read_u64(in);
  Scalar v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_matrix(std::ostream& out, const ConstMatrixRef& m) {
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      write_scalar(out, m(i, j));
    }
  }
}

Matrix read_matrix(std::istream& in) {
  const auto rows = static_cast<Index>(read_u64(in));
  const auto cols = static_cast<Index>(read_u64(in));
  if (rows < 0 || cols < 0 || rows * cols > (Index{1} << 30)) {
    throw Error("checkpoint: implausible matrix header");
  }
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      m(i, j) = read_scalar(in);
    }
  }
  return m;
}

void write_vector(std::ostream& out, const ConstVectorRef& v) {
  write_u64(out, static_cast<std::uint64_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) {
    write_scalar(out, v(i));
  }
}

Vector read_vector(std::istream& in) {
  const auto n = static_cast<Index>(read_u64(in));
  if (n < 0 || n > (Index{1} << 30)) {
    throw Error("checkpoint: implausible vector header");
  }
  Vector v(n);
  for (Index i = 0; i < n; ++i) {
    v(i) = read_scalar(in);
  }
  return v;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("checkpoint: cannot open for writing: " + path);
  }
  return out;
}

std::ifstream open_in(const std::string& path, const char (&magic)[8]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("checkpoint: cannot open: " + path);
  }
  char header[8];
  in.read(header, 8);
  if (!in || std::memcmp(header, magic, 8) != 0) {
    throw Error("checkpoint: bad magic in " + path);
  }
  return in;
}

}  // namespace

void save_adapter(const std::string& path, const AdapterTensor& adapter,
                  const ScalingParams& scaling) {
  std::ofstream out = open_out(path);
  out.write(kAdapterMagic, 8);
  write_u64(out, static_cast<std::uint64_t>(adapter.num_programs()));
  write_matrix(out, adapter.weight());
  write_vector(out, scaling.s);
  write_scalar(out, scaling.gamma_logit);
  if (!out) {
    throw Error("checkpoint: write failed: " + path);
  }
}

AdapterCheckpoint load_adapter(const std::string& path) {
  std::ifstream in = open_in(path, kAdapterMagic);
  AdapterCheckpoint ckpt;
  ckpt.num_programs = static_cast<int>(read_u64(in));
  ckpt.weight = read_matrix(in);
  ckpt.s = read_vector(in);
  ckpt.gamma_logit = read_scalar(in);
  return ckpt;
}

void save_model(const std::string& path, const ModelState& state) {
  std::ofstream out = open_out(path);
  out.write(kModelMagic, 8);
  write_u64(out, static_cast<std::uint64_t>(state.adapter.num_programs()));
  write_u64(out, static_cast<std::uint64_t>(state.encoder.key_dim));
  write_matrix(out, state.w0);
  write_matrix(out, state.a);
  write_matrix(out, state.adapter.weight());
  write_vector(out, state.scaling.s);
  write_scalar(out, state.scaling.gamma_logit);
  write_matrix(out, state.encoder.weight);
  write_vector(out, state.encoder.bias);
  for (const Matrix& k : state.keys.keys) {
    write_matrix(out, k);
  }
  write_matrix(out, state.anchor.w_orig);
  write_scalar(out, state.anchor.gamma);
  if (!out) {
    throw Error("checkpoint: write failed: " + path);
  }
}

ModelState load_model(const std::string& path) {
  std::ifstream in = open_in(path, kModelMagic);
  const int num_programs = static_cast<int>(read_u64(in));
  const int key_dim = static_cast<int>(read_u64(in));
  Matrix w0 = read_matrix(in);
  Matrix a = read_matrix(in);
  Matrix w = read_matrix(in);

  ScalingParams scaling;
  scaling.s = read_vector(in);
  scaling.gamma_logit = read_scalar(in);

  TaskEncoder encoder;
  encoder.num_programs = num_programs;
  encoder.key_dim = key_dim;
  encoder.weight = read_matrix(in);
  encoder.bias = read_vector(in);

  KeyBank keys;
  keys.keys.reserve(static_cast<std::size_t>(num_programs));
  for (int h = 0; h < num_programs; ++h) {
    keys.keys.push_back(read_matrix(in));
  }

  ModelState state(std::move(w0), std::move(a), AdapterTensor(std::move(w), num_programs),
                   std::move(encoder), std::move(keys), std::move(scaling));
  state.anchor.w_orig = read_matrix(in);
  state.anchor.gamma = read_scalar(in);
  return state;
}

}  // namespace procl::io
