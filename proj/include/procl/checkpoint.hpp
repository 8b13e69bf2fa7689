#pragma once

#include "procl/training.hpp"

#include <string>

namespace procl::io {

/// Adapter-only checkpoint: (rank, dim, num_programs, row-major weight, gate
/// logits, gamma logit) behind a versioned magic header. Round-trips are
/// bit-exact; see README for the byte layout.
struct AdapterCheckpoint {
  Matrix weight;
  int num_programs = 0;
  Vector s;
  Scalar gamma_logit = 0.0;
};

void save_adapter(const std::string& path, const AdapterTensor& adapter,
                  const ScalingParams& scaling);
AdapterCheckpoint load_adapter(const std::string& path);

/// Full model checkpoint: adapter plus the frozen base weight, the plain
/// factor, the task encoder, the key bank, and the anchor.
void save_model(const std::string& path, const ModelState& state);
ModelState load_model(const std::string& path);

}  // namespace procl::io
