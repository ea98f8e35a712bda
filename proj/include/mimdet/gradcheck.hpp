#pragma once

#include <cstdint>
#include <string>

#include "mimdet/pipeline.hpp"

namespace mimdet {

struct GradCheckResult {
  double max_rel_err = 0.0;
  long checked = 0;
  std::string worst_param;
};

/// Central-difference check of the training loss against the tape gradients
/// on `n_samples` randomly chosen parameter entries. The finite-difference
/// side only ever calls the tape-free forward. Entries where both gradients
/// are below 1e-6 are compared absolutely at 1e-10 instead of relatively.
GradCheckResult finite_difference_check(TrainState& state, const Tensor& batch,
                                        long n_samples, std::uint64_t seed,
                                        double step = 1e-5);

}  // namespace mimdet
