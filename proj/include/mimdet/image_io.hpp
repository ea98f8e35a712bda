#pragma once

#include <string>

#include "mimdet/tensor.hpp"

namespace mimdet {

/// Binary P6 PPM -> [1,3,H,W], values scaled to [0,1].
Tensor read_image_ppm(const std::string& path);

/// Writes <dir>/<name>_mean.pgm and <dir>/<name>_var.pgm for a [C,H,W] map:
/// the per-position channel mean and channel variance, each min-max
/// normalized to 8-bit (a constant map writes all zeros). Binary P5.
void write_feature_pgm(const Tensor& map, const std::string& dir, const std::string& name);

/// 8-bit P5 PGM -> [H,W] with values in [0,1]; for reading dumps back in tests.
Tensor read_image_pgm(const std::string& path);

}  // namespace mimdet
