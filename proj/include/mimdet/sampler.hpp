#pragma once

#include <cstdint>
#include <vector>

namespace mimdet {

enum class SampleMode { Random, Grid, Full };

struct SampleSpec {
  SampleMode mode = SampleMode::Full;
  double ratio = 1.0;        // fraction of tokens kept, in (0, 1]
  std::uint64_t seed = 0;    // Random mode only
  long grid_w = 0;           // Grid mode: token-grid width; 0 = treat the
                             // sequence as one row (flattened stride pattern)
};

/// Ordered partition of [0, n_tokens) into kept and dropped indices.
struct SampledSet {
  std::vector<long> kept;
  std::vector<long> dropped;
  long n_tokens = 0;
};

/// Random mode keeps a uniform subset of size clamp(floor(ratio*n), 1, n),
/// sorted ascending. Grid mode with a known width keeps token (i, j) when
/// (i + j) % s == 0 with s = round(1/ratio), which at 50% is the checkerboard
/// whose receptive fields tile the image; with unknown width it degenerates
/// to stride-s over the flattened sequence. Deterministic in (n_tokens, spec).
SampledSet sample_indices(long n_tokens, const SampleSpec& spec);

/// Fraction of input pixels inside the receptive field of at least one kept
/// token. Token (i, j)'s field is the rf x rf square centred at
/// (i*stride + stride/2, j*stride + stride/2), clipped to the image.
double coverage_fraction(const SampledSet& kept, long grid_h, long grid_w,
                         long rf, long stride, long img_h, long img_w);

}  // namespace mimdet
