#include "mimdet/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mimdet/random.hpp"

namespace mimdet {

namespace {

std::vector<long> complement(const std::vector<long>& kept, long n) {
  std::vector<char> in(static_cast<std::size_t>(n), 0);
  for (long i : kept) in[static_cast<std::size_t>(i)] = 1;
  std::vector<long> out;
  out.reserve(static_cast<std::size_t>(n) - kept.size());
  for (long i = 0; i < n; ++i)
    if (!in[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

}  // namespace

SampledSet sample_indices(long n_tokens, const SampleSpec& spec) {
  if (n_tokens < 1) throw std::invalid_argument("sample_indices: n_tokens must be >= 1");
  if (spec.mode != SampleMode::Full && (spec.ratio <= 0.0 || spec.ratio > 1.0))
    throw std::invalid_argument("sample_indices: ratio must lie in (0, 1]");

  SampledSet set;
  set.n_tokens = n_tokens;

  switch (spec.mode) {
    case SampleMode::Full: {
      set.kept.resize(static_cast<std::size_t>(n_tokens));
      std::iota(set.kept.begin(), set.kept.end(), 0L);
      break;
    }
    case SampleMode::Random: {
      const long m = std::clamp(static_cast<long>(std::floor(spec.ratio * static_cast<double>(n_tokens))), 1L, n_tokens);
      std::vector<long> pool(static_cast<std::size_t>(n_tokens));
      std::iota(pool.begin(), pool.end(), 0L);
      Rng rng(spec.seed);
      // Partial Fisher-Yates: the first m slots end up a uniform subset.
      for (long i = 0; i < m; ++i) {
        const long j = i + rng.below(n_tokens - i);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      }
      set.kept.assign(pool.begin(), pool.begin() + m);
      std::sort(set.kept.begin(), set.kept.end());
      break;
    }
    case SampleMode::Grid: {
      const long s = std::max(1L, std::lround(1.0 / spec.ratio));
      const long w = (spec.grid_w > 0 && n_tokens % spec.grid_w == 0) ? spec.grid_w : n_tokens;
      for (long idx = 0; idx < n_tokens; ++idx) {
        const long i = idx / w, j = idx % w;
        if ((i + j) % s == 0) set.kept.push_back(idx);
      }
      break;
    }
  }
  set.dropped = complement(set.kept, n_tokens);
  return set;
}

double coverage_fraction(const SampledSet& set, long grid_h, long grid_w,
                         long rf, long stride, long img_h, long img_w) {
  if (grid_h * grid_w != set.n_tokens)
    throw std::invalid_argument("coverage_fraction: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                " does not match " + std::to_string(set.n_tokens) + " tokens");
  const long half = rf / 2;
  std::vector<char> covered(static_cast<std::size_t>(img_h * img_w), 0);
  for (long idx : set.kept) {
    const long i = idx / grid_w, j = idx % grid_w;
    const long cy = i * stride + stride / 2;
    const long cx = j * stride + stride / 2;
    const long y0 = std::max(0L, cy - half), y1 = std::min(img_h - 1, cy + half);
    const long x0 = std::max(0L, cx - half), x1 = std::min(img_w - 1, cx + half);
    for (long y = y0; y <= y1; ++y)
      std::fill(covered.begin() + y * img_w + x0, covered.begin() + y * img_w + x1 + 1, char(1));
  }
  const long hits = std::count(covered.begin(), covered.end(), char(1));
  return static_cast<double>(hits) / static_cast<double>(img_h * img_w);
}

}  // namespace mimdet
