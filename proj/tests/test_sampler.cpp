#include <doctest.h>

#include <algorithm>
#include <vector>

#include "mimdet/convstem.hpp"
#include "mimdet/sampler.hpp"

using namespace mimdet;

TEST_CASE("full ratio keeps everything") {
  SampledSet set = sample_indices(196, {SampleMode::Random, 1.0, 0});
  CHECK(set.kept.size() == 196);
  CHECK(set.dropped.empty());
  for (long i = 0; i < 196; ++i) CHECK(set.kept[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("half ratio keeps floor(0.5 * 196) = 98") {
  SampledSet set = sample_indices(196, {SampleMode::Random, 0.5, 1});
  CHECK(set.kept.size() == 98);
  CHECK(set.dropped.size() == 98);
}

TEST_CASE("flattened grid at 50% strides by two") {
  SampledSet set = sample_indices(16, {SampleMode::Grid, 0.5, 0});
  CHECK(set.kept == std::vector<long>{0, 2, 4, 6, 8, 10, 12, 14});
}

TEST_CASE("2d grid at 50% is the checkerboard") {
  SampleSpec spec{SampleMode::Grid, 0.5, 0, 4};
  SampledSet set = sample_indices(16, spec);
  CHECK(set.kept == std::vector<long>{0, 2, 5, 7, 8, 10, 13, 15});
}

TEST_CASE("ratio outside (0,1] rejected") {
  CHECK_THROWS_AS(sample_indices(10, {SampleMode::Random, 0.0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(sample_indices(10, {SampleMode::Random, 1.5, 0}), std::invalid_argument);
}

TEST_CASE("determinism and partition invariant") {
  for (std::uint64_t seed : {0ull, 7ull, 123456789ull}) {
    SampleSpec spec{SampleMode::Random, 0.3, seed};
    SampledSet a = sample_indices(57, spec);
    SampledSet b = sample_indices(57, spec);
    CHECK(a.kept == b.kept);
    CHECK(a.dropped == b.dropped);

    std::vector<long> all = a.kept;
    all.insert(all.end(), a.dropped.begin(), a.dropped.end());
    std::sort(all.begin(), all.end());
    for (long i = 0; i < 57; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
    CHECK(std::is_sorted(a.kept.begin(), a.kept.end()));
    CHECK(std::is_sorted(a.dropped.begin(), a.dropped.end()));
  }
}

TEST_CASE("random sampling is statistically uniform") {
  const long n = 196;
  std::vector<long> hits(static_cast<std::size_t>(n), 0);
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) {
    SampledSet set = sample_indices(n, {SampleMode::Random, 0.5, static_cast<std::uint64_t>(d)});
    for (long i : set.kept) hits[static_cast<std::size_t>(i)]++;
  }
  for (long i = 0; i < n; ++i) {
    const double freq = static_cast<double>(hits[static_cast<std::size_t>(i)]) / draws;
    CHECK(freq > 0.47);
    CHECK(freq < 0.53);
  }
}

TEST_CASE("coverage of the full set is 1") {
  SampledSet set = sample_indices(196, {SampleMode::Full});
  CHECK(coverage_fraction(set, 14, 14, 31, 16, 224, 224) == doctest::Approx(1.0));
}

TEST_CASE("rf=1 with half the tokens covers at most half") {
  SampledSet set = sample_indices(196, {SampleMode::Random, 0.5, 3});
  CHECK(coverage_fraction(set, 14, 14, 1, 16, 224, 224) <= 0.5);
}

TEST_CASE("checkerboard grid at 50% with rf 31 almost covers a 224x224 image") {
  SampleSpec spec{SampleMode::Grid, 0.5, 0, 14};
  SampledSet set = sample_indices(196, spec);
  const double frac = coverage_fraction(set, 14, 14, 31, 16, 224, 224);
  // Exact pixel-marking oracle; only isolated corner pixels stay uncovered.
  CHECK(frac >= 0.99);
}

TEST_CASE("coverage_fraction rejects grid mismatch") {
  SampledSet set = sample_indices(16, {SampleMode::Full});
  CHECK_THROWS_AS(coverage_fraction(set, 3, 3, 31, 16, 48, 48), std::invalid_argument);
}
