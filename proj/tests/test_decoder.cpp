#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mimdet/decoder.hpp"
#include "mimdet/random.hpp"
#include "mimdet/vit_encoder.hpp"
#include "test_util.hpp"

using namespace mimdet;
using namespace testutil;

namespace {

constexpr long kEncDim = 16;

ParamStore decoder_params(const DecoderConfig& cfg, std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed);
  declare_decoder_params(cfg, kEncDim, "decoder", [&](const std::string& name, const Shape& shape) {
    Tensor& t = store.add(name, shape);
    if (name.find(".gamma") != std::string::npos)
      for (long i = 0; i < t.numel(); ++i) t[i] = 1.0;
    else if (name.find(".beta") == std::string::npos && name.find(".bias") == std::string::npos)
      trunc_normal_fill(t, rng, 0.02);
  });
  return store;
}

// Same store layout under the other fill mode, with every shared tensor
// copied over so the two stores differ only in the fill parameters.
ParamStore with_fill_mode(const ParamStore& src, const DecoderConfig& cfg, FillMode mode,
                          std::uint64_t seed) {
  DecoderConfig other = cfg;
  other.fill = mode;
  ParamStore dst = decoder_params(other, seed);
  for (const std::string& name : dst.names()) {
    if (!src.has(name)) continue;
    Tensor& d = dst.at(name);
    const Tensor& s = src.at(name);
    for (long i = 0; i < d.numel(); ++i) d[i] = s[i];
  }
  return dst;
}

SampledSet explicit_set(std::vector<long> kept, long n) {
  SampledSet set;
  set.kept = std::move(kept);
  set.n_tokens = n;
  for (long i = 0; i < n; ++i)
    if (std::find(set.kept.begin(), set.kept.end(), i) == set.kept.end())
      set.dropped.push_back(i);
  return set;
}

}  // namespace

TEST_CASE("full set makes both fill modes agree exactly") {
  DecoderConfig cfg{8, 1, 2, FillMode::ConvStemFeature, 4.0, 1e-6};
  ParamStore conv_params = decoder_params(cfg, 0);
  ParamStore mask_params = with_fill_mode(conv_params, cfg, FillMode::MaskToken, 1);
  DecoderConfig mask_cfg = cfg;
  mask_cfg.fill = FillMode::MaskToken;

  Rng rng(2);
  Tensor stem = random_tensor({1, 4, kEncDim}, rng);
  Tensor encoded = random_tensor({1, 4, kEncDim}, rng);
  SampledSet full = explicit_set({0, 1, 2, 3}, 4);

  Value a = fill_full_sequence(nullptr, constant(encoded), constant(stem), full, cfg,
                               ParamRef(conv_params), 2, 2);
  Value b = fill_full_sequence(nullptr, constant(encoded), constant(stem), full, mask_cfg,
                               ParamRef(mask_params), 2, 2);
  CHECK(max_abs_diff(a.v, b.v) == 0.0);
}

TEST_CASE("mask-token mode fills dropped rows with token plus position embedding") {
  DecoderConfig cfg{8, 1, 2, FillMode::MaskToken, 4.0, 1e-6};
  ParamStore params = decoder_params(cfg, 3);
  ParamRef ref(params);
  Rng rng(4);
  Tensor stem = random_tensor({1, 4, kEncDim}, rng);
  Tensor encoded = random_tensor({1, 2, kEncDim}, rng);
  SampledSet set = explicit_set({0, 3}, 4);

  Value seq = fill_full_sequence(nullptr, constant(encoded), constant(stem), set, cfg, ref, 2, 2);
  const Tensor& token = params.at("decoder.mask_token");
  Tensor pos = pos_embed_2d(2, 2, cfg.dim);
  for (long i : set.dropped)
    for (long d = 0; d < cfg.dim; ++d)
      CHECK(seq.v[i * cfg.dim + d] == token[d] + pos[i * cfg.dim + d]);
}

TEST_CASE("kept rows are identical across fill modes") {
  DecoderConfig cfg{8, 1, 2, FillMode::ConvStemFeature, 4.0, 1e-6};
  ParamStore conv_params = decoder_params(cfg, 5);
  ParamStore mask_params = with_fill_mode(conv_params, cfg, FillMode::MaskToken, 6);
  DecoderConfig mask_cfg = cfg;
  mask_cfg.fill = FillMode::MaskToken;

  Rng rng(7);
  Tensor stem = random_tensor({2, 9, kEncDim}, rng);
  Tensor encoded = random_tensor({2, 4, kEncDim}, rng);
  SampledSet set = explicit_set({0, 2, 5, 7}, 9);

  Value a = fill_full_sequence(nullptr, constant(encoded), constant(stem), set, cfg,
                               ParamRef(conv_params), 3, 3);
  Value b = fill_full_sequence(nullptr, constant(encoded), constant(stem), set, mask_cfg,
                               ParamRef(mask_params), 3, 3);
  bool dropped_differ = false;
  for (long n = 0; n < 2; ++n) {
    for (long i : set.kept)
      for (long d = 0; d < cfg.dim; ++d)
        CHECK(a.v[(n * 9 + i) * cfg.dim + d] == b.v[(n * 9 + i) * cfg.dim + d]);
    for (long i : set.dropped)
      for (long d = 0; d < cfg.dim; ++d)
        dropped_differ |= a.v[(n * 9 + i) * cfg.dim + d] != b.v[(n * 9 + i) * cfg.dim + d];
  }
  CHECK(dropped_differ);
}

TEST_CASE("kept rows equal the projected encoder rows before position embedding") {
  DecoderConfig cfg{8, 1, 2, FillMode::ConvStemFeature, 4.0, 1e-6};
  ParamStore params = decoder_params(cfg, 8);
  ParamRef ref(params);
  Rng rng(9);
  Tensor stem = random_tensor({1, 4, kEncDim}, rng);
  Tensor encoded = random_tensor({1, 2, kEncDim}, rng);
  SampledSet set = explicit_set({1, 2}, 4);

  Value seq = fill_full_sequence(nullptr, constant(encoded), constant(stem), set, cfg, ref, 2, 2);
  Value proj = linear(nullptr, constant(encoded), ref("decoder.enc_to_dec.weight"),
                      ref("decoder.enc_to_dec.bias"));
  Tensor pos = pos_embed_2d(2, 2, cfg.dim);
  for (std::size_t k = 0; k < set.kept.size(); ++k) {
    const long i = set.kept[k];
    for (long d = 0; d < cfg.dim; ++d)
      CHECK(std::abs(seq.v[i * cfg.dim + d] - pos[i * cfg.dim + d] -
                     proj.v[static_cast<long>(k) * cfg.dim + d]) < 1e-12);
  }
}

TEST_CASE("depth 0 decode is the final norm plus a reshape") {
  DecoderConfig cfg{8, 0, 2, FillMode::ConvStemFeature, 4.0, 1e-6};
  ParamStore params = decoder_params(cfg, 10);
  ParamRef ref(params);
  Rng rng(11);
  Tensor seq = random_tensor({2, 6, cfg.dim}, rng);

  Value out = decode(nullptr, constant(seq), cfg, ref, 2, 3);
  CHECK(out.v.shape() == Shape{2, cfg.dim, 2, 3});
  Value expected = layer_norm_channels(nullptr, constant(seq), ref("decoder.norm.gamma"),
                                       ref("decoder.norm.beta"), cfg.eps);
  expected = seq_to_map(nullptr, expected, 2, 3);
  CHECK(max_abs_diff(out.v, expected.v) == 0.0);
}

TEST_CASE("decode rejects a sequence that does not match the grid") {
  DecoderConfig cfg{8, 0, 2, FillMode::ConvStemFeature, 4.0, 1e-6};
  ParamStore params = decoder_params(cfg, 12);
  ParamRef ref(params);
  CHECK_THROWS_AS(decode(nullptr, constant(Tensor({1, 5, 8})), cfg, ref, 2, 3),
                  std::invalid_argument);
}

TEST_CASE("parameter count grows by a fixed block increment over depth") {
  std::vector<long> counts;
  for (long depth : {1L, 2L, 4L, 8L}) {
    DecoderConfig cfg{32, depth, 4, FillMode::ConvStemFeature, 4.0, 1e-6};
    counts.push_back(decoder_param_count(cfg, kEncDim));
  }
  CHECK(counts[0] < counts[1]);
  CHECK(counts[1] < counts[2]);
  CHECK(counts[2] < counts[3]);
  const long per_block = counts[1] - counts[0];
  CHECK(counts[2] - counts[1] == 2 * per_block);
  CHECK(counts[3] - counts[2] == 4 * per_block);
}

TEST_CASE("a change in one filled row reaches every output position") {
  DecoderConfig cfg{8, 1, 2, FillMode::ConvStemFeature, 4.0, 1e-6};
  ParamStore params = decoder_params(cfg, 13);
  ParamRef ref(params);
  Rng rng(14);
  Tensor stem = random_tensor({1, 9, kEncDim}, rng);
  Tensor encoded = random_tensor({1, 4, kEncDim}, rng);
  SampledSet set = explicit_set({0, 2, 5, 7}, 9);

  auto run = [&](const Tensor& stem_in) {
    Value seq = fill_full_sequence(nullptr, constant(encoded), constant(stem_in), set, cfg, ref, 3, 3);
    return decode(nullptr, seq, cfg, ref, 3, 3).v;
  };
  Tensor base = run(stem);
  Tensor stem2 = stem.clone();
  const long dropped = set.dropped[1];
  stem2[dropped * kEncDim] += 0.5;  // perturb one dropped-row stem feature
  Tensor pert = run(stem2);

  // Attention is global, so even kept positions move.
  for (long i = 0; i < 9; ++i) {
    double diff = 0;
    for (long c = 0; c < cfg.dim; ++c)
      diff = std::max(diff, std::abs(base[(c * 3 + i / 3) * 3 + i % 3] -
                                     pert[(c * 3 + i / 3) * 3 + i % 3]));
    CHECK(diff > 0.0);
  }
}
