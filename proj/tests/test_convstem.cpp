#include <doctest.h>

#include <cmath>

#include "mimdet/convstem.hpp"
#include "mimdet/pipeline.hpp"
#include "test_util.hpp"

using namespace mimdet;
using namespace testutil;

namespace {

ParamStore stem_params(const ConvStemConfig& cfg, std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed);
  declare_convstem_params(cfg, "convstem", [&](const std::string& name, const Shape& shape) {
    Tensor& t = store.add(name, shape);
    if (name.find(".gamma") != std::string::npos)
      for (long i = 0; i < t.numel(); ++i) t[i] = 1.0;
    else if (name.find(".beta") == std::string::npos && name.find(".bias") == std::string::npos)
      trunc_normal_fill(t, rng, 0.02);
  });
  return store;
}

}  // namespace

TEST_CASE("full-scale output shapes") {
  ConvStemConfig cfg = ConvStemConfig::full_scale();
  ParamStore params = stem_params(cfg, 0);
  ParamRef ref(params);
  Tensor img({1, 3, 224, 224});
  ConvStemOutput out = convstem_forward(nullptr, constant(img), cfg, ref);
  CHECK(out.s4.v.shape() == Shape{1, 192, 56, 56});
  CHECK(out.s8.v.shape() == Shape{1, 384, 28, 28});
  CHECK(out.tokens.v.shape() == Shape{1, 196, 768});
}

TEST_CASE("desk-scale output shapes") {
  ConvStemConfig cfg = ConvStemConfig::desk();
  ParamStore params = stem_params(cfg, 0);
  ParamRef ref(params);
  ConvStemOutput out = convstem_forward(nullptr, constant(Tensor({1, 3, 64, 64})), cfg, ref);
  CHECK(out.s4.v.shape() == Shape{1, 16, 16, 16});
  CHECK(out.s8.v.shape() == Shape{1, 32, 8, 8});
  CHECK(out.tokens.v.shape() == Shape{1, 16, 64});
}

TEST_CASE("zero image with zero weights gives zero outputs") {
  ConvStemConfig cfg = ConvStemConfig::desk();
  ParamStore params;
  declare_convstem_params(cfg, "convstem", [&](const std::string& name, const Shape& shape) {
    Tensor& t = params.add(name, shape);
    if (name.find(".gamma") != std::string::npos)
      for (long i = 0; i < t.numel(); ++i) t[i] = 1.0;
  });
  ParamRef ref(params);
  ConvStemOutput out = convstem_forward(nullptr, constant(Tensor({1, 3, 32, 32})), cfg, ref);
  for (const Value* v : {&out.s4, &out.s8, &out.tokens})
    for (long i = 0; i < v->v.numel(); ++i) CHECK(v->v[i] == 0.0);
}

TEST_CASE("indivisible extents rejected with padding hint") {
  ConvStemConfig cfg = ConvStemConfig::desk();
  ParamStore params = stem_params(cfg, 0);
  ParamRef ref(params);
  CHECK_THROWS_WITH_AS(convstem_forward(nullptr, constant(Tensor({1, 3, 60, 64})), cfg, ref),
                       doctest::Contains("divisible by 16"), std::invalid_argument);
}

TEST_CASE("full-scale parameter count is exactly 4079712") {
  CHECK(convstem_param_count(ConvStemConfig::full_scale()) == 4079712);
}

TEST_CASE("tiny config count matches enumeration of declared tensors") {
  ConvStemConfig cfg{1, 1, 1, 1e-6};
  // Hand enumeration: stage convs 9, 18, 72, 288; norms 2+4+8+16; 1x1 8+1.
  CHECK(convstem_param_count(cfg) == 9 + 18 + 72 + 288 + 2 + 4 + 8 + 16 + 8 + 1);
  ParamStore params = stem_params(cfg, 0);
  CHECK(params.total_elements() == convstem_param_count(cfg));
}

TEST_CASE("count equals what the optimizer updates") {
  ModelConfig cfg = ModelConfig::desk();
  TrainState state = make_train_state(cfg, 0);
  const ParamReport report = param_report(cfg);
  CHECK(state.params.total_elements() == report.extractor_total + report.head);
}

TEST_CASE("receptive field recurrence") {
  auto [rf, stride] = convstem_receptive_field(ConvStemConfig::full_scale());
  CHECK(rf == 31);
  CHECK(stride == 16);
  auto single = receptive_field({{3, 2}});
  CHECK(single.first == 3);
  CHECK(single.second == 2);
}

TEST_CASE("perturbing one pixel touches tokens consistent with rf 31") {
  // Full channel widths, reduced image; receptive field depends only on the
  // layer geometry.
  ConvStemConfig cfg = ConvStemConfig::full_scale();
  ParamStore params = stem_params(cfg, 1);
  ParamRef ref(params);
  Rng rng(2);
  Tensor img = random_tensor({1, 3, 96, 96}, rng, 0.5);
  ConvStemOutput base = convstem_forward(nullptr, constant(img), cfg, ref);

  const long py = 47, px = 47;  // centre pixel
  Tensor img2 = img.clone();
  img2[(0 * 96 + py) * 96 + px] += 1.0;
  ConvStemOutput pert = convstem_forward(nullptr, constant(img2), cfg, ref);

  // With padding 1 per stage, token (i,j)'s rf 31 square is centred at
  // (16i, 16j); the pixel must lie inside it to move the token.
  const long grid = 6;
  for (long i = 0; i < grid; ++i)
    for (long j = 0; j < grid; ++j) {
      double diff = 0;
      for (long d = 0; d < cfg.out_dim; ++d) {
        const long off = (i * grid + j) * cfg.out_dim + d;
        diff = std::max(diff, std::abs(base.tokens.v[off] - pert.tokens.v[off]));
      }
      const bool inside = std::abs(16 * i - py) <= 15 && std::abs(16 * j - px) <= 15;
      if (inside)
        CHECK(diff > 0.0);
      else
        CHECK(diff == 0.0);
    }
}

TEST_CASE("shifting the input by 16 pixels shifts tokens by one cell") {
  ConvStemConfig cfg = ConvStemConfig::desk();
  ParamStore params = stem_params(cfg, 3);
  ParamRef ref(params);
  Rng rng(4);
  const long H = 96, W = 96, grid = 6;
  Tensor img = random_tensor({1, 3, H, W}, rng, 0.5);
  Tensor shifted({1, 3, H, W});
  for (long c = 0; c < 3; ++c)
    for (long y = 0; y < H; ++y)
      for (long x = 16; x < W; ++x)
        shifted[(c * H + y) * W + x] = img[(c * H + y) * W + x - 16];

  ConvStemOutput a = convstem_forward(nullptr, constant(img), cfg, ref);
  ConvStemOutput b = convstem_forward(nullptr, constant(shifted), cfg, ref);
  // Interior cells: the rf of both the shifted token and its source must
  // avoid the image borders and the shifted-in strip.
  for (long i = 1; i < grid - 1; ++i)
    for (long j = 2; j < grid - 1; ++j)
      for (long d = 0; d < cfg.out_dim; ++d) {
        const double moved = b.tokens.v[(i * grid + j) * cfg.out_dim + d];
        const double orig = a.tokens.v[(i * grid + j - 1) * cfg.out_dim + d];
        CHECK(std::abs(moved - orig) < 1e-9);
      }
}

TEST_CASE("stem is under 5% of the ViT-Base encoder") {
  const ParamReport r = param_report(ModelConfig::full_scale());
  CHECK(static_cast<double>(r.convstem) < 0.05 * static_cast<double>(r.vit_base_encoder));
}
