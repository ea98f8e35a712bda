#include "mimdet/convstem.hpp"

#include <stdexcept>

namespace mimdet {

void declare_convstem_params(const ConvStemConfig& cfg, const std::string& prefix, const ParamSink& sink) {
  long cin = cfg.in_channels;
  for (int s = 0; s < 4; ++s) {
    const long cout = cfg.stage_channels(s);
    const std::string stage = prefix + ".stage" + std::to_string(s);
    sink(stage + ".conv.weight", {cout, cin, 3, 3});  // bias=False
    sink(stage + ".norm.gamma", {cout});
    sink(stage + ".norm.beta", {cout});
    cin = cout;
  }
  sink(prefix + ".proj.weight", {cfg.out_dim, cfg.stage_channels(3), 1, 1});
  sink(prefix + ".proj.bias", {cfg.out_dim});
}

long convstem_param_count(const ConvStemConfig& cfg) {
  return count_params([&](ParamSink sink) { declare_convstem_params(cfg, "s", sink); });
}

ConvStemOutput convstem_forward(Tape* t, const Value& image, const ConvStemConfig& cfg,
                                const ParamRef& p, const std::string& prefix) {
  if (image.v.rank() != 4 || image.v.dim(1) != cfg.in_channels)
    throw std::invalid_argument("convstem: expected [N," + std::to_string(cfg.in_channels) + ",H,W], got " +
                                shape_str(image.v.shape()));
  const long H = image.v.dim(2), W = image.v.dim(3);
  if (H % 16 != 0 || W % 16 != 0)
    throw std::invalid_argument("convstem: extents " + std::to_string(H) + "x" + std::to_string(W) +
                                " must be divisible by 16; pad by " + std::to_string((16 - H % 16) % 16) + "x" +
                                std::to_string((16 - W % 16) % 16));
  if (H < 32 || W < 32) throw std::invalid_argument("convstem: image must be at least 32x32");

  ConvStemOutput out;
  Value x = image;
  for (int s = 0; s < 4; ++s) {
    const std::string stage = prefix + ".stage" + std::to_string(s);
    x = conv2d(t, x, p(stage + ".conv.weight"), std::nullopt, 2, 1);
    x = layer_norm_channels(t, x, p(stage + ".norm.gamma"), p(stage + ".norm.beta"), cfg.eps);
    x = gelu(t, x);
    if (s == 1) out.s4 = x;
    if (s == 2) out.s8 = x;
  }
  x = conv2d(t, x, p(prefix + ".proj.weight"), p(prefix + ".proj.bias"), 1, 0);

  out.grid_h = H / 16;
  out.grid_w = W / 16;
  // [N, out_dim, h, w] -> [N, h*w, out_dim], row-major tokens.
  const long N = x.v.dim(0);
  Value seq = reshape(t, x, {N, cfg.out_dim, out.grid_h * out.grid_w});
  out.tokens = transpose_last(t, seq);
  return out;
}

std::pair<long, long> receptive_field(const std::vector<std::pair<long, long>>& layers) {
  long rf = 1, jump = 1, stride = 1;
  for (auto [k, s] : layers) {
    rf += (k - 1) * jump;
    jump *= s;
    stride *= s;
  }
  return {rf, stride};
}

std::pair<long, long> convstem_receptive_field(const ConvStemConfig&) {
  // Four 3x3/s2 stages, then the 1x1 projection.
  return receptive_field({{3, 2}, {3, 2}, {3, 2}, {3, 2}, {1, 1}});
}

}  // namespace mimdet
