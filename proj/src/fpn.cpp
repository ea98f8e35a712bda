#include "mimdet/fpn.hpp"

#include <stdexcept>

namespace mimdet {

void declare_fpn_params(const FpnConfig& cfg, const std::string& prefix, const ParamSink& sink) {
  const long cin[4] = {cfg.c2, cfg.c3, cfg.c4, cfg.c4};
  for (int lvl = 0; lvl < 4; ++lvl) {
    const std::string name = prefix + ".p" + std::to_string(lvl + 2);
    sink(name + ".lateral.weight", {cfg.fpn_dim, cin[lvl], 1, 1});
    sink(name + ".lateral.bias", {cfg.fpn_dim});
    sink(name + ".output.weight", {cfg.fpn_dim, cfg.fpn_dim, 3, 3});
    sink(name + ".output.bias", {cfg.fpn_dim});
  }
}

long fpn_param_count(const FpnConfig& cfg) {
  return count_params([&](ParamSink sink) { declare_fpn_params(cfg, "f", sink); });
}

PyramidFeatures build_pyramid(Tape* t, const Value& s4, const Value& s8, const Value& s16_decoded,
                              const FpnConfig& cfg, const ParamRef& p, const std::string& prefix) {
  const long h16 = s16_decoded.v.dim(2), w16 = s16_decoded.v.dim(3);
  if (s8.v.dim(2) != 2 * h16 || s8.v.dim(3) != 2 * w16 || s4.v.dim(2) != 4 * h16 || s4.v.dim(3) != 4 * w16)
    throw std::invalid_argument("build_pyramid: spatial ratios must be exact powers of two: s4 " +
                                shape_str(s4.v.shape()) + ", s8 " + shape_str(s8.v.shape()) + ", s16 " +
                                shape_str(s16_decoded.v.shape()));
  if (h16 % 2 != 0 || w16 % 2 != 0)
    throw std::invalid_argument("build_pyramid: stride-16 extents must be even for the P5 pool");

  Value s32 = avg_pool2d(t, s16_decoded, 2, 2);

  auto lateral = [&](const Value& x, int lvl) {
    const std::string name = prefix + ".p" + std::to_string(lvl);
    return conv2d(t, x, p(name + ".lateral.weight"), p(name + ".lateral.bias"), 1, 0);
  };
  auto output = [&](const Value& x, int lvl) {
    const std::string name = prefix + ".p" + std::to_string(lvl);
    return conv2d(t, x, p(name + ".output.weight"), p(name + ".output.bias"), 1, 1);
  };

  Value l5 = lateral(s32, 5);
  Value l4 = add(t, lateral(s16_decoded, 4), upsample_nearest2x(t, l5));
  Value l3 = add(t, lateral(s8, 3), upsample_nearest2x(t, l4));
  Value l2 = add(t, lateral(s4, 2), upsample_nearest2x(t, l3));

  PyramidFeatures pyr;
  pyr.p2 = output(l2, 2);
  pyr.p3 = output(l3, 3);
  pyr.p4 = output(l4, 4);
  pyr.p5 = output(l5, 5);
  return pyr;
}

}  // namespace mimdet
