#pragma once

#include <string>

#include "mimdet/params.hpp"
#include "mimdet/tensor.hpp"

namespace mimdet {

struct PyramidFeatures {
  Value p2, p3, p4, p5;  // strides 4, 8, 16, 32; fpn_dim channels each
};

struct FpnConfig {
  long c2 = 0;       // s4 channels
  long c3 = 0;       // s8 channels
  long c4 = 0;       // decoded s16 channels (s32 is its mean pool)
  long fpn_dim = 256;
};

void declare_fpn_params(const FpnConfig& cfg, const std::string& prefix, const ParamSink& sink);
long fpn_param_count(const FpnConfig& cfg);

/// s32 = 2x2 mean pool of the decoded stride-16 map; 1x1 laterals map every
/// level to fpn_dim; the top-down pathway adds the 2x nearest-neighbour
/// upsampled coarser level; a 3x3 conv produces each output level.
PyramidFeatures build_pyramid(Tape* t, const Value& s4, const Value& s8, const Value& s16_decoded,
                              const FpnConfig& cfg, const ParamRef& p,
                              const std::string& prefix = "fpn");

}  // namespace mimdet
