#pragma once

#include <string>
#include <utility>

#include "mimdet/params.hpp"
#include "mimdet/tensor.hpp"

namespace mimdet {

/// Four 3x3 stride-2 stages (conv without bias, channel layer norm, GELU)
/// with channels doubling per stage, then a biased 1x1 projection to the
/// encoder dimension.
struct ConvStemConfig {
  long in_channels = 3;
  long base_channels = 96;
  long out_dim = 768;
  double eps = 1e-6;

  long stage_channels(int stage) const { return base_channels << stage; }

  static ConvStemConfig full_scale() { return {3, 96, 768, 1e-6}; }
  static ConvStemConfig desk() { return {3, 8, 64, 1e-6}; }
};

struct ConvStemOutput {
  Value s4;      // [N, 2*base, H/4,  W/4]
  Value s8;      // [N, 4*base, H/8,  W/8]
  Value tokens;  // [N, (H/16)*(W/16), out_dim], row-major over the grid
  long grid_h = 0;
  long grid_w = 0;
};

void declare_convstem_params(const ConvStemConfig& cfg, const std::string& prefix, const ParamSink& sink);
long convstem_param_count(const ConvStemConfig& cfg);

ConvStemOutput convstem_forward(Tape* t, const Value& image, const ConvStemConfig& cfg,
                                const ParamRef& p, const std::string& prefix = "convstem");

/// (receptive field, output stride) for a stack of (kernel, stride) layers,
/// via the standard rf <- rf + (k-1)*jump, jump <- jump*stride recurrence.
std::pair<long, long> receptive_field(const std::vector<std::pair<long, long>>& layers);

/// (receptive field, output stride) of the stride-16 tokens.
std::pair<long, long> convstem_receptive_field(const ConvStemConfig& cfg);

}  // namespace mimdet
