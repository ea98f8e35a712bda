#pragma once

#include <string>

#include "mimdet/params.hpp"
#include "mimdet/sampler.hpp"
#include "mimdet/tensor.hpp"
#include "mimdet/transformer.hpp"

namespace mimdet {

struct EncoderConfig {
  long dim = 768;
  long depth = 12;
  long heads = 12;
  double mlp_ratio = 4.0;
  double eps = 1e-6;

  BlockConfig block() const { return {dim, heads, mlp_ratio, eps}; }

  static EncoderConfig full_scale() { return {768, 12, 12, 4.0, 1e-6}; }
  static EncoderConfig desk() { return {64, 2, 4, 4.0, 1e-6}; }
};

/// Fixed 2D sine-cosine table, [grid_h*grid_w, dim]. The first half of the
/// channels encodes the row index, the second half the column index, each as
/// interleaved sin/cos over geometric frequencies. Requires dim % 4 == 0.
Tensor pos_embed_2d(long grid_h, long grid_w, long dim);

void declare_encoder_params(const EncoderConfig& cfg, const std::string& prefix, const ParamSink& sink);
long encoder_param_count(const EncoderConfig& cfg);

/// Position embeddings are added to every token first; rows are then
/// gathered at set.kept (in the set's order) and run through the pre-norm
/// block stack and a final norm. Dropped tokens are never read past the
/// gather. No classification token.
Value encode_partial(Tape* t, const Value& tokens, const Tensor& pos, const SampledSet& set,
                     const EncoderConfig& cfg, const ParamRef& p,
                     const std::string& prefix = "encoder");

}  // namespace mimdet
