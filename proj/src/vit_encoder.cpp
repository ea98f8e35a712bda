#include "mimdet/vit_encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace mimdet {

Tensor pos_embed_2d(long grid_h, long grid_w, long dim) {
  if (dim % 4 != 0)
    throw std::invalid_argument("pos_embed_2d: dim " + std::to_string(dim) + " must be divisible by 4");
  const long half = dim / 2;      // per-axis channels
  const long nfreq = half / 2;    // sin/cos pairs per axis
  Tensor table({grid_h * grid_w, dim});
  for (long i = 0; i < grid_h; ++i)
    for (long j = 0; j < grid_w; ++j) {
      double* row = table.data() + (i * grid_w + j) * dim;
      for (long f = 0; f < nfreq; ++f) {
        const double omega = std::pow(10000.0, -static_cast<double>(f) / static_cast<double>(nfreq));
        row[2 * f] = std::sin(static_cast<double>(i) * omega);
        row[2 * f + 1] = std::cos(static_cast<double>(i) * omega);
        row[half + 2 * f] = std::sin(static_cast<double>(j) * omega);
        row[half + 2 * f + 1] = std::cos(static_cast<double>(j) * omega);
      }
    }
  return table;
}

void declare_encoder_params(const EncoderConfig& cfg, const std::string& prefix, const ParamSink& sink) {
  for (long b = 0; b < cfg.depth; ++b)
    declare_block_params(cfg.block(), prefix + ".block" + std::to_string(b), sink);
  sink(prefix + ".norm.gamma", {cfg.dim});
  sink(prefix + ".norm.beta", {cfg.dim});
}

long encoder_param_count(const EncoderConfig& cfg) {
  return count_params([&](ParamSink sink) { declare_encoder_params(cfg, "e", sink); });
}

Value encode_partial(Tape* t, const Value& tokens, const Tensor& pos, const SampledSet& set,
                     const EncoderConfig& cfg, const ParamRef& p, const std::string& prefix) {
  if (tokens.v.rank() != 3 || tokens.v.dim(2) != cfg.dim)
    throw std::invalid_argument("encode_partial: tokens " + shape_str(tokens.v.shape()) + " vs dim " + std::to_string(cfg.dim));
  if (tokens.v.dim(1) != set.n_tokens || pos.dim(0) != set.n_tokens)
    throw std::invalid_argument("encode_partial: sequence length mismatch with sampled set");

  Value x = add_rows_broadcast(t, tokens, constant(pos));
  x = gather_rows(t, x, set.kept);
  for (long b = 0; b < cfg.depth; ++b)
    x = transformer_block(t, x, cfg.block(), p, prefix + ".block" + std::to_string(b));
  return layer_norm_channels(t, x, p(prefix + ".norm.gamma"), p(prefix + ".norm.beta"), cfg.eps);
}

}  // namespace mimdet
