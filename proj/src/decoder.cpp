#include "mimdet/decoder.hpp"

#include <stdexcept>

#include "mimdet/vit_encoder.hpp"

namespace mimdet {

void declare_decoder_params(const DecoderConfig& cfg, long enc_dim, const std::string& prefix, const ParamSink& sink) {
  if (cfg.depth < 0) throw std::invalid_argument("decoder depth must be >= 0");
  if (cfg.depth > 0 && cfg.dim % cfg.heads != 0)
    throw std::invalid_argument("decoder dim not divisible by heads");
  sink(prefix + ".enc_to_dec.weight", {cfg.dim, enc_dim});
  sink(prefix + ".enc_to_dec.bias", {cfg.dim});
  if (cfg.fill == FillMode::MaskToken) {
    sink(prefix + ".mask_token", {cfg.dim});
  } else {
    sink(prefix + ".stem_to_dec.weight", {cfg.dim, enc_dim});
    sink(prefix + ".stem_to_dec.bias", {cfg.dim});
  }
  for (long b = 0; b < cfg.depth; ++b)
    declare_block_params(cfg.block(), prefix + ".block" + std::to_string(b), sink);
  sink(prefix + ".norm.gamma", {cfg.dim});
  sink(prefix + ".norm.beta", {cfg.dim});
}

long decoder_param_count(const DecoderConfig& cfg, long enc_dim) {
  return count_params([&](ParamSink sink) { declare_decoder_params(cfg, enc_dim, "d", sink); });
}

Value fill_full_sequence(Tape* t, const Value& encoded, const Value& stem_tokens,
                         const SampledSet& set, const DecoderConfig& cfg, const ParamRef& p,
                         long grid_h, long grid_w, const std::string& prefix) {
  const long N = encoded.v.dim(0);
  const long L = set.n_tokens;
  if (encoded.v.rank() != 3 || encoded.v.dim(1) != static_cast<long>(set.kept.size()))
    throw std::invalid_argument("fill_full_sequence: encoded " + shape_str(encoded.v.shape()) + " vs " +
                                std::to_string(set.kept.size()) + " kept rows");
  if (stem_tokens.v.rank() != 3 || stem_tokens.v.dim(1) != L)
    throw std::invalid_argument("fill_full_sequence: stem tokens " + shape_str(stem_tokens.v.shape()) +
                                " vs L=" + std::to_string(L));
  if (grid_h * grid_w != L)
    throw std::invalid_argument("fill_full_sequence: grid does not match sequence length");

  Value kept_rows = linear(t, encoded, p(prefix + ".enc_to_dec.weight"), p(prefix + ".enc_to_dec.bias"));
  Value seq = constant(Tensor({N, L, cfg.dim}));
  seq = scatter_rows(t, seq, set.kept, kept_rows);
  if (!set.dropped.empty()) {
    Value fill_rows;
    if (cfg.fill == FillMode::MaskToken) {
      fill_rows = broadcast_row(t, p(prefix + ".mask_token"), N, static_cast<long>(set.dropped.size()));
    } else {
      Value dropped_stem = gather_rows(t, stem_tokens, set.dropped);
      fill_rows = linear(t, dropped_stem, p(prefix + ".stem_to_dec.weight"), p(prefix + ".stem_to_dec.bias"));
    }
    seq = scatter_rows(t, seq, set.dropped, fill_rows);
  }
  return add_rows_broadcast(t, seq, constant(pos_embed_2d(grid_h, grid_w, cfg.dim)));
}

Value decode(Tape* t, const Value& full_seq, const DecoderConfig& cfg, const ParamRef& p,
             long grid_h, long grid_w, const std::string& prefix) {
  if (full_seq.v.rank() != 3 || full_seq.v.dim(1) != grid_h * grid_w)
    throw std::invalid_argument("decode: sequence " + shape_str(full_seq.v.shape()) + " vs grid " +
                                std::to_string(grid_h) + "x" + std::to_string(grid_w));
  Value x = full_seq;
  for (long b = 0; b < cfg.depth; ++b)
    x = transformer_block(t, x, cfg.block(), p, prefix + ".block" + std::to_string(b));
  x = layer_norm_channels(t, x, p(prefix + ".norm.gamma"), p(prefix + ".norm.beta"), cfg.eps);
  return seq_to_map(t, x, grid_h, grid_w);
}

}  // namespace mimdet
