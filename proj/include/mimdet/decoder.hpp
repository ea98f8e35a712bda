#pragma once

#include <string>

#include "mimdet/params.hpp"
#include "mimdet/sampler.hpp"
#include "mimdet/tensor.hpp"
#include "mimdet/transformer.hpp"

namespace mimdet {

/// How unsampled positions are filled at the decoder input: a learnable
/// mask token, or the projected stem feature at that position.
enum class FillMode { MaskToken, ConvStemFeature };

struct DecoderConfig {
  long dim = 512;
  long depth = 4;
  long heads = 16;
  FillMode fill = FillMode::ConvStemFeature;
  double mlp_ratio = 4.0;
  double eps = 1e-6;

  BlockConfig block() const { return {dim, heads, mlp_ratio, eps}; }

  static DecoderConfig full_scale() { return {512, 4, 16, FillMode::ConvStemFeature, 4.0, 1e-6}; }
  static DecoderConfig desk() { return {32, 2, 4, FillMode::ConvStemFeature, 4.0, 1e-6}; }
};

/// Only the parameters the configured fill mode uses are declared: the mask
/// token exists in MaskToken mode, the stem projection in ConvStemFeature
/// mode. Both modes share enc_to_dec and the output norm.
void declare_decoder_params(const DecoderConfig& cfg, long enc_dim, const std::string& prefix, const ParamSink& sink);
long decoder_param_count(const DecoderConfig& cfg, long enc_dim);

/// Rows at set.kept become enc_to_dec(encoded); dropped rows are the mask
/// token or stem_to_dec(stem tokens); decoder-dim sinusoidal position
/// embeddings are added to every row afterwards. Output [N, L, dec_dim].
Value fill_full_sequence(Tape* t, const Value& encoded, const Value& stem_tokens,
                         const SampledSet& set, const DecoderConfig& cfg, const ParamRef& p,
                         long grid_h, long grid_w, const std::string& prefix = "decoder");

/// depth pre-norm blocks over the full sequence, final norm, then a
/// row-major reshape to the stride-16 map [N, dec_dim, grid_h, grid_w].
Value decode(Tape* t, const Value& full_seq, const DecoderConfig& cfg, const ParamRef& p,
             long grid_h, long grid_w, const std::string& prefix = "decoder");

}  // namespace mimdet
