#include "mimdet/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace mimdet {

namespace stats {
std::uint64_t attention_flops = 0;
}  // namespace stats

void declare_block_params(const BlockConfig& cfg, const std::string& prefix, const ParamSink& sink) {
  if (cfg.dim % cfg.heads != 0)
    throw std::invalid_argument("block dim " + std::to_string(cfg.dim) + " not divisible by heads " + std::to_string(cfg.heads));
  const long D = cfg.dim, M = cfg.mlp_dim();
  sink(prefix + ".ln1.gamma", {D});
  sink(prefix + ".ln1.beta", {D});
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    sink(prefix + ".attn." + std::string(w) + ".weight", {D, D});
    sink(prefix + ".attn." + std::string(w) + ".bias", {D});
  }
  sink(prefix + ".ln2.gamma", {D});
  sink(prefix + ".ln2.beta", {D});
  sink(prefix + ".mlp.fc1.weight", {M, D});
  sink(prefix + ".mlp.fc1.bias", {M});
  sink(prefix + ".mlp.fc2.weight", {D, M});
  sink(prefix + ".mlp.fc2.bias", {D});
}

long block_param_count(const BlockConfig& cfg) {
  return count_params([&](ParamSink sink) { declare_block_params(cfg, "b", sink); });
}

Value multi_head_attention(Tape* t, const Value& x, const BlockConfig& cfg,
                           const ParamRef& p, const std::string& prefix) {
  const long N = x.v.dim(0), L = x.v.dim(1), D = x.v.dim(2);
  const long dh = D / cfg.heads;

  Value q = linear(t, x, p(prefix + ".wq.weight"), p(prefix + ".wq.bias"));
  Value k = linear(t, x, p(prefix + ".wk.weight"), p(prefix + ".wk.bias"));
  Value v = linear(t, x, p(prefix + ".wv.weight"), p(prefix + ".wv.bias"));

  q = split_heads(t, q, cfg.heads);
  k = split_heads(t, k, cfg.heads);
  v = split_heads(t, v, cfg.heads);

  Value scores = scale(t, bmm(t, q, transpose_last(t, k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Value att = softmax_rows(t, scores);
  Value ctx = bmm(t, att, v);
  stats::attention_flops += static_cast<std::uint64_t>(4 * N * L * L * D);

  ctx = merge_heads(t, ctx, cfg.heads);
  return linear(t, ctx, p(prefix + ".wo.weight"), p(prefix + ".wo.bias"));
}

Value transformer_block(Tape* t, const Value& x, const BlockConfig& cfg,
                        const ParamRef& p, const std::string& prefix) {
  Value h = layer_norm_channels(t, x, p(prefix + ".ln1.gamma"), p(prefix + ".ln1.beta"), cfg.eps);
  Value y = add(t, x, multi_head_attention(t, h, cfg, p, prefix + ".attn"));
  Value h2 = layer_norm_channels(t, y, p(prefix + ".ln2.gamma"), p(prefix + ".ln2.beta"), cfg.eps);
  Value m = linear(t, h2, p(prefix + ".mlp.fc1.weight"), p(prefix + ".mlp.fc1.bias"));
  m = gelu(t, m);
  m = linear(t, m, p(prefix + ".mlp.fc2.weight"), p(prefix + ".mlp.fc2.bias"));
  return add(t, y, m);
}

}  // namespace mimdet
