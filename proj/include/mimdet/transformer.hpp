#pragma once

#include <cstdint>
#include <string>

#include "mimdet/params.hpp"
#include "mimdet/tensor.hpp"

namespace mimdet {

/// One pre-norm transformer block: norm -> MHA -> residual, norm -> MLP(GELU)
/// -> residual.
struct BlockConfig {
  long dim = 0;
  long heads = 0;
  double mlp_ratio = 4.0;
  double eps = 1e-6;
  long mlp_dim() const { return static_cast<long>(mlp_ratio * static_cast<double>(dim)); }
};

namespace stats {
/// Accumulated FLOPs of the two L x L attention matmuls (scores and
/// weighted sum); every counted term scales with L^2.
extern std::uint64_t attention_flops;
inline void reset_attention_flops() { attention_flops = 0; }
}  // namespace stats

void declare_block_params(const BlockConfig& cfg, const std::string& prefix, const ParamSink& sink);
long block_param_count(const BlockConfig& cfg);

Value multi_head_attention(Tape* t, const Value& x, const BlockConfig& cfg,
                           const ParamRef& p, const std::string& prefix);
Value transformer_block(Tape* t, const Value& x, const BlockConfig& cfg,
                        const ParamRef& p, const std::string& prefix);

}  // namespace mimdet
