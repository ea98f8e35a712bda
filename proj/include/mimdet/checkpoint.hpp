#pragma once

#include <string>

#include "mimdet/params.hpp"

namespace mimdet {

/// Flat binary tensor container, little-endian throughout:
///   magic "MIMD" | version u32 | entry count u32 | entries...
/// entry: name length u32 | name UTF-8 | rank u32 | dims u64 each |
///        dtype u32 (0 = f32, 1 = f64) | raw scalars.
/// Save/load roundtrips are bit-exact; the loader names the entry at which
/// a malformed or truncated file fails.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParamStore& tensors, const std::string& path);
ParamStore load_checkpoint(const std::string& path);

}  // namespace mimdet
