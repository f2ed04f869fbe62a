#pragma once

#include <filesystem>

#include "deformer/encoder.hpp"

namespace deformer {

/// Weight checkpoint (all little-endian):
///
///   "DFWT"  magic
///   u32     format version (1)
///   u32 x 8 n_layers, hidden_dim, n_heads, ffn_dim, vocab_size, max_positions, q_max, p_max
///   f64     layer_norm_eps
///   f64     init_std
///   u64     seed
///   32 B    fingerprint (EncoderWeights::fingerprint)
///   f32 ... every parameter in EncoderWeights::parameters() order, row-major
///
/// Parameters are stored as f32; loading recomputes the fingerprint and
/// rejects the file on mismatch.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const EncoderWeights& weights);
EncoderWeights load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_checkpoint(const EncoderWeights& weights);
EncoderWeights deserialize_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace deformer
