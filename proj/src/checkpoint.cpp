#include "deformer/checkpoint.hpp"

#include "deformer/binary_io.hpp"
#include "deformer/errors.hpp"

namespace deformer {

std::vector<std::uint8_t> serialize_checkpoint(const EncoderWeights& weights) {
  const ModelConfig& c = weights.config;
  binary::Writer w;
  w.put_magic("DFWT");
  w.put<std::uint32_t>(kCheckpointVersion);
  for (std::size_t v : {c.n_layers, c.hidden_dim, c.n_heads, c.ffn_dim, c.vocab_size, c.max_positions, c.q_max,
                        c.p_max}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<double>(c.layer_norm_eps);
  w.put<double>(c.init_std);
  w.put<std::uint64_t>(c.seed);
  w.put_bytes(weights.fingerprint().bytes);
  for (const Tensor* t : weights.parameters()) {
    for (double v : t->data()) w.put<float>(static_cast<float>(v));
  }
  return w.bytes();
}

EncoderWeights deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, "checkpoint");
  r.expect_magic("DFWT");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  ModelConfig c;
  for (std::size_t* field : {&c.n_layers, &c.hidden_dim, &c.n_heads, &c.ffn_dim, &c.vocab_size, &c.max_positions,
                             &c.q_max, &c.p_max}) {
    *field = r.get<std::uint32_t>();
  }
  c.layer_norm_eps = r.get<double>();
  c.init_std = r.get<double>();
  c.seed = r.get<std::uint64_t>();
  try {
    c.validate();
  } catch (const ConfigurationError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  Fingerprint stored;
  const auto fp = r.get_bytes(32);
  std::copy(fp.begin(), fp.end(), stored.bytes.begin());

  EncoderWeights weights = EncoderWeights::initialize(c);
  for (Tensor* t : weights.parameters()) {
    for (double& v : t->data()) v = static_cast<double>(r.get<float>());
    t->apply_precision(Precision::f64);
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after parameters");
  if (weights.fingerprint() != stored) throw FormatError("checkpoint: fingerprint does not match parameters");
  return weights;
}

void save_checkpoint(const std::filesystem::path& path, const EncoderWeights& weights) {
  binary::write_file_atomic(path, serialize_checkpoint(weights));
}

EncoderWeights load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(binary::read_file(path));
}

}  // namespace deformer
