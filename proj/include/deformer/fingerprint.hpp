#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>

namespace deformer {

// 32-byte SHA-256 digest identifying a model (parameters + config).
struct Fingerprint {
  std::array<std::uint8_t, 32> bytes{};

  std::string hex() const;
  static Fingerprint from_hex(const std::string& hex);
  friend bool operator==(const Fingerprint&, const Fingerprint&) = default;
};

// Incremental SHA-256 (OpenSSL EVP).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::uint8_t> bytes);
  Sha256& update_u64(std::uint64_t v);
  Sha256& update_f64(double v);
  Sha256& update_f32(float v);
  Sha256& update_string(const std::string& s);
  Fingerprint finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// FNV-1a 64-bit over the little-endian bytes of each 32-bit token id.
std::uint64_t fnv1a64_token_ids(std::span<const std::uint32_t> ids);

}  // namespace deformer
