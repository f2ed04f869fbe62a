#include "deformer/fingerprint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>

#include "deformer/errors.hpp"

namespace deformer {

std::string Fingerprint::hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (std::uint8_t b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

Fingerprint Fingerprint::from_hex(const std::string& hex) {
  if (hex.size() != 64) throw FormatError("fingerprint hex must be 64 characters");
  auto nibble = [](char c) -> std::uint8_t {
    if (c >= '0' && c <= '9') return static_cast<std::uint8_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<std::uint8_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<std::uint8_t>(c - 'A' + 10);
    throw FormatError("fingerprint hex contains a non-hex character");
  };
  Fingerprint f;
  for (std::size_t i = 0; i < 32; ++i) {
    f.bytes[i] = static_cast<std::uint8_t>((nibble(hex[2 * i]) << 4) | nibble(hex[2 * i + 1]));
  }
  return f;
}

struct Sha256::Impl {
  EVP_MD_CTX* ctx = nullptr;
};

Sha256::Sha256() : impl_(std::make_unique<Impl>()) {
  impl_->ctx = EVP_MD_CTX_new();
  if (impl_->ctx == nullptr || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: digest initialisation failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(impl_->ctx); }

Sha256& Sha256::update(std::span<const std::uint8_t> bytes) {
  EVP_DigestUpdate(impl_->ctx, bytes.data(), bytes.size());
  return *this;
}

namespace {
template <typename T>
std::array<std::uint8_t, sizeof(T)> le_bytes(T v) {
  std::array<std::uint8_t, sizeof(T)> out;
  std::memcpy(out.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(out.begin(), out.end());
  return out;
}
}  // namespace

Sha256& Sha256::update_u64(std::uint64_t v) { return update(le_bytes(v)); }
Sha256& Sha256::update_f64(double v) { return update(le_bytes(v)); }
Sha256& Sha256::update_f32(float v) { return update(le_bytes(v)); }

Sha256& Sha256::update_string(const std::string& s) {
  update_u64(s.size());
  return update({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

Fingerprint Sha256::finish() {
  Fingerprint f;
  unsigned int len = 0;
  EVP_DigestFinal_ex(impl_->ctx, f.bytes.data(), &len);
  return f;
}

std::uint64_t fnv1a64_token_ids(std::span<const std::uint32_t> ids) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint32_t id : ids) {
    for (int shift = 0; shift < 32; shift += 8) {
      h ^= (id >> shift) & 0xFFu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace deformer
