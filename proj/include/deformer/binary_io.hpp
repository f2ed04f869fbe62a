#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "deformer/errors.hpp"

namespace deformer::binary {

// Little-endian append-only byte buffer.
class Writer {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }
  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void put_magic(const char (&magic)[5]) {
    bytes_.insert(bytes_.end(), reinterpret_cast<const std::uint8_t*>(magic),
                  reinterpret_cast<const std::uint8_t*>(magic) + 4);
  }

  std::size_t size() const { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  // Overwrites 8 bytes at `at` with `v` (little-endian).
  void patch_u64(std::size_t at, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }

 private:
  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked little-endian reader; throws FormatError on overrun.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes, std::string what = "file")
      : bytes_(bytes), what_(std::move(what)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    require(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    require(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  void expect_magic(const char (&magic)[5]) {
    const auto got = get_bytes(4);
    if (std::memcmp(got.data(), magic, 4) != 0) throw FormatError(what_ + ": bad magic, expected " + magic);
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void seek(std::size_t at) {
    if (at > bytes_.size()) throw FormatError(what_ + ": offset " + std::to_string(at) + " outside file");
    pos_ = at;
  }

 private:
  void require(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temporary and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace deformer::binary
