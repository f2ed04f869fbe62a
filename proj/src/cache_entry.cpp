#include "deformer/cache_entry.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "deformer/errors.hpp"

namespace deformer {

std::size_t bytes_per_scalar(StoragePrecision p) {
  switch (p) {
    case StoragePrecision::exact:
      return 8;
    case StoragePrecision::truncated16:
      return 2;
    case StoragePrecision::f32:
      return 4;
  }
  throw ParameterError("unknown storage precision");
}

const char* to_string(StoragePrecision p) {
  switch (p) {
    case StoragePrecision::exact:
      return "exact";
    case StoragePrecision::truncated16:
      return "bf16";
    case StoragePrecision::f32:
      return "f32";
  }
  return "?";
}

StoragePrecision storage_precision_from_string(const std::string& s) {
  if (s == "f32" || s == "32") return StoragePrecision::f32;
  if (s == "bf16" || s == "16") return StoragePrecision::truncated16;
  if (s == "exact") return StoragePrecision::exact;
  throw ParameterError("unknown storage precision '" + s + "' (expected f32 or bf16)");
}

std::uint16_t to_bfloat16_bits(double v) {
  if (!std::isfinite(v)) throw NumericalError("cannot store a non-finite value as bfloat16");
  double rounded = 0.0;
  if (v != 0.0) {
    // Keep 8 significant bits, round half to even.
    int exponent = 0;
    const double mantissa = std::frexp(v, &exponent);
    rounded = std::ldexp(std::nearbyint(std::ldexp(mantissa, 8)), exponent - 8);
  }
  const float f = static_cast<float>(rounded);
  if (!std::isfinite(f)) throw NumericalError("value overflows bfloat16");
  return static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(f) >> 16);
}

double from_bfloat16_bits(std::uint16_t bits) {
  return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16));
}

double quantize(double v, StoragePrecision p) {
  switch (p) {
    case StoragePrecision::exact:
      return v;
    case StoragePrecision::f32:
      return static_cast<double>(static_cast<float>(v));
    case StoragePrecision::truncated16:
      return from_bfloat16_bits(to_bfloat16_bits(v));
  }
  return v;
}

Tensor quantize(const Tensor& t, StoragePrecision p) {
  Tensor out = t;
  for (double& v : out.data()) v = quantize(v, p);
  return out;
}

}  // namespace deformer
