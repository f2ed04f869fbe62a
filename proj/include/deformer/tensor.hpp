#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace deformer {

enum class Precision : std::uint8_t { f64, f32 };

/// Dense row-major tensor of doubles.
///
/// Values are always held as doubles; a tensor tagged `Precision::f32` holds
/// only values that are exactly representable as IEEE single precision, which
/// is how the 32-bit mode is realised without a second storage type.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view: rank-2 tensors are (rows, cols); rank-1 tensors behave as a
  // single row; rank-0 as 1x1.
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() > 2) rank_error();
    return 1;
  }
  std::size_t cols() const {
    if (shape_.empty()) return 1;
    if (shape_.size() > 2) rank_error();
    return shape_.back();
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  Precision precision() const { return precision_; }
  // Rounds every element to the nearest float and tags the result f32.
  Tensor rounded_to_f32() const;
  // Applies `p` in place: no-op for f64, rounding for f32.
  void apply_precision(Precision p);

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  // Bitwise equality of shape and every element.
  bool bit_equal(const Tensor& other) const;

  std::string shape_string() const;

 private:
  [[noreturn]] void rank_error() const;

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  Precision precision_ = Precision::f64;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
std::size_t shape_product(std::span<const std::size_t> shape);

}  // namespace deformer
