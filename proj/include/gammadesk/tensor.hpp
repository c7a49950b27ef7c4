#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace gammadesk {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Image tensors use NCHW (or CHW for a
/// single image).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const double* ptr() const noexcept { return data_.data(); }
  double* ptr() noexcept { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Multi-index access with bounds checking.
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool flag) noexcept { requires_grad_ = flag; }

  bool all_finite() const noexcept;

  /// Copy with a new shape of equal element count.
  Tensor reshaped(Shape shape) const;

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

/// Same shape and identical bit patterns.
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Max |a - b|; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Throws NumericError naming `what` when any element is NaN or infinite.
void check_finite(const Tensor& t, const std::string& what);

}  // namespace gammadesk
