#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace hmnas {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major double-precision array.
///
/// A Tensor is a plain value: copying copies the data. Gradient bookkeeping
/// lives on the Tape (see autograd.hpp), so a Tensor never aliases another.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v);

  const Shape& shape() const { return shape_; }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() & { return data_; }
  std::span<const double> data() const& { return data_; }
  // A span into a temporary would dangle (e.g. ranging over grads.of(x).data()).
  std::span<const double> data() && = delete;
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at4(int n, int c, int h, int w);
  const double& at4(int n, int c, int h, int w) const;

  double item() const;
  double sum() const;

  void fill(double v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  // Bit-level equality of shape and every element.
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace hmnas
