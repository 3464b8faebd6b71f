#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace apf {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_product(const Shape& shape);

/// Dense row-major array of doubles. A tensor of shape {1} doubles as a scalar.
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// Same as the (shape, data) constructor but rejects NaN/Inf.
  static Tensor checked(Shape shape, std::vector<double> data);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Value of a single-element tensor.
  double item() const;
  bool all_finite() const noexcept;
  /// Same data viewed under another shape with equal element count.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Eager (non-recording) kernels. Graph-recording versions live in autodiff.hpp.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

namespace kernels {

// out[m x n] (+)= a[m x k] * b[k x n]
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> out,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate);
// out[k x n] += a[m x k]^T * g[m x n]
void gemm_tn_acc(std::span<const double> a, std::span<const double> g, std::span<double> out,
                 std::size_t m, std::size_t k, std::size_t n);
// out[m x k] += g[m x n] * b[k x n]^T
void gemm_nt_acc(std::span<const double> g, std::span<const double> b, std::span<double> out,
                 std::size_t m, std::size_t k, std::size_t n);

}  // namespace kernels

}  // namespace apf
