#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace obc {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_to_string(const Shape& shape);
std::size_t shape_product(const Shape& shape);

// Dense row-major tensor of doubles. Extents are always >= 1; a rank-0
// tensor holds a single scalar.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const;
  void fill(double value);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Rank-2 tensors play the role of matrices; these helpers validate that.
using Matrix = Tensor;

std::size_t rows(const Matrix& m);
std::size_t cols(const Matrix& m);

Matrix transpose(const Matrix& m);
Matrix matmul(const Matrix& a, const Matrix& b);

// Contracts axis `axis` of t with the columns of m:
// result[..., r, ...] = sum_k m[r, k] * t[..., k, ...].
Tensor mode_n_product(const Tensor& t, const Matrix& m, std::size_t axis);

// (rows, cols) -> (rows, cols, 1, 1) so the matrix can act as a 1x1 convolution.
Tensor unsqueeze_to_conv(const Matrix& m);

// Rows `keep` of the n x n identity. `keep` must be strictly increasing and nonempty.
Matrix select_rows(std::size_t n, std::span<const std::size_t> keep);

// Gathers the listed indices along `axis`.
Tensor index_select(const Tensor& t, std::size_t axis, std::span<const std::size_t> indices);

double max_abs_diff(const Tensor& a, const Tensor& b);

// Cross-correlation of x (N,C,H,W) with w (O,C,K,K).
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding);
// Gradients of conv2d given the output gradient.
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& w, const Shape& input_shape,
                         std::size_t stride, std::size_t padding);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x, const Shape& weight_shape,
                          std::size_t stride, std::size_t padding);

// Binary payload: u32 rank, u32 extents, then little-endian f64 values.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace obc
