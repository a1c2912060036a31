#include "obc/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace obc {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("zero extent in shape " + shape_to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_product(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_to_string(shape_));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_product(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::size_t rows(const Matrix& m) {
  if (m.rank() != 2) throw ShapeError("expected a matrix, got shape " + shape_to_string(m.shape()));
  return m.shape()[0];
}

std::size_t cols(const Matrix& m) {
  if (m.rank() != 2) throw ShapeError("expected a matrix, got shape " + shape_to_string(m.shape()));
  return m.shape()[1];
}

Matrix transpose(const Matrix& m) {
  const auto r = rows(m), c = cols(m);
  Matrix out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = m.at(i, j);
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  const auto n = rows(a), k = cols(a), m = cols(b);
  if (rows(b) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  Matrix out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out.at(i, j) += aip * b.at(p, j);
    }
  return out;
}

Tensor mode_n_product(const Tensor& t, const Matrix& m, std::size_t axis) {
  if (axis >= t.rank()) {
    throw ShapeError("mode_n_product: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_to_string(t.shape()));
  }
  const auto r = rows(m), k = cols(m);
  if (t.shape()[axis] != k) {
    throw ShapeError("mode_n_product: axis " + std::to_string(axis) + " has extent " +
                     std::to_string(t.shape()[axis]) + " but matrix has " + std::to_string(k) + " columns");
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.shape()[i];
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.shape()[i];

  Shape out_shape = t.shape();
  out_shape[axis] = r;
  Tensor out(out_shape);
  const auto src = t.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t row = 0; row < r; ++row) {
      double* d = dst.data() + (o * r + row) * inner;
      for (std::size_t c = 0; c < k; ++c) {
        const double coeff = m.at(row, c);
        if (coeff == 0.0) continue;
        const double* s = src.data() + (o * k + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) d[i] += coeff * s[i];
      }
    }
  }
  return out;
}

Tensor unsqueeze_to_conv(const Matrix& m) { return m.reshaped({rows(m), cols(m), 1, 1}); }

Matrix select_rows(std::size_t n, std::span<const std::size_t> keep) {
  if (keep.empty()) throw ShapeError("select_rows: cannot keep zero of " + std::to_string(n) + " channels");
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i] >= n) {
      throw ShapeError("select_rows: index " + std::to_string(keep[i]) + " out of range for extent " +
                       std::to_string(n));
    }
    if (i > 0 && keep[i] <= keep[i - 1]) {
      throw ShapeError("select_rows: indices must be strictly increasing (duplicate or unordered index " +
                       std::to_string(keep[i]) + ")");
    }
  }
  Matrix out({keep.size(), n});
  for (std::size_t i = 0; i < keep.size(); ++i) out.at(i, keep[i]) = 1.0;
  return out;
}

Tensor index_select(const Tensor& t, std::size_t axis, std::span<const std::size_t> indices) {
  if (axis >= t.rank()) throw ShapeError("index_select: axis out of range for " + shape_to_string(t.shape()));
  if (indices.empty()) throw ShapeError("index_select: empty index list");
  const auto extent = t.shape()[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.shape()[i];
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.shape()[i];
  Shape out_shape = t.shape();
  out_shape[axis] = indices.size();
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < indices.size(); ++j) {
      if (indices[j] >= extent) throw ShapeError("index_select: index out of range");
      std::copy_n(t.data().data() + (o * extent + indices[j]) * inner, inner,
                  out.data().data() + (o * indices.size() + j) * inner);
    }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes differ " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, oh, ow;
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t padding) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError("conv2d expects rank-4 input and weight, got " + shape_to_string(x) + " and " +
                     shape_to_string(w));
  }
  if (x[1] != w[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(x[1]) + " channels but weight expects " +
                     std::to_string(w[1]));
  }
  if (w[2] != w[3]) throw ShapeError("conv2d: only square kernels are supported");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const auto k = w[2];
  if (x[2] + 2 * padding < k || x[3] + 2 * padding < k) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  return {x[0], x[1], x[2], x[3], w[0], k, (x[2] + 2 * padding - k) / stride + 1,
          (x[3] + 2 * padding - k) / stride + 1};
}

// Valid output range [lo, hi) along one axis for kernel offset `kk`.
inline void valid_range(std::size_t kk, std::size_t in, std::size_t out, std::size_t stride, std::size_t padding,
                        std::size_t& lo, std::size_t& hi) {
  // input index = o*stride + kk - padding must lie in [0, in)
  lo = 0;
  if (kk < padding) lo = (padding - kk + stride - 1) / stride;
  const long long last = static_cast<long long>(in) - 1 + static_cast<long long>(padding) - static_cast<long long>(kk);
  if (last < 0) {
    hi = 0;
    return;
  }
  hi = std::min<std::size_t>(out, static_cast<std::size_t>(last) / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
  const auto g = conv_geometry(x.shape(), w.shape(), stride, padding);
  Tensor out({g.n, g.o, g.oh, g.ow});
  const double* xs = x.data().data();
  const double* ws = w.data().data();
  double* ys = out.data().data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      double* y = ys + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        const double* xc = xs + (n * g.c + c) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          std::size_t ylo, yhi;
          valid_range(kh, g.h, g.oh, stride, padding, ylo, yhi);
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const double wv = ws[((o * g.c + c) * g.k + kh) * g.k + kw];
            if (wv == 0.0) continue;
            std::size_t xlo, xhi;
            valid_range(kw, g.w, g.ow, stride, padding, xlo, xhi);
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const double* xrow = xc + (oy * stride + kh - padding) * g.w;
              double* yrow = y + oy * g.ow;
              for (std::size_t ox = xlo; ox < xhi; ++ox) yrow[ox] += wv * xrow[ox * stride + kw - padding];
            }
          }
        }
      }
    }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& w, const Shape& input_shape, std::size_t stride,
                         std::size_t padding) {
  const auto g = conv_geometry(input_shape, w.shape(), stride, padding);
  if (grad_out.shape() != Shape{g.n, g.o, g.oh, g.ow}) throw ShapeError("conv2d_grad_input: bad gradient shape");
  Tensor gx(input_shape);
  const double* gy = grad_out.data().data();
  const double* ws = w.data().data();
  double* gxs = gx.data().data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const double* y = gy + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        double* xc = gxs + (n * g.c + c) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          std::size_t ylo, yhi;
          valid_range(kh, g.h, g.oh, stride, padding, ylo, yhi);
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const double wv = ws[((o * g.c + c) * g.k + kh) * g.k + kw];
            if (wv == 0.0) continue;
            std::size_t xlo, xhi;
            valid_range(kw, g.w, g.ow, stride, padding, xlo, xhi);
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              double* xrow = xc + (oy * stride + kh - padding) * g.w;
              const double* yrow = y + oy * g.ow;
              for (std::size_t ox = xlo; ox < xhi; ++ox) xrow[ox * stride + kw - padding] += wv * yrow[ox];
            }
          }
        }
      }
    }
  return gx;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x, const Shape& weight_shape, std::size_t stride,
                          std::size_t padding) {
  const auto g = conv_geometry(x.shape(), weight_shape, stride, padding);
  if (grad_out.shape() != Shape{g.n, g.o, g.oh, g.ow}) throw ShapeError("conv2d_grad_weight: bad gradient shape");
  Tensor gw(weight_shape);
  const double* gy = grad_out.data().data();
  const double* xs = x.data().data();
  double* gws = gw.data().data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const double* y = gy + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        const double* xc = xs + (n * g.c + c) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          std::size_t ylo, yhi;
          valid_range(kh, g.h, g.oh, stride, padding, ylo, yhi);
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            std::size_t xlo, xhi;
            valid_range(kw, g.w, g.ow, stride, padding, xlo, xhi);
            double acc = 0.0;
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const double* xrow = xc + (oy * stride + kh - padding) * g.w;
              const double* yrow = y + oy * g.ow;
              for (std::size_t ox = xlo; ox < xhi; ++ox) acc += yrow[ox] * xrow[ox * stride + kw - padding];
            }
            gws[((o * g.c + c) * g.k + kh) * g.k + kw] += acc;
          }
        }
      }
    }
  return gw;
}

namespace {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

template <typename T>
void write_le(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("truncated tensor payload");
  return value;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor(std::istream& in) {
  const auto rank = read_le<std::uint32_t>(in);
  if (rank > 8) throw std::runtime_error("tensor rank " + std::to_string(rank) + " is implausible");
  Shape shape(rank);
  for (auto& e : shape) e = read_le<std::uint32_t>(in);
  for (auto e : shape)
    if (e == 0) throw std::runtime_error("tensor payload has a zero extent");
  std::vector<double> data(shape_product(shape));
  for (auto& v : data) v = std::bit_cast<double>(read_le<std::uint64_t>(in));
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace obc
