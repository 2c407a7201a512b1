#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace genieblue {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor of doubles. Rank 1 and rank 2 cover everything the
/// models need; higher ranks are stored but only reshaped, never computed on.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view: a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double* row(std::size_t r) { return data_.data() + r * cols(); }
  const double* row(std::size_t r) const { return data_.data() + r * cols(); }

  Tensor reshaped(Shape shape) const;
  void fill(double value);

  bool all_finite() const;

  // Bitwise equality of shape and contents.
  bool identical(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Keeps large tensor buffers on the heap between steps instead of
/// returning them to the OS (glibc only; a no-op elsewhere). Training and
/// evaluation call this once; it only affects speed.
void configure_allocator();

/// Dense kernels. All are pure; every result element is produced by a
/// fixed reduction order that depends only on the operands feeding it, so a
/// row of a product is bit-identical no matter how many other rows share the
/// call.
namespace kernels {

// Dot product of two contiguous ranges of equal length.
double dot(const double* a, const double* b, std::size_t n);

// c[m x n] = a[m x k] * b[k x n], raw row-major buffers. Each element is a
// single fma chain over k in ascending order.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k);

// c[m x n] = a[m x k] * b[n x k]^T via lane-split dot products.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k);

Tensor transpose(const Tensor& a);

// a[m x k] * b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m x k] * b[n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a[k x m]^T * b[k x n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Adds a length-n vector to every row of an m x n matrix.
Tensor add_row_vector(const Tensor& a, const Tensor& bias);

Tensor softmax_rows(const Tensor& a);
// Softmax of x[0..n) written into out[0..n).
void softmax_inplace(double* x, std::size_t n);

inline constexpr double kRmsEpsilon = 1e-6;
Tensor rms_normalize(const Tensor& a, const Tensor& gain);

// exp(x) by range reduction and a degree-13 polynomial, within a few ulp of
// std::exp. Branch-free so element loops vectorize; arguments are clamped to
// [-708, 709].
double vexp(double x);

// GELU in its tanh form, written as x * sigmoid(2u) with
// u = sqrt(2/pi) * (x + 0.044715 x^3). gelu_gate returns the sigmoid factor.
double gelu_gate(double x);
double gelu(double x);
double gelu_derivative(double x);
// Optionally stores the per-element gate for the backward pass.
Tensor gelu(const Tensor& a, Tensor* gate = nullptr);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace kernels
}  // namespace genieblue
