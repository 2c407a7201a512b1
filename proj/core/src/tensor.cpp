#include "genieblue/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace genieblue {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return 1;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  return shape_.back();
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  // x * 0 is 0 for finite x and NaN otherwise; independent partial sums
  // keep this off the critical path of the backward pass.
  double acc[8] = {};
  const std::size_t n = data_.size();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += data_[i + l] * 0.0;
  }
  for (; i < n; ++i) acc[0] += data_[i] * 0.0;
  double total = 0.0;
  for (double a : acc) total += a;
  return total == 0.0;
}

bool Tensor::identical(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(),
                      data_.size() * sizeof(double)) == 0);
}

void configure_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    // A training step allocates and frees a few hundred MB of activations;
    // with the default thresholds every step pays for fresh page faults.
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

namespace kernels {
namespace {

constexpr std::size_t kLanes = 8;

// Horizontal reduction in a fixed pairwise order.
inline double reduce_lanes(const double* v) {
  return ((v[0] + v[4]) + (v[2] + v[6])) + ((v[1] + v[5]) + (v[3] + v[7]));
}

// Computes a TM x TN block of dot products. Each output element runs the
// same lane-wise fma sequence regardless of the tile size it was computed
// in, which is what makes gemm rows independent of their neighbours.
template <std::size_t TM, std::size_t TN>
inline void dot_tile(const double* a, std::size_t lda, const double* b,
                     std::size_t ldb, double* c, std::size_t ldc,
                     std::size_t k) {
  double acc[TM][TN][kLanes] = {};
  std::size_t kk = 0;
#if defined(__AVX512F__)
  // Same lane-wise fma sequence as the portable loop below, in registers.
  {
    __m512d r[TM][TN];
    for (std::size_t i = 0; i < TM; ++i) {
      for (std::size_t j = 0; j < TN; ++j) r[i][j] = _mm512_setzero_pd();
    }
    for (; kk + kLanes <= k; kk += kLanes) {
      __m512d bv[TN];
      for (std::size_t j = 0; j < TN; ++j) bv[j] = _mm512_loadu_pd(b + j * ldb + kk);
      for (std::size_t i = 0; i < TM; ++i) {
        const __m512d av = _mm512_loadu_pd(a + i * lda + kk);
        for (std::size_t j = 0; j < TN; ++j) r[i][j] = _mm512_fmadd_pd(av, bv[j], r[i][j]);
      }
    }
    for (std::size_t i = 0; i < TM; ++i) {
      for (std::size_t j = 0; j < TN; ++j) _mm512_storeu_pd(acc[i][j], r[i][j]);
    }
  }
#else
  for (; kk + kLanes <= k; kk += kLanes) {
    for (std::size_t i = 0; i < TM; ++i) {
      for (std::size_t j = 0; j < TN; ++j) {
        for (std::size_t l = 0; l < kLanes; ++l) {
          acc[i][j][l] = std::fma(a[i * lda + kk + l], b[j * ldb + kk + l],
                                  acc[i][j][l]);
        }
      }
    }
  }
#endif
  for (std::size_t i = 0; i < TM; ++i) {
    for (std::size_t j = 0; j < TN; ++j) {
      double s = reduce_lanes(acc[i][j]);
      for (std::size_t t = kk; t < k; ++t) {
        s = std::fma(a[i * lda + t], b[j * ldb + t], s);
      }
      c[i * ldc + j] = s;
    }
  }
}

// Row-times-matrix form: c[i][j] = fma chain over t = 0..k-1 of
// a[i][t] * b[t][j], always in that order. No lane reduction, so the result
// of every element is independent of tiling, vector width and row count.
#if defined(__AVX512F__)
template <std::size_t TM, std::size_t NV>
inline void axpy_tile(const double* a, std::size_t lda, const double* b,
                      std::size_t ldb, double* c, std::size_t ldc, std::size_t k,
                      __mmask8 last) {
  __m512d acc[TM][NV];
#pragma GCC unroll 8
  for (std::size_t i = 0; i < TM; ++i) {
#pragma GCC unroll 4
    for (std::size_t v = 0; v < NV; ++v) acc[i][v] = _mm512_setzero_pd();
  }
  for (std::size_t t = 0; t < k; ++t) {
    __m512d bv[NV];
#pragma GCC unroll 4
    for (std::size_t v = 0; v < NV; ++v) {
      const __mmask8 m = v + 1 == NV ? last : __mmask8(0xFF);
      bv[v] = _mm512_maskz_loadu_pd(m, b + t * ldb + v * kLanes);
    }
#pragma GCC unroll 8
    for (std::size_t i = 0; i < TM; ++i) {
      const __m512d av = _mm512_set1_pd(a[i * lda + t]);
#pragma GCC unroll 4
      for (std::size_t v = 0; v < NV; ++v) acc[i][v] = _mm512_fmadd_pd(av, bv[v], acc[i][v]);
    }
  }
#pragma GCC unroll 8
  for (std::size_t i = 0; i < TM; ++i) {
#pragma GCC unroll 4
    for (std::size_t v = 0; v < NV; ++v) {
      const __mmask8 m = v + 1 == NV ? last : __mmask8(0xFF);
      _mm512_mask_storeu_pd(c + i * ldc + v * kLanes, m, acc[i][v]);
    }
  }
}

constexpr std::size_t kTileRows = 6;
constexpr std::size_t kTileVectors = 4;

template <std::size_t NV>
void axpy_panel(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                std::size_t k, __mmask8 last) {
  std::size_t i = 0;
  for (; i + kTileRows <= m; i += kTileRows) {
    axpy_tile<kTileRows, NV>(a + i * k, k, b, n, c + i * n, n, k, last);
  }
  switch (m - i) {
    case 5: axpy_tile<5, NV>(a + i * k, k, b, n, c + i * n, n, k, last); break;
    case 4: axpy_tile<4, NV>(a + i * k, k, b, n, c + i * n, n, k, last); break;
    case 3: axpy_tile<3, NV>(a + i * k, k, b, n, c + i * n, n, k, last); break;
    case 2: axpy_tile<2, NV>(a + i * k, k, b, n, c + i * n, n, k, last); break;
    case 1: axpy_tile<1, NV>(a + i * k, k, b, n, c + i * n, n, k, last); break;
    default: break;
  }
}
#endif

[[gnu::always_inline]] inline double exp_poly(double x) {
  constexpr double kLog2e = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShift = 0x1.8p52;
  x = x < -708.0 ? -708.0 : (x > 709.0 ? 709.0 : x);
  double kd = x * kLog2e + kShift;
  const std::uint64_t ki = std::bit_cast<std::uint64_t>(kd);
  kd -= kShift;
  double r = std::fma(-kd, kLn2Hi, x);
  r = std::fma(-kd, kLn2Lo, r);
  double p = 1.0 / 6227020800.0;
  p = std::fma(p, r, 1.0 / 479001600.0);
  p = std::fma(p, r, 1.0 / 39916800.0);
  p = std::fma(p, r, 1.0 / 3628800.0);
  p = std::fma(p, r, 1.0 / 362880.0);
  p = std::fma(p, r, 1.0 / 40320.0);
  p = std::fma(p, r, 1.0 / 5040.0);
  p = std::fma(p, r, 1.0 / 720.0);
  p = std::fma(p, r, 1.0 / 120.0);
  p = std::fma(p, r, 1.0 / 24.0);
  p = std::fma(p, r, 1.0 / 6.0);
  p = std::fma(p, r, 0.5);
  p = std::fma(p, r, 1.0);
  p = std::fma(p, r, 1.0);
  const double scale = std::bit_cast<double>((ki + 1023u) << 52);
  return p * scale;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " +
                     to_string(t.shape()));
  }
}

}  // namespace

double dot(const double* a, const double* b, std::size_t n) {
  double out = 0.0;
  dot_tile<1, 1>(a, n, b, n, &out, 1, n);
  return out;
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k) {
  constexpr std::size_t kTile = 4;
  std::size_t i = 0;
  for (; i + kTile <= m; i += kTile) {
    std::size_t j = 0;
    for (; j + kTile <= n; j += kTile) {
      dot_tile<kTile, kTile>(a + i * k, k, b + j * k, k, c + i * n + j, n, k);
    }
    for (; j < n; ++j) {
      dot_tile<kTile, 1>(a + i * k, k, b + j * k, k, c + i * n + j, n, k);
    }
  }
  for (; i < m; ++i) {
    std::size_t j = 0;
    for (; j + kTile <= n; j += kTile) {
      dot_tile<1, kTile>(a + i * k, k, b + j * k, k, c + i * n + j, n, k);
    }
    for (; j < n; ++j) {
      dot_tile<1, 1>(a + i * k, k, b + j * k, k, c + i * n + j, n, k);
    }
  }
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k) {
#if defined(__AVX512F__)
  constexpr std::size_t kPanel = kTileVectors * kLanes;
  std::size_t j = 0;
  for (; j + kPanel <= n; j += kPanel) {
    axpy_panel<kTileVectors>(a, b + j, c + j, m, n, k, 0xFF);
  }
  if (j < n) {
    const std::size_t rest = n - j;
    const std::size_t vectors = (rest + kLanes - 1) / kLanes;
    const std::size_t tail = rest - (vectors - 1) * kLanes;
    const __mmask8 last = static_cast<__mmask8>((1u << tail) - 1u);
    switch (vectors) {
      case 1: axpy_panel<1>(a, b + j, c + j, m, n, k, last); break;
      case 2: axpy_panel<2>(a, b + j, c + j, m, n, k, last); break;
      case 3: axpy_panel<3>(a, b + j, c + j, m, n, k, last); break;
      case 4: axpy_panel<4>(a, b + j, c + j, m, n, k, last); break;
      default: break;
    }
    static_assert(kTileVectors == 4, "tail dispatch covers 1..kTileVectors vectors");
  }
#else
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * k + t];
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
#endif
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner extents differ, " + to_string(a.shape()) +
                     " x " + to_string(b.shape()) + "^T");
  }
  return matmul(a, transpose(b));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) +
                     " x " + to_string(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  gemm_nn(a.data(), b.data(), out.data(), a.rows(), b.cols(), a.cols());
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner extents differ, " + to_string(a.shape()) +
                     "^T x " + to_string(b.shape()));
  }
  return matmul(transpose(a), b);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

Tensor add_row_vector(const Tensor& a, const Tensor& bias) {
  if (bias.size() != a.cols()) {
    throw ShapeError("add_row_vector: bias " + to_string(bias.shape()) +
                     " does not match rows of " + to_string(a.shape()));
  }
  Tensor out = a;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* row = out.row(r);
    for (std::size_t c = 0; c < out.cols(); ++c) row[c] += bias[c];
  }
  return out;
}

void softmax_inplace(double* x, std::size_t n) {
  if (n == 0) return;
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  for (std::size_t i = 0; i < n; ++i) x[i] = exp_poly(x[i] - mx);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += x[i];
  const double inv = 1.0 / sum;
  for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

Tensor softmax_rows(const Tensor& a) {
  Tensor out = a;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r), out.cols());
  return out;
}

Tensor rms_normalize(const Tensor& a, const Tensor& gain) {
  if (gain.size() != a.cols()) {
    throw ShapeError("rms_normalize: gain " + to_string(gain.shape()) +
                     " does not match " + to_string(a.shape()));
  }
  Tensor out = a;
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* x = a.row(r);
    double ms = 0.0;
    for (std::size_t c = 0; c < n; ++c) ms += x[c] * x[c];
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(n) + kRmsEpsilon);
    double* y = out.row(r);
    for (std::size_t c = 0; c < n; ++c) y[c] = x[c] * inv * gain[c];
  }
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double vexp(double x) { return exp_poly(x); }

[[gnu::always_inline]] inline double gate_of(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 1.0 / (1.0 + exp_poly(-2.0 * u));
}

double gelu_gate(double x) { return gate_of(x); }

double gelu(double x) { return x * gelu_gate(x); }

double gelu_derivative(double x) {
  const double s = gelu_gate(x);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return s + x * s * (1.0 - s) * 2.0 * du;
}

Tensor gelu(const Tensor& a, Tensor* gate) {
  Tensor out(a.shape());
  const double* x = a.data();
  double* y = out.data();
  const std::size_t n = a.size();
  if (gate) {
    *gate = Tensor(a.shape());
    double* g = gate->data();
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = gate_of(x[i]);
      y[i] = x[i] * g[i];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * gate_of(x[i]);
  }
  return out;
}

}  // namespace kernels
}  // namespace genieblue
