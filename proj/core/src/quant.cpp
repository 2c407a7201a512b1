#include "genieblue/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace genieblue {

namespace {

void check_bits(unsigned bits) {
  if (bits != 4 && bits != 8) {
    throw std::invalid_argument("quantize: bit width must be 4 or 8, got " +
                                std::to_string(bits));
  }
}

std::size_t row_length_of(const Shape& shape) {
  return shape.empty() ? 1 : shape.back();
}

}  // namespace

int max_code(unsigned bits) {
  check_bits(bits);
  return (1 << (bits - 1)) - 1;
}

std::size_t QuantizedTensor::row_length() const { return row_length_of(shape); }

std::size_t QuantizedTensor::groups_per_row() const {
  return (row_length() + group - 1) / group;
}

std::size_t QuantizedTensor::group_of(std::size_t i) const {
  const std::size_t n = row_length();
  return (i / n) * groups_per_row() + (i % n) / group;
}

QuantizedTensor quantize_weights(const Tensor& x, unsigned bits, std::size_t group) {
  const int qmax = max_code(bits);
  if (group == 0) throw std::invalid_argument("quantize: group size must be positive");
  if (!x.all_finite()) throw std::invalid_argument("quantize: input has non-finite values");

  QuantizedTensor q;
  q.bits = bits;
  q.group = group;
  q.shape = x.shape();
  q.codes.resize(x.size());
  if (x.empty()) return q;

  const std::size_t n = q.row_length();
  const std::size_t rows = x.size() / n;
  q.scales.reserve(rows * q.groups_per_row());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g0 = 0; g0 < n; g0 += group) {
      const std::size_t g1 = std::min(n, g0 + group);
      const double* src = x.data() + r * n;
      double peak = 0.0;
      for (std::size_t j = g0; j < g1; ++j) peak = std::max(peak, std::fabs(src[j]));
      const double scale = peak == 0.0 ? 1.0 : peak / qmax;
      q.scales.push_back(scale);
      for (std::size_t j = g0; j < g1; ++j) {
        long c = std::clamp<long>(std::lround(src[j] / scale), -qmax, qmax);
        // Rounding of src/scale can land one code off near a half step;
        // keep whichever neighbour reconstructs closest.
        for (long alt : {c - 1, c + 1}) {
          if (alt < -qmax || alt > qmax) continue;
          if (std::fabs(src[j] - alt * scale) < std::fabs(src[j] - c * scale)) c = alt;
        }
        q.codes[r * n + j] = static_cast<std::int8_t>(c);
      }
    }
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  if (out.size() != q.codes.size()) throw ShapeError("dequantize: code count mismatch");
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    out[i] = q.codes[i] * q.scales[q.group_of(i)];
  }
  return out;
}

double worst_bound_ratio(const Tensor& original, const QuantizedTensor& q) {
  if (original.shape() != q.shape) throw ShapeError("worst_bound_ratio: shape mismatch");
  const Tensor back = dequantize(q);
  double worst = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    const double half = q.scales[q.group_of(i)] / 2.0;
    worst = std::max(worst, std::fabs(original[i] - back[i]) / half);
  }
  return worst;
}

std::size_t packed_code_bytes(std::size_t elements, unsigned bits) {
  check_bits(bits);
  return bits == 8 ? elements : (elements + 1) / 2;
}

std::string pack(const QuantizedTensor& q) {
  std::string out;
  const std::size_t code_bytes = packed_code_bytes(q.codes.size(), q.bits);
  out.reserve(code_bytes + 8 * q.scales.size());
  if (q.bits == 8) {
    for (std::int8_t c : q.codes) out.push_back(static_cast<char>(c));
  } else {
    for (std::size_t i = 0; i < q.codes.size(); i += 2) {
      const unsigned hi = static_cast<unsigned>(q.codes[i]) & 0xF;
      const unsigned lo = i + 1 < q.codes.size() ? static_cast<unsigned>(q.codes[i + 1]) & 0xF : 0;
      out.push_back(static_cast<char>((hi << 4) | lo));
    }
  }
  static_assert(std::endian::native == std::endian::little);
  for (double s : q.scales) {
    char buf[sizeof(double)];
    std::memcpy(buf, &s, sizeof buf);
    out.append(buf, sizeof buf);
  }
  return out;
}

QuantizedTensor unpack(std::string_view bytes, unsigned bits, std::size_t group, Shape shape) {
  QuantizedTensor q;
  q.bits = bits;
  q.group = group;
  q.shape = std::move(shape);
  const std::size_t n = element_count(q.shape);
  const std::size_t code_bytes = packed_code_bytes(n, bits);
  const std::size_t groups = n == 0 ? 0 : (n / q.row_length()) * q.groups_per_row();
  if (bytes.size() != code_bytes + 8 * groups) {
    throw std::invalid_argument("unpack: expected " + std::to_string(code_bytes + 8 * groups) +
                                " bytes, got " + std::to_string(bytes.size()));
  }
  q.codes.resize(n);
  const int qmax = max_code(bits);
  for (std::size_t i = 0; i < n; ++i) {
    int c;
    if (bits == 8) {
      c = static_cast<std::int8_t>(bytes[i]);
    } else {
      const unsigned byte = static_cast<unsigned char>(bytes[i / 2]);
      const unsigned nib = i % 2 == 0 ? byte >> 4 : byte & 0xF;
      c = nib >= 8 ? static_cast<int>(nib) - 16 : static_cast<int>(nib);
    }
    if (c < -qmax || c > qmax) throw std::invalid_argument("unpack: code out of range");
    q.codes[i] = static_cast<std::int8_t>(c);
  }
  q.scales.resize(groups);
  std::memcpy(q.scales.data(), bytes.data() + code_bytes, 8 * groups);
  return q;
}

QuantPlan QuantPlan::parse(std::string_view text) {
  QuantPlan p;
  if (text == "w4g64") {
    p.lm_bits = 4;
  } else if (text == "w8g64") {
    p.lm_bits = 8;
  } else {
    throw std::invalid_argument("unknown quantization plan '" + std::string(text) +
                                "' (expected w4g64 or w8g64)");
  }
  p.other_bits = 8;
  p.group = 64;
  return p;
}

std::string QuantPlan::name() const {
  return "w" + std::to_string(lm_bits) + "g" + std::to_string(group);
}

unsigned QuantPlan::bits_for(std::string_view tensor_name, const Shape& shape) const {
  if (shape.size() < 2) return 0;
  // Replicated blocks and visual experts are language-model layers too.
  const bool lm = tensor_name.starts_with("lm.") || tensor_name.starts_with("replicated.") ||
                  tensor_name.starts_with("expert.");
  return lm ? lm_bits : other_bits;
}

void QuantPlan::validate() const {
  check_bits(lm_bits);
  check_bits(other_bits);
  if (group == 0) throw std::invalid_argument("QuantPlan: group size must be positive");
}

}  // namespace genieblue
