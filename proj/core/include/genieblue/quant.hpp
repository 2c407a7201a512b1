#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "genieblue/tensor.hpp"

namespace genieblue {

inline constexpr std::size_t kDefaultQuantGroup = 64;

/// Symmetric weight-only quantization. Groups run along each row (a rank-1
/// tensor is one row); the last group of a row may be short.
struct QuantizedTensor {
  unsigned bits = 4;
  std::size_t group = kDefaultQuantGroup;
  Shape shape;
  std::vector<std::int8_t> codes;  // one per element, row-major
  std::vector<double> scales;      // one per group, row-major group order

  std::size_t row_length() const;
  std::size_t groups_per_row() const;
  // Group holding element i.
  std::size_t group_of(std::size_t i) const;
};

/// Largest code magnitude, 2^(bits-1) - 1.
int max_code(unsigned bits);

QuantizedTensor quantize_weights(const Tensor& x, unsigned bits,
                                 std::size_t group = kDefaultQuantGroup);
Tensor dequantize(const QuantizedTensor& q);

/// Worst |x - dequant(q)| / (scale/2) over all groups; <= 1 means the bound
/// holds everywhere.
double worst_bound_ratio(const Tensor& original, const QuantizedTensor& q);

// Byte layout of one stored tensor: packed codes (4-bit: two per byte, most
// significant nibble first, two's complement; 8-bit: one signed byte each),
// then one little-endian float64 scale per group.
std::size_t packed_code_bytes(std::size_t elements, unsigned bits);
std::string pack(const QuantizedTensor& q);
QuantizedTensor unpack(std::string_view bytes, unsigned bits, std::size_t group, Shape shape);

/// Export plan: language-model matrices (base, replicated blocks, visual
/// experts) at `lm_bits`; vision, projector and adapter matrices at
/// `other_bits`. Rank-1 tensors (norm gains, biases) stay in float64.
struct QuantPlan {
  unsigned lm_bits = 4;
  unsigned other_bits = 8;
  std::size_t group = kDefaultQuantGroup;

  /// "w4g64" -> 4-bit LM, 8-bit rest; "w8g64" -> 8-bit everywhere.
  static QuantPlan parse(std::string_view text);
  std::string name() const;
  /// 0 when the tensor stays unquantized.
  unsigned bits_for(std::string_view tensor_name, const Shape& shape) const;
  void validate() const;
};

}  // namespace genieblue
