#pragma once

#include <span>
#include <string>
#include <string_view>

#include "genieblue/tensor.hpp"

namespace genieblue {

/// Incremental SHA-256 with lowercase hex output.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const std::byte> bytes);
  void update(std::string_view text);
  void update(const Tensor& tensor);
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::span<const std::byte> bytes);
// Digest of the raw little-endian IEEE-754 bytes of a tensor.
std::string sha256_hex(const Tensor& tensor);

std::span<const std::byte> raw_bytes(const Tensor& tensor);

}  // namespace genieblue
