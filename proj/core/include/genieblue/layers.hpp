#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string_view>

#include "genieblue/autograd.hpp"
#include "genieblue/tensor.hpp"

namespace genieblue {

/// The six weight matrices of a pre-norm transformer block.
enum class Projection : std::size_t { kQuery, kKey, kValue, kOutput, kUp, kDown };
inline constexpr std::array<Projection, 6> kAllProjections = {
    Projection::kQuery, Projection::kKey, Projection::kValue,
    Projection::kOutput, Projection::kUp, Projection::kDown};
std::string_view projection_name(Projection p);

/// Weights of one transformer block. Linear maps are stored [out x in].
struct BlockWeights {
  Tensor norm1;  // [d]
  Tensor wq, wk, wv, wo;  // [d x d]
  Tensor norm2;  // [d]
  Tensor w1;  // [ffn x d]
  Tensor w2;  // [d x ffn]

  Tensor& matrix(Projection p);
  const Tensor& matrix(Projection p) const;
  void for_each(const std::function<void(std::string_view, Tensor&)>& fn);
  void for_each(const std::function<void(std::string_view, const Tensor&)>& fn) const;
};

/// Per-modality duplicate of a block's projections (visual expert). Norm
/// gains stay shared with the base block.
struct ExpertWeights {
  std::array<Tensor, 6> matrices;

  Tensor& matrix(Projection p) { return matrices[static_cast<std::size_t>(p)]; }
  const Tensor& matrix(Projection p) const { return matrices[static_cast<std::size_t>(p)]; }
};

/// Low-rank delta W + scale * B * A with A [rank x in], B [out x rank].
struct LoraAdapter {
  Tensor a;
  Tensor b;
  double scale = 1.0;

  std::size_t rank() const { return a.rows(); }
};

struct BlockAdapters {
  std::array<LoraAdapter, 6> adapters;

  LoraAdapter& at(Projection p) { return adapters[static_cast<std::size_t>(p)]; }
  const LoraAdapter& at(Projection p) const { return adapters[static_cast<std::size_t>(p)]; }
};

/// What one layer of the language model computes with. The block supplies
/// norm gains and the text-token projections; adapters add a low-rank delta
/// to those projections; an expert, when present, replaces the projections
/// for image-flagged rows.
struct LayerBinding {
  const BlockWeights* block = nullptr;
  const BlockAdapters* adapters = nullptr;
  const ExpertWeights* expert = nullptr;
};

/// x W^T (+ scale * (x A^T) B^T when an adapter is given).
Var linear(Tape& tape, Var x, const Tensor& weight, const LoraAdapter* adapter);

/// Row partition used for token-level routing.
struct RowRouting {
  std::vector<std::size_t> text_rows;
  std::vector<std::size_t> image_rows;
};

/// Pre-norm block: h + attn(norm1 h), then + ffn(norm2 .). `routing` is only
/// consulted when the binding carries an expert.
Var block_forward(Tape& tape, Var h, const LayerBinding& binding,
                  std::span<const Segment> segments, std::size_t heads, bool causal,
                  const RowRouting* routing);

}  // namespace genieblue
