#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "genieblue/autograd.hpp"
#include "genieblue/layers.hpp"
#include "genieblue/tensor.hpp"

namespace genieblue {

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t width = 64;
  std::size_t layers = 8;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t max_seq = 64;
  std::size_t grid_side = 6;
  std::size_t image_alphabet = 16;
  std::size_t vision_width = 32;
  std::size_t vision_layers = 2;
  std::size_t vision_heads = 4;
  std::size_t vision_ffn = 128;

  std::size_t grid_cells() const { return grid_side * grid_side; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LanguageModel {
  Tensor embed;       // [vocab x d]
  Tensor pos;         // [max_seq x d]
  std::vector<BlockWeights> blocks;
  Tensor final_norm;  // [d]
  Tensor head;        // [vocab x d], untied from embed
  std::size_t heads = 1;

  std::size_t width() const { return embed.cols(); }
  std::size_t vocab() const { return embed.rows(); }
  std::size_t max_seq() const { return pos.rows(); }
};

struct VisionEncoder {
  Tensor symbol_embed;  // [alphabet x dv]
  Tensor cell_pos;      // [cells x dv]
  std::vector<BlockWeights> blocks;
  Tensor final_norm;    // [dv]
  std::size_t heads = 1;
};

/// Two-layer MLP d_v -> d -> d with one GELU.
struct Projector {
  Tensor w1;  // [d x dv]
  Tensor b1;  // [d]
  Tensor w2;  // [d x d]
  Tensor b2;  // [d]
};

struct BaseModel {
  ModelConfig config;
  LanguageModel lm;
  VisionEncoder vision;
  Projector projector;
};

BaseModel build_model(const ModelConfig& config, std::uint64_t seed);

// Closed-form parameter counts.
std::size_t block_parameter_count(std::size_t width, std::size_t ffn);
std::size_t lm_parameter_count(const ModelConfig& config);
std::size_t vision_parameter_count(const ModelConfig& config);
std::size_t projector_parameter_count(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

using ParamVisitor = std::function<void(const std::string& name, Tensor& tensor)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor& tensor)>;

void for_each_parameter(LanguageModel& lm, const std::string& prefix, const ParamVisitor& fn);
void for_each_parameter(VisionEncoder& vision, const std::string& prefix,
                        const ParamVisitor& fn);
void for_each_parameter(Projector& projector, const std::string& prefix,
                        const ParamVisitor& fn);
void for_each_parameter(BaseModel& model, const ParamVisitor& fn);
void for_each_parameter(const BaseModel& model, const ConstParamVisitor& fn);

// ---------------------------------------------------------------------------
// Inputs

enum class Modality : std::uint8_t { kText = 0, kImage = 1 };

struct Grid {
  std::size_t side = 0;
  std::vector<std::uint8_t> cells;  // row-major symbols

  std::uint8_t at(std::size_t r, std::size_t c) const { return cells[r * side + c]; }
  bool operator==(const Grid&) const = default;
};

/// Rows of token ids with a per-position modality flag. Image positions form
/// a contiguous prefix of each row; their ids are placeholders.
struct TokenBatch {
  std::vector<std::vector<std::uint32_t>> ids;
  std::vector<std::vector<Modality>> modality;

  std::size_t rows() const { return ids.size(); }
  std::size_t total_positions() const;
  std::vector<std::size_t> lengths() const;
  std::vector<Segment> segments() const;
  std::size_t image_positions() const;
  std::size_t image_prefix(std::size_t row) const;
  RowRouting routing() const;

  void validate(std::size_t vocab, std::size_t max_seq) const;
};

// ---------------------------------------------------------------------------
// Forward passes

std::vector<LayerBinding> base_bindings(const LanguageModel& lm);

/// Records the language model over a batch; returns logits [positions x vocab].
Var lm_forward(Tape& tape, const LanguageModel& lm, std::span<const LayerBinding> layers,
               const TokenBatch& batch, std::optional<Var> image_embeddings);

/// Vision encoder over a list of grids; rows are grid-major, cell-minor.
Var vision_forward(Tape& tape, const VisionEncoder& vision, std::span<const Grid> grids);
Var projector_forward(Tape& tape, const Projector& projector, Var features);

/// Full ViT -> projector -> LM topology. Each batch row with an image prefix
/// consumes the next grid in order; `grids` may be empty for text batches.
Var mllm_forward(Tape& tape, const LanguageModel& lm, std::span<const LayerBinding> layers,
                 const VisionEncoder& vision, const Projector& projector,
                 const TokenBatch& batch, std::span<const Grid> grids);

/// Pristine base forward (no adapters). `injected` must be supplied iff the
/// batch has image positions.
Tensor forward_lm(const LanguageModel& lm, const TokenBatch& batch,
                  const Tensor* injected = nullptr);
Tensor forward_lm(const LanguageModel& lm, std::span<const LayerBinding> layers,
                  const TokenBatch& batch, const Tensor* injected = nullptr);

/// Grid -> [cells x d] embeddings in the LM width.
Tensor encode_and_project(const VisionEncoder& vision, const Projector& projector,
                          const Grid& grid);

}  // namespace genieblue
