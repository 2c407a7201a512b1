#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "genieblue/layers.hpp"
#include "genieblue/model.hpp"

namespace genieblue {

enum class PlacementMode { kPost, kPre, kSkip };
std::string_view to_string(PlacementMode mode);
PlacementMode parse_placement_mode(std::string_view text);

/// Which layers get a replicated (fully trainable) block; the complement
/// carries LoRA adapters.
struct PlacementSchedule {
  PlacementMode mode = PlacementMode::kSkip;
  double fraction = 0.25;
  std::size_t layers = 0;
  std::vector<std::size_t> replicated;
  std::vector<std::size_t> complement;

  bool is_replicated(std::size_t layer) const;
  void validate() const;
  bool operator==(const PlacementSchedule&) const = default;
};

/// k = max(1, floor(layers * fraction)) blocks: Post takes the last k, Pre
/// the first k, Skip the evenly spaced set ceil((j+1)*layers/k) - 1.
PlacementSchedule plan_placement(std::size_t layers, double fraction, PlacementMode mode);

/// No replicated blocks; every layer is in the complement.
PlacementSchedule empty_placement(std::size_t layers);

inline constexpr std::size_t kDefaultLoraRank = 8;
inline constexpr double kLoraInitStd = 0.02;

enum class Architecture {
  kGenieBlue,     // replicated blocks swapped in as whole layers
  kVisualExpert,  // per-token expert projections on scheduled layers
  kFullFinetune,  // base weights themselves are trained
};
std::string_view to_string(Architecture a);
Architecture parse_architecture(std::string_view text);

/// Frozen base plus everything multimodal training adds on top of it. The
/// visual-expert baseline shares this type; its scheduled layers hold
/// `experts` instead of `replicated`.
struct HybridModel {
  Architecture architecture = Architecture::kGenieBlue;
  BaseModel base;
  PlacementSchedule schedule;
  std::size_t rank = 0;
  std::map<std::size_t, BlockWeights> replicated;
  std::map<std::size_t, ExpertWeights> experts;
  std::map<std::size_t, BlockAdapters> adapters;
  // Set once stage 1 has aligned the projector.
  bool projector_aligned = false;

  const ModelConfig& config() const { return base.config; }
};

using VisualExpertModel = HybridModel;

HybridModel build_genieblue(const BaseModel& base, const PlacementSchedule& schedule,
                            std::size_t rank, std::uint64_t seed = 0);
VisualExpertModel build_cogvlm(const BaseModel& base, const PlacementSchedule& schedule,
                               std::size_t rank, std::uint64_t seed = 0);
/// Full fine-tuning baseline: no additions, base trainable in stage 2.
HybridModel build_full_finetune(const BaseModel& base);

enum class ParamGroup { kBase, kReplicated, kAdapter, kVision, kProjector };
std::string_view to_string(ParamGroup g);

using HybridVisitor =
    std::function<void(const std::string& name, ParamGroup group, Tensor& tensor)>;
using ConstHybridVisitor =
    std::function<void(const std::string& name, ParamGroup group, const Tensor& tensor)>;

/// Visits every parameter exactly once, in a fixed order.
void for_each_parameter(HybridModel& model, const HybridVisitor& fn);
void for_each_parameter(const HybridModel& model, const ConstHybridVisitor& fn);

using TrainableNames = std::set<std::string>;

/// Stage 1: projector only. Stage 2: vision, projector, replicated/expert
/// blocks and adapters (plus the base itself for full fine-tuning).
TrainableNames freeze_mask(const HybridModel& model, int stage);
ParamSet resolve(const HybridModel& model, const TrainableNames& names);

struct TrainableCount {
  std::size_t replicated = 0;  // replicated blocks or visual experts
  std::size_t adapters = 0;
  std::size_t vision = 0;
  std::size_t projector = 0;
  std::size_t base = 0;  // nonzero only for full fine-tuning

  std::size_t total() const { return replicated + adapters + vision + projector + base; }
  bool operator==(const TrainableCount&) const = default;
};

/// Parameters trained during multimodal training (stage-2 mask).
TrainableCount count_trainable(const HybridModel& model);

/// W + scale * B * A.
Tensor merge_lora(const Tensor& weight, const LoraAdapter& adapter);

/// Blocks with every complement adapter folded into its weights.
std::vector<BlockWeights> merged_blocks(const HybridModel& model);

/// Layer bindings of the multimodal path (also used for shared-base text).
std::vector<LayerBinding> multimodal_bindings(const HybridModel& model);

/// Multimodal-path logits for a batch.
Tensor forward_multimodal(const HybridModel& model, const TokenBatch& batch,
                          std::span<const Grid> grids);

}  // namespace genieblue
