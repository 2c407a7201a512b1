#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "genieblue/adaptation.hpp"
#include "genieblue/data.hpp"
#include "genieblue/model.hpp"
#include "genieblue/optim.hpp"

namespace genieblue {

/// Stage 0 pretrains the base language model on text; stages 1 and 2 follow
/// the two-stage multimodal recipe.
struct StageConfig {
  int stage = 2;
  double peak_lr = 1e-4;
  double warmup_fraction = 0.01;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double weight_decay = 0.05;
  std::size_t accumulation = 1;
  double vision_lr_decay = 0.9;
  // Stage 2 normally requires a projector aligned by stage 1.
  bool allow_unaligned_projector = false;
  std::uint64_t seed = 0;

  static StageConfig defaults(int stage);
  std::size_t warmup_steps() const;
  LrSchedule schedule() const;
  void validate() const;
};

struct TrainReport {
  int stage = 0;
  std::uint64_t seed = 0;
  std::vector<double> losses;  // one per optimizer step
  std::string frozen_digest_before;
  std::string frozen_digest_after;
  std::string trainable_digest_after;
  std::size_t trainable_parameters = 0;
  double wall_seconds = 0.0;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Called after every optimizer step with the number of completed steps.
using StepHook = std::function<void(std::size_t completed_steps)>;

/// Mean next-token NLL over non-ignored positions (ignore[i] true = skip).
double cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const bool> ignore);

/// Per-layer learning rates for the vision blocks, bottom to top: the top
/// layer gets base_lr, each one below gets the previous times decay.
std::vector<double> layerwise_lr(const VisionEncoder& vision, double base_lr, double decay);

/// Batch loss for the hybrid's multimodal path under the given trainable set.
double batch_loss(const HybridModel& model, const TrainBatch& batch);

/// Trains the stage's freeze mask on `data`. Only trainable tensors change.
TrainReport run_stage(HybridModel& model, const StageConfig& config, const Dataset& data,
                      const StepHook& hook = {});

/// Trains every language-model parameter of a fresh base on text tasks.
TrainReport pretrain_base(BaseModel& model, const StageConfig& config, const Dataset& data,
                          const StepHook& hook = {});

/// Combined digest of the named tensors, in visiting order.
std::string group_digest(const HybridModel& model, const TrainableNames& names, bool include);

}  // namespace genieblue
