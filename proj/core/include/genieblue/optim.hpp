#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "genieblue/tensor.hpp"

namespace genieblue {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-6;
  double weight_decay = 0.05;
};

struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
};

/// One trainable parameter in an optimizer step. lr_scale multiplies the
/// step learning rate (layer-wise decay).
struct ParamSlot {
  Tensor* param = nullptr;
  const Tensor* grad = nullptr;
  double lr_scale = 1.0;
};

/// Bias-corrected AdamW. Decoupled decay p <- p - lr*wd*p is applied before
/// the adaptive term. State is allocated lazily on the first step and the
/// slot order must then stay fixed.
void adamw_step(std::span<const ParamSlot> slots, AdamWState& state, double lr,
                const AdamWHyper& hyper);

struct LrSchedule {
  double peak = 1e-3;
  std::uint64_t warmup = 34;
  std::uint64_t total = 3434;
  double floor = 0.0;

  void validate() const;
};

// Linear warmup peak*(step+1)/warmup, then cosine to floor at step == total.
double lr_at(std::uint64_t step, const LrSchedule& schedule);

}  // namespace genieblue
