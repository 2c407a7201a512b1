#include "genieblue/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace genieblue {

void adamw_step(std::span<const ParamSlot> slots, AdamWState& state, double lr,
                const AdamWHyper& hyper) {
  if (state.m.empty() && state.t == 0) {
    for (const auto& s : slots) {
      state.m.emplace_back(s.param->shape());
      state.v.emplace_back(s.param->shape());
    }
  }
  if (state.m.size() != slots.size()) {
    throw std::invalid_argument("adamw_step: optimizer state holds " +
                                std::to_string(state.m.size()) + " slots, got " +
                                std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& s = slots[i];
    if (s.grad->shape() != s.param->shape() || state.m[i].shape() != s.param->shape()) {
      throw ShapeError("adamw_step: slot " + std::to_string(i) + " parameter " +
                       to_string(s.param->shape()) + ", gradient " +
                       to_string(s.grad->shape()) + ", state " +
                       to_string(state.m[i].shape()));
    }
    if (!s.grad->all_finite()) {
      throw std::domain_error("adamw_step: non-finite gradient in slot " + std::to_string(i));
    }
  }

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& s = slots[i];
    const double step_lr = lr * s.lr_scale;
    Tensor& p = *s.param;
    const Tensor& g = *s.grad;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] -= step_lr * hyper.weight_decay * p[j];
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= step_lr * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    }
  }
}

void LrSchedule::validate() const {
  if (warmup == 0 || warmup >= total) {
    throw std::invalid_argument("LrSchedule: need 0 < warmup < total, got warmup=" +
                                std::to_string(warmup) + " total=" + std::to_string(total));
  }
  if (floor > peak) throw std::invalid_argument("LrSchedule: floor exceeds peak");
}

double lr_at(std::uint64_t step, const LrSchedule& schedule) {
  schedule.validate();
  if (step > schedule.total) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total " +
                            std::to_string(schedule.total));
  }
  if (step < schedule.warmup) {
    return schedule.peak * static_cast<double>(step + 1) /
           static_cast<double>(schedule.warmup);
  }
  const double progress = static_cast<double>(step - schedule.warmup) /
                          static_cast<double>(schedule.total - schedule.warmup);
  return schedule.floor + 0.5 * (schedule.peak - schedule.floor) *
                              (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace genieblue
