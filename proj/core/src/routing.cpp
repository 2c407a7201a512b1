#include "genieblue/routing.hpp"

#include "genieblue/digest.hpp"

namespace genieblue {

std::string_view to_string(RouteMode m) {
  return m == RouteMode::kText ? "text" : "multimodal";
}

std::string_view to_string(BaseStrategy s) {
  return s == BaseStrategy::kNonShared ? "nonshared" : "shared";
}

RouteMode parse_route_mode(std::string_view text) {
  if (text == "text") return RouteMode::kText;
  if (text == "mm" || text == "multimodal") return RouteMode::kMultimodal;
  throw std::invalid_argument("unknown mode '" + std::string(text) + "' (expected text or mm)");
}

BaseStrategy parse_base_strategy(std::string_view text) {
  if (text == "nonshared" || text == "non-shared") return BaseStrategy::kNonShared;
  if (text == "shared") return BaseStrategy::kShared;
  throw std::invalid_argument("unknown strategy '" + std::string(text) +
                              "' (expected shared or nonshared)");
}

RoutedModel::RoutedModel(std::shared_ptr<const HybridCheckpoint> checkpoint, RouteMode mode,
                         BaseStrategy strategy)
    : checkpoint_(std::move(checkpoint)), mode_(mode), strategy_(strategy) {
  if (!checkpoint_) throw RoutingError("route: no checkpoint");
  bind();
}

void RoutedModel::bind() {
  const HybridModel& m = checkpoint_->model;
  const bool pristine = mode_ == RouteMode::kText && strategy_ == BaseStrategy::kNonShared;
  if (pristine) {
    if (m.architecture == Architecture::kFullFinetune) {
      throw RoutingError("route: a fully fine-tuned checkpoint keeps no pristine base");
    }
    bindings_ = base_bindings(m.base.lm);
    return;
  }
  if (!checkpoint_->has_delta) {
    throw RoutingError("route: " + std::string(to_string(mode_)) + "/" +
                       std::string(to_string(strategy_)) +
                       " routing needs the delta artifact, which was not loaded");
  }
  bindings_ = multimodal_bindings(m);
}

void RoutedModel::switch_mode(RouteMode mode) {
  const RouteMode previous = mode_;
  mode_ = mode;
  try {
    bind();
  } catch (...) {
    mode_ = previous;
    throw;
  }
}

bool RoutedModel::binds_only_base() const {
  const auto& blocks = checkpoint_->model.base.lm.blocks;
  for (std::size_t l = 0; l < bindings_.size(); ++l) {
    const LayerBinding& b = bindings_[l];
    if (b.block != &blocks[l] || b.adapters != nullptr || b.expert != nullptr) return false;
  }
  return true;
}

std::string RoutedModel::binding_digest() const {
  const HybridModel& m = checkpoint_->model;
  Sha256 h;
  for (std::size_t l = 0; l < bindings_.size(); ++l) {
    const LayerBinding& b = bindings_[l];
    const std::string layer = std::to_string(l);
    const bool own = b.block == &m.base.lm.blocks[l];
    h.update((own ? "lm.blocks." : "replicated.") + layer);
    b.block->for_each([&](std::string_view, const Tensor& t) { h.update(t); });
    if (b.adapters) {
      h.update("adapter." + layer);
      for (const auto& a : b.adapters->adapters) {
        h.update(a.a);
        h.update(a.b);
      }
    }
    if (b.expert) {
      h.update("expert." + layer);
      for (const auto& t : b.expert->matrices) h.update(t);
    }
  }
  return h.hex();
}

Tensor RoutedModel::logits(const TokenBatch& batch, std::span<const Grid> grids) const {
  const HybridModel& m = checkpoint_->model;
  if (mode_ == RouteMode::kText && (batch.image_positions() > 0 || !grids.empty())) {
    throw RoutingError("route: multimodal input given to a text-routed model");
  }
  Tape tape;
  return mllm_forward(tape, m.base.lm, bindings_, m.base.vision, m.base.projector, batch, grids)
      .value();
}

RoutedModel route(std::shared_ptr<const HybridCheckpoint> checkpoint, RouteMode mode,
                  BaseStrategy strategy) {
  return RoutedModel(std::move(checkpoint), mode, strategy);
}

}  // namespace genieblue
