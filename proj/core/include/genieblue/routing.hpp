#pragma once

#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "genieblue/checkpoint.hpp"

namespace genieblue {

enum class RouteMode { kText, kMultimodal };
enum class BaseStrategy { kNonShared, kShared };

std::string_view to_string(RouteMode m);
std::string_view to_string(BaseStrategy s);
RouteMode parse_route_mode(std::string_view text);        // "text" | "mm" | "multimodal"
BaseStrategy parse_base_strategy(std::string_view text);  // "nonshared" | "shared"

class RoutingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-layer weight bindings resolved against a loaded checkpoint. Routing
/// only binds views; the checkpoint is never modified, so any number of
/// routed models may share one checkpoint across threads.
///
///   text + non-shared -> pristine base blocks, no adapters
///   multimodal        -> replicated blocks at scheduled layers, base with
///                        adapters elsewhere (experts for the visual-expert
///                        baseline)
///   text + shared     -> the multimodal bindings, fed text only
class RoutedModel {
 public:
  RoutedModel(std::shared_ptr<const HybridCheckpoint> checkpoint, RouteMode mode,
              BaseStrategy strategy);

  RouteMode mode() const { return mode_; }
  BaseStrategy strategy() const { return strategy_; }
  const HybridCheckpoint& checkpoint() const { return *checkpoint_; }
  std::span<const LayerBinding> bindings() const { return bindings_; }

  /// Rebinds for another mode under the same strategy.
  void switch_mode(RouteMode mode);

  /// True when every bound tensor is a base-artifact tensor.
  bool binds_only_base() const;

  /// Digest of the bound tensors (source names and contents), for swap checks.
  std::string binding_digest() const;

  /// Logits [positions x vocab]. Text-routed models reject image positions.
  Tensor logits(const TokenBatch& batch, std::span<const Grid> grids = {}) const;

 private:
  void bind();

  std::shared_ptr<const HybridCheckpoint> checkpoint_;
  RouteMode mode_;
  BaseStrategy strategy_;
  std::vector<LayerBinding> bindings_;
};

RoutedModel route(std::shared_ptr<const HybridCheckpoint> checkpoint, RouteMode mode,
                  BaseStrategy strategy);

}  // namespace genieblue
