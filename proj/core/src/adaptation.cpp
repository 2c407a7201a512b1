#include "genieblue/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace genieblue {

std::string_view to_string(PlacementMode mode) {
  switch (mode) {
    case PlacementMode::kPost: return "post";
    case PlacementMode::kPre: return "pre";
    case PlacementMode::kSkip: return "skip";
  }
  throw std::logic_error("unknown placement mode");
}

PlacementMode parse_placement_mode(std::string_view text) {
  if (text == "post") return PlacementMode::kPost;
  if (text == "pre") return PlacementMode::kPre;
  if (text == "skip") return PlacementMode::kSkip;
  throw std::invalid_argument("unknown placement mode '" + std::string(text) + "'");
}

std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::kGenieBlue: return "genieblue";
    case Architecture::kVisualExpert: return "visual-expert";
    case Architecture::kFullFinetune: return "full-finetune";
  }
  throw std::logic_error("unknown architecture");
}

Architecture parse_architecture(std::string_view text) {
  if (text == "genieblue") return Architecture::kGenieBlue;
  if (text == "visual-expert") return Architecture::kVisualExpert;
  if (text == "full-finetune") return Architecture::kFullFinetune;
  throw std::invalid_argument("unknown architecture '" + std::string(text) + "'");
}

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBase: return "base";
    case ParamGroup::kReplicated: return "replicated";
    case ParamGroup::kAdapter: return "adapter";
    case ParamGroup::kVision: return "vision";
    case ParamGroup::kProjector: return "projector";
  }
  throw std::logic_error("unknown parameter group");
}

bool PlacementSchedule::is_replicated(std::size_t layer) const {
  return std::binary_search(replicated.begin(), replicated.end(), layer);
}

void PlacementSchedule::validate() const {
  std::vector<bool> seen(layers, false);
  auto mark = [&](const std::vector<std::size_t>& idx, const char* what) {
    if (!std::is_sorted(idx.begin(), idx.end())) {
      throw std::invalid_argument(std::string("PlacementSchedule: ") + what + " not sorted");
    }
    for (auto i : idx) {
      if (i >= layers || seen[i]) {
        throw std::invalid_argument("PlacementSchedule: layer " + std::to_string(i) +
                                    " out of range or listed twice");
      }
      seen[i] = true;
    }
  };
  mark(replicated, "replicated");
  mark(complement, "complement");
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw std::invalid_argument("PlacementSchedule: replicated and complement do not cover all layers");
  }
}

PlacementSchedule plan_placement(std::size_t layers, double fraction, PlacementMode mode) {
  if (layers == 0) throw std::invalid_argument("plan_placement: need at least one layer");
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw std::invalid_argument("plan_placement: fraction must lie in (0, 1], got " +
                                std::to_string(fraction));
  }
  // The epsilon keeps fractions like 1/3 from flooring one short.
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(static_cast<double>(layers) * fraction + 1e-9)));
  PlacementSchedule s;
  s.mode = mode;
  s.fraction = fraction;
  s.layers = layers;
  switch (mode) {
    case PlacementMode::kPost:
      for (std::size_t i = layers - k; i < layers; ++i) s.replicated.push_back(i);
      break;
    case PlacementMode::kPre:
      for (std::size_t i = 0; i < k; ++i) s.replicated.push_back(i);
      break;
    case PlacementMode::kSkip:
      for (std::size_t j = 0; j < k; ++j) {
        s.replicated.push_back(((j + 1) * layers + k - 1) / k - 1);
      }
      break;
  }
  for (std::size_t i = 0; i < layers; ++i) {
    if (!s.is_replicated(i)) s.complement.push_back(i);
  }
  return s;
}

PlacementSchedule empty_placement(std::size_t layers) {
  PlacementSchedule s;
  s.fraction = 0.0;
  s.layers = layers;
  for (std::size_t i = 0; i < layers; ++i) s.complement.push_back(i);
  return s;
}

namespace {

void check_schedule(const BaseModel& base, const PlacementSchedule& schedule,
                    std::size_t rank) {
  if (schedule.layers != base.lm.blocks.size()) {
    throw std::invalid_argument("schedule planned for " + std::to_string(schedule.layers) +
                                " layers, model has " + std::to_string(base.lm.blocks.size()));
  }
  schedule.validate();
  if (rank >= base.config.width) {
    throw std::invalid_argument("LoRA rank " + std::to_string(rank) +
                                " must be below model width " +
                                std::to_string(base.config.width));
  }
}

BlockAdapters make_adapters(const BlockWeights& block, std::size_t rank,
                            std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  BlockAdapters out;
  for (Projection p : kAllProjections) {
    const Tensor& w = block.matrix(p);
    LoraAdapter& a = out.at(p);
    a.a = Tensor({rank, w.cols()});
    for (auto& v : a.a.values()) v = dist(rng) * kLoraInitStd;
    a.b = Tensor({w.rows(), rank});
    // alpha = rank
    a.scale = 1.0;
  }
  return out;
}

void attach_adapters(HybridModel& m, std::uint64_t seed) {
  if (m.rank == 0) return;
  std::mt19937_64 rng(seed);
  for (std::size_t layer : m.schedule.complement) {
    m.adapters.emplace(layer, make_adapters(m.base.lm.blocks[layer], m.rank, rng));
  }
}

}  // namespace

HybridModel build_genieblue(const BaseModel& base, const PlacementSchedule& schedule,
                            std::size_t rank, std::uint64_t seed) {
  check_schedule(base, schedule, rank);
  HybridModel m;
  m.architecture = Architecture::kGenieBlue;
  m.base = base;
  m.schedule = schedule;
  m.rank = rank;
  for (std::size_t layer : schedule.replicated) {
    m.replicated.emplace(layer, base.lm.blocks[layer]);
  }
  attach_adapters(m, seed);
  return m;
}

VisualExpertModel build_cogvlm(const BaseModel& base, const PlacementSchedule& schedule,
                               std::size_t rank, std::uint64_t seed) {
  check_schedule(base, schedule, rank);
  HybridModel m;
  m.architecture = Architecture::kVisualExpert;
  m.base = base;
  m.schedule = schedule;
  m.rank = rank;
  for (std::size_t layer : schedule.replicated) {
    ExpertWeights e;
    for (Projection p : kAllProjections) e.matrix(p) = base.lm.blocks[layer].matrix(p);
    m.experts.emplace(layer, std::move(e));
  }
  attach_adapters(m, seed);
  return m;
}

HybridModel build_full_finetune(const BaseModel& base) {
  HybridModel m;
  m.architecture = Architecture::kFullFinetune;
  m.base = base;
  m.schedule = empty_placement(base.lm.blocks.size());
  return m;
}

void for_each_parameter(HybridModel& m, const HybridVisitor& fn) {
  for_each_parameter(m.base.lm, "lm.",
                     [&](const std::string& n, Tensor& t) { fn(n, ParamGroup::kBase, t); });
  for (auto& [layer, block] : m.replicated) {
    const std::string prefix = "replicated." + std::to_string(layer) + ".";
    block.for_each([&](std::string_view n, Tensor& t) {
      fn(prefix + std::string(n), ParamGroup::kReplicated, t);
    });
  }
  for (auto& [layer, expert] : m.experts) {
    const std::string prefix = "expert." + std::to_string(layer) + ".";
    for (Projection p : kAllProjections) {
      fn(prefix + std::string(projection_name(p)), ParamGroup::kReplicated, expert.matrix(p));
    }
  }
  for (auto& [layer, adapters] : m.adapters) {
    const std::string prefix = "adapter." + std::to_string(layer) + ".";
    for (Projection p : kAllProjections) {
      const std::string base = prefix + std::string(projection_name(p));
      fn(base + ".a", ParamGroup::kAdapter, adapters.at(p).a);
      fn(base + ".b", ParamGroup::kAdapter, adapters.at(p).b);
    }
  }
  for_each_parameter(m.base.vision, "vision.",
                     [&](const std::string& n, Tensor& t) { fn(n, ParamGroup::kVision, t); });
  for_each_parameter(m.base.projector, "projector.", [&](const std::string& n, Tensor& t) {
    fn(n, ParamGroup::kProjector, t);
  });
}

void for_each_parameter(const HybridModel& m, const ConstHybridVisitor& fn) {
  for_each_parameter(const_cast<HybridModel&>(m),
                     [&](const std::string& n, ParamGroup g, Tensor& t) { fn(n, g, t); });
}

TrainableNames freeze_mask(const HybridModel& model, int stage) {
  if (stage != 1 && stage != 2) {
    throw std::invalid_argument("freeze_mask: unknown stage " + std::to_string(stage));
  }
  TrainableNames names;
  for_each_parameter(model, [&](const std::string& name, ParamGroup g, const Tensor&) {
    bool trainable = false;
    if (stage == 1) {
      trainable = g == ParamGroup::kProjector;
    } else {
      trainable = g != ParamGroup::kBase ||
                  model.architecture == Architecture::kFullFinetune;
    }
    if (trainable) names.insert(name);
  });
  return names;
}

ParamSet resolve(const HybridModel& model, const TrainableNames& names) {
  ParamSet out;
  for_each_parameter(model, [&](const std::string& name, ParamGroup, const Tensor& t) {
    if (names.contains(name)) out.insert(&t);
  });
  return out;
}

TrainableCount count_trainable(const HybridModel& model) {
  const TrainableNames names = freeze_mask(model, 2);
  TrainableCount c;
  for_each_parameter(model, [&](const std::string& name, ParamGroup g, const Tensor& t) {
    if (!names.contains(name)) return;
    switch (g) {
      case ParamGroup::kBase: c.base += t.size(); break;
      case ParamGroup::kReplicated: c.replicated += t.size(); break;
      case ParamGroup::kAdapter: c.adapters += t.size(); break;
      case ParamGroup::kVision: c.vision += t.size(); break;
      case ParamGroup::kProjector: c.projector += t.size(); break;
    }
  });
  return c;
}

Tensor merge_lora(const Tensor& weight, const LoraAdapter& adapter) {
  if (weight.rank() != 2 || adapter.b.rows() != weight.rows() ||
      adapter.a.cols() != weight.cols() || adapter.b.cols() != adapter.a.rows()) {
    throw ShapeError("merge_lora: weight " + to_string(weight.shape()) + ", B " +
                     to_string(adapter.b.shape()) + ", A " + to_string(adapter.a.shape()));
  }
  return kernels::add(weight, kernels::scale(kernels::matmul(adapter.b, adapter.a),
                                             adapter.scale));
}

std::vector<BlockWeights> merged_blocks(const HybridModel& model) {
  std::vector<BlockWeights> out = model.base.lm.blocks;
  for (const auto& [layer, adapters] : model.adapters) {
    for (Projection p : kAllProjections) {
      out[layer].matrix(p) = merge_lora(out[layer].matrix(p), adapters.at(p));
    }
  }
  return out;
}

std::vector<LayerBinding> multimodal_bindings(const HybridModel& model) {
  std::vector<LayerBinding> out;
  const auto& blocks = model.base.lm.blocks;
  out.reserve(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    LayerBinding b{&blocks[l], nullptr, nullptr};
    if (auto it = model.replicated.find(l); it != model.replicated.end()) {
      b.block = &it->second;
    }
    if (auto it = model.experts.find(l); it != model.experts.end()) b.expert = &it->second;
    if (auto it = model.adapters.find(l); it != model.adapters.end()) b.adapters = &it->second;
    out.push_back(b);
  }
  return out;
}

Tensor forward_multimodal(const HybridModel& model, const TokenBatch& batch,
                          std::span<const Grid> grids) {
  Tape tape;
  const auto layers = multimodal_bindings(model);
  return mllm_forward(tape, model.base.lm, layers, model.base.vision, model.base.projector,
                      batch, grids)
      .value();
}

}  // namespace genieblue
