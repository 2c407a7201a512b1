#include "genieblue/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "genieblue/digest.hpp"

namespace genieblue {

StageConfig StageConfig::defaults(int stage) {
  StageConfig c;
  c.stage = stage;
  switch (stage) {
    case 0:
      c.peak_lr = 2e-3;
      c.steps = 4000;
      break;
    case 1:
      c.peak_lr = 1e-3;
      c.steps = 300;
      break;
    case 2:
      c.peak_lr = 1e-4;
      c.steps = 2000;
      break;
    default:
      throw std::invalid_argument("StageConfig: unknown stage " + std::to_string(stage));
  }
  return c;
}

std::size_t StageConfig::warmup_steps() const {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(static_cast<double>(steps) * warmup_fraction)));
}

LrSchedule StageConfig::schedule() const {
  LrSchedule s;
  s.peak = peak_lr;
  s.warmup = warmup_steps();
  s.total = steps;
  s.floor = 0.0;
  return s;
}

void StageConfig::validate() const {
  if (stage < 0 || stage > 2) {
    throw std::invalid_argument("StageConfig: unknown stage " + std::to_string(stage));
  }
  if (accumulation < 1) throw std::invalid_argument("StageConfig: accumulation must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("StageConfig: batch size must be >= 1");
  if (!(vision_lr_decay > 0.0) || vision_lr_decay > 1.0) {
    throw std::invalid_argument("StageConfig: vision lr decay must lie in (0, 1]");
  }
  schedule().validate();
}

double cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const bool> ignore) {
  const std::size_t counted =
      static_cast<std::size_t>(std::count(ignore.begin(), ignore.end(), false));
  if (counted == 0) throw std::invalid_argument("cross_entropy: every position is ignored");
  Tape tape;
  std::vector<double> weights(ignore.size());
  for (std::size_t i = 0; i < ignore.size(); ++i) {
    weights[i] = ignore[i] ? 0.0 : 1.0 / static_cast<double>(counted);
  }
  return ad::weighted_nll(tape.constant(logits),
                          std::vector<std::size_t>(targets.begin(), targets.end()),
                          std::move(weights))
      .value()[0];
}

std::vector<double> layerwise_lr(const VisionEncoder& vision, double base_lr, double decay) {
  if (!(decay > 0.0) || decay > 1.0) {
    throw std::invalid_argument("layerwise_lr: decay must lie in (0, 1]");
  }
  std::vector<double> out(vision.blocks.size());
  double lr = base_lr;
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = lr;
    lr *= decay;
  }
  return out;
}

namespace {

struct TrainTarget {
  std::vector<Tensor*> params;
  std::vector<double> lr_scales;
  std::function<Var(Tape&, const TrainBatch&)> forward;
  std::function<std::string()> frozen_digest;
  std::function<std::string()> trainable_digest;
};

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
};

TrainReport train_loop(const TrainTarget& target, const StageConfig& config,
                       const Dataset& data, const StepHook& hook) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("run_stage: empty dataset");
  configure_allocator();
  const auto start = std::chrono::steady_clock::now();

  TrainReport report;
  report.stage = config.stage;
  report.seed = config.seed;
  report.frozen_digest_before = target.frozen_digest();
  for (const Tensor* p : target.params) report.trainable_parameters += p->size();

  ParamSet trainable(target.params.begin(), target.params.end());
  std::vector<Tensor> grads;
  grads.reserve(target.params.size());
  for (const Tensor* p : target.params) grads.emplace_back(p->shape());
  std::vector<ParamSlot> slots;
  for (std::size_t i = 0; i < target.params.size(); ++i) {
    slots.push_back({target.params[i], &grads[i], target.lr_scales[i]});
  }

  const LrSchedule schedule = config.schedule();
  const AdamWHyper hyper{0.9, 0.98, 1e-6, config.weight_decay};
  AdamWState state;
  BatchSampler sampler(data.size(),
                       config.seed * 0x2545F4914F6CDD1DULL + static_cast<std::uint64_t>(config.stage));
  const double micro_scale = 1.0 / static_cast<double>(config.accumulation);

  for (std::size_t step = 0; step < config.steps; ++step) {
    for (auto& g : grads) g.fill(0.0);
    double step_loss = 0.0;
    for (std::size_t micro = 0; micro < config.accumulation; ++micro) {
      std::vector<const Sample*> picked;
      for (std::size_t idx : sampler.next(config.batch_size)) picked.push_back(&data[idx]);
      TrainBatch batch = make_batch(std::span<const Sample* const>(picked), micro_scale);
      Tape tape(&trainable);
      Var logits = target.forward(tape, batch);
      Var loss = ad::weighted_nll(logits, std::move(batch.targets), std::move(batch.weights));
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step), step);
      }
      tape.backward(loss);
      for (std::size_t i = 0; i < target.params.size(); ++i) {
        if (auto g = tape.param_grad(*target.params[i])) {
          for (std::size_t j = 0; j < g->size(); ++j) grads[i][j] += (*g)[j];
        }
      }
      step_loss += value;
    }
    adamw_step(slots, state, lr_at(step, schedule), hyper);
    report.losses.push_back(step_loss);
    if (hook) hook(step + 1);
  }

  report.frozen_digest_after = target.frozen_digest();
  report.trainable_digest_after = target.trainable_digest();
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

std::string group_digest(const HybridModel& model, const TrainableNames& names, bool include) {
  Sha256 h;
  for_each_parameter(model, [&](const std::string& name, ParamGroup, const Tensor& t) {
    if (names.contains(name) != include) return;
    h.update(name);
    h.update(t);
  });
  return h.hex();
}

double batch_loss(const HybridModel& model, const TrainBatch& batch) {
  Tape tape;
  const auto layers = multimodal_bindings(model);
  Var logits = mllm_forward(tape, model.base.lm, layers, model.base.vision,
                            model.base.projector, batch.tokens, batch.grids);
  return ad::weighted_nll(logits, batch.targets, batch.weights).value()[0];
}

TrainReport run_stage(HybridModel& model, const StageConfig& config, const Dataset& data,
                      const StepHook& hook) {
  if (config.stage != 1 && config.stage != 2) {
    throw std::invalid_argument("run_stage: stage must be 1 or 2, got " +
                                std::to_string(config.stage));
  }
  if (config.stage == 2 && !model.projector_aligned && !config.allow_unaligned_projector) {
    throw std::invalid_argument(
        "run_stage: stage 2 needs a stage-1 aligned projector (or an explicit opt-out)");
  }
  const TrainableNames names = freeze_mask(model, config.stage);
  const std::size_t vision_layers = model.base.vision.blocks.size();
  const std::vector<double> vision_scales =
      layerwise_lr(model.base.vision, 1.0, config.vision_lr_decay);
  const double embed_scale =
      (vision_scales.empty() ? 1.0 : vision_scales.front()) * config.vision_lr_decay;

  TrainTarget target;
  for_each_parameter(model, [&](const std::string& name, ParamGroup g, Tensor& t) {
    if (!names.contains(name)) return;
    double scale = 1.0;
    if (g == ParamGroup::kVision && config.stage == 2) {
      // vision.blocks.<i>.* take their layer's rate; embeddings sit below
      // block 0 and the final norm sits on top.
      if (name.starts_with("vision.blocks.")) {
        const std::size_t layer = std::stoul(name.substr(14));
        if (layer < vision_layers) scale = vision_scales[layer];
      } else if (name != "vision.final_norm") {
        scale = embed_scale;
      }
    }
    target.params.push_back(&t);
    target.lr_scales.push_back(scale);
  });
  target.forward = [&model](Tape& tape, const TrainBatch& batch) {
    const auto layers = multimodal_bindings(model);
    return mllm_forward(tape, model.base.lm, layers, model.base.vision, model.base.projector,
                        batch.tokens, batch.grids);
  };
  target.frozen_digest = [&] { return group_digest(model, names, false); };
  target.trainable_digest = [&] { return group_digest(model, names, true); };

  TrainReport report = train_loop(target, config, data, hook);
  if (config.stage == 1) model.projector_aligned = true;
  return report;
}

TrainReport pretrain_base(BaseModel& model, const StageConfig& config, const Dataset& data,
                          const StepHook& hook) {
  TrainTarget target;
  for_each_parameter(model.lm, "lm.", [&](const std::string&, Tensor& t) {
    target.params.push_back(&t);
    target.lr_scales.push_back(1.0);
  });
  target.forward = [&model](Tape& tape, const TrainBatch& batch) {
    const auto layers = base_bindings(model.lm);
    return mllm_forward(tape, model.lm, layers, model.vision, model.projector, batch.tokens,
                        batch.grids);
  };
  auto digest = [&](bool lm_part) {
    Sha256 h;
    for_each_parameter(model, [&](const std::string& name, Tensor& t) {
      if (name.starts_with("lm.") != lm_part) return;
      h.update(name);
      h.update(t);
    });
    return h.hex();
  };
  target.frozen_digest = [&] { return digest(false); };
  target.trainable_digest = [&] { return digest(true); };
  StageConfig c = config;
  c.stage = 0;
  return train_loop(target, c, data, hook);
}

}  // namespace genieblue
