#include "doctest.h"
#include "genieblue/adaptation.hpp"
#include "support.hpp"

using namespace genieblue;
using namespace genieblue::testing;

namespace {

using Layers = std::vector<std::size_t>;

Tensor base_forward(const BaseModel& m, const MixedBatch& b) {
  if (b.grids.empty()) return forward_lm(m.lm, b.tokens);
  std::vector<double> rows;
  for (const Grid& g : b.grids) {
    const Tensor e = encode_and_project(m.vision, m.projector, g);
    rows.insert(rows.end(), e.data(), e.data() + e.size());
  }
  const Tensor injected({rows.size() / m.lm.width(), m.lm.width()}, rows);
  return forward_lm(m.lm, b.tokens, &injected);
}

}  // namespace

TEST_SUITE("placement") {
  TEST_CASE("schedules follow the stated rule") {
    CHECK(plan_placement(8, 0.25, PlacementMode::kSkip).replicated == Layers{3, 7});
    CHECK(plan_placement(8, 0.25, PlacementMode::kPre).replicated == Layers{0, 1});
    CHECK(plan_placement(8, 0.25, PlacementMode::kPost).replicated == Layers{6, 7});
    CHECK(plan_placement(10, 0.25, PlacementMode::kSkip).replicated == Layers{4, 9});
    CHECK(plan_placement(8, 0.25, PlacementMode::kSkip).complement == Layers{0, 1, 2, 4, 5, 6});
    CHECK(plan_placement(3, 0.1, PlacementMode::kSkip).replicated == Layers{2});
  }

  TEST_CASE("bad fractions are rejected") {
    CHECK_THROWS(plan_placement(8, 0.0, PlacementMode::kSkip));
    CHECK_THROWS(plan_placement(8, 1.5, PlacementMode::kSkip));
  }
}

TEST_SUITE("genieblue") {
  const ModelConfig c;

  TEST_CASE("fresh hybrid equals the base on mixed batches") {
    const BaseModel base = build_model(c, 1);
    const HybridModel m = build_genieblue(base, plan_placement(8, 0.25, PlacementMode::kSkip), 8, 2);
    CHECK(m.replicated.size() == 2);
    Rng rng(1);
    for (int i = 0; i < 5; ++i) {
      const MixedBatch b = random_batch(c, rng, 3);
      CHECK(forward_multimodal(m, b.tokens, b.grids).identical(base_forward(base, b)));
    }
  }

  TEST_CASE("rank at or above the width is rejected") {
    const BaseModel base = build_model(c, 1);
    CHECK_THROWS(build_genieblue(base, plan_placement(8, 0.25, PlacementMode::kSkip), c.width));
  }

  TEST_CASE("a perturbed replicated block changes only the multimodal path") {
    const BaseModel base = build_model(c, 3);
    HybridModel m = build_genieblue(base, plan_placement(8, 0.25, PlacementMode::kSkip), 8, 3);
    m.replicated.at(3).wv[7] += 0.5;
    Rng rng(3);
    const MixedBatch b = random_batch(c, rng, 2, 0.0);
    CHECK_FALSE(forward_multimodal(m, b.tokens, b.grids).identical(forward_lm(base.lm, b.tokens)));
    CHECK(forward_lm(m.base.lm, b.tokens).identical(forward_lm(base.lm, b.tokens)));
  }
}

TEST_SUITE("visual expert") {
  const ModelConfig c;

  TEST_CASE("text-only and image-heavy batches at init equal the base") {
    const BaseModel base = build_model(c, 4);
    const HybridModel m = build_cogvlm(base, plan_placement(8, 0.25, PlacementMode::kPost), 8, 4);
    Rng rng(4);
    for (double odds : {0.0, 1.0}) {
      const MixedBatch b = random_batch(c, rng, 3, odds);
      CHECK(forward_multimodal(m, b.tokens, b.grids).identical(base_forward(base, b)));
    }
  }

  TEST_CASE("perturbed experts match the per-token reference") {
    const BaseModel base = build_model(c, 5);
    HybridModel m = build_cogvlm(base, plan_placement(8, 0.25, PlacementMode::kPre), 8, 5);
    Rng rng(5);
    for (auto& [layer, e] : m.experts) randomize(e.matrix(Projection::kUp), rng, 0.1);
    for (int i = 0; i < 3; ++i) {
      const MixedBatch b = random_batch(c, rng, 3);
      CHECK(relative_error(forward_multimodal(m, b.tokens, b.grids),
                           naive::forward(m, b.tokens, b.grids)) < 1e-12);
    }
  }
}

TEST_SUITE("parameter accounting") {
  TEST_CASE("placements share one total") {
    const ModelConfig c;
    const BaseModel base = build_model(c, 6);
    std::vector<TrainableCount> counts;
    for (auto mode : {PlacementMode::kPost, PlacementMode::kPre, PlacementMode::kSkip}) {
      counts.push_back(count_trainable(build_genieblue(base, plan_placement(8, 0.25, mode), 8)));
    }
    CHECK(counts[0] == counts[1]);
    CHECK(counts[1] == counts[2]);
  }

  TEST_CASE("no additions leaves vision and projector") {
    const ModelConfig c;
    const TrainableCount t =
        count_trainable(build_genieblue(build_model(c, 6), empty_placement(c.layers), 0));
    CHECK(t.total() == vision_parameter_count(c) + projector_parameter_count(c));
  }

  TEST_CASE("desk default equals walking the stage-2 parameters") {
    const ModelConfig c;
    const HybridModel m =
        build_genieblue(build_model(c, 7), plan_placement(8, 0.25, PlacementMode::kSkip), 8);
    std::size_t walked = 0;
    for_each_parameter(m, [&](const std::string&, ParamGroup g, const Tensor& t) {
      if (g != ParamGroup::kBase) walked += t.size();
    });
    CHECK(count_trainable(m).total() == walked);
    // 2 replicated blocks + 6 adapter layers at rank 8 over d=64, ffn=256.
    const std::size_t d = 64, f = 256;
    CHECK(count_trainable(m).replicated == 2 * (2 * d + 4 * d * d + 2 * d * f));
    CHECK(count_trainable(m).adapters == 6 * 8 * (10 * d + 2 * f));
  }
}

TEST_SUITE("lora merge") {
  TEST_CASE("zero B merges to W") {
    Rng rng(8);
    Tensor w({16, 16});
    randomize(w, rng, 1.0);
    LoraAdapter a{Tensor({8, 16}), Tensor({16, 8}), 1.0};
    randomize(a.a, rng, 1.0);
    CHECK(merge_lora(w, a).identical(w));
  }

  TEST_CASE("scalar case") {
    const LoraAdapter a{Tensor::matrix(1, 1, {4}), Tensor::matrix(1, 1, {3}), 1.0};
    CHECK(merge_lora(Tensor::matrix(1, 1, {2}), a)[0] == 14.0);
  }

  TEST_CASE("merged forward matches adapter forward") {
    Rng rng(9);
    Tensor w({16, 16}), x({5, 16});
    LoraAdapter a{Tensor({8, 16}), Tensor({16, 8}), 0.5};
    for (Tensor* t : {&w, &x, &a.a, &a.b}) randomize(*t, rng, 1.0);
    Tape tape;
    const Tensor adapted = linear(tape, tape.constant(x), w, &a).value();
    const Tensor merged = kernels::matmul_nt(x, merge_lora(w, a));
    CHECK(relative_error(merged, adapted) < 1e-9);
  }

  TEST_CASE("shape mismatch is rejected") {
    const LoraAdapter a{Tensor({2, 4}), Tensor({3, 2}), 1.0};
    CHECK_THROWS_AS(merge_lora(Tensor({4, 4}), a), ShapeError);
  }
}

TEST_SUITE("freeze masks") {
  const ModelConfig c;
  const HybridModel m =
      build_genieblue(build_model(c, 10), plan_placement(8, 0.25, PlacementMode::kSkip), 8);

  TEST_CASE("stage 1 trains the projector only") {
    std::size_t n = 0;
    const TrainableNames names = freeze_mask(m, 1);
    for (const Tensor* t : resolve(m, names)) n += t->size();
    CHECK(n == projector_parameter_count(c));
  }

  TEST_CASE("stage 2 never includes the base") {
    const TrainableNames names = freeze_mask(m, 2);
    std::size_t n = 0;
    for_each_parameter(m, [&](const std::string& name, ParamGroup g, const Tensor& t) {
      if (g == ParamGroup::kBase) CHECK_FALSE(names.contains(name));
      if (names.contains(name)) n += t.size();
    });
    CHECK(n == count_trainable(m).total());
  }

  TEST_CASE("unknown stage is rejected") { CHECK_THROWS(freeze_mask(m, 3)); }
}
