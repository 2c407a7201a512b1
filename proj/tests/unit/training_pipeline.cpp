#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "genieblue/bench.hpp"
#include "genieblue/data.hpp"
#include "genieblue/digest.hpp"
#include "genieblue/training.hpp"
#include "support.hpp"

using namespace genieblue;
using namespace genieblue::testing;
namespace fs = std::filesystem;

TEST_SUITE("data") {
  const ModelConfig c;

  TEST_CASE("same spec gives the same dataset") {
    for (TaskKind kind : {TaskKind::kTextCopy, TaskKind::kTextReverse, TaskKind::kTextArith,
                          TaskKind::kGridCaption, TaskKind::kGridCount}) {
      const TaskSpec spec{kind, 20, is_multimodal(kind) ? 64u : 20u, 9};
      CHECK(synth_dataset(spec, c) == synth_dataset(spec, c));
      for (const Sample& s : synth_dataset(spec, c)) {
        REQUIRE(s.tokens.size() <= spec.seq_len);
        REQUIRE(s.tokens.back() == vocab::kEos);
        REQUIRE(s.grid.has_value() == is_multimodal(kind));
      }
    }
  }

  TEST_CASE("uniform grid caption is a single run") {
    Grid g;
    g.side = 6;
    g.cells.assign(36, 5);
    const auto cap = caption_tokens(g);
    CHECK(cap == std::vector<std::uint32_t>{vocab::symbol(5), vocab::number(36)});
    const Sample s = make_caption_sample(g);
    CHECK(std::vector<std::uint32_t>(s.answer().begin(), s.answer().end()) == cap);
  }

  TEST_CASE("reverse of a b c is c b a") {
    const std::vector<std::uint32_t> abc = {0, 1, 2};
    const Sample s = make_text_sample(TaskKind::kTextReverse, abc);
    CHECK(std::vector<std::uint32_t>(s.answer().begin(), s.answer().end()) ==
          std::vector<std::uint32_t>{vocab::letter(2), vocab::letter(1), vocab::letter(0)});
  }

  TEST_CASE("sequences longer than the model are rejected") {
    CHECK_THROWS(synth_dataset({TaskKind::kTextCopy, 4, c.max_seq + 1, 0}, c));
  }

  TEST_CASE("batch weights cover each answer once") {
    const Dataset d = synth_dataset({TaskKind::kTextCopy, 3, 12, 1}, c);
    const TrainBatch b = make_batch(d);
    double total = 0.0;
    for (double w : b.weights) total += w;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  }

  TEST_CASE("dataset cache is byte-stable") {
    const fs::path dir = fs::temp_directory_path() / "genieblue-unit-data";
    fs::create_directories(dir);
    const Dataset d = synth_dataset({TaskKind::kGridCount, 8, 64, 2}, c);
    write_dataset(dir / "a.gbds", d);
    write_dataset(dir / "b.gbds", read_dataset(dir / "a.gbds"));
    CHECK(read_dataset(dir / "b.gbds") == d);
    CHECK(is_dataset_cache(dir / "a.gbds"));
    fs::remove_all(dir);
  }
}

TEST_SUITE("losses") {
  TEST_CASE("cross entropy closed forms") {
    const bool keep[] = {false};
    const std::size_t one[] = {1};
    CHECK(cross_entropy(Tensor::matrix(1, 2, {0.0, std::log(3.0)}), one, keep) ==
          doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-14));
    const Tensor uniform({1, 256});
    CHECK(cross_entropy(uniform, one, keep) == doctest::Approx(std::log(256.0)).epsilon(1e-14));
    CHECK(cross_entropy(Tensor::matrix(1, 2, {-100.0, 100.0}), one, keep) < 1e-80);
    const bool skip[] = {true};
    CHECK_THROWS(cross_entropy(uniform, one, skip));
  }

  TEST_CASE("layer-wise rates") {
    const ModelConfig c;
    BaseModel m = build_model(c, 0);
    CHECK(layerwise_lr(m.vision, 1e-4, 0.9) == std::vector<double>{1e-4 * 0.9, 1e-4});
    CHECK(layerwise_lr(m.vision, 1e-4, 1.0) == std::vector<double>{1e-4, 1e-4});
    m.vision.blocks.clear();
    CHECK(layerwise_lr(m.vision, 1e-4, 0.9).empty());
  }
}

TEST_SUITE("stages") {
  const DeskConfig desk = DeskConfig::defaults();

  HybridModel fresh() {
    return build_method(MethodSpec{Method::kGbSkip}, build_model(desk.model, 0), 0);
  }

  StageConfig quick(int stage, std::size_t steps) {
    StageConfig s = StageConfig::defaults(stage);
    s.steps = steps;
    s.batch_size = 4;
    return s;
  }

  TEST_CASE("stage defaults") {
    CHECK(StageConfig::defaults(1).peak_lr == 1e-3);
    CHECK(StageConfig::defaults(2).peak_lr == 1e-4);
    CHECK(StageConfig::defaults(2).warmup_fraction == 0.01);
    CHECK(StageConfig::defaults(2).weight_decay == 0.05);
    CHECK_THROWS(StageConfig::defaults(3));
  }

  TEST_CASE("stage 1 moves the projector only") {
    HybridModel m = fresh();
    const HybridModel before = m;
    run_stage(m, quick(1, 100), desk.mm_train());
    std::map<std::string, const Tensor*> old;
    for_each_parameter(before, [&](const std::string& n, ParamGroup, const Tensor& t) { old[n] = &t; });
    bool projector_moved = false;
    for_each_parameter(m, [&](const std::string& n, ParamGroup g, const Tensor& t) {
      if (g == ParamGroup::kProjector) {
        projector_moved = projector_moved || !t.identical(*old.at(n));
      } else {
        CHECK_MESSAGE(t.identical(*old.at(n)), n);
      }
    });
    CHECK(projector_moved);
    CHECK(m.projector_aligned);
  }

  TEST_CASE("stage 2 needs an aligned projector") {
    HybridModel m = fresh();
    CHECK_THROWS(run_stage(m, quick(2, 1), desk.mm_train()));
  }

  TEST_CASE("stage 2 keeps the base frozen and lowers the loss") {
    HybridModel m = fresh();
    const std::string base = sha256_hex(m.base.lm.head) + sha256_hex(m.base.lm.embed);
    StageConfig s2 = quick(2, 200);
    s2.allow_unaligned_projector = true;
    s2.peak_lr = 1e-3;
    const TrainReport r = run_stage(m, s2, desk.mm_train());
    CHECK(r.frozen_digest_before == r.frozen_digest_after);
    CHECK(sha256_hex(m.base.lm.head) + sha256_hex(m.base.lm.embed) == base);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      first += r.losses[i];
      last += r.losses[r.losses.size() - 1 - i];
    }
    CHECK(last < first);
  }

  TEST_CASE("training is deterministic") {
    HybridModel a = fresh(), b = fresh();
    const TrainReport ra = run_stage(a, quick(1, 20), desk.mm_train());
    const TrainReport rb = run_stage(b, quick(1, 20), desk.mm_train());
    CHECK(ra.losses == rb.losses);
    CHECK(ra.trainable_digest_after == rb.trainable_digest_after);
  }

  TEST_CASE("accumulated micro-batches equal one large batch") {
    HybridModel a = fresh(), b = fresh();
    StageConfig big = quick(1, 3), small = quick(1, 3);
    big.batch_size = 8;
    small.batch_size = 4;
    small.accumulation = 2;
    const TrainReport ra = run_stage(a, big, desk.mm_train());
    const TrainReport rb = run_stage(b, small, desk.mm_train());
    for (std::size_t i = 0; i < 3; ++i) CHECK(ra.losses[i] == doctest::Approx(rb.losses[i]).epsilon(1e-12));
    double diff = 0.0;
    for (std::size_t i = 0; i < a.base.projector.w1.size(); ++i) {
      diff = std::max(diff, std::fabs(a.base.projector.w1[i] - b.base.projector.w1[i]));
    }
    CHECK(diff < 1e-9);
  }

  TEST_CASE("pretraining touches only the language model") {
    BaseModel m = build_model(desk.model, 1);
    const BaseModel before = m;
    StageConfig s0 = StageConfig::defaults(0);
    s0.steps = 5;
    s0.batch_size = 4;
    pretrain_base(m, s0, desk.text_train());
    CHECK_FALSE(m.lm.head.identical(before.lm.head));
    CHECK(m.projector.w1.identical(before.projector.w1));
    CHECK(m.vision.symbol_embed.identical(before.vision.symbol_embed));
  }
}
