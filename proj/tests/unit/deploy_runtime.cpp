#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <unistd.h>

#include "doctest.h"
#include "genieblue/checkpoint.hpp"
#include "genieblue/quant.hpp"
#include "genieblue/routing.hpp"
#include "support.hpp"

using namespace genieblue;
using namespace genieblue::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("genieblue-unit-" + tag + "-" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

HybridModel trained_like(std::uint64_t seed) {
  const ModelConfig c;
  HybridModel m = build_genieblue(build_model(c, seed), plan_placement(8, 0.25, PlacementMode::kSkip), 8, seed);
  Rng rng(seed);
  perturb_additions(m, rng, 0.05);
  for (auto& [layer, block] : m.replicated) block.w1[3] += 0.25;
  m.base.vision.final_norm[0] = 1.5;
  m.projector_aligned = true;
  return m;
}

void expect_same(const HybridModel& a, const HybridModel& b) {
  std::map<std::string, const Tensor*> left;
  for_each_parameter(a, [&](const std::string& n, ParamGroup, const Tensor& t) { left[n] = &t; });
  std::size_t seen = 0;
  for_each_parameter(b, [&](const std::string& n, ParamGroup, const Tensor& t) {
    REQUIRE(left.contains(n));
    CHECK_MESSAGE(left[n]->identical(t), n);
    ++seen;
  });
  CHECK(seen == left.size());
}

void flip(const fs::path& file, std::size_t offset) {
  std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(static_cast<std::streamoff>(offset));
  char ch = 0;
  f.get(ch);
  f.seekp(static_cast<std::streamoff>(offset));
  f.put(static_cast<char>(ch ^ 1));
}

}  // namespace

TEST_SUITE("quantization") {
  TEST_CASE("extremes are representable") {
    const QuantizedTensor q = quantize_weights(Tensor::vector({-1, 0, 1}), 4);
    REQUIRE(q.scales.size() == 1);
    CHECK(q.scales[0] == doctest::Approx(1.0 / 7).epsilon(1e-15));
    CHECK(q.codes == std::vector<std::int8_t>{-7, 0, 7});
    const Tensor back = dequantize(q);
    CHECK(back[0] == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(back[1] == 0.0);
    CHECK(back[2] == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("zero tensor") {
    const QuantizedTensor q = quantize_weights(Tensor({3, 70}), 4);
    CHECK(q.scales == std::vector<double>(6, 1.0));
    const Tensor back = dequantize(q);
    for (double v : back.values()) CHECK(v == 0.0);
  }

  TEST_CASE("every group keeps its half-step bound") {
    Rng rng(0);
    for (unsigned bits : {4u, 8u}) {
      Tensor x({64, 100});
      randomize(x, rng, 1.0);
      const QuantizedTensor q = quantize_weights(x, bits, 64);
      CHECK(q.scales.size() == 64 * 2);
      for (std::size_t r = 0; r < 64; ++r) {
        for (std::size_t g = 0; g < 2; ++g) {
          const std::size_t lo = g * 64, hi = std::min<std::size_t>(100, lo + 64);
          double peak = 0.0;
          for (std::size_t j = lo; j < hi; ++j) peak = std::max(peak, std::fabs(x.at(r, j)));
          const double scale = q.scales[r * 2 + g];
          CHECK(scale == doctest::Approx(peak / ((1 << (bits - 1)) - 1)).epsilon(1e-14));
          for (std::size_t j = lo; j < hi; ++j) {
            REQUIRE(std::fabs(x.at(r, j) - q.codes[r * 100 + j] * scale) <= scale / 2);
          }
        }
      }
      CHECK(worst_bound_ratio(x, q) <= 1.0);
    }
  }

  TEST_CASE("non-finite input is rejected") {
    CHECK_THROWS(quantize_weights(Tensor::vector({1.0, NAN}), 8));
    CHECK_THROWS(quantize_weights(Tensor::vector({1.0, INFINITY}), 4));
  }

  TEST_CASE("nibble packing round trip") {
    const QuantizedTensor q = quantize_weights(Tensor::matrix(1, 3, {1.0 / 7, -1.0 / 7, 1.0}), 4);
    const std::string bytes = pack(q);
    CHECK(bytes.size() == packed_code_bytes(3, 4) + 8);
    CHECK(static_cast<unsigned char>(bytes[0]) == 0x1F);
    const QuantizedTensor back = unpack(bytes, 4, 64, q.shape);
    CHECK(back.codes == q.codes);
    CHECK(back.scales == q.scales);
  }

  TEST_CASE("plan") {
    const QuantPlan w4 = QuantPlan::parse("w4g64");
    CHECK(w4.bits_for("lm.blocks.0.wq", {64, 64}) == 4);
    CHECK(w4.bits_for("replicated.3.w1", {256, 64}) == 4);
    CHECK(w4.bits_for("expert.3.wq", {64, 64}) == 4);
    CHECK(w4.bits_for("adapter.0.wq.a", {8, 64}) == 8);
    CHECK(w4.bits_for("vision.blocks.0.wq", {32, 32}) == 8);
    CHECK(w4.bits_for("lm.final_norm", {64}) == 0);
    CHECK(QuantPlan::parse("w8g64").bits_for("lm.head", {256, 64}) == 8);
    CHECK(w4.name() == "w4g64");
    CHECK_THROWS(QuantPlan::parse("w3g64"));
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bit-identical") {
    TempDir dir("ckpt");
    const HybridModel m = trained_like(1);
    const CheckpointManifest saved = save_checkpoint(m, dir.path);
    const HybridCheckpoint loaded = load_checkpoint(dir.path);
    CHECK(loaded.has_delta);
    CHECK(loaded.model.schedule == m.schedule);
    CHECK(loaded.model.projector_aligned);
    CHECK(read_manifest(dir.path).to_json() == saved.to_json());
    expect_same(m, loaded.model);
    for (const auto& e : saved.artifacts) {
      CHECK(e.artifact == (e.name.starts_with("lm.") ? Artifact::kBase : Artifact::kDelta));
    }
  }

  TEST_CASE("a flipped byte names its tensor") {
    TempDir dir("flip");
    const CheckpointManifest saved = save_checkpoint(trained_like(2), dir.path);
    for (const char* name : {"lm.blocks.5.w2", "adapter.1.wo.b", "vision.cell_pos"}) {
      TempDir copy(std::string("flip-") + name);
      fs::copy(dir.path, copy.path, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
      const ArtifactEntry* e = saved.find(name);
      REQUIRE(e != nullptr);
      flip(copy.path / saved.blobs.at(e->artifact), e->offset + 3);
      try {
        load_checkpoint(copy.path);
        FAIL("corruption was not detected");
      } catch (const CheckpointError& err) {
        CHECK(err.tensor() == name);
      }
    }
  }

  TEST_CASE("base-only load serves text without the delta") {
    TempDir dir("baseonly");
    const HybridModel m = trained_like(3);
    save_checkpoint(m, dir.path);
    fs::remove(dir.path / read_manifest(dir.path).blobs.at(Artifact::kDelta));
    CHECK_THROWS_AS(load_checkpoint(dir.path), CheckpointError);
    LoadOptions opts;
    opts.base_only = true;
    auto base_only = std::make_shared<const HybridCheckpoint>(load_checkpoint(dir.path, opts));
    CHECK_FALSE(base_only->has_delta);
    Rng rng(3);
    const TokenBatch prompts = random_text_batch(m.config(), rng, 4);
    const RoutedModel text = route(base_only, RouteMode::kText, BaseStrategy::kNonShared);
    CHECK(text.logits(prompts).identical(forward_lm(m.base.lm, prompts)));
    CHECK_THROWS_AS(route(base_only, RouteMode::kMultimodal, BaseStrategy::kNonShared), RoutingError);
  }

  TEST_CASE("unknown manifest version is rejected") {
    TempDir dir("version");
    save_checkpoint(trained_like(4), dir.path);
    std::ifstream in(dir.path / kManifestFile);
    std::string text((std::istreambuf_iterator<char>(in)), {});
    in.close();
    const auto at = text.find("\"version\": 1");
    REQUIRE(at != std::string::npos);
    text.replace(at, 12, "\"version\": 9");
    std::ofstream(dir.path / kManifestFile) << text;
    CHECK_THROWS_AS(load_checkpoint(dir.path), CheckpointError);
  }

  TEST_CASE("quantized export keeps zero adapters exactly zero") {
    TempDir dir("export");
    const ModelConfig c;
    HybridModel m = build_genieblue(build_model(c, 5), plan_placement(8, 0.25, PlacementMode::kPost), 8, 5);
    save_checkpoint(m, dir.path / "f64");
    const HybridCheckpoint src = load_checkpoint(dir.path / "f64");
    const ExportSummary s = export_quantized(src, QuantPlan::parse("w4g64"), dir.path / "q");
    CHECK(s.worst_bound_ratio <= 1.0);
    const HybridCheckpoint q = load_checkpoint(dir.path / "q");
    for (const auto& [layer, a] : q.model.adapters) {
      for (const auto& ad : a.adapters) {
        for (double v : ad.b.values()) REQUIRE(v == 0.0);
      }
    }
    CHECK(read_manifest(dir.path / "q").find("lm.blocks.0.wq")->dtype == "q4");
    CHECK(read_manifest(dir.path / "q").find("projector.w1")->dtype == "q8");
    CHECK(read_manifest(dir.path / "q").find("lm.final_norm")->dtype == "f64");
  }
}

TEST_SUITE("routing") {
  std::shared_ptr<const HybridCheckpoint> in_memory(HybridModel m) {
    auto c = std::make_shared<HybridCheckpoint>();
    c->model = std::move(m);
    c->has_delta = true;
    return c;
  }

  TEST_CASE("text routing binds the pristine base only") {
    const HybridModel m = trained_like(6);
    auto ckpt = in_memory(m);
    RoutedModel r = route(ckpt, RouteMode::kText, BaseStrategy::kNonShared);
    CHECK(r.binds_only_base());
    const std::string text_digest = r.binding_digest();
    r.switch_mode(RouteMode::kMultimodal);
    CHECK_FALSE(r.binds_only_base());
    CHECK(r.binding_digest() != text_digest);
    r.switch_mode(RouteMode::kText);
    CHECK(r.binding_digest() == text_digest);
  }

  TEST_CASE("shared text uses the multimodal bindings") {
    auto ckpt = in_memory(trained_like(7));
    const RoutedModel shared = route(ckpt, RouteMode::kText, BaseStrategy::kShared);
    const RoutedModel mm = route(ckpt, RouteMode::kMultimodal, BaseStrategy::kShared);
    CHECK(shared.binding_digest() == mm.binding_digest());
    Rng rng(7);
    const TokenBatch prompts = random_text_batch(ckpt->model.config(), rng, 3);
    CHECK_FALSE(shared.logits(prompts).identical(forward_lm(ckpt->model.base.lm, prompts)));
  }

  TEST_CASE("text routing rejects image input") {
    auto ckpt = in_memory(trained_like(8));
    const RoutedModel text = route(ckpt, RouteMode::kText, BaseStrategy::kNonShared);
    Rng rng(8);
    const MixedBatch b = random_batch(ckpt->model.config(), rng, 2, 1.0);
    CHECK_THROWS_AS(text.logits(b.tokens, b.grids), RoutingError);
  }

  TEST_CASE("poisoned vision weights never reach text logits") {
    HybridModel m = trained_like(9);
    for (auto& v : m.base.vision.symbol_embed.values()) v = NAN;
    m.replicated.begin()->second.wq.fill(NAN);
    auto ckpt = in_memory(m);
    const RoutedModel text = route(ckpt, RouteMode::kText, BaseStrategy::kNonShared);
    Rng rng(9);
    const TokenBatch prompts = random_text_batch(m.config(), rng, 5);
    const Tensor logits = text.logits(prompts);
    CHECK(logits.all_finite());
    CHECK(logits.identical(forward_lm(m.base.lm, prompts)));
  }

  TEST_CASE("full fine-tuning has no non-shared text path") {
    auto ckpt = in_memory(build_full_finetune(build_model(ModelConfig{}, 10)));
    CHECK_THROWS_AS(route(ckpt, RouteMode::kText, BaseStrategy::kNonShared), RoutingError);
    CHECK_NOTHROW(route(ckpt, RouteMode::kText, BaseStrategy::kShared));
  }

  TEST_CASE("mode and strategy names") {
    CHECK(parse_route_mode("mm") == RouteMode::kMultimodal);
    CHECK(parse_base_strategy("nonshared") == BaseStrategy::kNonShared);
    CHECK_THROWS(parse_route_mode("audio"));
  }
}
