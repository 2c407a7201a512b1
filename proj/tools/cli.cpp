#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "genieblue/bench.hpp"
#include "genieblue/checkpoint.hpp"
#include "genieblue/routing.hpp"
#include "json.hpp"

namespace genieblue::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// Bad input detected after parsing (maps to kBadArgs).
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A check on produced artifacts failed (maps to kVerificationFailed).
struct VerificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct TrainConfig {
  DeskConfig desk;
  MethodSpec method;
};

// Desk config fields plus optional "method", "rank" and "fraction".
TrainConfig load_train_config(const fs::path& path) {
  TrainConfig c;
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path.string() + " must be a JSON object");
  if (j.contains("method")) c.method.method = parse_method(j.at("method").get<std::string>());
  c.method.rank = j.value("rank", c.method.rank);
  c.method.fraction = j.value("fraction", c.method.fraction);
  for (const char* key : {"method", "rank", "fraction"}) j.erase(key);
  c.desk = DeskConfig::from_json(j.dump());
  return c;
}

// A suite file is either a dataset cache or JSON:
//   {"tasks": [{"kind": "text-copy", "samples": 64, "seq_len": 20, "seed": 0}]}
struct SuiteFile {
  std::vector<TaskSpec> specs;
  std::optional<Dataset> cached;

  bool any_multimodal() const {
    if (cached) {
      for (const auto& s : *cached) {
        if (is_multimodal(s.kind)) return true;
      }
      return false;
    }
    for (const auto& t : specs) {
      if (is_multimodal(t.kind)) return true;
    }
    return false;
  }

  bool any_text() const {
    if (cached) {
      for (const auto& s : *cached) {
        if (!is_multimodal(s.kind)) return true;
      }
      return false;
    }
    for (const auto& t : specs) {
      if (!is_multimodal(t.kind)) return true;
    }
    return false;
  }

  Dataset materialize(const ModelConfig& config) const {
    if (cached) return *cached;
    Dataset out;
    for (const auto& t : specs) {
      Dataset d = synth_dataset(t, config);
      out.insert(out.end(), d.begin(), d.end());
    }
    return out;
  }
};

SuiteFile load_suite(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("suite " + path.string() + " does not exist");
  SuiteFile s;
  if (is_dataset_cache(path)) {
    s.cached = read_dataset(path);
    return s;
  }
  try {
    const Json j = Json::parse(read_text(path));
    for (const Json& t : j.at("tasks")) {
      TaskSpec spec;
      spec.kind = parse_task_kind(t.at("kind").get<std::string>());
      spec.samples = t.value("samples", spec.samples);
      spec.seq_len = t.value("seq_len", is_multimodal(spec.kind) ? std::size_t{64} : spec.seq_len);
      spec.seed = t.value("seed", spec.seed);
      s.specs.push_back(spec);
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("suite " + path.string() + ": " + e.what());
  }
  return s;
}

void check_suite_mode(const SuiteFile& suite, RouteMode mode) {
  if (mode == RouteMode::kText && suite.any_multimodal()) {
    throw UsageError("text mode cannot evaluate a suite with multimodal tasks");
  }
  if (mode == RouteMode::kMultimodal && suite.any_text()) {
    throw UsageError("mm mode cannot evaluate a suite with text tasks");
  }
}

Json eval_to_json(const EvalResult& r) {
  Json tasks = Json::object();
  for (const auto& [name, t] : r.tasks) {
    tasks[name] = Json{{"accuracy", t.accuracy}, {"mean_loss", t.mean_loss}, {"samples", t.samples}};
  }
  return Json{{"mode", r.mode},
              {"strategy", r.strategy},
              {"avg_accuracy", r.avg_accuracy},
              {"avg_loss", r.avg_loss},
              {"tasks", tasks}};
}

bool has_checkpoint(const fs::path& dir) { return fs::exists(dir / kManifestFile); }

struct Context {
  fs::path workdir;
  std::ostream& out;
  std::ostream& err;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : workdir / path;
  }
  fs::path cache() const { return workdir / ".genieblue-cache"; }
};

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, init;
  int stage = 0;
  std::uint64_t seed = 0;
  bool no_stage1 = false;
};

int cmd_train(const Context& ctx, const TrainArgs& a) {
  const TrainConfig cfg = load_train_config(ctx.resolve(a.config));
  const fs::path out = ctx.resolve(a.out);
  const fs::path init = a.init.empty() ? out : ctx.resolve(a.init);

  HybridModel model;
  StageConfig stage = a.stage == 1 ? cfg.desk.stage1 : cfg.desk.stage2;
  stage.seed = a.seed;
  if (a.stage == 2) {
    const bool have_stage1 = has_checkpoint(init) && read_manifest(init).stage >= 1;
    if (have_stage1) {
      model = load_checkpoint(init).model;
    } else if (a.no_stage1) {
      model = build_method(cfg.method, load_or_pretrain_base(cfg.desk, ctx.cache()), a.seed);
      stage.allow_unaligned_projector = true;
    } else {
      throw UsageError("stage 2 needs a stage-1 checkpoint in " + init.string() +
                       " (train --stage 1 first, or pass --no-stage1)");
    }
  } else {
    model = build_method(cfg.method, load_or_pretrain_base(cfg.desk, ctx.cache()), a.seed);
  }

  const TrainReport report = run_stage(model, stage, cfg.desk.mm_train());
  save_checkpoint(model, out, SaveOptions{a.stage, std::nullopt});
  const bool intact = report.frozen_digest_before == report.frozen_digest_after;
  ctx.out << Json{{"stage", a.stage},
                  {"seed", a.seed},
                  {"method", std::string(to_string(cfg.method.method))},
                  {"steps", report.losses.size()},
                  {"first_loss", report.losses.front()},
                  {"last_loss", report.losses.back()},
                  {"trainable_parameters", report.trainable_parameters},
                  {"frozen_intact", intact},
                  {"checkpoint", out.string()}}
                 .dump(2)
          << "\n";
  if (!intact) throw VerificationError("frozen parameters changed during training");
  return kOk;
}

struct EvalArgs {
  std::string ckpt, mode, strategy, suite;
};

int cmd_eval(const Context& ctx, const EvalArgs& a) {
  const RouteMode mode = parse_route_mode(a.mode);
  const BaseStrategy strategy = parse_base_strategy(a.strategy);
  const SuiteFile suite = load_suite(ctx.resolve(a.suite));
  check_suite_mode(suite, mode);
  const fs::path dir = ctx.resolve(a.ckpt);
  if (!has_checkpoint(dir)) throw UsageError("no checkpoint at " + dir.string());

  // The pristine text path never needs the delta artifact.
  LoadOptions load;
  load.base_only = mode == RouteMode::kText && strategy == BaseStrategy::kNonShared;
  auto ckpt = std::make_shared<HybridCheckpoint>(load_checkpoint(dir, load));
  const RoutedModel routed = route(ckpt, mode, strategy);
  const Dataset data = suite.materialize(ckpt->model.config());
  const EvalResult r = eval_suite(routed, data, mode);
  ctx.out << eval_to_json(r).dump(2) << "\n";
  return kOk;
}

struct CompareArgs {
  std::string methods, out, config;
  std::size_t seeds = 1;
  std::size_t rank = kDefaultLoraRank;
  double fraction = 0.25;
};

int cmd_compare(const Context& ctx, const CompareArgs& a) {
  // Same file format as train; --methods overrides any method fields.
  const DeskConfig desk =
      a.config.empty() ? DeskConfig::defaults() : load_train_config(ctx.resolve(a.config)).desk;
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < a.seeds; ++s) seeds.push_back(s);
  const auto specs = parse_methods(a.methods, a.rank, a.fraction, seeds);

  CompareOptions options;
  options.cache_dir = ctx.cache();
  options.threads = worker_threads();
  options.log = [&](const std::string& line) { ctx.err << line << "\n"; };
  const CompareReport report = compare_methods(specs, desk, options);
  const fs::path out = ctx.resolve(a.out);
  write_report(report, out);
  ctx.out << report.markdown();

  for (const RunResult& r : report.runs) {
    if (!r.frozen_intact) {
      throw VerificationError(std::string(to_string(r.method)) + " changed frozen parameters");
    }
    if (r.text_nonshared && (r.text_nonshared->avg_accuracy != report.base_text.avg_accuracy ||
                             r.text_nonshared->avg_loss != report.base_text.avg_loss)) {
      throw VerificationError(std::string(to_string(r.method)) +
                              " non-shared text path differs from the base model");
    }
  }
  return kOk;
}

struct ExportArgs {
  std::string ckpt, quant, out, suite;
};

int cmd_export(const Context& ctx, const ExportArgs& a) {
  const QuantPlan plan = QuantPlan::parse(a.quant);
  const fs::path dir = ctx.resolve(a.ckpt);
  if (!has_checkpoint(dir)) throw UsageError("no checkpoint at " + dir.string());
  std::optional<SuiteFile> suite;
  if (!a.suite.empty()) {
    suite = load_suite(ctx.resolve(a.suite));
    check_suite_mode(*suite, RouteMode::kText);
  }

  auto original = std::make_shared<HybridCheckpoint>(load_checkpoint(dir));
  const fs::path out = ctx.resolve(a.out);
  const ExportSummary summary = export_quantized(*original, plan, out);

  // Re-read what was written and check every group's bound from the stored
  // codes, independently of the export pass.
  const auto stored = load_quantized(out);
  double worst = 0.0;
  for_each_parameter(original->model, [&](const std::string& name, ParamGroup, const Tensor& t) {
    if (auto it = stored.find(name); it != stored.end()) {
      worst = std::max(worst, worst_bound_ratio(t, it->second));
    }
  });
  auto quantized = std::make_shared<HybridCheckpoint>(load_checkpoint(out));

  Json report{{"plan", plan.name()},
              {"quantized_tensors", summary.quantized_tensors},
              {"float_tensors", summary.float_tensors},
              {"worst_bound_ratio", worst}};
  bool finite = true;
  if (quantized->model.architecture != Architecture::kFullFinetune) {
    const RoutedModel text = route(quantized, RouteMode::kText, BaseStrategy::kNonShared);
    const Dataset probe =
        suite ? suite->materialize(quantized->model.config())
              : synth_dataset({TaskKind::kTextCopy, 8, 20, 0}, quantized->model.config());
    const TrainBatch batch = make_batch(std::span<const Sample>(probe));
    finite = text.logits(batch.tokens).all_finite();
    if (suite) {
      const RoutedModel before = route(original, RouteMode::kText, BaseStrategy::kNonShared);
      const EvalResult base_eval = eval_suite(before, probe, RouteMode::kText);
      const EvalResult quant_eval = eval_suite(text, probe, RouteMode::kText);
      report["text_accuracy_unquantized"] = base_eval.avg_accuracy;
      report["text_accuracy_quantized"] = quant_eval.avg_accuracy;
      report["text_accuracy_drop"] = base_eval.avg_accuracy - quant_eval.avg_accuracy;
    }
  }
  report["text_logits_finite"] = finite;
  ctx.out << report.dump(2) << "\n";
  if (worst > 1.0) throw VerificationError("a quantized group exceeds its scale/2 bound");
  if (!finite) throw VerificationError("quantized text forward produced non-finite logits");
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"GenieBlue hybrid adaptation lab", "genieblue"};
  app.require_subcommand(1);
  std::string workdir = ".";
  app.add_option("--workdir", workdir, "Root for every relative path")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run one training stage and save a checkpoint");
  t->add_option("--config", train.config, "Desk config JSON")->required();
  t->add_option("--stage", train.stage, "Training stage")->required()->check(CLI::IsMember({1, 2}));
  t->add_option("--seed", train.seed, "Run seed")->required();
  t->add_option("--out", train.out, "Checkpoint directory")->required();
  t->add_option("--init", train.init, "Stage-1 checkpoint (defaults to --out)");
  t->add_flag("--no-stage1", train.no_stage1, "Allow stage 2 without an aligned projector");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a suite");
  e->add_option("--ckpt", eval.ckpt, "Checkpoint directory")->required();
  e->add_option("--mode", eval.mode, "text or mm")->required()->check(CLI::IsMember({"text", "mm"}));
  e->add_option("--strategy", eval.strategy, "shared or nonshared")
      ->required()
      ->check(CLI::IsMember({"shared", "nonshared"}));
  e->add_option("--suite", eval.suite, "Suite JSON or dataset cache")->required();

  CompareArgs compare;
  auto* c = app.add_subcommand("compare", "Train and compare methods; write a report");
  c->add_option("--methods", compare.methods, "Comma-separated method list")->required();
  c->add_option("--seeds", compare.seeds, "Number of seeds (0..K-1)")
      ->required()
      ->check(CLI::PositiveNumber);
  c->add_option("--out", compare.out, "Markdown report path (JSON written alongside)")->required();
  c->add_option("--config", compare.config, "Desk config JSON");
  c->add_option("--rank", compare.rank, "LoRA rank")->capture_default_str();
  c->add_option("--fraction", compare.fraction, "Replicated layer fraction")->capture_default_str();

  ExportArgs exp;
  auto* x = app.add_subcommand("export", "Write a weight-only quantized checkpoint");
  x->add_option("--ckpt", exp.ckpt, "Checkpoint directory")->required();
  x->add_option("--quant", exp.quant, "w4g64 or w8g64")
      ->required()
      ->check(CLI::IsMember({"w4g64", "w8g64"}));
  x->add_option("--out", exp.out, "Output directory")->required();
  x->add_option("--suite", exp.suite, "Text suite for measuring the accuracy drop");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n\n" << app.help();
    return kBadArgs;
  }

  const Context ctx{fs::path(workdir), out, err};
  try {
    if (t->parsed()) return cmd_train(ctx, train);
    if (e->parsed()) return cmd_eval(ctx, eval);
    if (c->parsed()) return cmd_compare(ctx, compare);
    if (x->parsed()) return cmd_export(ctx, exp);
  } catch (const VerificationError& ex) {
    err << "verification failed: " << ex.what() << "\n";
    return kVerificationFailed;
  } catch (const CheckpointError& ex) {
    err << "verification failed: " << ex.what() << "\n";
    return kVerificationFailed;
  } catch (const std::invalid_argument& ex) {
    err << "error: " << ex.what() << "\n";
    return kBadArgs;
  } catch (const std::exception& ex) {
    err << "internal error: " << ex.what() << "\n";
    return kInternalError;
  }
  return kInternalError;
}

}  // namespace genieblue::cli
