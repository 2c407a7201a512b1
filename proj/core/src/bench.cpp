#include "genieblue/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "genieblue/checkpoint.hpp"
#include "genieblue/digest.hpp"
#include "json_io.hpp"

namespace genieblue {

namespace fs = std::filesystem;
using json_io::Json;

namespace {

constexpr std::size_t kEvalChunk = 16;

const std::vector<std::pair<Method, std::string_view>>& method_names() {
  static const std::vector<std::pair<Method, std::string_view>> names = {
      {Method::kFullFinetune, "full-ft"},  {Method::kLora, "lora"},
      {Method::kCogvlmPost, "cogvlm-post"}, {Method::kCogvlmPre, "cogvlm-pre"},
      {Method::kCogvlmSkip, "cogvlm-skip"}, {Method::kGbPost, "gb-post"},
      {Method::kGbPre, "gb-pre"},           {Method::kGbSkip, "gb-skip"},
  };
  return names;
}

PlacementMode placement_of(Method m) {
  switch (m) {
    case Method::kCogvlmPost:
    case Method::kGbPost: return PlacementMode::kPost;
    case Method::kCogvlmPre:
    case Method::kGbPre: return PlacementMode::kPre;
    default: return PlacementMode::kSkip;
  }
}

std::size_t argmax(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < n; ++v) {
    if (row[v] > row[best]) best = v;
  }
  return best;
}

double nll(const double* row, std::size_t n, std::size_t target) {
  double peak = row[0];
  for (std::size_t v = 1; v < n; ++v) peak = std::max(peak, row[v]);
  double z = 0.0;
  for (std::size_t v = 0; v < n; ++v) z += std::exp(row[v] - peak);
  return std::log(z) - (row[target] - peak);
}

Json eval_json(const EvalResult& r) {
  Json tasks = Json::object();
  for (const auto& [name, t] : r.tasks) {
    tasks[name] = Json{{"accuracy", t.accuracy}, {"mean_loss", t.mean_loss}, {"samples", t.samples}};
  }
  return Json{{"mode", r.mode},
              {"strategy", r.strategy},
              {"seed", r.seed},
              {"avg_accuracy", r.avg_accuracy},
              {"avg_loss", r.avg_loss},
              {"tasks", tasks}};
}

Json counts_json(const TrainableCount& c) {
  return Json{{"total", c.total()},        {"replicated", c.replicated},
              {"adapters", c.adapters},    {"vision", c.vision},
              {"projector", c.projector},  {"base", c.base}};
}

std::string config_key(const DeskConfig& c) {
  Json j = Json::parse(c.to_json());
  j.erase("stage1");
  j.erase("stage2");
  j.erase("mm_task");
  j.erase("mm_samples");
  j.erase("mm_seq_len");
  j.erase("text_eval_samples");
  const std::string text = j.dump();
  return sha256_hex(std::as_bytes(std::span<const char>(text.data(), text.size()))).substr(0, 16);
}

// Mean with min and max over seeds.
struct Spread {
  double mean = 0.0, min = 0.0, max = 0.0;
};

Spread spread(const std::vector<double>& xs) {
  Spread s;
  if (xs.empty()) return s;
  s.min = *std::min_element(xs.begin(), xs.end());
  s.max = *std::max_element(xs.begin(), xs.end());
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  return s;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string show(const Spread& s, int decimals, bool ranges) {
  std::string out = fixed(s.mean, decimals);
  if (ranges) out += " [" + fixed(s.min, decimals) + ", " + fixed(s.max, decimals) + "]";
  return out;
}

std::string retention_cell(double value, double reference) {
  if (!(reference > 0.0)) return "n/a";
  return format_percent(retention(value, reference));
}

// Derived table rows, shared by the markdown and JSON writers.
struct TableRow {
  std::string method;
  std::size_t params = 0;
  Spread mm, text_shared, loss_shared;
  std::optional<Spread> text_nonshared, loss_nonshared;
  std::string mm_retention, shared_retention, nonshared_retention;
};

std::vector<TableRow> table_rows(const CompareReport& r) {
  // Multimodal retention is measured against full fine-tuning when it ran,
  // otherwise against the first listed method.
  std::optional<double> mm_reference;
  std::vector<TableRow> rows;
  for (const MethodSpec& spec : r.specs) {
    TableRow row;
    row.method = std::string(to_string(spec.method));
    std::vector<double> mm, ts, tn, ls, ln;
    for (const RunResult& run : r.runs) {
      if (run.method != spec.method) continue;
      row.params = run.params.total();
      mm.push_back(100.0 * run.multimodal.avg_accuracy);
      ts.push_back(100.0 * run.text_shared.avg_accuracy);
      ls.push_back(run.text_shared.avg_loss);
      if (run.text_nonshared) {
        tn.push_back(100.0 * run.text_nonshared->avg_accuracy);
        ln.push_back(run.text_nonshared->avg_loss);
      }
    }
    row.mm = spread(mm);
    row.text_shared = spread(ts);
    row.loss_shared = spread(ls);
    if (!tn.empty()) {
      row.text_nonshared = spread(tn);
      row.loss_nonshared = spread(ln);
    }
    rows.push_back(std::move(row));
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (r.specs[i].method == Method::kFullFinetune) mm_reference = rows[i].mm.mean;
  }
  if (!mm_reference && !rows.empty()) mm_reference = rows.front().mm.mean;
  const double base_text = 100.0 * r.base_text.avg_accuracy;
  for (TableRow& row : rows) {
    row.mm_retention = retention_cell(row.mm.mean, *mm_reference);
    row.shared_retention = retention_cell(row.text_shared.mean, base_text);
    row.nonshared_retention =
        row.text_nonshared ? retention_cell(row.text_nonshared->mean, base_text) : "n/a";
  }
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Methods

std::string_view to_string(Method m) {
  for (const auto& [method, name] : method_names()) {
    if (method == m) return name;
  }
  throw std::logic_error("unknown method");
}

Method parse_method(std::string_view text) {
  for (const auto& [method, name] : method_names()) {
    if (name == text) return method;
  }
  throw std::invalid_argument("unknown method '" + std::string(text) + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> out;
    for (const auto& [method, name] : method_names()) out.push_back(method);
    return out;
  }();
  return methods;
}

bool preserves_base(Method m) { return m != Method::kFullFinetune; }

std::vector<MethodSpec> parse_methods(std::string_view list, std::size_t rank, double fraction,
                                      const std::vector<std::uint64_t>& seeds) {
  std::vector<MethodSpec> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t comma = std::min(list.find(',', start), list.size());
    const std::string_view item = list.substr(start, comma - start);
    if (item.empty()) throw std::invalid_argument("empty method name in '" + std::string(list) + "'");
    out.push_back({parse_method(item), rank, fraction, seeds});
    start = comma + 1;
  }
  return out;
}

HybridModel build_method(const MethodSpec& spec, const BaseModel& base, std::uint64_t seed) {
  BaseModel b = build_model(base.config, seed);
  b.lm = base.lm;
  const std::size_t layers = base.config.layers;
  switch (spec.method) {
    case Method::kFullFinetune: return build_full_finetune(b);
    case Method::kLora: return build_genieblue(b, empty_placement(layers), spec.rank, seed);
    case Method::kCogvlmPost:
    case Method::kCogvlmPre:
    case Method::kCogvlmSkip:
      return build_cogvlm(b, plan_placement(layers, spec.fraction, placement_of(spec.method)),
                          spec.rank, seed);
    case Method::kGbPost:
    case Method::kGbPre:
    case Method::kGbSkip:
      return build_genieblue(b, plan_placement(layers, spec.fraction, placement_of(spec.method)),
                             spec.rank, seed);
  }
  throw std::logic_error("unknown method");
}

// ---------------------------------------------------------------------------
// Desk config

DeskConfig DeskConfig::defaults() {
  DeskConfig c;
  c.stage1.batch_size = 8;
  c.stage2.batch_size = 8;
  c.stage2.peak_lr = 1e-3;
  return c;
}

std::string DeskConfig::to_json() const {
  Json j{{"model", json_io::to_json(model)},
         {"base_seed", base_seed},
         {"data_seed", data_seed},
         {"text_samples", text_samples},
         {"text_seq_len", text_seq_len},
         {"text_eval_samples", text_eval_samples},
         {"mm_task", std::string(to_string(mm_task))},
         {"mm_samples", mm_samples},
         {"mm_seq_len", mm_seq_len},
         {"pretrain", json_io::to_json(pretrain)},
         {"stage1", json_io::to_json(stage1)},
         {"stage2", json_io::to_json(stage2)}};
  return j.dump(2) + "\n";
}

DeskConfig DeskConfig::from_json(std::string_view text) {
  DeskConfig c = defaults();
  try {
    const Json j = Json::parse(text);
    if (!j.is_object()) throw std::invalid_argument("desk config must be a JSON object");
    static const std::set<std::string> known = {
        "model",      "base_seed",  "data_seed", "text_samples", "text_seq_len",
        "text_eval_samples", "mm_task", "mm_samples", "mm_seq_len", "pretrain",
        "stage1",     "stage2"};
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw std::invalid_argument("unknown desk config field '" + key + "'");
    }
    if (j.contains("model")) c.model = json_io::model_config(j.at("model"), c.model);
    c.base_seed = j.value("base_seed", c.base_seed);
    c.data_seed = j.value("data_seed", c.data_seed);
    c.text_samples = j.value("text_samples", c.text_samples);
    c.text_seq_len = j.value("text_seq_len", c.text_seq_len);
    c.text_eval_samples = j.value("text_eval_samples", c.text_eval_samples);
    if (j.contains("mm_task")) c.mm_task = parse_task_kind(j.at("mm_task").get<std::string>());
    c.mm_samples = j.value("mm_samples", c.mm_samples);
    c.mm_seq_len = j.value("mm_seq_len", c.mm_seq_len);
    if (j.contains("pretrain")) c.pretrain = json_io::stage_config(j.at("pretrain"), c.pretrain);
    if (j.contains("stage1")) c.stage1 = json_io::stage_config(j.at("stage1"), c.stage1);
    if (j.contains("stage2")) c.stage2 = json_io::stage_config(j.at("stage2"), c.stage2);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("desk config: ") + e.what());
  }
  c.validate();
  return c;
}

void DeskConfig::validate() const {
  model.validate();
  if (is_multimodal(mm_task) == false) {
    throw std::invalid_argument("desk config: mm_task must be a grid task");
  }
  if (text_samples == 0 || mm_samples == 0 || text_eval_samples == 0) {
    throw std::invalid_argument("desk config: sample counts must be positive");
  }
  if (text_eval_samples > text_samples) {
    throw std::invalid_argument("desk config: text_eval_samples exceeds text_samples");
  }
  if (pretrain.stage != 0 || stage1.stage != 1 || stage2.stage != 2) {
    throw std::invalid_argument("desk config: stage numbers are fixed (0, 1, 2)");
  }
  pretrain.validate();
  stage1.validate();
  stage2.validate();
}

Dataset DeskConfig::text_train() const {
  Dataset out;
  for (TaskKind k : {TaskKind::kTextCopy, TaskKind::kTextReverse, TaskKind::kTextArith}) {
    Dataset d = synth_dataset({k, text_samples, text_seq_len, data_seed}, model);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

Dataset DeskConfig::text_suite() const {
  Dataset out;
  for (TaskKind k : {TaskKind::kTextCopy, TaskKind::kTextReverse, TaskKind::kTextArith}) {
    Dataset d = synth_dataset({k, text_samples, text_seq_len, data_seed}, model);
    out.insert(out.end(), d.begin(), d.begin() + static_cast<std::ptrdiff_t>(text_eval_samples));
  }
  return out;
}

Dataset DeskConfig::mm_train() const {
  return synth_dataset({mm_task, mm_samples, mm_seq_len, data_seed}, model);
}

Dataset DeskConfig::mm_suite() const { return mm_train(); }

DeskConfig load_desk_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open desk config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return DeskConfig::from_json(buf.str());
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<std::uint32_t> greedy_decode(const RoutedModel& model, const Sample& sample,
                                         std::size_t max_new) {
  TokenBatch batch;
  batch.ids.emplace_back(sample.tokens.begin(),
                         sample.tokens.begin() + static_cast<std::ptrdiff_t>(sample.prompt_len));
  batch.modality.emplace_back(
      sample.modality.begin(),
      sample.modality.begin() + static_cast<std::ptrdiff_t>(sample.prompt_len));
  std::span<const Grid> grids;
  if (sample.grid) grids = std::span<const Grid>(&*sample.grid, 1);
  const std::size_t max_seq = model.checkpoint().model.config().max_seq;

  std::vector<std::uint32_t> out;
  while (out.size() < max_new && batch.ids[0].size() < max_seq) {
    const Tensor logits = model.logits(batch, grids);
    const auto next = static_cast<std::uint32_t>(
        argmax(logits.row(logits.rows() - 1), logits.cols()));
    out.push_back(next);
    if (next == vocab::kEos) break;
    batch.ids[0].push_back(next);
    batch.modality[0].push_back(Modality::kText);
  }
  return out;
}

EvalResult eval_suite(const RoutedModel& model, const Dataset& suite, RouteMode mode,
                      std::uint64_t seed) {
  if (suite.empty()) throw std::invalid_argument("eval_suite: empty suite");
  if (model.mode() != mode) {
    throw std::invalid_argument("eval_suite: model is routed for " +
                                std::string(to_string(model.mode())) + ", suite asked for " +
                                std::string(to_string(mode)));
  }
  const bool want_mm = mode == RouteMode::kMultimodal;
  for (const Sample& s : suite) {
    const bool mm = is_multimodal(s.kind) || s.grid.has_value();
    if (mm != want_mm) {
      throw std::invalid_argument("eval_suite: " + std::string(to_string(s.kind)) +
                                  " sample in a " + std::string(to_string(mode)) + " suite");
    }
  }

  struct Acc {
    std::size_t correct = 0, samples = 0;
    double loss = 0.0;
  };
  std::map<std::string, Acc> acc;
  for (std::size_t start = 0; start < suite.size(); start += kEvalChunk) {
    const std::size_t end = std::min(suite.size(), start + kEvalChunk);
    std::vector<const Sample*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&suite[i]);
    const TrainBatch batch = make_batch(std::span<const Sample* const>(chunk));
    const Tensor logits = model.logits(batch.tokens, batch.grids);
    const std::size_t vocab = logits.cols();
    std::size_t offset = 0;
    for (const Sample* s : chunk) {
      const std::size_t n = s->tokens.size();
      bool exact = true;
      double loss = 0.0;
      // Positions prompt_len-1 .. n-2 predict the answer and then EOS.
      for (std::size_t i = s->prompt_len - 1; i + 1 < n; ++i) {
        const double* row = logits.row(offset + i);
        loss += nll(row, vocab, s->tokens[i + 1]);
        if (i + 2 < n && argmax(row, vocab) != s->tokens[i + 1]) exact = false;
      }
      Acc& a = acc[std::string(to_string(s->kind))];
      a.correct += exact ? 1 : 0;
      a.samples += 1;
      a.loss += loss / static_cast<double>(n - s->prompt_len);
      offset += n;
    }
  }

  EvalResult r;
  r.seed = seed;
  r.mode = std::string(to_string(mode));
  r.strategy = std::string(to_string(model.strategy()));
  for (const auto& [name, a] : acc) {
    const double n = static_cast<double>(a.samples);
    r.tasks[name] = TaskScore{static_cast<double>(a.correct) / n, a.loss / n, a.samples};
    r.avg_accuracy += r.tasks[name].accuracy;
    r.avg_loss += r.tasks[name].mean_loss;
  }
  r.avg_accuracy /= static_cast<double>(r.tasks.size());
  r.avg_loss /= static_cast<double>(r.tasks.size());
  return r;
}

double retention(double method_avg, double reference_avg) {
  if (!(reference_avg > 0.0) || !std::isfinite(reference_avg)) {
    throw std::invalid_argument("retention: reference average must be positive");
  }
  if (!std::isfinite(method_avg)) throw std::invalid_argument("retention: non-finite average");
  const double hundredths = 100.0 * method_avg / reference_avg * 100.0;
  // Half-up; the slack absorbs representation error in values like x.xx5.
  return std::floor(hundredths + 0.5 + 1e-9 * std::max(1.0, std::fabs(hundredths))) / 100.0;
}

std::string format_percent(double value) { return fixed(value, 2); }

// ---------------------------------------------------------------------------
// Training runs

BaseModel pretrain_desk_base(const DeskConfig& config) {
  BaseModel base = build_model(config.model, config.base_seed);
  StageConfig c = config.pretrain;
  c.seed = config.base_seed;
  pretrain_base(base, c, config.text_train());
  return base;
}

BaseModel load_or_pretrain_base(const DeskConfig& config,
                                const std::optional<fs::path>& cache_dir) {
  if (!cache_dir) return pretrain_desk_base(config);
  const fs::path dir = *cache_dir / ("base-" + config_key(config));
  if (fs::exists(dir / kManifestFile)) return load_checkpoint(dir).model.base;
  BaseModel base = pretrain_desk_base(config);
  save_checkpoint(build_full_finetune(base), dir, SaveOptions{0, std::nullopt});
  return base;
}

TrainedRun train_method(const MethodSpec& spec, std::uint64_t seed, const BaseModel& base,
                        const DeskConfig& config, const RunHooks& hooks) {
  TrainedRun run{build_method(spec, base, seed), {}, {}};
  const Dataset data = config.mm_train();
  StageConfig s1 = config.stage1;
  s1.seed = seed;
  run.stage1 = run_stage(run.model, s1, data);
  StageConfig s2 = config.stage2;
  s2.seed = seed;
  StepHook hook;
  if (hooks.stage2_step) {
    hook = [&](std::size_t step) { hooks.stage2_step(step, run.model); };
  }
  run.stage2 = run_stage(run.model, s2, data, hook);
  return run;
}

void check_shared_settings(const std::vector<MethodSpec>& specs) {
  if (specs.empty()) throw std::invalid_argument("compare: no methods given");
  std::set<Method> seen;
  const MethodSpec& first = specs.front();
  if (first.seeds.empty()) throw std::invalid_argument("compare: no seeds given");
  for (const MethodSpec& s : specs) {
    if (!seen.insert(s.method).second) {
      throw std::invalid_argument("compare: method " + std::string(to_string(s.method)) +
                                  " listed twice");
    }
    if (s.seeds != first.seeds) {
      throw std::invalid_argument("compare: " + std::string(to_string(s.method)) +
                                  " uses different seeds than " +
                                  std::string(to_string(first.method)));
    }
    if (s.rank != first.rank || s.fraction != first.fraction) {
      throw std::invalid_argument("compare: " + std::string(to_string(s.method)) +
                                  " uses a different rank or fraction than " +
                                  std::string(to_string(first.method)));
    }
  }
}

CompareReport compare_methods(const std::vector<MethodSpec>& specs, const DeskConfig& config,
                              const CompareOptions& options) {
  check_shared_settings(specs);
  config.validate();
  std::mutex log_mutex;
  auto log = [&](const std::string& line) {
    if (!options.log) return;
    std::lock_guard lock(log_mutex);
    options.log(line);
  };

  CompareReport report;
  report.config = config;
  report.specs = specs;

  log("preparing base model");
  const BaseModel base = load_or_pretrain_base(config, options.cache_dir);
  const Dataset text_suite = config.text_suite();
  const Dataset mm_suite = config.mm_suite();
  {
    auto pristine = std::make_shared<HybridCheckpoint>();
    pristine->model = build_genieblue(base, empty_placement(config.model.layers), 0);
    report.base_text = eval_suite(route(pristine, RouteMode::kText, BaseStrategy::kNonShared),
                                  text_suite, RouteMode::kText, config.base_seed);
  }

  struct Job {
    const MethodSpec* spec;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const MethodSpec& s : specs) {
    for (std::uint64_t seed : s.seeds) jobs.push_back({&s, seed});
  }
  report.runs.resize(jobs.size());

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const Job& job = jobs[i];
        const std::string label = std::string(to_string(job.spec->method)) + " seed " +
                                  std::to_string(job.seed);
        log("training " + label);
        TrainedRun trained = train_method(*job.spec, job.seed, base, config);
        RunResult& r = report.runs[i];
        r.method = job.spec->method;
        r.seed = job.seed;
        r.params = count_trainable(trained.model);
        r.stage2_first_loss = trained.stage2.losses.front();
        r.stage2_last_loss = trained.stage2.losses.back();
        r.frozen_intact =
            trained.stage1.frozen_digest_before == trained.stage1.frozen_digest_after &&
            trained.stage2.frozen_digest_before == trained.stage2.frozen_digest_after;

        auto ckpt = std::make_shared<HybridCheckpoint>();
        ckpt->model = std::move(trained.model);
        ckpt->has_delta = true;
        r.multimodal = eval_suite(route(ckpt, RouteMode::kMultimodal, BaseStrategy::kNonShared),
                                  mm_suite, RouteMode::kMultimodal, job.seed);
        r.text_shared = eval_suite(route(ckpt, RouteMode::kText, BaseStrategy::kShared),
                                   text_suite, RouteMode::kText, job.seed);
        if (preserves_base(job.spec->method)) {
          r.text_nonshared = eval_suite(route(ckpt, RouteMode::kText, BaseStrategy::kNonShared),
                                        text_suite, RouteMode::kText, job.seed);
        }
        log("finished " + label);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return report;
}

// ---------------------------------------------------------------------------
// Reports

std::string CompareReport::markdown() const {
  const auto rows = table_rows(*this);
  const std::vector<std::uint64_t>& seeds = specs.front().seeds;
  const bool ranges = seeds.size() > 1;
  std::ostringstream out;
  out << "# Method comparison\n\n";
  out << "Seeds:";
  for (std::size_t i = 0; i < seeds.size(); ++i) out << (i ? ", " : " ") << seeds[i];
  out << ". Accuracies are exact-match percentages";
  if (ranges) out << ", shown as mean [min, max] across seeds";
  out << ".\n\n";
  out << "Base model text avg: " << format_percent(100.0 * base_text.avg_accuracy)
      << " (loss " << fixed(base_text.avg_loss, 4) << ")\n\n";
  out << "| Method | #Param | MM avg | Text avg (shared) | Text avg (non-shared) "
         "| MM retention (%) | Text retention, shared (%) | Text retention, non-shared (%) "
         "| Text loss (shared) | Text loss (non-shared) |\n";
  out << "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const TableRow& r : rows) {
    out << "| " << r.method << " | " << r.params << " | " << show(r.mm, 2, ranges) << " | "
        << show(r.text_shared, 2, ranges) << " | "
        << (r.text_nonshared ? show(*r.text_nonshared, 2, ranges) : "n/a") << " | "
        << r.mm_retention << " | " << r.shared_retention << " | " << r.nonshared_retention
        << " | " << show(r.loss_shared, 4, ranges) << " | "
        << (r.loss_nonshared ? show(*r.loss_nonshared, 4, ranges) : "n/a") << " |\n";
  }
  return out.str();
}

std::string CompareReport::json() const {
  Json spec_list = Json::array();
  for (const MethodSpec& s : specs) {
    spec_list.push_back(Json{{"method", std::string(to_string(s.method))},
                             {"rank", s.rank},
                             {"fraction", s.fraction},
                             {"seeds", s.seeds}});
  }
  Json run_list = Json::array();
  for (const RunResult& r : runs) {
    Json item{{"method", std::string(to_string(r.method))},
              {"seed", r.seed},
              {"trainable", counts_json(r.params)},
              {"stage2_first_loss", r.stage2_first_loss},
              {"stage2_last_loss", r.stage2_last_loss},
              {"frozen_intact", r.frozen_intact},
              {"multimodal", eval_json(r.multimodal)},
              {"text_shared", eval_json(r.text_shared)}};
    item["text_nonshared"] = r.text_nonshared ? eval_json(*r.text_nonshared) : Json();
    run_list.push_back(std::move(item));
  }
  Json table = Json::array();
  for (const TableRow& row : table_rows(*this)) {
    table.push_back(Json{{"method", row.method},
                         {"params", row.params},
                         {"mm_avg", row.mm.mean},
                         {"text_avg_shared", row.text_shared.mean},
                         {"text_avg_nonshared",
                          row.text_nonshared ? Json(row.text_nonshared->mean) : Json()},
                         {"mm_retention", row.mm_retention},
                         {"text_retention_shared", row.shared_retention},
                         {"text_retention_nonshared", row.nonshared_retention}});
  }
  Json j{{"config", Json::parse(config.to_json())},
         {"specs", spec_list},
         {"base_text", eval_json(base_text)},
         {"runs", run_list},
         {"table", table}};
  return j.dump(2) + "\n";
}

void write_report(const CompareReport& report, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto write = [](const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + p.string());
  };
  write(path, report.markdown());
  fs::path sidecar = path;
  sidecar += ".json";
  write(sidecar, report.json());
}

std::size_t worker_threads() {
  const char* env = std::getenv("GENIEBLUE_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

}  // namespace genieblue
