#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "genieblue/adaptation.hpp"
#include "genieblue/data.hpp"
#include "genieblue/routing.hpp"
#include "genieblue/training.hpp"

namespace genieblue {

enum class Method {
  kFullFinetune,
  kLora,
  kCogvlmPost,
  kCogvlmPre,
  kCogvlmSkip,
  kGbPost,
  kGbPre,
  kGbSkip,
};
std::string_view to_string(Method m);
Method parse_method(std::string_view text);
const std::vector<Method>& all_methods();
/// Whether the method leaves the base untouched, so non-shared text
/// routing applies.
bool preserves_base(Method m);

struct MethodSpec {
  Method method = Method::kGbSkip;
  std::size_t rank = kDefaultLoraRank;
  double fraction = 0.25;
  std::vector<std::uint64_t> seeds = {0};
};

/// Parses "gb-skip,lora,..." into specs sharing rank, fraction and seeds.
std::vector<MethodSpec> parse_methods(std::string_view list, std::size_t rank, double fraction,
                                      const std::vector<std::uint64_t>& seeds);

/// Fresh, untrained construction for one run. The seed draws the vision
/// encoder, projector and adapter initialization; the language model is
/// always `base`'s.
HybridModel build_method(const MethodSpec& spec, const BaseModel& base, std::uint64_t seed);

/// Everything a desk experiment shares across methods and seeds: model
/// shape, data, and the three training stages.
struct DeskConfig {
  ModelConfig model;
  std::uint64_t base_seed = 0;
  std::uint64_t data_seed = 0;
  std::size_t text_samples = 256;  // per text task, pretraining
  std::size_t text_seq_len = 20;
  std::size_t text_eval_samples = 64;  // held-in, per text task
  TaskKind mm_task = TaskKind::kGridCaption;
  std::size_t mm_samples = 64;
  std::size_t mm_seq_len = 64;
  StageConfig pretrain = StageConfig::defaults(0);
  StageConfig stage1 = StageConfig::defaults(1);
  StageConfig stage2 = StageConfig::defaults(2);

  /// The desk recipe (stage batches of 8, stage-2 peak lr 1e-3).
  static DeskConfig defaults();
  static DeskConfig from_json(std::string_view text);
  std::string to_json() const;
  void validate() const;
  bool operator==(const DeskConfig& other) const { return to_json() == other.to_json(); }

  Dataset text_train() const;
  Dataset text_suite() const;
  Dataset mm_train() const;
  Dataset mm_suite() const;  // held-in: the training set itself
};

DeskConfig load_desk_config(const std::filesystem::path& path);

struct TaskScore {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t samples = 0;
};

struct EvalResult {
  std::map<std::string, TaskScore> tasks;
  double avg_accuracy = 0.0;
  double avg_loss = 0.0;
  std::uint64_t seed = 0;
  std::string mode;
  std::string strategy;
};

/// Greedy continuation of the sample's prompt, at most `max_new` tokens,
/// stopping after EOS (which is included).
std::vector<std::uint32_t> greedy_decode(const RoutedModel& model, const Sample& sample,
                                         std::size_t max_new);

/// Exact match of greedy decoding against each sample's answer (EOS not
/// compared), plus the mean answer NLL. Greedy decoding is computed from one
/// teacher-forced pass: a greedy run reproduces the answer exactly when
/// every teacher-forced argmax (lowest index on ties) equals the next answer
/// token.
EvalResult eval_suite(const RoutedModel& model, const Dataset& suite, RouteMode mode,
                      std::uint64_t seed = 0);

/// 100 * method / reference, rounded half-up to 2 decimals.
double retention(double method_avg, double reference_avg);

/// Number with exactly two decimals.
std::string format_percent(double value);

struct RunHooks {
  // After each stage-2 step with the live model.
  std::function<void(std::size_t step, const HybridModel& model)> stage2_step;
};

struct TrainedRun {
  HybridModel model;
  TrainReport stage1;
  TrainReport stage2;
};

BaseModel pretrain_desk_base(const DeskConfig& config);
/// Pretrains once and caches the base as a checkpoint under `cache_dir`,
/// keyed by the config.
BaseModel load_or_pretrain_base(const DeskConfig& config,
                                const std::optional<std::filesystem::path>& cache_dir);

TrainedRun train_method(const MethodSpec& spec, std::uint64_t seed, const BaseModel& base,
                        const DeskConfig& config, const RunHooks& hooks = {});

struct RunResult {
  Method method = Method::kGbSkip;
  std::uint64_t seed = 0;
  TrainableCount params;
  EvalResult multimodal;
  EvalResult text_shared;
  std::optional<EvalResult> text_nonshared;
  double stage2_first_loss = 0.0;
  double stage2_last_loss = 0.0;
  bool frozen_intact = false;
};

struct CompareReport {
  DeskConfig config;
  std::vector<MethodSpec> specs;
  EvalResult base_text;
  std::vector<RunResult> runs;  // spec order, then seed order

  std::string markdown() const;
  std::string json() const;
};

struct CompareOptions {
  std::optional<std::filesystem::path> cache_dir;
  std::size_t threads = 1;
  std::function<void(const std::string&)> log;
};

/// Rejects specs that disagree on any shared setting before training.
void check_shared_settings(const std::vector<MethodSpec>& specs);

CompareReport compare_methods(const std::vector<MethodSpec>& specs, const DeskConfig& config,
                              const CompareOptions& options = {});

/// Writes the markdown table to `path` and the JSON sidecar next to it.
void write_report(const CompareReport& report, const std::filesystem::path& path);

/// GENIEBLUE_THREADS, or 1 when unset or invalid.
std::size_t worker_threads();

}  // namespace genieblue
