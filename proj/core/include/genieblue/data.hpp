#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "genieblue/model.hpp"

namespace genieblue {

/// Token id layout shared by every task.
namespace vocab {
inline constexpr std::uint32_t kPad = 0;
inline constexpr std::uint32_t kEos = 2;
inline constexpr std::uint32_t kSep = 3;
inline constexpr std::uint32_t kImage = 4;
inline constexpr std::uint32_t kTaskCopy = 5;
inline constexpr std::uint32_t kTaskReverse = 6;
inline constexpr std::uint32_t kTaskArith = 7;
inline constexpr std::uint32_t kTaskCaption = 8;
inline constexpr std::uint32_t kTaskCount = 9;
inline constexpr std::uint32_t kSymbolBase = 16;   // 16 image symbols
inline constexpr std::uint32_t kNumberBase = 32;   // numbers 0..99
inline constexpr std::uint32_t kNumberCount = 100;
inline constexpr std::uint32_t kLetterBase = 132;  // 64 letters
inline constexpr std::uint32_t kLetterCount = 64;
inline constexpr std::uint32_t kRequiredVocab = kLetterBase + kLetterCount;

inline std::uint32_t symbol(std::uint32_t s) { return kSymbolBase + s; }
inline std::uint32_t number(std::uint32_t n) { return kNumberBase + n; }
inline std::uint32_t letter(std::uint32_t l) { return kLetterBase + l; }
}  // namespace vocab

enum class TaskKind : std::uint8_t {
  kTextCopy,
  kTextReverse,
  kTextArith,
  kGridCaption,
  kGridCount,
};
std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);
bool is_multimodal(TaskKind kind);

struct TaskSpec {
  TaskKind kind = TaskKind::kTextCopy;
  std::size_t samples = 64;
  std::size_t seq_len = 20;  // upper bound on sample length
  std::uint64_t seed = 0;
};

/// One training/eval example: tokens[0, prompt_len) is the prompt (image
/// prefix included), the rest is the answer, terminated by EOS.
struct Sample {
  TaskKind kind = TaskKind::kTextCopy;
  std::vector<std::uint32_t> tokens;
  std::vector<Modality> modality;
  std::size_t prompt_len = 0;
  std::optional<Grid> grid;

  // Answer tokens without the trailing EOS; exact match compares these.
  std::span<const std::uint32_t> answer() const;
  bool operator==(const Sample&) const = default;
};

using Dataset = std::vector<Sample>;

Dataset synth_dataset(const TaskSpec& spec, const ModelConfig& config);

/// Builders behind the generator. `input` holds letter indices for copy and
/// reverse, or the two operands for arithmetic.
Sample make_text_sample(TaskKind kind, std::span<const std::uint32_t> input);
Sample make_caption_sample(const Grid& grid);
Sample make_count_sample(const Grid& grid, std::uint8_t query);

/// Row-major run-length description: (symbol, count) pairs.
std::vector<std::uint32_t> caption_tokens(const Grid& grid);

/// Samples packed into one batch, with the next-token objective: position i
/// predicts token i+1 and counts only if that token belongs to the answer.
/// Each sample's answer tokens carry weight 1/(answer_len * rows) * scale.
struct TrainBatch {
  TokenBatch tokens;
  std::vector<Grid> grids;
  std::vector<std::size_t> targets;
  std::vector<double> weights;
};

TrainBatch make_batch(std::span<const Sample* const> samples, double scale = 1.0);
TrainBatch make_batch(std::span<const Sample> samples, double scale = 1.0);

// Dataset cache: versioned header followed by one length-prefixed record per
// sample. Byte-identical for identical datasets.
inline constexpr std::uint32_t kDatasetCacheVersion = 1;
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);
bool is_dataset_cache(const std::filesystem::path& path);

}  // namespace genieblue
