#include "genieblue/data.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace genieblue {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kTextCopy: return "text-copy";
    case TaskKind::kTextReverse: return "text-reverse";
    case TaskKind::kTextArith: return "text-arith";
    case TaskKind::kGridCaption: return "grid-caption";
    case TaskKind::kGridCount: return "grid-count";
  }
  throw std::logic_error("unknown task kind");
}

TaskKind parse_task_kind(std::string_view text) {
  for (auto k : {TaskKind::kTextCopy, TaskKind::kTextReverse, TaskKind::kTextArith,
                 TaskKind::kGridCaption, TaskKind::kGridCount}) {
    if (to_string(k) == text) return k;
  }
  throw std::invalid_argument("unknown task kind '" + std::string(text) + "'");
}

bool is_multimodal(TaskKind kind) {
  return kind == TaskKind::kGridCaption || kind == TaskKind::kGridCount;
}

std::span<const std::uint32_t> Sample::answer() const {
  std::span<const std::uint32_t> all(tokens);
  return all.subspan(prompt_len, tokens.size() - prompt_len - 1);
}

std::vector<std::uint32_t> caption_tokens(const Grid& grid) {
  std::vector<std::uint32_t> out;
  std::size_t i = 0;
  while (i < grid.cells.size()) {
    std::size_t j = i;
    while (j < grid.cells.size() && grid.cells[j] == grid.cells[i]) ++j;
    out.push_back(vocab::symbol(grid.cells[i]));
    out.push_back(vocab::number(static_cast<std::uint32_t>(j - i)));
    i = j;
  }
  return out;
}

namespace {

constexpr std::size_t kMaxCaptionRuns = 3;
constexpr std::uint32_t kArithOperandLimit = 50;

using Rng = std::mt19937_64;

std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Sample text_sample(TaskKind kind, const TaskSpec& spec, Rng& rng) {
  if (kind == TaskKind::kTextArith) {
    const std::array<std::uint32_t, 2> ab = {
        static_cast<std::uint32_t>(uniform(rng, 0, kArithOperandLimit - 1)),
        static_cast<std::uint32_t>(uniform(rng, 0, kArithOperandLimit - 1))};
    return make_text_sample(kind, ab);
  }
  const std::size_t max_n = (spec.seq_len - 3) / 2;
  std::vector<std::uint32_t> xs(uniform(rng, 1, max_n));
  for (auto& x : xs) x = static_cast<std::uint32_t>(uniform(rng, 0, vocab::kLetterCount - 1));
  return make_text_sample(kind, xs);
}

// Grids made of up to three row-aligned runs of distinct neighbouring symbols.
Grid caption_grid(const ModelConfig& config, Rng& rng) {
  const std::size_t side = config.grid_side;
  const std::size_t runs = uniform(rng, 1, std::min(kMaxCaptionRuns, side));
  std::vector<std::size_t> cuts;
  for (std::size_t r = 1; r < side; ++r) cuts.push_back(r);
  std::shuffle(cuts.begin(), cuts.end(), rng);
  cuts.resize(runs - 1);
  std::sort(cuts.begin(), cuts.end());
  cuts.push_back(side);

  Grid g;
  g.side = side;
  g.cells.resize(side * side);
  std::size_t row = 0;
  std::uint8_t prev = 0;
  for (std::size_t r = 0; r < cuts.size(); ++r) {
    std::uint8_t sym;
    do {
      sym = static_cast<std::uint8_t>(uniform(rng, 0, config.image_alphabet - 1));
    } while (r > 0 && sym == prev);
    prev = sym;
    for (; row < cuts[r]; ++row) {
      std::fill_n(g.cells.begin() + static_cast<std::ptrdiff_t>(row * side), side, sym);
    }
  }
  return g;
}

Sample grid_sample(TaskKind kind, const ModelConfig& config, Rng& rng) {
  if (kind == TaskKind::kGridCaption) return make_caption_sample(caption_grid(config, rng));
  Grid g;
  g.side = config.grid_side;
  g.cells.resize(config.grid_cells());
  // A small palette keeps counts spread over a useful range.
  const std::size_t palette = std::min<std::size_t>(4, config.image_alphabet);
  std::array<std::uint8_t, 4> colors{};
  for (std::size_t i = 0; i < palette; ++i) {
    colors[i] = static_cast<std::uint8_t>(uniform(rng, 0, config.image_alphabet - 1));
  }
  for (auto& c : g.cells) c = colors[uniform(rng, 0, palette - 1)];
  const std::uint8_t query = g.cells[uniform(rng, 0, g.cells.size() - 1)];
  return make_count_sample(g, query);
}

std::size_t max_sample_length(const TaskSpec& spec, const ModelConfig& config) {
  switch (spec.kind) {
    case TaskKind::kTextCopy:
    case TaskKind::kTextReverse: return spec.seq_len;
    case TaskKind::kTextArith: return 6;
    case TaskKind::kGridCaption: return config.grid_cells() + 2 + 2 * kMaxCaptionRuns;
    case TaskKind::kGridCount: return config.grid_cells() + 5;
  }
  return 0;
}

}  // namespace

Sample make_text_sample(TaskKind kind, std::span<const std::uint32_t> input) {
  Sample s;
  s.kind = kind;
  switch (kind) {
    case TaskKind::kTextArith:
      if (input.size() != 2) throw std::invalid_argument("arithmetic takes two operands");
      if (input[0] + input[1] >= vocab::kNumberCount) {
        throw std::invalid_argument("arithmetic result outside the number range");
      }
      s.tokens = {vocab::kTaskArith, vocab::number(input[0]), vocab::number(input[1]),
                  vocab::kSep};
      s.prompt_len = s.tokens.size();
      s.tokens.push_back(vocab::number(input[0] + input[1]));
      break;
    case TaskKind::kTextCopy:
    case TaskKind::kTextReverse: {
      if (input.empty()) throw std::invalid_argument("copy/reverse need at least one letter");
      // [task] x1..xn [sep] y1..yn [eos]
      s.tokens.push_back(kind == TaskKind::kTextCopy ? vocab::kTaskCopy : vocab::kTaskReverse);
      for (auto x : input) {
        if (x >= vocab::kLetterCount) throw std::invalid_argument("letter index out of range");
        s.tokens.push_back(vocab::letter(x));
      }
      s.tokens.push_back(vocab::kSep);
      s.prompt_len = s.tokens.size();
      if (kind == TaskKind::kTextCopy) {
        for (auto x : input) s.tokens.push_back(vocab::letter(x));
      } else {
        for (auto it = input.rbegin(); it != input.rend(); ++it) s.tokens.push_back(vocab::letter(*it));
      }
      break;
    }
    default:
      throw std::invalid_argument("make_text_sample: not a text task");
  }
  s.tokens.push_back(vocab::kEos);
  s.modality.assign(s.tokens.size(), Modality::kText);
  return s;
}

namespace {

Sample image_prompt(TaskKind kind, const Grid& grid) {
  Sample s;
  s.kind = kind;
  s.grid = grid;
  s.tokens.assign(grid.cells.size(), vocab::kImage);
  s.modality.assign(grid.cells.size(), Modality::kImage);
  return s;
}

void finish(Sample& s) {
  s.tokens.push_back(vocab::kEos);
  s.modality.resize(s.tokens.size(), Modality::kText);
}

}  // namespace

Sample make_caption_sample(const Grid& grid) {
  Sample s = image_prompt(TaskKind::kGridCaption, grid);
  s.tokens.push_back(vocab::kTaskCaption);
  s.prompt_len = s.tokens.size();
  const auto cap = caption_tokens(grid);
  s.tokens.insert(s.tokens.end(), cap.begin(), cap.end());
  finish(s);
  return s;
}

Sample make_count_sample(const Grid& grid, std::uint8_t query) {
  Sample s = image_prompt(TaskKind::kGridCount, grid);
  s.tokens.push_back(vocab::kTaskCount);
  s.tokens.push_back(vocab::symbol(query));
  s.tokens.push_back(vocab::kSep);
  s.prompt_len = s.tokens.size();
  const auto n = std::count(grid.cells.begin(), grid.cells.end(), query);
  s.tokens.push_back(vocab::number(static_cast<std::uint32_t>(n)));
  finish(s);
  return s;
}

Dataset synth_dataset(const TaskSpec& spec, const ModelConfig& config) {
  config.validate();
  if (config.vocab < vocab::kRequiredVocab) {
    throw std::invalid_argument("synth_dataset: vocabulary of " + std::to_string(config.vocab) +
                                " is smaller than the task layout needs (" +
                                std::to_string(vocab::kRequiredVocab) + ")");
  }
  if (config.image_alphabet > 16 || config.grid_cells() > vocab::kNumberCount - 1) {
    throw std::invalid_argument("synth_dataset: image alphabet or grid too large for the token layout");
  }
  if ((spec.kind == TaskKind::kTextCopy || spec.kind == TaskKind::kTextReverse) &&
      spec.seq_len < 5) {
    throw std::invalid_argument("synth_dataset: seq_len must be at least 5 for copy/reverse");
  }
  const std::size_t need = max_sample_length(spec, config);
  if (need > config.max_seq || spec.seq_len > config.max_seq) {
    throw std::invalid_argument("synth_dataset: samples of length up to " +
                                std::to_string(std::max(need, spec.seq_len)) +
                                " exceed model max sequence " + std::to_string(config.max_seq));
  }
  Rng rng(spec.seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(spec.kind) + 1)));
  Dataset out;
  out.reserve(spec.samples);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    out.push_back(is_multimodal(spec.kind) ? grid_sample(spec.kind, config, rng)
                                           : text_sample(spec.kind, spec, rng));
  }
  return out;
}

TrainBatch make_batch(std::span<const Sample* const> samples, double scale) {
  TrainBatch b;
  const double rows = static_cast<double>(samples.size());
  for (const Sample* s : samples) {
    b.tokens.ids.push_back(s->tokens);
    b.tokens.modality.push_back(s->modality);
    if (s->grid) b.grids.push_back(*s->grid);
    const std::size_t n = s->tokens.size();
    const std::size_t answer_len = n - s->prompt_len;
    const double w = scale / (static_cast<double>(answer_len) * rows);
    for (std::size_t i = 0; i < n; ++i) {
      const bool counted = i + 1 < n && i + 1 >= s->prompt_len;
      b.targets.push_back(counted ? s->tokens[i + 1] : 0);
      b.weights.push_back(counted ? w : 0.0);
    }
  }
  return b;
}

TrainBatch make_batch(std::span<const Sample> samples, double scale) {
  std::vector<const Sample*> ptrs;
  ptrs.reserve(samples.size());
  for (const auto& s : samples) ptrs.push_back(&s);
  return make_batch(std::span<const Sample* const>(ptrs), scale);
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kMagic = {'G', 'B', 'D', 'S'};

template <typename T>
void put(std::string& buf, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) throw std::runtime_error("dataset cache truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::string buf(kMagic.begin(), kMagic.end());
  put<std::uint32_t>(buf, kDatasetCacheVersion);
  put<std::uint64_t>(buf, data.size());
  for (const Sample& s : data) {
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(s.kind));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.tokens.size()));
    for (auto t : s.tokens) put<std::uint32_t>(buf, t);
    for (auto m : s.modality) put<std::uint8_t>(buf, static_cast<std::uint8_t>(m));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.prompt_len));
    put<std::uint32_t>(buf, s.grid ? static_cast<std::uint32_t>(s.grid->side) : 0u);
    if (s.grid) buf.append(s.grid->cells.begin(), s.grid->cells.end());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

bool is_dataset_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::array<char, 4> head{};
  return in.read(head.data(), head.size()) && head == kMagic;
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::string raw = slurp(path);
  if (raw.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), raw.begin())) {
    throw std::runtime_error(path.string() + " is not a dataset cache");
  }
  Reader r(raw.substr(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetCacheVersion) {
    throw std::runtime_error("unsupported dataset cache version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  Dataset out;
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    const auto kind = r.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(TaskKind::kGridCount)) {
      throw std::runtime_error("dataset cache: bad task kind");
    }
    s.kind = static_cast<TaskKind>(kind);
    const auto n = r.get<std::uint32_t>();
    s.tokens.resize(n);
    for (auto& t : s.tokens) t = r.get<std::uint32_t>();
    s.modality.resize(n);
    for (auto& m : s.modality) m = static_cast<Modality>(r.get<std::uint8_t>());
    s.prompt_len = r.get<std::uint32_t>();
    if (s.prompt_len >= n) throw std::runtime_error("dataset cache: bad prompt length");
    const auto side = r.get<std::uint32_t>();
    if (side > 0) {
      Grid g;
      g.side = side;
      g.cells.resize(static_cast<std::size_t>(side) * side);
      for (auto& c : g.cells) c = r.get<std::uint8_t>();
      s.grid = std::move(g);
    }
    out.push_back(std::move(s));
  }
  if (!r.done()) throw std::runtime_error("dataset cache: trailing bytes");
  return out;
}

}  // namespace genieblue
