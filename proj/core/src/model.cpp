#include "genieblue/model.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace genieblue {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("ModelConfig: ") + name + " must be positive");
  };
  positive(vocab, "vocab");
  positive(width, "width");
  positive(layers, "layers");
  positive(heads, "heads");
  positive(ffn, "ffn");
  positive(max_seq, "max_seq");
  positive(grid_side, "grid_side");
  positive(image_alphabet, "image_alphabet");
  positive(vision_width, "vision_width");
  positive(vision_heads, "vision_heads");
  positive(vision_ffn, "vision_ffn");
  if (width % heads != 0) {
    throw std::invalid_argument("ModelConfig: width " + std::to_string(width) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (vision_width % vision_heads != 0) {
    throw std::invalid_argument("ModelConfig: vision_width not divisible by vision_heads");
  }
  if (layers < 4) {
    throw std::invalid_argument("ModelConfig: need at least 4 layers, got " +
                                std::to_string(layers));
  }
  if (max_seq <= grid_side * grid_side) {
    throw std::invalid_argument("ModelConfig: max_seq " + std::to_string(max_seq) +
                                " leaves no room for text after a " +
                                std::to_string(grid_side * grid_side) + "-cell image");
  }
  if (image_alphabet > 256) {
    throw std::invalid_argument("ModelConfig: image alphabet must fit in a byte");
  }
}

namespace {

constexpr double kInitStd = 0.02;

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = dist_(rng_) * kInitStd;
    return t;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_;
};

BlockWeights make_block(Initializer& init, std::size_t d, std::size_t ffn) {
  BlockWeights b;
  b.norm1 = Tensor({d}, 1.0);
  b.wq = init.normal({d, d});
  b.wk = init.normal({d, d});
  b.wv = init.normal({d, d});
  b.wo = init.normal({d, d});
  b.norm2 = Tensor({d}, 1.0);
  b.w1 = init.normal({ffn, d});
  b.w2 = init.normal({d, ffn});
  return b;
}

void visit_block(BlockWeights& block, const std::string& prefix, const ParamVisitor& fn) {
  block.for_each([&](std::string_view name, Tensor& t) { fn(prefix + std::string(name), t); });
}

}  // namespace

BaseModel build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  BaseModel m;
  m.config = config;
  const std::size_t d = config.width;

  m.lm.heads = config.heads;
  m.lm.embed = init.normal({config.vocab, d});
  m.lm.pos = init.normal({config.max_seq, d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    m.lm.blocks.push_back(make_block(init, d, config.ffn));
  }
  m.lm.final_norm = Tensor({d}, 1.0);
  m.lm.head = init.normal({config.vocab, d});

  const std::size_t dv = config.vision_width;
  m.vision.heads = config.vision_heads;
  m.vision.symbol_embed = init.normal({config.image_alphabet, dv});
  m.vision.cell_pos = init.normal({config.grid_cells(), dv});
  for (std::size_t l = 0; l < config.vision_layers; ++l) {
    m.vision.blocks.push_back(make_block(init, dv, config.vision_ffn));
  }
  m.vision.final_norm = Tensor({dv}, 1.0);

  m.projector.w1 = init.normal({d, dv});
  m.projector.b1 = Tensor({d});
  m.projector.w2 = init.normal({d, d});
  m.projector.b2 = Tensor({d});
  return m;
}

std::size_t block_parameter_count(std::size_t width, std::size_t ffn) {
  return 4 * width * width + 2 * width * ffn + 2 * width;
}

std::size_t lm_parameter_count(const ModelConfig& c) {
  return c.vocab * c.width + c.max_seq * c.width +
         c.layers * block_parameter_count(c.width, c.ffn) + c.width + c.vocab * c.width;
}

std::size_t vision_parameter_count(const ModelConfig& c) {
  return c.image_alphabet * c.vision_width + c.grid_cells() * c.vision_width +
         c.vision_layers * block_parameter_count(c.vision_width, c.vision_ffn) +
         c.vision_width;
}

std::size_t projector_parameter_count(const ModelConfig& c) {
  return c.width * c.vision_width + c.width + c.width * c.width + c.width;
}

std::size_t parameter_count(const ModelConfig& c) {
  return lm_parameter_count(c) + vision_parameter_count(c) + projector_parameter_count(c);
}

void for_each_parameter(LanguageModel& lm, const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "embed", lm.embed);
  fn(prefix + "pos", lm.pos);
  for (std::size_t l = 0; l < lm.blocks.size(); ++l) {
    visit_block(lm.blocks[l], prefix + "blocks." + std::to_string(l) + ".", fn);
  }
  fn(prefix + "final_norm", lm.final_norm);
  fn(prefix + "head", lm.head);
}

void for_each_parameter(VisionEncoder& vision, const std::string& prefix,
                        const ParamVisitor& fn) {
  fn(prefix + "symbol_embed", vision.symbol_embed);
  fn(prefix + "cell_pos", vision.cell_pos);
  for (std::size_t l = 0; l < vision.blocks.size(); ++l) {
    visit_block(vision.blocks[l], prefix + "blocks." + std::to_string(l) + ".", fn);
  }
  fn(prefix + "final_norm", vision.final_norm);
}

void for_each_parameter(Projector& p, const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "w1", p.w1);
  fn(prefix + "b1", p.b1);
  fn(prefix + "w2", p.w2);
  fn(prefix + "b2", p.b2);
}

void for_each_parameter(BaseModel& model, const ParamVisitor& fn) {
  for_each_parameter(model.lm, "lm.", fn);
  for_each_parameter(model.vision, "vision.", fn);
  for_each_parameter(model.projector, "projector.", fn);
}

void for_each_parameter(const BaseModel& model, const ConstParamVisitor& fn) {
  for_each_parameter(const_cast<BaseModel&>(model),
                     [&](const std::string& name, Tensor& t) { fn(name, t); });
}

// ---------------------------------------------------------------------------

std::size_t TokenBatch::total_positions() const {
  std::size_t n = 0;
  for (const auto& row : ids) n += row.size();
  return n;
}

std::vector<std::size_t> TokenBatch::lengths() const {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (const auto& row : ids) out.push_back(row.size());
  return out;
}

std::vector<Segment> TokenBatch::segments() const {
  std::vector<Segment> out;
  std::size_t offset = 0;
  for (const auto& row : ids) {
    out.push_back({offset, row.size()});
    offset += row.size();
  }
  return out;
}

std::size_t TokenBatch::image_prefix(std::size_t row) const {
  const auto& m = modality[row];
  return static_cast<std::size_t>(
      std::find(m.begin(), m.end(), Modality::kText) - m.begin());
}

std::size_t TokenBatch::image_positions() const {
  std::size_t n = 0;
  for (const auto& row : modality) {
    n += static_cast<std::size_t>(std::count(row.begin(), row.end(), Modality::kImage));
  }
  return n;
}

RowRouting TokenBatch::routing() const {
  RowRouting r;
  std::size_t pos = 0;
  for (const auto& row : modality) {
    for (Modality m : row) {
      (m == Modality::kImage ? r.image_rows : r.text_rows).push_back(pos++);
    }
  }
  return r;
}

void TokenBatch::validate(std::size_t vocab, std::size_t max_seq) const {
  if (ids.size() != modality.size()) {
    throw std::invalid_argument("TokenBatch: ids and modality have different row counts");
  }
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r].size() != modality[r].size()) {
      throw std::invalid_argument("TokenBatch: row " + std::to_string(r) +
                                  " ids/modality length mismatch");
    }
    if (ids[r].empty()) throw std::invalid_argument("TokenBatch: empty row " + std::to_string(r));
    if (ids[r].size() > max_seq) {
      throw std::invalid_argument("TokenBatch: row " + std::to_string(r) + " has length " +
                                  std::to_string(ids[r].size()) + " beyond max " +
                                  std::to_string(max_seq));
    }
    const std::size_t prefix = image_prefix(r);
    for (std::size_t i = prefix; i < ids[r].size(); ++i) {
      if (modality[r][i] == Modality::kImage) {
        throw std::invalid_argument("TokenBatch: image positions in row " + std::to_string(r) +
                                    " are not a contiguous prefix");
      }
      if (ids[r][i] >= vocab) {
        throw std::invalid_argument("TokenBatch: token id " + std::to_string(ids[r][i]) +
                                    " outside vocabulary " + std::to_string(vocab));
      }
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<LayerBinding> base_bindings(const LanguageModel& lm) {
  std::vector<LayerBinding> out;
  out.reserve(lm.blocks.size());
  for (const auto& b : lm.blocks) out.push_back({&b, nullptr, nullptr});
  return out;
}

Var lm_forward(Tape& tape, const LanguageModel& lm, std::span<const LayerBinding> layers,
               const TokenBatch& batch, std::optional<Var> image_embeddings) {
  batch.validate(lm.vocab(), lm.max_seq());
  const std::size_t n_image = batch.image_positions();
  if (n_image > 0 && !image_embeddings) {
    throw std::invalid_argument("forward_lm: batch has " + std::to_string(n_image) +
                                " image positions but no injected embeddings");
  }
  std::vector<std::size_t> ids;
  std::vector<bool> inject;
  std::vector<std::size_t> positions;
  ids.reserve(batch.total_positions());
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    for (std::size_t i = 0; i < batch.ids[r].size(); ++i) {
      const bool img = batch.modality[r][i] == Modality::kImage;
      ids.push_back(img ? 0 : batch.ids[r][i]);
      inject.push_back(img);
      positions.push_back(i);
    }
  }
  std::optional<Var> injected = n_image > 0 ? image_embeddings : std::nullopt;
  if (n_image == 0 && image_embeddings && image_embeddings->value().rows() != 0) {
    throw std::invalid_argument("forward_lm: injected embeddings given for a batch without image positions");
  }
  Var h = ad::embed_with_injection(tape.param(lm.embed), std::move(ids), std::move(inject),
                                   injected);
  h = ad::add(h, ad::gather_rows(tape.param(lm.pos), std::move(positions)));

  const auto segments = batch.segments();
  const RowRouting routing = batch.routing();
  for (const auto& binding : layers) {
    h = block_forward(tape, h, binding, segments, lm.heads, /*causal=*/true, &routing);
  }
  h = ad::rms_norm(h, tape.param(lm.final_norm));
  return ad::matmul_nt(h, tape.param(lm.head));
}

Var vision_forward(Tape& tape, const VisionEncoder& vision, std::span<const Grid> grids) {
  const std::size_t cells = vision.cell_pos.rows();
  const std::size_t alphabet = vision.symbol_embed.rows();
  std::vector<std::size_t> symbols, positions;
  std::vector<Segment> segments;
  for (const Grid& g : grids) {
    if (g.cells.size() != cells || g.side * g.side != cells) {
      throw std::invalid_argument("vision_forward: grid of " + std::to_string(g.cells.size()) +
                                  " cells, encoder expects " + std::to_string(cells));
    }
    segments.push_back({symbols.size(), cells});
    for (std::size_t i = 0; i < cells; ++i) {
      if (g.cells[i] >= alphabet) {
        throw std::invalid_argument("vision_forward: symbol " + std::to_string(g.cells[i]) +
                                    " outside image alphabet " + std::to_string(alphabet));
      }
      symbols.push_back(g.cells[i]);
      positions.push_back(i);
    }
  }
  Var h = ad::add(ad::gather_rows(tape.param(vision.symbol_embed), std::move(symbols)),
                  ad::gather_rows(tape.param(vision.cell_pos), std::move(positions)));
  for (const auto& block : vision.blocks) {
    const LayerBinding binding{&block, nullptr, nullptr};
    h = block_forward(tape, h, binding, segments, vision.heads, /*causal=*/false, nullptr);
  }
  return ad::rms_norm(h, tape.param(vision.final_norm));
}

Var projector_forward(Tape& tape, const Projector& p, Var features) {
  Var hidden = ad::gelu(ad::add_row_vector(ad::matmul_nt(features, tape.param(p.w1)),
                                           tape.param(p.b1)));
  return ad::add_row_vector(ad::matmul_nt(hidden, tape.param(p.w2)), tape.param(p.b2));
}

Var mllm_forward(Tape& tape, const LanguageModel& lm, std::span<const LayerBinding> layers,
                 const VisionEncoder& vision, const Projector& projector,
                 const TokenBatch& batch, std::span<const Grid> grids) {
  std::size_t image_rows = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const std::size_t prefix = batch.image_prefix(r);
    if (prefix == 0) continue;
    if (image_rows >= grids.size()) {
      throw std::invalid_argument("mllm_forward: more image rows than grids");
    }
    if (prefix != grids[image_rows].cells.size()) {
      throw std::invalid_argument("mllm_forward: row " + std::to_string(r) + " has " +
                                  std::to_string(prefix) + " image positions for a grid of " +
                                  std::to_string(grids[image_rows].cells.size()) + " cells");
    }
    ++image_rows;
  }
  if (image_rows != grids.size()) {
    throw std::invalid_argument("mllm_forward: " + std::to_string(grids.size()) +
                                " grids for " + std::to_string(image_rows) + " image rows");
  }
  std::optional<Var> injected;
  if (!grids.empty()) {
    injected = projector_forward(tape, projector, vision_forward(tape, vision, grids));
  }
  return lm_forward(tape, lm, layers, batch, injected);
}

Tensor forward_lm(const LanguageModel& lm, const TokenBatch& batch, const Tensor* injected) {
  const auto layers = base_bindings(lm);
  return forward_lm(lm, layers, batch, injected);
}

Tensor forward_lm(const LanguageModel& lm, std::span<const LayerBinding> layers,
                  const TokenBatch& batch, const Tensor* injected) {
  Tape tape;
  std::optional<Var> inj;
  if (injected) inj = tape.constant(*injected, "injected");
  return lm_forward(tape, lm, layers, batch, inj).value();
}

Tensor encode_and_project(const VisionEncoder& vision, const Projector& projector,
                          const Grid& grid) {
  Tape tape;
  const Grid grids[] = {grid};
  return projector_forward(tape, projector, vision_forward(tape, vision, grids)).value();
}

}  // namespace genieblue
