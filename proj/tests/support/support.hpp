#pragma once

// Shared test fixtures: random inputs, a naive reference forward pass, and a
// directional finite-difference check. The reference forward is written with
// plain loops and shares no kernels with the library, so it can serve as an
// oracle for routing and numerics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "genieblue/adaptation.hpp"
#include "genieblue/autograd.hpp"
#include "genieblue/model.hpp"

namespace genieblue::testing {

using Rng = std::mt19937_64;

inline std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline void randomize(Tensor& t, Rng& rng, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : t.values()) v = d(rng);
}

inline Grid random_grid(const ModelConfig& c, Rng& rng) {
  Grid g;
  g.side = c.grid_side;
  g.cells.resize(c.grid_cells());
  for (auto& v : g.cells) v = static_cast<std::uint8_t>(uniform(rng, 0, c.image_alphabet - 1));
  return g;
}

struct MixedBatch {
  TokenBatch tokens;
  std::vector<Grid> grids;
};

/// Rows of random token ids; each row has an image prefix with probability
/// `image_odds`.
inline MixedBatch random_batch(const ModelConfig& c, Rng& rng, std::size_t rows,
                               double image_odds = 0.5) {
  MixedBatch b;
  std::bernoulli_distribution has_image(image_odds);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<std::uint32_t> ids;
    std::vector<Modality> mod;
    std::size_t prefix = 0;
    if (c.grid_cells() < c.max_seq && has_image(rng)) {
      prefix = c.grid_cells();
      b.grids.push_back(random_grid(c, rng));
    }
    const std::size_t len = prefix + uniform(rng, 1, c.max_seq - prefix);
    for (std::size_t i = 0; i < len; ++i) {
      ids.push_back(i < prefix ? 0u : static_cast<std::uint32_t>(uniform(rng, 0, c.vocab - 1)));
      mod.push_back(i < prefix ? Modality::kImage : Modality::kText);
    }
    b.tokens.ids.push_back(std::move(ids));
    b.tokens.modality.push_back(std::move(mod));
  }
  return b;
}

inline TokenBatch random_text_batch(const ModelConfig& c, Rng& rng, std::size_t rows) {
  return random_batch(c, rng, rows, 0.0).tokens;
}

/// Every adapter B and every visual expert gets random values so that the
/// added paths actually contribute.
inline void perturb_additions(HybridModel& m, Rng& rng, double stddev = 0.05) {
  for (auto& [layer, adapters] : m.adapters) {
    for (auto& a : adapters.adapters) {
      randomize(a.b, rng, stddev);
    }
  }
  for (auto& [layer, expert] : m.experts) {
    for (auto& t : expert.matrices) {
      for (auto& v : t.values()) v += std::normal_distribution<double>(0.0, stddev)(rng);
    }
  }
}

// ---------------------------------------------------------------------------
// Naive reference forward

namespace naive {

using Vec = std::vector<double>;

inline Vec matvec(const Tensor& w, const Vec& x) {
  Vec y(w.rows(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) s += w.at(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

inline Vec rms(const Vec& x, const Tensor& gain) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.size()) + 1e-6);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gain[i];
  return y;
}

inline double gelu(double x) {
  const double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

struct Layer {
  const BlockWeights* block;
  const BlockAdapters* adapters;
  const ExpertWeights* expert;
};

inline Vec project(const Layer& L, Projection p, const Vec& x, bool image) {
  if (L.expert && image) return matvec(L.expert->matrix(p), x);
  Vec y = matvec(L.block->matrix(p), x);
  if (L.adapters) {
    const LoraAdapter& a = L.adapters->at(p);
    const Vec down = matvec(a.a, x);
    const Vec up = matvec(a.b, down);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a.scale * up[i];
  }
  return y;
}

// One row through the language model; `inject` holds the image rows.
inline std::vector<Vec> row_forward(const LanguageModel& lm, const std::vector<Layer>& layers,
                                    const std::vector<std::uint32_t>& ids,
                                    const std::vector<Modality>& mod,
                                    const std::vector<Vec>& inject) {
  const std::size_t n = ids.size(), d = lm.width(), heads = lm.heads, dh = d / heads;
  std::vector<Vec> h(n, Vec(d));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      const double e = mod[t] == Modality::kImage ? inject[t][c] : lm.embed.at(ids[t], c);
      h[t][c] = e + lm.pos.at(t, c);
    }
  }
  for (const Layer& L : layers) {
    std::vector<Vec> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const bool img = mod[t] == Modality::kImage;
      const Vec a = rms(h[t], L.block->norm1);
      q[t] = project(L, Projection::kQuery, a, img);
      k[t] = project(L, Projection::kKey, a, img);
      v[t] = project(L, Projection::kValue, a, img);
    }
    for (std::size_t t = 0; t < n; ++t) {
      Vec att(d, 0.0);
      for (std::size_t hd = 0; hd < heads; ++hd) {
        std::vector<double> w(t + 1);
        double peak = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) dot += q[t][c] * k[s][c];
          w[s] = dot / std::sqrt(static_cast<double>(dh));
          peak = std::max(peak, w[s]);
        }
        double z = 0.0;
        for (auto& x : w) z += (x = std::exp(x - peak));
        for (std::size_t s = 0; s <= t; ++s) {
          for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) att[c] += w[s] / z * v[s][c];
        }
      }
      const bool img = mod[t] == Modality::kImage;
      const Vec o = project(L, Projection::kOutput, att, img);
      for (std::size_t c = 0; c < d; ++c) h[t][c] += o[c];
    }
    for (std::size_t t = 0; t < n; ++t) {
      const bool img = mod[t] == Modality::kImage;
      Vec up = project(L, Projection::kUp, rms(h[t], L.block->norm2), img);
      for (auto& x : up) x = gelu(x);
      const Vec down = project(L, Projection::kDown, up, img);
      for (std::size_t c = 0; c < d; ++c) h[t][c] += down[c];
    }
  }
  std::vector<Vec> logits(n);
  for (std::size_t t = 0; t < n; ++t) logits[t] = matvec(lm.head, rms(h[t], lm.final_norm));
  return logits;
}

/// Multimodal logits of a hybrid, one token at a time: each projection picks
/// the expert, the replicated block, or base-plus-adapter weights for that
/// token alone. Image embeddings come from the library encoder.
inline Tensor forward(const HybridModel& m, const TokenBatch& batch,
                      std::span<const Grid> grids) {
  std::vector<Layer> layers;
  for (std::size_t l = 0; l < m.base.lm.blocks.size(); ++l) {
    Layer L{&m.base.lm.blocks[l], nullptr, nullptr};
    if (auto it = m.replicated.find(l); it != m.replicated.end()) L.block = &it->second;
    if (auto it = m.adapters.find(l); it != m.adapters.end()) L.adapters = &it->second;
    if (auto it = m.experts.find(l); it != m.experts.end()) L.expert = &it->second;
    layers.push_back(L);
  }
  std::vector<std::vector<double>> rows;
  std::size_t grid = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    std::vector<Vec> inject(batch.ids[r].size());
    if (batch.image_prefix(r) > 0) {
      const Tensor e = encode_and_project(m.base.vision, m.base.projector, grids[grid++]);
      for (std::size_t t = 0; t < e.rows(); ++t) inject[t].assign(e.row(t), e.row(t) + e.cols());
    }
    for (auto& v : row_forward(m.base.lm, layers, batch.ids[r], batch.modality[r], inject)) {
      rows.push_back(std::move(v));
    }
  }
  Tensor out({rows.size(), m.base.lm.vocab()});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), out.row(i));
  return out;
}

}  // namespace naive

/// max |a - b| / max |b|.
inline double relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(a[i] - b[i]));
    scale = std::max(scale, std::fabs(b[i]));
  }
  return scale == 0.0 ? diff : diff / scale;
}

// ---------------------------------------------------------------------------
// Finite differences

struct DirectionalCheck {
  double analytic = 0.0;
  double numeric = 0.0;
  double relative() const {
    const double s = std::max({std::fabs(analytic), std::fabs(numeric), 1e-12});
    return std::fabs(analytic - numeric) / s;
  }
};

/// Compares <grad, v> with a central difference along a random direction v
/// over every tensor in `params`. `loss` records the scalar on the tape.
template <typename LossFn>
DirectionalCheck directional_check(const std::vector<Tensor*>& params, LossFn loss, Rng& rng,
                                   double h = 1e-6) {
  ParamSet trainable(params.begin(), params.end());
  Tape tape(&trainable);
  Var out = loss(tape);
  tape.backward(out);

  std::vector<Tensor> dirs;
  DirectionalCheck c;
  for (Tensor* p : params) {
    Tensor v(p->shape());
    randomize(v, rng, 1.0);
    if (auto g = tape.param_grad(*p)) {
      for (std::size_t i = 0; i < v.size(); ++i) c.analytic += (*g)[i] * v[i];
    }
    dirs.push_back(std::move(v));
  }
  auto shifted = [&](double step) {
    std::vector<Tensor> saved;
    for (std::size_t j = 0; j < params.size(); ++j) {
      saved.push_back(*params[j]);
      for (std::size_t i = 0; i < dirs[j].size(); ++i) (*params[j])[i] += step * dirs[j][i];
    }
    Tape t;
    const double value = loss(t).value()[0];
    for (std::size_t j = 0; j < params.size(); ++j) *params[j] = std::move(saved[j]);
    return value;
  };
  c.numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
  return c;
}

}  // namespace genieblue::testing
