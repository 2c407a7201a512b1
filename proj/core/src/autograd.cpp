#include "genieblue/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace genieblue {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value, const char* op) {
  Node node;
  node.owned = std::move(value);
  node.op = op;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::param(const Tensor& parameter) {
  if (auto it = param_nodes_.find(&parameter); it != param_nodes_.end()) {
    return {this, it->second};
  }
  Node node;
  node.ref = &parameter;
  node.requires_grad = trainable_ != nullptr && trainable_->contains(&parameter);
  node.op = "param";
  nodes_.push_back(std::move(node));
  const std::size_t id = nodes_.size() - 1;
  param_nodes_.emplace(&parameter, id);
  return {this, id};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn,
                 const char* op) {
  Node node;
  node.owned = std::move(value);
  node.op = op;
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Var& v) { return v.requires_grad(); });
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.ref ? *n.ref : n.owned;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(value(id).shape());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  kernels::require_same_shape(n.grad, g, "accumulate");
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::backward(Var loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     to_string(loss.value().shape()));
  }
  if (!requires_grad(loss.id())) return;
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
  }
  // A non-finite intermediate can still leave finite leaf gradients, so
  // every differentiable value is checked; only then walk the tape to name
  // the first node (in backward order) that went bad.
  bool finite = true;
  for (std::size_t id = 0; id <= loss.id() && finite; ++id) {
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    if (!value(id).all_finite() || (!n.grad.empty() && !n.grad.all_finite())) finite = false;
  }
  if (finite) return;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    if (!value(id).all_finite() || (!n.grad.empty() && !n.grad.all_finite())) {
      throw NonFiniteError("backward: non-finite value at node #" +
                           std::to_string(id) + " (" + n.op + ")");
    }
  }
}

std::optional<Tensor> Tape::param_grad(const Tensor& parameter) const {
  auto it = param_nodes_.find(&parameter);
  if (it == param_nodes_.end()) return std::nullopt;
  const Node& n = nodes_[it->second];
  if (!n.requires_grad || n.grad.empty()) return std::nullopt;
  return n.grad;
}

namespace ad {
namespace {

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("vars recorded on different tapes");
}

}  // namespace

Var matmul_nt(Var x, Var w) {
  require_same_tape(x, w);
  Tensor out = kernels::matmul_nt(x.value(), w.value());
  const std::size_t xi = x.id(), wi = w.id();
  return x.tape().record(
      std::move(out), {x, w},
      [xi, wi](Tape& t, std::size_t self) {
        const Tensor& dy = t.grad(self);
        if (t.requires_grad(xi)) {
          t.accumulate(xi, kernels::matmul(dy, t.value(wi)));
        }
        if (t.requires_grad(wi)) {
          t.accumulate(wi, kernels::matmul_tn(dy, t.value(xi)));
        }
      },
      "matmul_nt");
}

Var lora_linear(Var x, Var w, Var a, Var b, double s) {
  require_same_tape(x, w);
  require_same_tape(x, a);
  require_same_tape(x, b);
  const Tensor& xv = x.value();
  Tensor out = kernels::matmul_nt(xv, w.value());
  auto down = std::make_shared<Tensor>(kernels::matmul_nt(xv, a.value()));
  const Tensor up = kernels::matmul_nt(*down, b.value());
  if (up.shape() != out.shape()) {
    throw ShapeError("lora_linear: update " + to_string(up.shape()) + " does not match " +
                     to_string(out.shape()));
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * up[i];
  const std::size_t xi = x.id(), wi = w.id(), ai = a.id(), bi = b.id();
  return x.tape().record(
      std::move(out), {x, w, a, b},
      [xi, wi, ai, bi, s, down](Tape& t, std::size_t self) {
        const Tensor& dy = t.grad(self);
        const bool need_x = t.requires_grad(xi);
        const bool need_a = t.requires_grad(ai);
        Tensor dyb;  // dY B, shared by dX and dA
        if (need_x || need_a) dyb = kernels::matmul(dy, t.value(bi));
        if (need_x) {
          Tensor dx = kernels::matmul(dy, t.value(wi));
          const Tensor low = kernels::matmul(dyb, t.value(ai));
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * low[i];
          t.accumulate(xi, dx);
        }
        if (t.requires_grad(wi)) t.accumulate(wi, kernels::matmul_tn(dy, t.value(xi)));
        if (need_a) {
          t.accumulate(ai, kernels::scale(kernels::matmul_tn(dyb, t.value(xi)), s));
        }
        if (t.requires_grad(bi)) {
          t.accumulate(bi, kernels::scale(kernels::matmul_tn(dy, *down), s));
        }
      },
      "lora_linear");
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  Tensor out = kernels::add(a.value(), b.value());
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ai, bi](Tape& t, std::size_t self) {
        t.accumulate(ai, t.grad(self));
        t.accumulate(bi, t.grad(self));
      },
      "add");
}

Var add_row_vector(Var a, Var bias) {
  require_same_tape(a, bias);
  Tensor out = kernels::add_row_vector(a.value(), bias.value());
  const std::size_t ai = a.id(), bi = bias.id();
  return a.tape().record(
      std::move(out), {a, bias},
      [ai, bi](Tape& t, std::size_t self) {
        const Tensor& dy = t.grad(self);
        t.accumulate(ai, dy);
        if (t.requires_grad(bi)) {
          Tensor& db = t.grad_buffer(bi);
          for (std::size_t r = 0; r < dy.rows(); ++r) {
            const double* row = dy.row(r);
            for (std::size_t c = 0; c < dy.cols(); ++c) db[c] += row[c];
          }
        }
      },
      "add_row_vector");
}

Var scale(Var a, double s) {
  Tensor out = kernels::scale(a.value(), s);
  const std::size_t ai = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ai, s](Tape& t, std::size_t self) {
        t.accumulate(ai, kernels::scale(t.grad(self), s));
      },
      "scale");
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  const std::size_t ai = a.id();
  return a.tape().record(
      Tensor({1}, total), {a},
      [ai](Tape& t, std::size_t self) {
        t.accumulate(ai, Tensor(t.value(ai).shape(), t.grad(self)[0]));
      },
      "sum");
}

Var gelu(Var a) {
  auto gate = std::make_shared<Tensor>();
  Tensor out = kernels::gelu(a.value(), gate.get());
  const std::size_t ai = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ai, gate](Tape& t, std::size_t self) {
        constexpr double kC = 0.7978845608028654, kA = 0.044715;
        const double* x = t.value(ai).data();
        const double* s = gate->data();
        Tensor dx = t.grad(self);
        double* d = dx.data();
        for (std::size_t i = 0; i < dx.size(); ++i) {
          const double du = kC * (1.0 + 3.0 * kA * x[i] * x[i]);
          d[i] *= s[i] + x[i] * s[i] * (1.0 - s[i]) * 2.0 * du;
        }
        t.accumulate(ai, dx);
      },
      "gelu");
}

Var rms_norm(Var x, Var gain) {
  require_same_tape(x, gain);
  Tensor out = kernels::rms_normalize(x.value(), gain.value());
  const std::size_t xi = x.id(), gi = gain.id();
  return x.tape().record(
      std::move(out), {x, gain},
      [xi, gi](Tape& t, std::size_t self) {
        const Tensor& xv = t.value(xi);
        const Tensor& g = t.value(gi);
        const Tensor& dy = t.grad(self);
        const std::size_t n = xv.cols();
        const double inv_n = 1.0 / static_cast<double>(n);
        Tensor dx(xv.shape());
        Tensor dg(g.shape());
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const double* xr = xv.row(r);
          const double* dyr = dy.row(r);
          double ms = 0.0;
          for (std::size_t c = 0; c < n; ++c) ms += xr[c] * xr[c];
          const double inv = 1.0 / std::sqrt(ms * inv_n + kernels::kRmsEpsilon);
          // y = x * inv * g; dinv/dx_c = -inv^3 * x_c / n
          double proj = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            proj += dyr[c] * g[c] * xr[c];
            dg[c] += dyr[c] * xr[c] * inv;
          }
          const double k = proj * inv * inv * inv * inv_n;
          double* dxr = dx.row(r);
          for (std::size_t c = 0; c < n; ++c) dxr[c] = dyr[c] * g[c] * inv - xr[c] * k;
        }
        t.accumulate(xi, dx);
        t.accumulate(gi, dg);
      },
      "rms_norm");
}

namespace {

// Copies columns [col, col + dh) of rows [offset, offset + len) into a
// contiguous [len x dh] buffer, optionally transposed to [dh x len].
void copy_head(const Tensor& src, std::size_t offset, std::size_t len, std::size_t col,
               std::size_t dh, bool transposed, std::vector<double>& dst) {
  dst.resize(len * dh);
  for (std::size_t i = 0; i < len; ++i) {
    const double* row = src.row(offset + i) + col;
    if (transposed) {
      for (std::size_t c = 0; c < dh; ++c) dst[c * len + i] = row[c];
    } else {
      std::copy(row, row + dh, dst.data() + i * dh);
    }
  }
}

void add_head(Tensor& dst, std::size_t offset, std::size_t len, std::size_t col,
              std::size_t dh, const std::vector<double>& src) {
  for (std::size_t i = 0; i < len; ++i) {
    double* row = dst.row(offset + i) + col;
    const double* s = src.data() + i * dh;
    for (std::size_t c = 0; c < dh; ++c) row[c] += s[c];
  }
}

void transpose_square(const std::vector<double>& src, std::size_t n, std::vector<double>& dst) {
  dst.resize(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) dst[j * n + i] = src[i * n + j];
  }
}

}  // namespace

// Per segment and head: P = softmax(scale * Q K^T) with future columns held
// at exactly zero when causal, then O = P V. Masked entries contribute exact
// zeros to every product, so a row never depends on later positions.
Var attention(Var q, Var k, Var v, std::span<const Segment> segments,
              std::size_t heads, bool causal) {
  const Tensor& qv = q.value();
  kernels::require_same_shape(qv, k.value(), "attention");
  kernels::require_same_shape(qv, v.value(), "attention");
  const std::size_t width = qv.cols();
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  std::size_t covered = 0;
  for (const auto& s : segments) {
    if (s.offset != covered) throw ShapeError("attention: segments must tile the rows in order");
    covered += s.length;
  }
  if (covered != qv.rows()) {
    throw ShapeError("attention: segments cover " + std::to_string(covered) +
                     " rows, input has " + std::to_string(qv.rows()));
  }

  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<std::vector<double>>>();
  probs->reserve(segments.size() * heads);
  Tensor out(qv.shape());
  std::vector<double> qh, kt, vh, oh;
  for (const auto& seg : segments) {
    const std::size_t n = seg.length;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col = h * dh;
      copy_head(qv, seg.offset, n, col, dh, false, qh);
      copy_head(k.value(), seg.offset, n, col, dh, true, kt);
      copy_head(v.value(), seg.offset, n, col, dh, false, vh);
      std::vector<double> p(n * n);
      kernels::gemm_nn(qh.data(), kt.data(), p.data(), n, n, dh);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t span = causal ? i + 1 : n;
        double* row = p.data() + i * n;
        for (std::size_t j = 0; j < span; ++j) row[j] *= scale;
        for (std::size_t j = span; j < n; ++j) row[j] = 0.0;
        kernels::softmax_inplace(row, span);
      }
      oh.resize(n * dh);
      kernels::gemm_nn(p.data(), vh.data(), oh.data(), n, dh, n);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy(oh.data() + i * dh, oh.data() + (i + 1) * dh, out.row(seg.offset + i) + col);
      }
      probs->push_back(std::move(p));
    }
  }

  const std::vector<Segment> segs(segments.begin(), segments.end());
  const std::size_t qi = q.id(), ki = k.id(), vi = v.id();
  return q.tape().record(
      std::move(out), {q, k, v},
      [qi, ki, vi, segs, heads, dh, scale, probs](Tape& t, std::size_t self) {
        const Tensor& dout = t.grad(self);
        const Tensor& qv = t.value(qi);
        Tensor dq(qv.shape()), dk(qv.shape()), dv(qv.shape());
        std::size_t slot = 0;
        std::vector<double> go, vt, qh, kh, pt, dp, dst, buf;
        for (const auto& seg : segs) {
          const std::size_t n = seg.length;
          for (std::size_t h = 0; h < heads; ++h, ++slot) {
            const std::vector<double>& p = (*probs)[slot];
            const std::size_t col = h * dh;
            copy_head(dout, seg.offset, n, col, dh, false, go);
            // dV = P^T dO
            transpose_square(p, n, pt);
            buf.resize(n * dh);
            kernels::gemm_nn(pt.data(), go.data(), buf.data(), n, dh, n);
            add_head(dv, seg.offset, n, col, dh, buf);
            // dP = dO V^T, then the softmax Jacobian row by row. Entries
            // outside the causal span have p == 0 and stay exactly zero.
            copy_head(t.value(vi), seg.offset, n, col, dh, true, vt);
            dp.resize(n * n);
            kernels::gemm_nn(go.data(), vt.data(), dp.data(), n, n, dh);
            for (std::size_t i = 0; i < n; ++i) {
              const double* pr = p.data() + i * n;
              double* dr = dp.data() + i * n;
              double rowdot = 0.0;
              for (std::size_t j = 0; j < n; ++j) rowdot += dr[j] * pr[j];
              for (std::size_t j = 0; j < n; ++j) dr[j] = pr[j] * (dr[j] - rowdot) * scale;
            }
            // dQ = dS K, dK = dS^T Q
            copy_head(t.value(ki), seg.offset, n, col, dh, false, kh);
            kernels::gemm_nn(dp.data(), kh.data(), buf.data(), n, dh, n);
            add_head(dq, seg.offset, n, col, dh, buf);
            transpose_square(dp, n, dst);
            copy_head(qv, seg.offset, n, col, dh, false, qh);
            kernels::gemm_nn(dst.data(), qh.data(), buf.data(), n, dh, n);
            add_head(dk, seg.offset, n, col, dh, buf);
          }
        }
        t.accumulate(qi, dq);
        t.accumulate(ki, dk);
        t.accumulate(vi, dv);
      },
      "attention");
}

Var gather_rows(Var table, std::vector<std::size_t> indices) {
  const Tensor& tv = table.value();
  const std::size_t width = tv.cols();
  Tensor out({indices.size(), width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) +
                       " out of range for " + to_string(tv.shape()));
    }
    std::copy(tv.row(indices[i]), tv.row(indices[i]) + width, out.row(i));
  }
  const std::size_t ti = table.id();
  return table.tape().record(
      std::move(out), {table},
      [ti, indices = std::move(indices)](Tape& t, std::size_t self) {
        const Tensor& dy = t.grad(self);
        Tensor& dt = t.grad_buffer(ti);
        const std::size_t w = dy.cols();
        for (std::size_t i = 0; i < indices.size(); ++i) {
          double* dst = dt.row(indices[i]);
          const double* src = dy.row(i);
          for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
        }
      },
      "gather_rows");
}

Var embed_with_injection(Var table, std::vector<std::size_t> ids,
                         std::vector<bool> inject, std::optional<Var> injected) {
  if (ids.size() != inject.size()) {
    throw ShapeError("embed_with_injection: ids and inject mask differ in length");
  }
  const std::size_t n_inject =
      static_cast<std::size_t>(std::count(inject.begin(), inject.end(), true));
  if (n_inject > 0 && !injected) {
    throw std::invalid_argument(
        "embed_with_injection: image positions present but no injected embeddings");
  }
  const Tensor& tv = table.value();
  const std::size_t width = tv.cols();
  if (injected) {
    const Tensor& iv = injected->value();
    if (iv.rows() != n_inject || (n_inject > 0 && iv.cols() != width)) {
      throw ShapeError("embed_with_injection: injected " + to_string(iv.shape()) +
                       " does not match " + std::to_string(n_inject) +
                       " image positions of width " + std::to_string(width));
    }
  }
  Tensor out({ids.size(), width});
  std::size_t next = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src;
    if (inject[i]) {
      src = injected->value().row(next++);
    } else {
      if (ids[i] >= tv.rows()) {
        throw ShapeError("embed_with_injection: token id " + std::to_string(ids[i]) +
                         " out of range for vocabulary " + std::to_string(tv.rows()));
      }
      src = tv.row(ids[i]);
    }
    std::copy(src, src + width, out.row(i));
  }
  const std::size_t ti = table.id();
  const std::optional<std::size_t> ii =
      injected && n_inject > 0 ? std::optional<std::size_t>(injected->id()) : std::nullopt;
  Tape& tape = table.tape();
  auto fn = [ti, ii, ids = std::move(ids), inject = std::move(inject)](Tape& t,
                                                                     std::size_t self) {
    const Tensor& dy = t.grad(self);
    const std::size_t w = dy.cols();
    const bool want_table = t.requires_grad(ti);
    const bool want_inj = ii && t.requires_grad(*ii);
    std::size_t next = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double* src = dy.row(i);
      if (inject[i]) {
        if (want_inj) {
          double* dst = t.grad_buffer(*ii).row(next);
          for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
        }
        ++next;
      } else if (want_table) {
        double* dst = t.grad_buffer(ti).row(ids[i]);
        for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
      }
    }
  };
  if (ii) return tape.record(std::move(out), {table, *injected}, std::move(fn), "embed");
  return tape.record(std::move(out), {table}, std::move(fn), "embed");
}

Var take_rows(Var x, std::vector<std::size_t> rows) {
  const Tensor& xv = x.value();
  const std::size_t width = xv.cols();
  Tensor out({rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(xv.row(rows[i]), xv.row(rows[i]) + width, out.row(i));
  }
  const std::size_t xi = x.id();
  return x.tape().record(
      std::move(out), {x},
      [xi, rows = std::move(rows)](Tape& t, std::size_t self) {
        const Tensor& dy = t.grad(self);
        Tensor& dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          double* dst = dx.row(rows[i]);
          const double* src = dy.row(i);
          for (std::size_t c = 0; c < dy.cols(); ++c) dst[c] += src[c];
        }
      },
      "take_rows");
}

Var merge_rows(Var a, std::vector<std::size_t> a_rows, Var b,
               std::vector<std::size_t> b_rows) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != a_rows.size() || bv.rows() != b_rows.size()) {
    throw ShapeError("merge_rows: row index lists do not match operand heights");
  }
  const std::size_t width = !a_rows.empty() ? av.cols() : bv.cols();
  if (!a_rows.empty() && !b_rows.empty() && av.cols() != bv.cols()) {
    throw ShapeError("merge_rows: widths differ, " + to_string(av.shape()) + " vs " +
                     to_string(bv.shape()));
  }
  const std::size_t total = a_rows.size() + b_rows.size();
  Tensor out({total, width});
  std::vector<bool> seen(total, false);
  auto place = [&](const Tensor& src, const std::vector<std::size_t>& idx) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= total || seen[idx[i]]) {
        throw ShapeError("merge_rows: row indices must partition the output");
      }
      seen[idx[i]] = true;
      std::copy(src.row(i), src.row(i) + width, out.row(idx[i]));
    }
  };
  place(av, a_rows);
  place(bv, b_rows);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ai, bi, a_rows = std::move(a_rows), b_rows = std::move(b_rows)](Tape& t,
                                                                      std::size_t self) {
        const Tensor& dy = t.grad(self);
        auto scatter = [&](std::size_t id, const std::vector<std::size_t>& idx) {
          if (!t.requires_grad(id) || idx.empty()) return;
          Tensor& d = t.grad_buffer(id);
          for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* src = dy.row(idx[i]);
            double* dst = d.row(i);
            for (std::size_t c = 0; c < dy.cols(); ++c) dst[c] += src[c];
          }
        };
        scatter(ai, a_rows);
        scatter(bi, b_rows);
      },
      "merge_rows");
}

Var weighted_nll(Var logits, std::vector<std::size_t> targets,
                 std::vector<double> weights) {
  const Tensor& lv = logits.value();
  if (targets.size() != lv.rows() || weights.size() != lv.rows()) {
    throw ShapeError("weighted_nll: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(lv.rows()) + " logit rows");
  }
  const std::size_t vocab = lv.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (weights[r] == 0.0) continue;
    if (targets[r] >= vocab) {
      throw std::out_of_range("weighted_nll: target " + std::to_string(targets[r]) +
                              " outside vocabulary " + std::to_string(vocab));
    }
    const double* row = lv.row(r);
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(row[c] - mx);
    total += weights[r] * (std::log(z) + mx - row[targets[r]]);
  }
  const std::size_t li = logits.id();
  return logits.tape().record(
      Tensor({1}, total), {logits},
      [li, targets = std::move(targets), weights = std::move(weights)](Tape& t,
                                                                       std::size_t self) {
        const double g = t.grad(self)[0];
        const Tensor& lv = t.value(li);
        const std::size_t vocab = lv.cols();
        Tensor& dl = t.grad_buffer(li);
        for (std::size_t r = 0; r < lv.rows(); ++r) {
          if (weights[r] == 0.0) continue;
          const double* row = lv.row(r);
          double* drow = dl.row(r);
          const double mx = *std::max_element(row, row + vocab);
          double z = 0.0;
          for (std::size_t c = 0; c < vocab; ++c) z += std::exp(row[c] - mx);
          const double w = g * weights[r];
          for (std::size_t c = 0; c < vocab; ++c) {
            drow[c] += w * std::exp(row[c] - mx) / z;
          }
          drow[targets[r]] -= w;
        }
      },
      "weighted_nll");
}

}  // namespace ad
}  // namespace genieblue
