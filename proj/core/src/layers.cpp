#include "genieblue/layers.hpp"

#include <stdexcept>

namespace genieblue {

std::string_view projection_name(Projection p) {
  switch (p) {
    case Projection::kQuery: return "wq";
    case Projection::kKey: return "wk";
    case Projection::kValue: return "wv";
    case Projection::kOutput: return "wo";
    case Projection::kUp: return "w1";
    case Projection::kDown: return "w2";
  }
  throw std::logic_error("unknown projection");
}

Tensor& BlockWeights::matrix(Projection p) {
  return const_cast<Tensor&>(static_cast<const BlockWeights*>(this)->matrix(p));
}

const Tensor& BlockWeights::matrix(Projection p) const {
  switch (p) {
    case Projection::kQuery: return wq;
    case Projection::kKey: return wk;
    case Projection::kValue: return wv;
    case Projection::kOutput: return wo;
    case Projection::kUp: return w1;
    case Projection::kDown: return w2;
  }
  throw std::logic_error("unknown projection");
}

void BlockWeights::for_each(const std::function<void(std::string_view, Tensor&)>& fn) {
  fn("norm1", norm1);
  fn("wq", wq);
  fn("wk", wk);
  fn("wv", wv);
  fn("wo", wo);
  fn("norm2", norm2);
  fn("w1", w1);
  fn("w2", w2);
}

void BlockWeights::for_each(
    const std::function<void(std::string_view, const Tensor&)>& fn) const {
  const_cast<BlockWeights*>(this)->for_each(
      [&](std::string_view name, Tensor& t) { fn(name, t); });
}

Var linear(Tape& tape, Var x, const Tensor& weight, const LoraAdapter* adapter) {
  if (adapter == nullptr) return ad::matmul_nt(x, tape.param(weight));
  return ad::lora_linear(x, tape.param(weight), tape.param(adapter->a),
                         tape.param(adapter->b), adapter->scale);
}

namespace {

Var project(Tape& tape, Var x, Projection p, const LayerBinding& binding,
            const RowRouting* routing) {
  const LoraAdapter* adapter = binding.adapters ? &binding.adapters->at(p) : nullptr;
  const Tensor& base = binding.block->matrix(p);
  if (binding.expert == nullptr || routing == nullptr || routing->image_rows.empty()) {
    return linear(tape, x, base, adapter);
  }
  const Tensor& expert = binding.expert->matrix(p);
  if (routing->text_rows.empty()) return linear(tape, x, expert, nullptr);
  Var text_out = linear(tape, ad::take_rows(x, routing->text_rows), base, adapter);
  Var image_out = linear(tape, ad::take_rows(x, routing->image_rows), expert, nullptr);
  return ad::merge_rows(text_out, routing->text_rows, image_out, routing->image_rows);
}

}  // namespace

Var block_forward(Tape& tape, Var h, const LayerBinding& binding,
                  std::span<const Segment> segments, std::size_t heads, bool causal,
                  const RowRouting* routing) {
  if (binding.block == nullptr) throw std::invalid_argument("block_forward: unbound layer");
  const BlockWeights& w = *binding.block;

  Var a = ad::rms_norm(h, tape.param(w.norm1));
  Var q = project(tape, a, Projection::kQuery, binding, routing);
  Var k = project(tape, a, Projection::kKey, binding, routing);
  Var v = project(tape, a, Projection::kValue, binding, routing);
  Var att = ad::attention(q, k, v, segments, heads, causal);
  h = ad::add(h, project(tape, att, Projection::kOutput, binding, routing));

  Var b = ad::rms_norm(h, tape.param(w.norm2));
  Var up = ad::gelu(project(tape, b, Projection::kUp, binding, routing));
  return ad::add(h, project(tape, up, Projection::kDown, binding, routing));
}

}  // namespace genieblue
