#include "hmnas/autograd.hpp"

#include "hmnas/error.hpp"

namespace hmnas {

const Tensor& Var::value() const {
  if (!tape_) throw ProvenanceError("use of an unbound Var");
  return tape_->entry(id_).value;
}

bool Var::requires_grad() const { return tape_ && tape_->entry(id_).requires_grad; }

Var Tape::leaf(Tensor value, bool requires_grad) {
  entries_.push_back(Entry{"leaf", {}, std::move(value), requires_grad, nullptr});
  return Var(this, entries_.size() - 1);
}

Var Tape::apply(std::shared_ptr<Primitive> primitive, std::span<const Var> inputs) {
  Entry e;
  e.kind = primitive->kind();
  e.inputs.reserve(inputs.size());
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape() != this) throw ProvenanceError(std::string(e.kind) + ": input recorded on a different tape");
    e.inputs.push_back(v.id());
    values.push_back(&entries_[v.id()].value);
    e.requires_grad = e.requires_grad || entries_[v.id()].requires_grad;
  }
  e.value = primitive->forward(values);
  e.primitive = std::move(primitive);
  entries_.push_back(std::move(e));
  return Var(this, entries_.size() - 1);
}

bool Tape::replay_matches() {
  for (auto& e : entries_) {
    if (!e.primitive) continue;
    std::vector<const Tensor*> values;
    for (std::size_t id : e.inputs) values.push_back(&entries_[id].value);
    if (!e.primitive->forward(values).bit_equal(e.value)) return false;
  }
  return true;
}

Tensor Gradients::of(const Var& v) const {
  if (v.tape() != tape_) throw ProvenanceError("gradient requested for a Var from another tape");
  const auto& g = grads_.at(v.id());
  if (g) return *g;
  return Tensor(v.shape(), 0.0);
}

bool Gradients::has(const Var& v) const { return v.tape() == tape_ && grads_.at(v.id()).has_value(); }

Gradients backward(const Tape& tape, const Var& loss) {
  if (loss.tape() != &tape) throw ProvenanceError("loss was not recorded on this tape");
  if (loss.value().numel() != 1) throw RankError("backward expects a scalar loss, got " + shape_str(loss.shape()));

  Gradients out(&tape);
  out.grads_.assign(tape.size(), std::nullopt);
  out.grads_[loss.id()] = Tensor(loss.shape(), 1.0);

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const auto& e = tape.entry(i);
    if (!e.primitive || !e.requires_grad || !out.grads_[i]) continue;
    std::vector<const Tensor*> values;
    values.reserve(e.inputs.size());
    for (std::size_t id : e.inputs) values.push_back(&tape.entry(id).value);
    auto input_grads = e.primitive->backward(values, e.value, *out.grads_[i]);
    for (std::size_t k = 0; k < e.inputs.size(); ++k) {
      std::size_t id = e.inputs[k];
      if (!tape.entry(id).requires_grad || input_grads[k].empty()) continue;
      auto& slot = out.grads_[id];
      if (slot) {
        *slot += input_grads[k];
      } else {
        slot = std::move(input_grads[k]);
      }
    }
  }
  return out;
}

}  // namespace hmnas
