#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "hmnas/tensor.hpp"

namespace hmnas {

class Tape;

/// A differentiable primitive. forward() may stash intermediates on the
/// object; backward() receives the same inputs plus the upstream gradient and
/// returns one gradient per input (an empty Tensor means "no gradient").
class Primitive {
 public:
  virtual ~Primitive() = default;
  virtual std::string_view kind() const = 0;
  virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;
  virtual std::vector<Tensor> backward(std::span<const Tensor* const> inputs, const Tensor& output,
                                       const Tensor& grad_output) const = 0;
};

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of primitive applications. Entries are appended in
/// evaluation order, so every input id precedes its consumer.
class Tape {
 public:
  struct Entry {
    std::string_view kind;  // "leaf" for leaves
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    std::shared_ptr<Primitive> primitive;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var apply(std::shared_ptr<Primitive> primitive, std::span<const Var> inputs);
  Var apply(std::shared_ptr<Primitive> primitive, std::initializer_list<Var> inputs) {
    return apply(std::move(primitive), std::span<const Var>(inputs.begin(), inputs.size()));
  }

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t id) const { return entries_.at(id); }

  // Re-runs every recorded primitive on the recorded input values and reports
  // whether each output is reproduced bit-exactly.
  bool replay_matches();

 private:
  std::vector<Entry> entries_;
};

/// Gradient map from tape ids to gradient arrays.
class Gradients {
 public:
  explicit Gradients(const Tape* tape) : tape_(tape) {}
  // Zero-filled when the variable did not reach the loss.
  Tensor of(const Var& v) const;
  bool has(const Var& v) const;
  const std::optional<Tensor>& slot(std::size_t id) const { return grads_.at(id); }

 private:
  friend Gradients backward(const Tape& tape, const Var& loss);
  const Tape* tape_;
  std::vector<std::optional<Tensor>> grads_;
};

/// Reverse-mode sweep from a scalar loss.
Gradients backward(const Tape& tape, const Var& loss);

}  // namespace hmnas
