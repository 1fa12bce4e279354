#pragma once

#include <functional>
#include <span>

#include "hmnas/autograd.hpp"

namespace hmnas {

// Builds a scalar loss on `tape` from the leaf `x`.
using ScalarFn = std::function<Var(Tape& tape, const Var& x)>;

/// Compares the reverse-mode gradient of f at x against central differences
/// and returns max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8).
/// Throws NumericError when f produces a non-finite value.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double step);

// Smallest |input| over every relu recorded on the tape (infinity if none).
double relu_margin(const Tape& tape);

// Smallest non-zero |g_i| over the given gradients (infinity if all zero).
double smallest_nonzero(std::span<const Tensor> grads);

/// A probe point is usable for central differences when no relu input sits
/// within `kink_margin` of zero and no gradient coordinate is non-zero but
/// below `grad_floor` (those are swamped by round-off under the fixed 1e-8
/// denominator).
struct Conditioning {
  double kink_margin = 1e-3;
  double grad_floor = 1e-5;
  // Exact zeros are fine when the loss truly ignores the coordinate. When a
  // later batch norm cancels it instead, differences only see round-off.
  bool allow_exact_zero = true;
};
bool well_conditioned(const Tape& tape, std::span<const Tensor> grads, Conditioning c = {});

}  // namespace hmnas
