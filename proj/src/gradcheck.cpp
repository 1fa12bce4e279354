#include "hmnas/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hmnas/error.hpp"

namespace hmnas {
namespace {

double eval_at(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var xv = tape.leaf(x, false);
  const double v = f(tape, xv).value().item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: function returned a non-finite value");
  return v;
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw RangeError("finite_diff_check: step must be positive");
  Tape tape;
  Var xv = tape.leaf(x, true);
  Var loss = f(tape, xv);
  if (!std::isfinite(loss.value().item())) {
    throw NumericError("finite_diff_check: function returned a non-finite value");
  }
  const Tensor analytic = backward(tape, loss).of(xv);

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    probe[i] = x[i] + step;
    const double up = eval_at(f, probe);
    probe[i] = x[i] - step;
    const double down = eval_at(f, probe);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8));
  }
  return worst;
}

double relu_margin(const Tape& tape) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const auto& e = tape.entry(i);
    if (e.kind != "relu") continue;
    for (double v : tape.entry(e.inputs[0]).value.data()) m = std::min(m, std::abs(v));
  }
  return m;
}

double smallest_nonzero(std::span<const Tensor> grads) {
  double m = std::numeric_limits<double>::infinity();
  for (const Tensor& g : grads)
    for (double v : g.data())
      if (v != 0.0) m = std::min(m, std::abs(v));
  return m;
}

bool well_conditioned(const Tape& tape, std::span<const Tensor> grads, Conditioning c) {
  if (!c.allow_exact_zero) {
    for (const Tensor& g : grads)
      for (double v : g.data())
        if (v == 0.0) return false;
  }
  return relu_margin(tape) >= c.kink_margin && smallest_nonzero(grads) >= c.grad_floor;
}

}  // namespace hmnas
