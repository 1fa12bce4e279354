#include "hmnas/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "hmnas/error.hpp"
#include "hmnas/ops.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

const char* sigma_kind_name(SigmaSchedule::Kind k) {
  switch (k) {
    case SigmaSchedule::Kind::automatic: return "auto";
    case SigmaSchedule::Kind::linear: return "linear";
    case SigmaSchedule::Kind::delayed_linear: return "delayed_linear";
    case SigmaSchedule::Kind::constant: return "constant";
    case SigmaSchedule::Kind::off: return "off";
  }
  return "?";
}

SigmaSchedule::Kind parse_sigma_kind(const std::string& s) {
  for (auto k : {SigmaSchedule::Kind::automatic, SigmaSchedule::Kind::linear, SigmaSchedule::Kind::delayed_linear,
                 SigmaSchedule::Kind::constant, SigmaSchedule::Kind::off}) {
    if (s == sigma_kind_name(k)) return k;
  }
  throw ConfigError("unknown sigma schedule '" + s + "' (auto, linear, delayed_linear, constant, off)");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train.train_fraction must lie in (0, 1)");
  if (warmup_epochs < 0 || warmup_epochs > epochs) {
    throw ConfigError("train.warmup_epochs must lie in [0, train.epochs]");
  }
  if (!(w_lr_init > 0.0) || w_lr_min < 0.0 || w_lr_min > w_lr_init) {
    throw ConfigError("trainer learning rates need 0 <= w_lr_min <= w_lr_init, w_lr_init > 0");
  }
  if (arch_lr < 0.0) throw ConfigError("train.arch_lr must be non-negative");
  if (w_momentum < 0.0 || w_momentum >= 1.0) throw ConfigError("train.w_momentum must lie in [0, 1)");
  if (w_weight_decay < 0.0 || arch_weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be positive");
  if (sigma.horizon < 0.0 || sigma.delay < 0.0) throw ConfigError("sigma horizon and delay must be non-negative");
}

DataSplit split_dataset(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(idx.begin(), idx.end());
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train >= n) {
    throw ConfigError("split of " + std::to_string(n) + " samples at fraction " + std::to_string(fraction) +
                      " leaves a side empty");
  }
  DataSplit s{{idx.begin(), idx.begin() + static_cast<long>(n_train)}, {idx.begin() + static_cast<long>(n_train), idx.end()}};
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

double cosine_lr(long iter, long total_iters, double lr_max, double lr_min) {
  if (total_iters <= 0) throw ConfigError("cosine schedule needs a positive iteration count");
  if (iter < 0 || iter > total_iters) throw RangeError("cosine schedule iteration out of range");
  const double t = static_cast<double>(iter) / static_cast<double>(total_iters);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

double linear_from(double iter, double start, double horizon) {
  if (iter < start) return 1.0;
  if (horizon <= 0.0) return iter == start && start == 0.0 ? 1.0 : 0.0;
  return std::max(0.0, 1.0 - (iter - start) / horizon);
}

}  // namespace

double trigger_probability(long iter, const SigmaSchedule& s, long total) {
  if (iter < 0) throw RangeError("trigger iteration must be non-negative");
  const double it = static_cast<double>(iter);
  switch (s.kind) {
    case SigmaSchedule::Kind::off: return 0.0;
    case SigmaSchedule::Kind::constant: return 1.0;
    case SigmaSchedule::Kind::linear: return linear_from(it, 0.0, s.horizon);
    case SigmaSchedule::Kind::delayed_linear: return linear_from(it, s.delay, s.horizon);
    case SigmaSchedule::Kind::automatic: {
      if (total <= 0) return 1.0;
      const double delay = std::floor(2.0 * static_cast<double>(total) / 3.0);
      return linear_from(it, delay, static_cast<double>(total) - delay);
    }
  }
  return 0.0;
}

namespace {

void check_grad(const ParamRef& p) {
  if (!p.grad || !p.value || p.grad->shape() != p.value->shape()) {
    throw ShapeError("optimizer: gradient for " + p.name + " does not match the parameter shape");
  }
  for (double g : p.grad->data()) {
    if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + p.name);
  }
}

template <typename State>
void ensure_buffers(std::vector<Tensor>& buf, std::span<const ParamRef> params) {
  if (buf.size() == params.size()) return;
  if (!buf.empty()) throw ShapeError("optimizer state does not match the parameter list");
  for (const auto& p : params) buf.emplace_back(p.value->shape(), 0.0);
}

}  // namespace

void sgd_step(std::span<const ParamRef> params, SgdState& state, double lr, double momentum, double weight_decay) {
  for (const auto& p : params) check_grad(p);
  ensure_buffers<SgdState>(state.velocity, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].value;
    const Tensor& g = *params[i].grad;
    Tensor& v = state.velocity[i];
    if (!v.same_shape(w)) throw ShapeError("optimizer buffer for " + params[i].name + " has the wrong shape");
    const Tensor* fz = params[i].frozen;
    for (std::size_t j = 0; j < w.numel(); ++j) {
      if (fz && (*fz)[j] == 0.0) continue;
      v[j] = momentum * v[j] + g[j] + weight_decay * w[j];
      w[j] -= lr * v[j];
    }
  }
}

void adam_step(std::span<const ParamRef> params, AdamState& state, double lr, double weight_decay, double beta1,
               double beta2, double eps) {
  for (const auto& p : params) check_grad(p);
  ensure_buffers<AdamState>(state.m, params);
  ensure_buffers<AdamState>(state.v, params);
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].value;
    const Tensor& g = *params[i].grad;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor* fz = params[i].frozen;
    for (std::size_t j = 0; j < w.numel(); ++j) {
      if (fz && (*fz)[j] == 0.0) continue;
      const double gj = g[j] + weight_decay * w[j];
      m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
      v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

double clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> indices, int batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    const std::size_t end = std::min(indices.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(indices.begin() + static_cast<long>(i), indices.begin() + static_cast<long>(end));
  }
  return out;
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const int k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    correct += best == labels[r];
  }
  return correct;
}

EvalResult evaluate(const Supernet& net, const BinaryMasks* masks, const Dataset& data,
                    std::span<const std::size_t> indices, int batch_size, SplitTag split) {
  EvalResult r;
  if (indices.empty()) return r;
  double loss = 0.0;
  std::size_t correct = 0;
  for (const auto& idx : make_batches(indices, batch_size)) {
    const Batch b = data.gather(idx, split);
    Tape tape;
    Binding bd = bind(tape, net, masks);
    Var logits = supernet_forward(net, bd, tape.leaf(b.x), false);
    loss += ops::cross_entropy(logits, b.labels).value().item() * static_cast<double>(idx.size());
    correct += count_correct(logits.value(), b.labels);
  }
  r.loss = loss / static_cast<double>(indices.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return r;
}

namespace {

struct StepResult {
  double loss;
  std::size_t correct;
};

StepResult w_step(Supernet& net, const Batch& b, const TrainConfig& cfg, TrainState& st, double lr, int epoch) {
  if (b.split != SplitTag::train) {
    throw ProvenanceError(std::string("weight step fed a ") + split_name(b.split) + " batch");
  }
  Tape tape;
  Binding bd = bind(tape, net, nullptr, {.grad_w = true});
  Var logits = supernet_forward(net, bd, tape.leaf(b.x), true, &net.bn);
  Var loss = ops::cross_entropy(logits, b.labels);
  const double lv = loss.value().item();
  if (!std::isfinite(lv)) {
    throw NumericError("training loss diverged in epoch " + std::to_string(epoch + 1) +
                       "; last good state is the end of epoch " + std::to_string(epoch));
  }
  const Gradients g = backward(tape, loss);
  std::vector<Tensor> grads;
  grads.reserve(net.params.size());
  for (const Var& p : bd.params) grads.push_back(g.of(p));
  clip_grad_norm(grads, cfg.grad_clip);
  std::vector<ParamRef> refs;
  refs.reserve(net.params.size());
  for (std::size_t i = 0; i < net.params.size(); ++i) refs.push_back({net.params[i].name, &net.params[i].value, &grads[i]});
  sgd_step(refs, st.w_opt, lr, cfg.w_momentum, cfg.w_weight_decay);
  return {lv, count_correct(logits.value(), b.labels)};
}

void arch_step(Supernet& net, const Batch& b, const TrainConfig& cfg, TrainState& st) {
  if (b.split != SplitTag::val) {
    throw ProvenanceError(std::string("architecture step fed a ") + split_name(b.split) + " batch");
  }
  Tape tape;
  Binding bd = bind(tape, net, nullptr, {.grad_arch = true});
  Var loss = ops::cross_entropy(supernet_forward(net, bd, tape.leaf(b.x), true), b.labels);
  if (!std::isfinite(loss.value().item())) throw NumericError("validation loss diverged during an architecture step");
  const Gradients g = backward(tape, loss);
  std::vector<Tensor> grads;
  std::vector<ParamRef> refs;
  const auto kinds = net.used_kinds();
  grads.reserve(2 * kinds.size());
  for (int k : kinds) {
    grads.push_back(g.of(bd.alpha[k]));
    grads.push_back(g.of(bd.beta[k]));
  }
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const int k = kinds[i];
    refs.push_back({std::string("alpha.") + cell_kind_name(CellKind(k)), &net.arch.alpha[k], &grads[2 * i]});
    refs.push_back({std::string("beta.") + cell_kind_name(CellKind(k)), &net.arch.beta[k], &grads[2 * i + 1]});
  }
  adam_step(refs, st.arch_opt, cfg.arch_lr, cfg.arch_weight_decay);
}

}  // namespace

void train_supernet(Supernet& net, const Dataset& data, const TrainConfig& cfg, TrainState& state,
                    const TrainHooks& hooks) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("training dataset is empty");
  const DataSplit split = split_dataset(data.size(), cfg.train_fraction, cfg.seed);
  Rng rng(derive_seed(cfg.seed, "trainer"));
  if (!state.rng_state.empty()) rng.set_state(state.rng_state);

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long n_train_batches = static_cast<long>((split.train.size() + bs - 1) / bs);
  const long n_val_batches = static_cast<long>((split.val.size() + bs - 1) / bs);
  const long total_opportunities = static_cast<long>(cfg.epochs - cfg.warmup_epochs) * n_val_batches;

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    if (hooks.stop_after_epoch >= 0 && epoch >= hooks.stop_after_epoch) break;
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.w_lr_init, cfg.w_lr_min);
    std::vector<std::size_t> train_order = split.train, val_order = split.val;
    rng.shuffle(train_order.begin(), train_order.end());
    rng.shuffle(val_order.begin(), val_order.end());
    const auto tb = make_batches(train_order, cfg.batch_size);
    const auto vb = make_batches(val_order, cfg.batch_size);
    const bool arch_on = epoch >= cfg.warmup_epochs;

    double loss_sum = 0.0;
    std::size_t correct = 0;
    long next_val = 0;
    for (long t = 0; t < n_train_batches; ++t) {
      while (arch_on && next_val < n_val_batches && next_val * n_train_batches / n_val_batches <= t) {
        const double p = trigger_probability(state.arch_iter, cfg.sigma, total_opportunities);
        const double u = rng.uniform();
        ++state.arch_iter;
        if (u < p) {
          const Batch b = data.gather(vb[next_val], SplitTag::val);
          if (hooks.provenance) hooks.provenance->push_back({epoch, 'a', b.split, b.indices});
          arch_step(net, b, cfg, state);
          ++state.arch_steps;
        }
        ++next_val;
      }
      const Batch b = data.gather(tb[t], SplitTag::train);
      if (hooks.provenance) hooks.provenance->push_back({epoch, 'w', b.split, b.indices});
      const StepResult r = w_step(net, b, cfg, state, lr, epoch);
      loss_sum += r.loss * static_cast<double>(b.labels.size());
      correct += r.correct;
    }

    const std::size_t params = count_params(net);
    const double n_tr = static_cast<double>(split.train.size());
    state.metrics.push_back({"supernet", epoch + 1, "train", loss_sum / n_tr, static_cast<double>(correct) / n_tr, lr, params});
    const EvalResult v = evaluate(net, nullptr, data, split.val, cfg.batch_size, SplitTag::val);
    state.metrics.push_back({"supernet", epoch + 1, "val", v.loss, v.accuracy, lr, params});
    state.epoch = epoch + 1;
    state.rng_state = rng.state();
    if (hooks.on_epoch) hooks.on_epoch(net, state);
  }
}

}  // namespace hmnas
