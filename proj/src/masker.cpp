#include "hmnas/masker.hpp"

#include <algorithm>
#include <cmath>

#include "hmnas/error.hpp"
#include "hmnas/ops.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

void MaskTrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("masker.epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("masker.batch_size must be positive");
  // zero is allowed: it turns mask training into a no-op
  if (!(lr_w_mask >= 0.0)) throw ConfigError("masker.lr_w_mask must be non-negative");
  if (!(lr_arch_mask >= 0.0)) throw ConfigError("masker.lr_arch_mask must be non-negative");
  if (!(lr_decay_factor > 0.0)) throw ConfigError("masker.lr_decay_factor must be positive");
  if (lr_decay_after < 0) throw ConfigError("masker.lr_decay_after must be non-negative");
  if (!std::isfinite(mask_init)) throw ConfigError("masker.mask_init must be finite");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("masker.tau must lie in [0, 1]");
  if (!(clamp_lo < clamp_hi)) throw ConfigError("masker.clamp_lo must be below masker.clamp_hi");
}

Tensor binarize(const Tensor& m, double tau) {
  Tensor out(m.shape(), 0.0);
  for (std::size_t i = 0; i < m.numel(); ++i) out[i] = m[i] >= tau ? 1.0 : 0.0;
  return out;
}

BinaryMasks HierMasks::binary() const {
  BinaryMasks b;
  for (int k = 0; k < kNumCellKinds; ++k) {
    b.alpha[k] = binarize(alpha[k], tau);
    b.beta[k] = binarize(beta[k], tau);
  }
  b.w.reserve(w.size());
  for (const auto& t : w) b.w.push_back(t.empty() ? Tensor() : binarize(t, tau));
  return b;
}

HierMasks init_masks(const Supernet& net, const MaskTrainConfig& cfg) {
  HierMasks m;
  m.tau = cfg.tau;
  for (int k = 0; k < kNumCellKinds; ++k) {
    m.alpha[k] = Tensor(net.arch.alpha[k].shape(), cfg.mask_init);
    m.beta[k] = Tensor(net.arch.beta[k].shape(), cfg.mask_init);
  }
  for (const auto& p : net.params) m.w.push_back(p.maskable ? Tensor(p.value.shape(), cfg.mask_init) : Tensor());
  return m;
}

Tensor MaskedView::logits(const Tensor& batch, bool training) const {
  return supernet_logits(*net, batch, &masks, training);
}

MaskedView project(const Supernet& net, const HierMasks& masks) {
  MaskedView v{&net, masks.binary()};
  check_mask_shapes(net, v.masks);
  return v;
}

void straight_through_update(std::span<const ParamRef> real_masks, AdamState& state, double lr, double lo, double hi) {
  adam_step(real_masks, state, lr, 0.0);
  for (const auto& r : real_masks)
    for (double& v : r.value->data()) v = std::clamp(v, lo, hi);
}

bool is_degenerate(const Supernet& net, const BinaryMasks& masks) {
  const Survival sv = survival(net, &masks);
  const int kk = net.spec.intermediate_nodes();
  for (const auto& L : net.cells) {
    const int k = static_cast<int>(L.kind);
    bool any_node = false;
    for (int i = 0; i < kk && !any_node; ++i)
      for (int j = 0; j < i + 2; ++j) any_node = any_node || sv.edge[k][edge_index(i, j)];
    if (!any_node) return true;
  }
  return false;
}

void train_masks(const Supernet& net, const Dataset& data, const MaskTrainConfig& cfg, HierMasks& masks,
                 MaskTrainState& state, const MaskTrainHooks& hooks) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("mask training dataset is empty");
  check_mask_shapes(net, masks.binary());
  Rng rng(derive_seed(cfg.seed, "masker"));
  if (!state.rng_state.empty()) rng.set_state(state.rng_state);
  const auto kinds = net.used_kinds();

  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    if (hooks.stop_after_epoch >= 0 && epoch >= hooks.stop_after_epoch) break;
    const double decay = epoch >= cfg.lr_decay_after ? cfg.lr_decay_factor : 1.0;
    const double lr_w = cfg.lr_w_mask / decay, lr_arch = cfg.lr_arch_mask / decay;
    std::vector<std::size_t> order = all;
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0, correct = 0.0;
    for (const auto& idx : make_batches(order, cfg.batch_size)) {
      const Batch b = data.gather(idx, SplitTag::train);
      // binarize afresh every step
      const BinaryMasks bin = masks.binary();
      Tape tape;
      Binding bd = bind(tape, net, &bin, {.grad_masks = true});
      Var logits = supernet_forward(net, bd, tape.leaf(b.x), true);
      Var loss = ops::cross_entropy(logits, b.labels);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) throw NumericError("masked supernet loss diverged in mask epoch " + std::to_string(epoch + 1));
      const Gradients g = backward(tape, loss);

      std::vector<Tensor> gw;
      std::vector<ParamRef> wrefs;
      gw.reserve(net.params.size());
      for (std::size_t i = 0; i < net.params.size(); ++i)
        if (net.params[i].maskable) gw.push_back(g.of(bd.m_w[i]));
      for (std::size_t i = 0, j = 0; i < net.params.size(); ++i)
        if (net.params[i].maskable) wrefs.push_back({"mask." + net.params[i].name, &masks.w[i], &gw[j++]});
      std::vector<Tensor> ga;
      std::vector<ParamRef> arefs;
      for (int k : kinds) {
        ga.push_back(g.of(bd.m_alpha[k]));
        ga.push_back(g.of(bd.m_beta[k]));
      }
      for (std::size_t i = 0; i < kinds.size(); ++i) {
        const std::string kn = cell_kind_name(CellKind(kinds[i]));
        arefs.push_back({"mask.alpha." + kn, &masks.alpha[kinds[i]], &ga[2 * i]});
        arefs.push_back({"mask.beta." + kn, &masks.beta[kinds[i]], &ga[2 * i + 1]});
      }
      straight_through_update(wrefs, state.w_opt, lr_w, cfg.clamp_lo, cfg.clamp_hi);
      straight_through_update(arefs, state.arch_opt, lr_arch, cfg.clamp_lo, cfg.clamp_hi);

      loss_sum += lv * static_cast<double>(idx.size());
      correct += static_cast<double>(count_correct(logits.value(), b.labels));
    }
    const BinaryMasks bin = masks.binary();
    const double n = static_cast<double>(data.size());
    state.metrics.push_back({"masks", epoch + 1, "train", loss_sum / n, correct / n, lr_w, count_params(net, &bin)});
    state.degenerate = is_degenerate(net, bin);
    state.epoch = epoch + 1;
    state.rng_state = rng.state();
    if (hooks.on_epoch) hooks.on_epoch(masks, state);
  }
  state.degenerate = is_degenerate(net, masks.binary());
}

SparsityReport sparsity_report(const Supernet& net, const HierMasks& masks) {
  const BinaryMasks b = masks.binary();
  check_mask_shapes(net, b);
  auto frac = [](std::size_t ones, std::size_t total) {
    return total ? static_cast<double>(ones) / static_cast<double>(total) : 1.0;
  };
  auto ones = [](const Tensor& t) {
    std::size_t n = 0;
    for (double v : t.data()) n += v != 0.0;
    return n;
  };
  std::size_t a1 = 0, an = 0, b1 = 0, bn = 0, w1 = 0, wn = 0;
  for (int k : net.used_kinds()) {
    a1 += ones(b.alpha[k]);
    an += b.alpha[k].numel();
    b1 += ones(b.beta[k]);
    bn += b.beta[k].numel();
  }
  for (const auto& t : b.w) {
    w1 += ones(t);
    wn += t.numel();
  }
  SparsityReport r;
  r.alpha = frac(a1, an);
  r.beta = frac(b1, bn);
  r.w = frac(w1, wn);
  r.params_kept = count_params(net, &b);
  r.params_total = count_params(net);
  // the fraction is taken over maskable scalars only, so batch norm and the
  // head (never masked) do not put a floor under it
  BinaryMasks no_w = b;
  for (auto& t : no_w.w) t.fill(0.0);
  r.params = frac(r.params_kept - count_params(net, &no_w), wn);
  return r;
}

}  // namespace hmnas
