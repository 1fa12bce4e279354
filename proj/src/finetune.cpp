#include "hmnas/finetune.hpp"

#include <algorithm>
#include <cmath>

#include "hmnas/error.hpp"
#include "hmnas/masker.hpp"
#include "hmnas/ops.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

const char* init_mode_name(InitMode m) { return m == InitMode::warm ? "warm" : "random"; }

InitMode parse_init_mode(const std::string& s) {
  if (s == "warm") return InitMode::warm;
  if (s == "random") return InitMode::random;
  throw ConfigError("unknown init mode '" + s + "' (expected warm or random)");
}

void FinetuneConfig::validate() const {
  // zero epochs is accepted and leaves the model untouched
  if (epochs < 0) throw ConfigError("finetune.epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("finetune.batch_size must be positive");
  if (!(lr_init > 0.0) || !(lr_min >= 0.0) || lr_min > lr_init) throw ConfigError("finetune learning rates need 0 <= lr_min <= lr_init, lr_init > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("finetune.momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("finetune.weight_decay must be non-negative");
  if (!(grad_clip > 0.0)) throw ConfigError("finetune.grad_clip must be positive");
  if (!std::isfinite(target_loss)) throw ConfigError("finetune.target_loss must be finite");
}

double default_target_loss(const std::vector<MetricsRow>& m) {
  double best = INFINITY;
  for (const auto& r : m)
    if (r.stage == "supernet" && r.split == "val") best = std::min(best, r.loss);
  if (!std::isfinite(best)) throw PrerequisiteError("no supernet validation loss to derive a target from");
  return 1.1 * best;
}

FinalModel prepare_final_model(const Supernet& supernet, const BinaryMasks& masks, const FinetuneConfig& cfg) {
  check_mask_shapes(supernet, masks);
  if (is_degenerate(supernet, masks)) {
    throw DegenerateError("masked network is degenerate: some cell has no surviving intermediate node");
  }
  FinalModel m{supernet, masks};
  if (cfg.init_mode == InitMode::random) reinit_weights(m.net, derive_seed(cfg.seed, "finetune-init"));
  return m;
}

std::vector<Tensor> trainable_masks(const Supernet& net, const BinaryMasks& masks) {
  std::vector<Tensor> out;
  out.reserve(net.params.size());
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    out.push_back(net.params[i].maskable ? masks.w[i] : Tensor(net.params[i].value.shape(), 1.0));
  }
  const Survival sv = survival(net, &masks);
  for (const auto& L : net.cells) {
    const int k = static_cast<int>(L.kind);
    for (std::size_t e = 0; e < L.edges.size(); ++e)
      for (std::size_t o = 0; o < L.edges[e].size(); ++o)
        if (!sv.edge[k][e] || !sv.op[k][e][o])
          for (int id : L.edges[e][o].params) out[id].fill(0.0);
  }
  return out;
}

void finetune(FinalModel& model, const Dataset& data, const DataSplit& split, const FinetuneConfig& cfg,
              FinetuneState& state, const FinetuneHooks& hooks) {
  cfg.validate();
  Supernet& net = model.net;
  check_mask_shapes(net, model.masks);
  if (is_degenerate(net, model.masks)) throw DegenerateError("cannot fine-tune a degenerate masked network");
  if (cfg.epochs == 0 || state.epoch >= cfg.epochs) return;
  if (split.train.empty()) throw ConfigError("fine-tuning needs training samples");
  if (state.epoch == 0) net.reset_bn();

  const std::vector<Tensor> frozen = trainable_masks(net, model.masks);
  Rng rng(derive_seed(cfg.seed, "finetune"));
  if (!state.rng_state.empty()) rng.set_state(state.rng_state);
  const std::size_t params = count_params(net, &model.masks);

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    if (hooks.stop_after_epoch >= 0 && epoch >= hooks.stop_after_epoch) break;
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min);
    std::vector<std::size_t> order = split.train;
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& idx : make_batches(order, cfg.batch_size)) {
      const Batch b = data.gather(idx, SplitTag::train);
      Tape tape;
      Binding bd = bind(tape, net, &model.masks, {.grad_w = true});
      Var logits = supernet_forward(net, bd, tape.leaf(b.x), true, &net.bn);
      Var loss = ops::cross_entropy(logits, b.labels);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        throw NumericError("fine-tuning loss diverged in epoch " + std::to_string(epoch + 1) +
                           "; last good state is the end of epoch " + std::to_string(epoch));
      }
      const Gradients g = backward(tape, loss);
      std::vector<Tensor> grads;
      grads.reserve(net.params.size());
      for (const Var& p : bd.params) grads.push_back(g.of(p));
      clip_grad_norm(grads, cfg.grad_clip);
      std::vector<ParamRef> refs;
      refs.reserve(net.params.size());
      for (std::size_t i = 0; i < net.params.size(); ++i)
        refs.push_back({net.params[i].name, &net.params[i].value, &grads[i], &frozen[i]});
      sgd_step(refs, state.opt, lr, cfg.momentum, cfg.weight_decay);
      loss_sum += lv * static_cast<double>(idx.size());
      correct += count_correct(logits.value(), b.labels);
    }
    const double n = static_cast<double>(split.train.size());
    state.metrics.push_back({"finetune", epoch + 1, "train", loss_sum / n, static_cast<double>(correct) / n, lr, params});
    if (!split.val.empty()) {
      const EvalResult v = evaluate(net, &model.masks, data, split.val, cfg.batch_size, SplitTag::val);
      state.metrics.push_back({"finetune", epoch + 1, "val", v.loss, v.accuracy, lr, params});
      if (state.epochs_to_target < 0 && cfg.target_loss > 0.0 && v.loss <= cfg.target_loss)
        state.epochs_to_target = epoch + 1;
    }
    state.epoch = epoch + 1;
    state.rng_state = rng.state();
    if (hooks.on_epoch) hooks.on_epoch(model, state);
  }
}

}  // namespace hmnas
