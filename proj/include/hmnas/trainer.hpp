#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hmnas/dataset.hpp"
#include "hmnas/searchspace.hpp"

namespace hmnas {

struct SigmaSchedule {
  // auto: 1 until two thirds of the post-warm-up opportunities, then linear to 0.
  enum class Kind { automatic, linear, delayed_linear, constant, off };
  Kind kind = Kind::automatic;
  double horizon = 0.0;  // iterations of decay (linear, delayed_linear)
  double delay = 0.0;    // iterations held at 1 (delayed_linear)
};
const char* sigma_kind_name(SigmaSchedule::Kind k);
SigmaSchedule::Kind parse_sigma_kind(const std::string& s);

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double w_lr_init = 0.1;
  double w_lr_min = 1e-3;
  double w_momentum = 0.9;
  double w_weight_decay = 3e-4;
  double arch_lr = 3e-4;
  double arch_weight_decay = 1e-3;
  int warmup_epochs = 10;
  double train_fraction = 0.8;
  double grad_clip = 5.0;
  SigmaSchedule sigma;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DataSplit {
  std::vector<std::size_t> train, val;
};
DataSplit split_dataset(std::size_t n, double fraction, std::uint64_t seed);

double cosine_lr(long iter, long total_iters, double lr_max, double lr_min);
// σ(iter); `total` is the number of post-warm-up opportunities (used by automatic).
double trigger_probability(long iter, const SigmaSchedule& schedule, long total = 0);

// A parameter as seen by an optimizer. `frozen`, if given, is an element
// mask: entries where it is 0 are never touched.
struct ParamRef {
  std::string name;
  Tensor* value;
  const Tensor* grad;
  const Tensor* frozen = nullptr;
};

struct SgdState {
  std::vector<Tensor> velocity;
};
struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
};

void sgd_step(std::span<const ParamRef> params, SgdState& state, double lr, double momentum, double weight_decay);
void adam_step(std::span<const ParamRef> params, AdamState& state, double lr, double weight_decay,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
// Rescales grads in place so their global L2 norm is at most max_norm; returns the original norm.
double clip_grad_norm(std::span<Tensor> grads, double max_norm);

struct MetricsRow {
  std::string stage;
  int epoch;
  std::string split;
  double loss;
  double accuracy;
  double lr;
  std::size_t params;
  bool operator==(const MetricsRow&) const = default;
};

struct ProvenanceRecord {
  int epoch;
  char step;  // 'w' or 'a'
  SplitTag split;
  std::vector<std::size_t> indices;
};

struct TrainState {
  int epoch = 0;        // completed epochs
  long arch_iter = 0;   // architecture-update opportunities since warm-up ended
  long arch_steps = 0;  // opportunities that fired
  SgdState w_opt;
  AdamState arch_opt;
  std::string rng_state;
  std::vector<MetricsRow> metrics;
};

struct TrainHooks {
  std::function<void(const Supernet&, const TrainState&)> on_epoch;
  int stop_after_epoch = -1;  // stop once this many epochs are complete
  std::vector<ProvenanceRecord>* provenance = nullptr;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};
// Eval-mode (running statistics) loss and accuracy over the given samples.
EvalResult evaluate(const Supernet& net, const BinaryMasks* masks, const Dataset& data,
                    std::span<const std::size_t> indices, int batch_size, SplitTag split);

// Number of rows whose argmax (lowest index on ties) equals the label.
std::size_t count_correct(const Tensor& logits, std::span<const int> labels);

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> indices, int batch_size);

/// First-order bilevel training: per training batch one SGD step on w, with
/// the validation batches interleaved as gated Adam steps on α and β.
/// Resumes from `state` (fresh state = start from scratch).
void train_supernet(Supernet& net, const Dataset& data, const TrainConfig& cfg, TrainState& state,
                    const TrainHooks& hooks = {});

}  // namespace hmnas
