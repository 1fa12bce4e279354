#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hmnas/dataset.hpp"
#include "hmnas/searchspace.hpp"
#include "hmnas/trainer.hpp"

namespace hmnas {

enum class InitMode { warm, random };
const char* init_mode_name(InitMode m);
InitMode parse_init_mode(const std::string& s);

struct FinetuneConfig {
  int epochs = 200;
  int batch_size = 64;
  double lr_init = 0.025;
  double lr_min = 1e-3;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;
  InitMode init_mode = InitMode::warm;
  // Validation loss counted as "reached" for epochs-to-target; <= 0 means
  // the caller did not set one and the metric stays unreported.
  double target_loss = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// 1.1 x the best supernet validation loss in a metrics log.
double default_target_loss(const std::vector<MetricsRow>& supernet_metrics);

/// A searched network: the supernet's weights under fixed binary masks.
struct FinalModel {
  Supernet net;
  BinaryMasks masks;
};

struct FinetuneState {
  int epoch = 0;
  SgdState opt;
  std::string rng_state;
  std::vector<MetricsRow> metrics;
  int epochs_to_target = -1;  // first epoch whose val loss <= target, -1 if never
};

struct FinetuneHooks {
  std::function<void(const FinalModel&, const FinetuneState&)> on_epoch;
  int stop_after_epoch = -1;
};

// Starting point of fine-tuning: masks fixed, weights copied (warm) or
// freshly drawn (random). Throws DegenerateError if no cell has a live node.
FinalModel prepare_final_model(const Supernet& supernet, const BinaryMasks& masks, const FinetuneConfig& cfg);

// Element masks of the weights fine-tuning may touch: 0 for masked weights
// and for every parameter of a dead op or edge.
std::vector<Tensor> trainable_masks(const Supernet& net, const BinaryMasks& masks);

/// SGD with momentum and a cosine schedule on the unmasked weights only;
/// α, β and the masks stay fixed. Running BN statistics are reset before the
/// first epoch. Resumes from `state`.
void finetune(FinalModel& model, const Dataset& data, const DataSplit& split, const FinetuneConfig& cfg,
              FinetuneState& state, const FinetuneHooks& hooks = {});

}  // namespace hmnas
