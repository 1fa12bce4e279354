#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hmnas/dataset.hpp"
#include "hmnas/searchspace.hpp"
#include "hmnas/trainer.hpp"

namespace hmnas {

struct MaskTrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double lr_w_mask = 1e-4;
  double lr_arch_mask = 1e-5;
  double lr_decay_factor = 10.0;
  int lr_decay_after = 10;  // epochs
  double mask_init = 1e-2;
  double tau = 5e-3;
  double clamp_lo = -0.1;
  double clamp_hi = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Real-valued masks over ops (α-shaped), edges (β-shaped) and maskable
/// weights; `w` runs parallel to Supernet::params with empty tensors for
/// parameters that are never masked (batch norm, classifier head).
struct HierMasks {
  std::array<Tensor, kNumCellKinds> alpha, beta;
  std::vector<Tensor> w;
  double tau = 5e-3;

  BinaryMasks binary() const;
};

HierMasks init_masks(const Supernet& net, const MaskTrainConfig& cfg);

// 1 where m >= tau, else 0.
Tensor binarize(const Tensor& m, double tau);

/// Non-destructive masked evaluation of a supernet.
struct MaskedView {
  const Supernet* net;
  BinaryMasks masks;
  Tensor logits(const Tensor& batch, bool training) const;
};
MaskedView project(const Supernet& net, const HierMasks& masks);

/// Straight-through update: the gradient w.r.t. each binary mask is handed
/// to Adam as if it were the gradient of the real mask, then the real mask
/// is clamped to [lo, hi].
void straight_through_update(std::span<const ParamRef> real_masks, AdamState& state, double lr, double lo, double hi);

struct MaskTrainState {
  int epoch = 0;
  AdamState w_opt, arch_opt;
  std::string rng_state;
  std::vector<MetricsRow> metrics;
  bool degenerate = false;
};

struct MaskTrainHooks {
  std::function<void(const HierMasks&, const MaskTrainState&)> on_epoch;
  int stop_after_epoch = -1;
};

void train_masks(const Supernet& net, const Dataset& data, const MaskTrainConfig& cfg, HierMasks& masks,
                 MaskTrainState& state, const MaskTrainHooks& hooks = {});

// True when some cell has no surviving intermediate node.
bool is_degenerate(const Supernet& net, const BinaryMasks& masks);

struct SparsityReport {
  double alpha = 0.0;   // fraction of ones in M_α (cell kinds in use)
  double beta = 0.0;    // fraction of ones in M_β
  double w = 0.0;       // fraction of ones in M_w
  double params = 0.0;  // count_params(masked) / count_params(unmasked)
  std::size_t params_kept = 0, params_total = 0;
};
SparsityReport sparsity_report(const Supernet& net, const HierMasks& masks);

}  // namespace hmnas
