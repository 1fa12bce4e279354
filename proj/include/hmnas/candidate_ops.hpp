#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hmnas/autograd.hpp"
#include "hmnas/ops.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

/// The seven candidate operations of the cell search space.
enum class OpKind {
  sep_conv_3x3,
  sep_conv_5x5,
  dil_conv_3x3,
  dil_conv_5x5,
  max_pool_3x3,
  avg_pool_3x3,
  identity,
};

inline constexpr int kNumOpKinds = 7;

std::string_view op_name(OpKind kind);
std::optional<OpKind> parse_op(std::string_view name);
std::vector<OpKind> all_op_kinds();

enum class ParamRole { conv_weight, bn_gamma, bn_beta, linear_weight, linear_bias };

struct ParamDesc {
  std::string role;  // e.g. "dw1", "bn1.gamma"
  Shape shape;
  ParamRole kind;
};

// Trainable parameters of one op instance on `channels` channels, in the
// order op_forward expects them.
std::vector<ParamDesc> op_param_descs(OpKind kind, int channels);
// Names of the batch-norm layers inside the op (running statistics slots).
std::vector<std::string> op_bn_names(OpKind kind);

struct BnRunning {
  Tensor mean;
  Tensor var;
  explicit BnRunning(int channels = 0) : mean({channels > 0 ? channels : 1}, 0.0), var({channels > 0 ? channels : 1}, 1.0) {}
  void reset();
  // Exponential moving average with the batch statistics (unbiased variance).
  void update(const ops::BatchStats& batch, double count, double momentum = 0.1);
};

// Per-call view on a batch-norm layer: running statistics for eval mode and
// a sink for the batch statistics seen in training mode.
struct BnSlot {
  const BnRunning* running = nullptr;
  ops::BatchStats* batch_out = nullptr;
};

/// Forward of one candidate op. Stride-1 ops preserve spatial size; stride-2
/// ops produce ceil(H/2) x ceil(W/2). Convolutional ops follow ReLU-Conv-BN;
/// separable convolutions apply the depthwise+pointwise composite twice.
/// Pooling ops are followed by a non-affine batch norm.
Var op_forward(OpKind kind, const Var& x, std::span<const Var> params, int stride, bool training,
               std::span<const BnSlot> bn);

// Fan-in scaled normal draw for conv/linear weights; gamma = 1, beta = 0.
Tensor init_param(const ParamDesc& desc, Rng& rng);

/// Self-contained op instance (parameters + running statistics), handy for
/// unit tests and gradient checks.
struct OpInstance {
  OpKind kind;
  int channels;
  int stride;
  std::vector<Tensor> params;
  std::vector<BnRunning> bn;

  static OpInstance make(OpKind kind, int channels, int stride, Rng& rng);
  Var forward(Tape& tape, const Var& x, bool training, bool params_require_grad = false);
};

}  // namespace hmnas
