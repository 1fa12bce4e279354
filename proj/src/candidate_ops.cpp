#include "hmnas/candidate_ops.hpp"

#include <array>
#include <cmath>

#include "hmnas/error.hpp"

namespace hmnas {
namespace {

constexpr std::array<std::string_view, kNumOpKinds> kOpNames = {
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5", "max_pool_3x3", "avg_pool_3x3", "identity",
};

struct ConvShape {
  int kernel;
  int dilation;
  int repeats;  // 0 for non-conv ops
};

ConvShape conv_shape(OpKind kind) {
  switch (kind) {
    case OpKind::sep_conv_3x3: return {3, 1, 2};
    case OpKind::sep_conv_5x5: return {5, 1, 2};
    case OpKind::dil_conv_3x3: return {3, 2, 1};
    case OpKind::dil_conv_5x5: return {5, 2, 1};
    default: return {0, 0, 0};
  }
}

Var bn_apply(const Var& x, const Var& gamma, const Var& beta, bool training, const BnSlot& slot) {
  const Tensor* rm = slot.running ? &slot.running->mean : nullptr;
  const Tensor* rv = slot.running ? &slot.running->var : nullptr;
  return ops::batch_norm(x, gamma, beta, training, rm, rv, slot.batch_out);
}

}  // namespace

std::string_view op_name(OpKind kind) { return kOpNames.at(static_cast<std::size_t>(kind)); }

std::optional<OpKind> parse_op(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  }
  return std::nullopt;
}

std::vector<OpKind> all_op_kinds() {
  std::vector<OpKind> v;
  for (int i = 0; i < kNumOpKinds; ++i) v.push_back(static_cast<OpKind>(i));
  return v;
}

std::vector<ParamDesc> op_param_descs(OpKind kind, int c) {
  const ConvShape cs = conv_shape(kind);
  std::vector<ParamDesc> out;
  for (int r = 0; r < cs.repeats; ++r) {
    const std::string suffix = cs.repeats > 1 ? std::to_string(r + 1) : "";
    out.push_back({"dw" + suffix, {c, 1, cs.kernel, cs.kernel}, ParamRole::conv_weight});
    out.push_back({"pw" + suffix, {c, c, 1, 1}, ParamRole::conv_weight});
    out.push_back({"bn" + suffix + ".gamma", {c}, ParamRole::bn_gamma});
    out.push_back({"bn" + suffix + ".beta", {c}, ParamRole::bn_beta});
  }
  return out;
}

std::vector<std::string> op_bn_names(OpKind kind) {
  switch (kind) {
    case OpKind::sep_conv_3x3:
    case OpKind::sep_conv_5x5: return {"bn1", "bn2"};
    case OpKind::dil_conv_3x3:
    case OpKind::dil_conv_5x5:
    case OpKind::max_pool_3x3:
    case OpKind::avg_pool_3x3: return {"bn"};
    case OpKind::identity: return {};
  }
  return {};
}

void BnRunning::reset() {
  mean.fill(0.0);
  var.fill(1.0);
}

void BnRunning::update(const ops::BatchStats& batch, double count, double momentum) {
  const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
  for (std::size_t c = 0; c < mean.numel(); ++c) {
    mean[c] = (1.0 - momentum) * mean[c] + momentum * batch.mean[c];
    var[c] = (1.0 - momentum) * var[c] + momentum * batch.var[c] * unbias;
  }
}

Var op_forward(OpKind kind, const Var& x, std::span<const Var> params, int stride, bool training,
               std::span<const BnSlot> bn) {
  if (x.value().rank() != 4) {
    throw RankError(std::string(op_name(kind)) + ": expected (batch, channels, height, width), got " +
                    shape_str(x.shape()));
  }
  if (stride != 1 && stride != 2) throw ShapeError(std::string(op_name(kind)) + ": stride must be 1 or 2");
  const int c = x.value().dim(1);
  const auto descs = op_param_descs(kind, c);
  if (params.size() != descs.size()) {
    throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(descs.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < descs.size(); ++i) {
    if (params[i].shape() != descs[i].shape) {
      throw ShapeError(std::string(op_name(kind)) + ": parameter " + descs[i].role + " has shape " +
                       shape_str(params[i].shape()) + ", input with " + std::to_string(c) + " channels needs " +
                       shape_str(descs[i].shape));
    }
  }
  if (bn.size() != op_bn_names(kind).size()) {
    throw ShapeError(std::string(op_name(kind)) + ": wrong number of batch-norm slots");
  }

  const ConvShape cs = conv_shape(kind);
  if (cs.repeats > 0) {
    Var h = x;
    for (int r = 0; r < cs.repeats; ++r) {
      const int s = r == 0 ? stride : 1;
      const int pad = cs.dilation * (cs.kernel - 1) / 2;
      h = ops::relu(h);
      h = ops::conv2d(h, params[4 * r], {s, pad, cs.dilation, c});
      h = ops::conv2d(h, params[4 * r + 1], {1, 0, 1, 1});
      h = bn_apply(h, params[4 * r + 2], params[4 * r + 3], training, bn[r]);
    }
    return h;
  }
  switch (kind) {
    case OpKind::max_pool_3x3: return bn_apply(ops::max_pool3x3(x, stride), Var{}, Var{}, training, bn[0]);
    case OpKind::avg_pool_3x3: return bn_apply(ops::avg_pool3x3(x, stride), Var{}, Var{}, training, bn[0]);
    case OpKind::identity: return ops::subsample(x, stride);
    default: break;
  }
  throw ShapeError("unknown op kind");
}

Tensor init_param(const ParamDesc& desc, Rng& rng) {
  Tensor t(desc.shape, 0.0);
  switch (desc.kind) {
    case ParamRole::bn_gamma: t.fill(1.0); break;
    case ParamRole::bn_beta:
    case ParamRole::linear_bias: break;
    case ParamRole::conv_weight:
    case ParamRole::linear_weight: {
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < desc.shape.size(); ++i) fan_in *= desc.shape[i];
      const double gain = desc.kind == ParamRole::conv_weight ? 2.0 : 1.0;
      const double sd = std::sqrt(gain / static_cast<double>(fan_in));
      for (double& v : t.data()) v = sd * rng.normal();
      break;
    }
  }
  return t;
}

OpInstance OpInstance::make(OpKind kind, int channels, int stride, Rng& rng) {
  OpInstance op{kind, channels, stride, {}, {}};
  for (const auto& d : op_param_descs(kind, channels)) op.params.push_back(init_param(d, rng));
  for (std::size_t i = 0; i < op_bn_names(kind).size(); ++i) op.bn.emplace_back(channels);
  return op;
}

Var OpInstance::forward(Tape& tape, const Var& x, bool training, bool params_require_grad) {
  std::vector<Var> pv;
  for (const auto& p : params) pv.push_back(tape.leaf(p, params_require_grad));
  std::vector<ops::BatchStats> stats(bn.size());
  std::vector<BnSlot> slots;
  for (std::size_t i = 0; i < bn.size(); ++i) slots.push_back({&bn[i], &stats[i]});
  Var y = op_forward(kind, x, pv, stride, training, slots);
  if (training) {
    const Shape& s = x.shape();
    for (std::size_t i = 0; i < bn.size(); ++i) {
      // every bn inside an op runs at the op's output resolution
      const double count = static_cast<double>(s[0]) * y.shape()[2] * y.shape()[3];
      bn[i].update(stats[i], count);
    }
  }
  return y;
}

}  // namespace hmnas
