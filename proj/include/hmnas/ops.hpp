#pragma once

#include <span>
#include <vector>

#include "hmnas/autograd.hpp"

// Differentiable primitives over Vars. Every function records exactly one
// tape entry and validates shapes up front.
namespace hmnas::ops {

Var add(const Var& a, const Var& b);
Var add_n(std::span<const Var> xs);
Var mul(const Var& a, const Var& b);
// x * s where s holds a single element.
Var scale(const Var& x, const Var& s);
Var mul_const(const Var& x, double c);
Var sum(const Var& x);
Var relu(const Var& x);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

// x: (N, C, H, W); w: (C_out, C / groups, k, k). No bias.
Var conv2d(const Var& x, const Var& w, const Conv2dOptions& opt);
int conv_out_size(int in, int kernel, const Conv2dOptions& opt);

inline constexpr double kBatchNormEps = 1e-8;

struct BatchStats {
  Tensor mean;
  Tensor var;  // biased
};

// Per-channel normalization of a rank-4 input. gamma/beta may be unbound
// (no affine). In training mode the batch statistics are used and reported
// through `batch_stats`; otherwise running statistics are required.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, bool training, const Tensor* running_mean,
               const Tensor* running_var, BatchStats* batch_stats = nullptr);

// 3x3 windows with padding 1; average excludes padded cells.
Var max_pool3x3(const Var& x, int stride);
Var avg_pool3x3(const Var& x, int stride);
// Strided pick x[:, :, ::stride, ::stride].
Var subsample(const Var& x, int stride);
Var global_avg_pool(const Var& x);

// x: (B, F), w: (O, F), b: (O) -> (B, O)
Var linear(const Var& x, const Var& w, const Var& b);
Var concat_channels(std::span<const Var> xs);

// Softmax along the last axis of a rank-1 or rank-2 input.
Var softmax(const Var& x);
// Mean negative log-likelihood of integer labels under logits (B, K).
Var cross_entropy(const Var& logits, std::span<const int> labels);

Var select(const Var& v, int index);
Var row(const Var& m, int r);
Var slice(const Var& v, int begin, int end);
// v / sum(v); sum must be non-zero.
Var normalize(const Var& v);

enum class AuxOp { relu, batch_norm, linear, concat_channels, softmax, cross_entropy };

// Name-dispatched access to the auxiliary primitives. batch_norm takes
// (x, gamma, beta) and runs in training mode; cross_entropy takes the logits
// and reads `labels`.
Var aux_forward(AuxOp op, std::span<const Var> inputs, std::span<const int> labels = {});

}  // namespace hmnas::ops
