#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmnas/autograd.hpp"
#include "hmnas/candidate_ops.hpp"

namespace hmnas {

enum class CellKind { normal = 0, reduce = 1 };
inline constexpr int kNumCellKinds = 2;
const char* cell_kind_name(CellKind k);

struct SearchSpaceSpec {
  int nodes_per_cell = 7;  // two inputs, K intermediates, one output
  int num_cells = 3;
  int init_channels = 4;
  int in_channels = 3;
  int num_classes = 10;
  std::vector<OpKind> ops = all_op_kinds();
  // Unset means the default floor(n/3), floor(2n/3) placement.
  std::optional<std::vector<int>> reduction_cells;

  int num_candidate_ops() const { return static_cast<int>(ops.size()); }
  int intermediate_nodes() const { return nodes_per_cell - 3; }
  int num_edges() const;
  std::vector<int> reduction_positions() const;
  bool is_reduction(int cell) const;
  // Throws SpecError on any violated invariant.
  void validate() const;

  bool operator==(const SearchSpaceSpec&) const = default;
};

// Edge e of the template connects predecessor `from` to intermediate node
// `to` (node ids: 0 = c_{k-2}, 1 = c_{k-1}, 2.. = intermediates).
struct EdgeRef {
  int to;
  int from;
};
int edge_offset(int intermediate);  // first edge id of intermediate node i
EdgeRef edge_ref(int edge);
int edge_index(int intermediate, int from);

struct ArchParams {
  std::array<Tensor, kNumCellKinds> alpha;  // (E, N)
  std::array<Tensor, kNumCellKinds> beta;   // (E)
};

// Binary masks as consumed by the forward pass. `w` runs parallel to
// Supernet::params; non-maskable entries are empty tensors.
struct BinaryMasks {
  std::array<Tensor, kNumCellKinds> alpha;
  std::array<Tensor, kNumCellKinds> beta;
  std::vector<Tensor> w;
};

struct ParamEntry {
  std::string name;
  Tensor value;
  ParamRole kind;
  bool maskable;
};

struct OpSlot {
  OpKind kind;
  int stride;
  std::vector<int> params;
  std::vector<int> bns;
};

// ReLU-Conv-BN (the stem omits the ReLU).
struct ConvBnSlot {
  int conv, gamma, beta, bn;
  int stride;
  bool relu;
};

struct CellLayout {
  CellKind kind;
  int channels;
  ConvBnSlot pre0, pre1;
  std::vector<std::vector<OpSlot>> edges;  // [edge][op]
};

struct Supernet {
  SearchSpaceSpec spec;
  ArchParams arch;
  std::vector<ParamEntry> params;
  std::vector<std::string> bn_names;
  std::vector<BnRunning> bn;  // parallel to bn_names
  ConvBnSlot stem;
  std::vector<CellLayout> cells;
  int head_w = -1, head_b = -1;

  int find_param(const std::string& name) const;
  std::vector<int> used_kinds() const;
  void reset_bn();
  BinaryMasks all_ones_masks() const;
};

Supernet build_supernet(const SearchSpaceSpec& spec, std::uint64_t seed);
// Fresh seeded weights (and BN stats) for an existing supernet; α, β kept.
void reinit_weights(Supernet& net, std::uint64_t seed);

/// Tape-side view of a supernet: Vars for weights, α, β and optionally the
/// binary masks. Each forward builds one of these.
struct Binding {
  std::vector<Var> params;
  std::array<Var, kNumCellKinds> alpha, beta;
  bool masked = false;
  std::array<Var, kNumCellKinds> m_alpha, m_beta;
  std::vector<Var> m_w;  // unbound for non-maskable params
};

struct BindOptions {
  bool grad_w = false;
  bool grad_arch = false;
  bool grad_masks = false;
};

Binding bind(Tape& tape, const Supernet& net, const BinaryMasks* masks = nullptr, BindOptions opt = {});

/// Mixed-op weights of an edge row, optionally masked and renormalized.
/// Returns an unbound Var if every op on the row is masked.
Var mixing_weights(const Var& alpha_row, const Var* mask_row);

Var mixed_op_forward(const Supernet& net, const Binding& b, int cell, int edge, const Var& x, bool training,
                     std::vector<BnRunning>* bn_update = nullptr);

/// Edge weights over the inputs of one node. `edge_alive` zeroes
/// edges whose ops are all masked before renormalization.
Var edge_weights(const Var& beta_slice, const Var* mask_slice, const std::vector<bool>& edge_alive);

// Sum of weighted predecessor outputs; unbound entries of `edge_out`
// are skipped. Returns an unbound Var if nothing survives.
Var node_combine(std::span<const Var> edge_out, const Var& weights);

/// Logits (B, num_classes). In training mode BN uses batch statistics; if
/// `bn_update` is given, those are folded into it with the EMA rule.
Var supernet_forward(const Supernet& net, const Binding& b, const Var& batch, bool training,
                     std::vector<BnRunning>* bn_update = nullptr);

// Value-only convenience wrapper.
Tensor supernet_logits(const Supernet& net, const Tensor& batch, const BinaryMasks* masks, bool training);

std::size_t count_scalars(std::span<const Tensor> tensors);
std::size_t count_params(const Supernet& net, const BinaryMasks* masks = nullptr);

// Which ops/edges survive the binary op and edge masks, per cell kind.
struct Survival {
  std::array<std::vector<std::vector<bool>>, kNumCellKinds> op;  // [kind][edge][op]
  std::array<std::vector<bool>, kNumCellKinds> edge;             // [kind][edge]
};
Survival survival(const Supernet& net, const BinaryMasks* masks);

void check_mask_shapes(const Supernet& net, const BinaryMasks& masks);

}  // namespace hmnas
