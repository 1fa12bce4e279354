#include "hmnas/searchspace.hpp"

#include <algorithm>
#include <set>

#include "hmnas/error.hpp"
#include "hmnas/ops.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

const char* cell_kind_name(CellKind k) { return k == CellKind::normal ? "normal" : "reduce"; }

int edge_offset(int intermediate) { return intermediate * (intermediate + 3) / 2; }

EdgeRef edge_ref(int edge) {
  int i = 0;
  while (edge_offset(i + 1) <= edge) ++i;
  return {i + 2, edge - edge_offset(i)};
}

int edge_index(int intermediate, int from) { return edge_offset(intermediate) + from; }

int SearchSpaceSpec::num_edges() const { return edge_offset(intermediate_nodes()); }

std::vector<int> SearchSpaceSpec::reduction_positions() const {
  std::vector<int> r = reduction_cells ? *reduction_cells : std::vector<int>{num_cells / 3, 2 * num_cells / 3};
  std::sort(r.begin(), r.end());
  r.erase(std::unique(r.begin(), r.end()), r.end());
  return r;
}

bool SearchSpaceSpec::is_reduction(int cell) const {
  const auto r = reduction_positions();
  return std::find(r.begin(), r.end(), cell) != r.end();
}

void SearchSpaceSpec::validate() const {
  if (nodes_per_cell < 4) {
    throw SpecError("nodes_per_cell must be at least 4 (two inputs, one intermediate, one output), got " +
                    std::to_string(nodes_per_cell));
  }
  if (num_cells < 1) throw SpecError("num_cells must be positive");
  if (init_channels < 1) throw SpecError("init_channels must be positive");
  if (in_channels < 1) throw SpecError("in_channels must be positive");
  if (num_classes < 2) throw SpecError("num_classes must be at least 2");
  if (ops.empty()) throw SpecError("candidate op list is empty");
  std::set<OpKind> seen(ops.begin(), ops.end());
  if (seen.size() != ops.size()) throw SpecError("candidate op list contains duplicates");
  if (reduction_cells) {
    for (int c : *reduction_cells) {
      if (c < 0 || c >= num_cells) throw SpecError("reduction cell " + std::to_string(c) + " out of range");
    }
  }
}

int Supernet::find_param(const std::string& name) const {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].name == name) return static_cast<int>(i);
  return -1;
}

std::vector<int> Supernet::used_kinds() const {
  std::vector<int> out;
  for (const auto& c : cells) {
    const int k = static_cast<int>(c.kind);
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void Supernet::reset_bn() {
  for (auto& b : bn) b.reset();
}

BinaryMasks Supernet::all_ones_masks() const {
  BinaryMasks m;
  for (int k = 0; k < kNumCellKinds; ++k) {
    m.alpha[k] = Tensor(arch.alpha[k].shape(), 1.0);
    m.beta[k] = Tensor(arch.beta[k].shape(), 1.0);
  }
  for (const auto& p : params) m.w.push_back(p.maskable ? Tensor(p.value.shape(), 1.0) : Tensor());
  return m;
}

namespace {

class Builder {
 public:
  Builder(Supernet& net, Rng& rng) : net_(net), rng_(rng) {}

  int param(const std::string& name, const Shape& shape, ParamRole kind, bool maskable) {
    net_.params.push_back({name, init_param({name, shape, kind}, rng_), kind, maskable});
    return static_cast<int>(net_.params.size()) - 1;
  }

  int bn(const std::string& name, int channels) {
    net_.bn_names.push_back(name);
    net_.bn.emplace_back(channels);
    return static_cast<int>(net_.bn.size()) - 1;
  }

  ConvBnSlot conv_bn(const std::string& name, int cin, int cout, int k, int stride, bool relu) {
    ConvBnSlot s;
    s.conv = param(name + ".conv", {cout, cin, k, k}, ParamRole::conv_weight, true);
    s.gamma = param(name + ".bn.gamma", {cout}, ParamRole::bn_gamma, false);
    s.beta = param(name + ".bn.beta", {cout}, ParamRole::bn_beta, false);
    s.bn = bn(name + ".bn", cout);
    s.stride = stride;
    s.relu = relu;
    return s;
  }

 private:
  Supernet& net_;
  Rng& rng_;
};

}  // namespace

Supernet build_supernet(const SearchSpaceSpec& spec, std::uint64_t seed) {
  spec.validate();
  Supernet net;
  net.spec = spec;
  const int e = spec.num_edges(), n = spec.num_candidate_ops();

  Rng arch_rng(derive_seed(seed, "arch"));
  for (int k = 0; k < kNumCellKinds; ++k) {
    net.arch.alpha[k] = Tensor({e, n});
    for (double& v : net.arch.alpha[k].data()) v = arch_rng.uniform() * 1e-3;
    net.arch.beta[k] = Tensor({e});
    for (double& v : net.arch.beta[k].data()) v = arch_rng.uniform() * 1e-3;
  }

  Rng rng(derive_seed(seed, "weights"));
  Builder b(net, rng);
  const int stem_c = spec.init_channels;
  net.stem = b.conv_bn("stem", spec.in_channels, stem_c, 3, 1, false);

  int c_pp = stem_c, c_p = stem_c, c = spec.init_channels;
  bool prev_reduction = false;
  const int kk = spec.intermediate_nodes();
  for (int cell = 0; cell < spec.num_cells; ++cell) {
    const bool reduction = spec.is_reduction(cell);
    if (reduction) c *= 2;
    CellLayout L;
    L.kind = reduction ? CellKind::reduce : CellKind::normal;
    L.channels = c;
    const std::string cname = "cell" + std::to_string(cell);
    L.pre0 = b.conv_bn(cname + ".pre0", c_pp, c, 1, prev_reduction ? 2 : 1, true);
    L.pre1 = b.conv_bn(cname + ".pre1", c_p, c, 1, 1, true);
    L.edges.resize(e);
    for (int edge = 0; edge < e; ++edge) {
      const EdgeRef ref = edge_ref(edge);
      for (OpKind kind : spec.ops) {
        OpSlot slot;
        slot.kind = kind;
        slot.stride = reduction && ref.from < 2 ? 2 : 1;
        const std::string prefix = cname + ".edge" + std::to_string(edge) + "." + std::string(op_name(kind));
        for (const auto& d : op_param_descs(kind, c)) {
          slot.params.push_back(b.param(prefix + "." + d.role, d.shape, d.kind, d.kind == ParamRole::conv_weight));
        }
        for (const auto& bn_name : op_bn_names(kind)) slot.bns.push_back(b.bn(prefix + "." + bn_name, c));
        L.edges[edge].push_back(std::move(slot));
      }
    }
    net.cells.push_back(std::move(L));
    c_pp = c_p;
    c_p = kk * c;
    prev_reduction = reduction;
  }
  net.head_w = b.param("head.weight", {spec.num_classes, c_p}, ParamRole::linear_weight, false);
  net.head_b = b.param("head.bias", {spec.num_classes}, ParamRole::linear_bias, false);
  return net;
}

void reinit_weights(Supernet& net, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "weights"));
  for (auto& p : net.params) p.value = init_param({p.name, p.value.shape(), p.kind}, rng);
  net.reset_bn();
}

void check_mask_shapes(const Supernet& net, const BinaryMasks& masks) {
  for (int k = 0; k < kNumCellKinds; ++k) {
    if (masks.alpha[k].shape() != net.arch.alpha[k].shape() || masks.beta[k].shape() != net.arch.beta[k].shape()) {
      throw ShapeError(std::string("op/edge mask shape does not match the ") + cell_kind_name(CellKind(k)) +
                       " cell template");
    }
  }
  if (masks.w.size() != net.params.size()) {
    throw ShapeError("weight mask count " + std::to_string(masks.w.size()) + " does not match " +
                     std::to_string(net.params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < masks.w.size(); ++i) {
    const auto& p = net.params[i];
    if (p.maskable ? masks.w[i].shape() != p.value.shape() : !masks.w[i].empty()) {
      throw ShapeError("weight mask for " + p.name + " has shape " + shape_str(masks.w[i].shape()));
    }
  }
}

Binding bind(Tape& tape, const Supernet& net, const BinaryMasks* masks, BindOptions opt) {
  Binding b;
  b.params.reserve(net.params.size());
  for (const auto& p : net.params) b.params.push_back(tape.leaf(p.value, opt.grad_w));
  for (int k = 0; k < kNumCellKinds; ++k) {
    b.alpha[k] = tape.leaf(net.arch.alpha[k], opt.grad_arch);
    b.beta[k] = tape.leaf(net.arch.beta[k], opt.grad_arch);
  }
  if (masks) {
    check_mask_shapes(net, *masks);
    b.masked = true;
    for (int k = 0; k < kNumCellKinds; ++k) {
      b.m_alpha[k] = tape.leaf(masks->alpha[k], opt.grad_masks);
      b.m_beta[k] = tape.leaf(masks->beta[k], opt.grad_masks);
    }
    b.m_w.resize(net.params.size());
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      if (net.params[i].maskable) b.m_w[i] = tape.leaf(masks->w[i], opt.grad_masks);
    }
  }
  return b;
}

namespace {

Var effective(const Binding& b, int id) {
  if (b.masked && b.m_w[id].valid()) return ops::mul(b.params[id], b.m_w[id]);
  return b.params[id];
}

void fold_bn(std::vector<BnRunning>* update, int id, const ops::BatchStats& stats, const Var& out) {
  if (!update) return;
  const Shape& s = out.shape();
  (*update)[id].update(stats, static_cast<double>(s[0]) * s[2] * s[3]);
}

Var conv_bn_forward(const Supernet& net, const Binding& b, const ConvBnSlot& s, const Var& x, bool training,
                    std::vector<BnRunning>* bn_update) {
  Var h = s.relu ? ops::relu(x) : x;
  const int k = net.params[s.conv].value.dim(2);
  h = ops::conv2d(h, effective(b, s.conv), {s.stride, (k - 1) / 2, 1, 1});
  ops::BatchStats stats;
  const BnRunning& r = net.bn[s.bn];
  Var y = ops::batch_norm(h, effective(b, s.gamma), effective(b, s.beta), training, &r.mean, &r.var, &stats);
  if (training) fold_bn(bn_update, s.bn, stats, y);
  return y;
}

Var op_slot_forward(const Supernet& net, const Binding& b, const OpSlot& slot, const Var& x, bool training,
                    std::vector<BnRunning>* bn_update) {
  std::vector<Var> pv;
  pv.reserve(slot.params.size());
  for (int id : slot.params) pv.push_back(effective(b, id));
  std::vector<ops::BatchStats> stats(slot.bns.size());
  std::vector<BnSlot> slots;
  for (std::size_t j = 0; j < slot.bns.size(); ++j) slots.push_back({&net.bn[slot.bns[j]], &stats[j]});
  Var y = op_forward(slot.kind, x, pv, slot.stride, training, slots);
  if (training)
    for (std::size_t j = 0; j < slot.bns.size(); ++j) fold_bn(bn_update, slot.bns[j], stats[j], y);
  return y;
}

bool all_zero(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
}

Shape strided_shape(const Shape& in, int channels, int stride) {
  return {in[0], channels, (in[2] + stride - 1) / stride, (in[3] + stride - 1) / stride};
}

}  // namespace

Var mixing_weights(const Var& alpha_row, const Var* mask_row) {
  Var s = ops::softmax(alpha_row);
  if (!mask_row) return ops::normalize(s);
  if (all_zero(mask_row->value())) return Var{};
  return ops::normalize(ops::mul(s, *mask_row));
}

Var mixed_op_forward(const Supernet& net, const Binding& b, int cell, int edge, const Var& x, bool training,
                     std::vector<BnRunning>* bn_update) {
  const CellLayout& L = net.cells.at(cell);
  const int k = static_cast<int>(L.kind);
  const auto& slots = L.edges.at(edge);
  Var row_mask;
  if (b.masked) row_mask = ops::row(b.m_alpha[k], edge);
  Var w = mixing_weights(ops::row(b.alpha[k], edge), b.masked ? &row_mask : nullptr);
  if (!w.valid()) {
    return x.tape()->constant(Tensor(strided_shape(x.shape(), L.channels, slots.front().stride), 0.0));
  }
  // Masked ops are still evaluated when the masks need gradients, so the
  // straight-through estimate can bring them back.
  const bool keep_masked = b.masked && b.m_alpha[k].requires_grad();
  std::vector<Var> terms;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (b.masked && !keep_masked && row_mask.value()[i] == 0.0) continue;
    Var y = op_slot_forward(net, b, slots[i], x, training, bn_update);
    terms.push_back(ops::scale(y, ops::select(w, static_cast<int>(i))));
  }
  return ops::add_n(terms);
}

Var edge_weights(const Var& beta_slice, const Var* mask_slice, const std::vector<bool>& edge_alive) {
  Var s = ops::softmax(beta_slice);
  if (!mask_slice) return ops::normalize(s);
  std::vector<double> alive(edge_alive.size());
  for (std::size_t j = 0; j < alive.size(); ++j) alive[j] = edge_alive[j] ? 1.0 : 0.0;
  Var eff = ops::mul(*mask_slice, beta_slice.tape()->constant(Tensor::vector(alive)));
  if (all_zero(eff.value())) return Var{};
  return ops::normalize(ops::mul(s, eff));
}

Var node_combine(std::span<const Var> edge_out, const Var& weights) {
  std::vector<Var> terms;
  for (std::size_t j = 0; j < edge_out.size(); ++j) {
    if (!edge_out[j].valid()) continue;
    terms.push_back(ops::scale(edge_out[j], ops::select(weights, static_cast<int>(j))));
  }
  if (terms.empty()) return Var{};
  return ops::add_n(terms);
}

namespace {

Var cell_forward(const Supernet& net, const Binding& b, int cell, const Var& s0_in, const Var& s1_in, bool training,
                 std::vector<BnRunning>* bn_update) {
  const CellLayout& L = net.cells[cell];
  const int k = static_cast<int>(L.kind);
  const int kk = net.spec.intermediate_nodes();
  Tape& tape = *s1_in.tape();
  std::vector<Var> states{conv_bn_forward(net, b, L.pre0, s0_in, training, bn_update),
                          conv_bn_forward(net, b, L.pre1, s1_in, training, bn_update)};
  const int stride = L.kind == CellKind::reduce ? 2 : 1;
  const Shape node_shape = strided_shape(states[1].shape(), L.channels, stride);
  const bool grad_masks = b.masked && b.m_beta[k].requires_grad();

  for (int i = 0; i < kk; ++i) {
    const int off = edge_offset(i), n_in = i + 2;
    std::vector<bool> alive(n_in, true);
    std::vector<bool> compute(n_in, true);
    if (b.masked) {
      const Tensor& ma = b.m_alpha[k].value();
      const Tensor& mb = b.m_beta[k].value();
      const int n_ops = ma.dim(1);
      for (int j = 0; j < n_in; ++j) {
        bool any_op = false;
        for (int o = 0; o < n_ops; ++o) any_op = any_op || ma[(off + j) * n_ops + o] != 0.0;
        alive[j] = any_op;
        compute[j] = any_op && (mb[off + j] != 0.0 || grad_masks);
      }
    }
    Var mslice;
    if (b.masked) mslice = ops::slice(b.m_beta[k], off, off + n_in);
    Var w = edge_weights(ops::slice(b.beta[k], off, off + n_in), b.masked ? &mslice : nullptr, alive);
    Var node;
    if (w.valid()) {
      std::vector<Var> outs(n_in);
      for (int j = 0; j < n_in; ++j) {
        if (compute[j]) outs[j] = mixed_op_forward(net, b, cell, off + j, states[j], training, bn_update);
      }
      node = node_combine(outs, w);
    }
    if (!node.valid()) node = tape.constant(Tensor(node_shape, 0.0));
    states.push_back(node);
  }
  return ops::concat_channels(std::span<const Var>(states).subspan(2));
}

}  // namespace

Var supernet_forward(const Supernet& net, const Binding& b, const Var& batch, bool training,
                     std::vector<BnRunning>* bn_update) {
  const Shape& s = batch.shape();
  if (s.size() != 4) throw RankError("supernet input must be (batch, channels, height, width), got " + shape_str(s));
  if (s[1] != net.spec.in_channels) {
    throw ShapeError("supernet expects " + std::to_string(net.spec.in_channels) + " input channels, got " +
                     std::to_string(s[1]));
  }
  const int min_size = 1 << net.spec.reduction_positions().size();
  if (s[2] < min_size || s[3] < min_size) {
    throw ShapeError("input " + shape_str(s) + " is too small for " +
                     std::to_string(net.spec.reduction_positions().size()) + " reduction cells");
  }
  Var stem = conv_bn_forward(net, b, net.stem, batch, training, bn_update);
  Var prev_prev = stem, prev = stem;
  for (std::size_t c = 0; c < net.cells.size(); ++c) {
    Var out = cell_forward(net, b, static_cast<int>(c), prev_prev, prev, training, bn_update);
    prev_prev = prev;
    prev = out;
  }
  return ops::linear(ops::global_avg_pool(prev), b.params[net.head_w], b.params[net.head_b]);
}

Tensor supernet_logits(const Supernet& net, const Tensor& batch, const BinaryMasks* masks, bool training) {
  Tape tape;
  Binding b = bind(tape, net, masks);
  return supernet_forward(net, b, tape.leaf(batch), training).value();
}

std::size_t count_scalars(std::span<const Tensor> tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

Survival survival(const Supernet& net, const BinaryMasks* masks) {
  Survival s;
  const int e = net.spec.num_edges(), n = net.spec.num_candidate_ops();
  for (int k = 0; k < kNumCellKinds; ++k) {
    s.op[k].assign(e, std::vector<bool>(n, true));
    s.edge[k].assign(e, true);
    if (!masks) continue;
    for (int edge = 0; edge < e; ++edge) {
      bool any = false;
      for (int o = 0; o < n; ++o) {
        s.op[k][edge][o] = masks->alpha[k][edge * n + o] != 0.0;
        any = any || s.op[k][edge][o];
      }
      s.edge[k][edge] = any && masks->beta[k][edge] != 0.0;
    }
  }
  return s;
}

std::size_t count_params(const Supernet& net, const BinaryMasks* masks) {
  if (masks) check_mask_shapes(net, *masks);
  std::vector<bool> dead(net.params.size(), false);
  if (masks) {
    const Survival sv = survival(net, masks);
    for (const auto& L : net.cells) {
      const int k = static_cast<int>(L.kind);
      for (std::size_t edge = 0; edge < L.edges.size(); ++edge)
        for (std::size_t o = 0; o < L.edges[edge].size(); ++o)
          if (!sv.edge[k][edge] || !sv.op[k][edge][o])
            for (int id : L.edges[edge][o].params) dead[id] = true;
    }
  }
  std::size_t n = 0;
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    if (dead[i]) continue;
    const auto& p = net.params[i];
    if (masks && p.maskable) {
      for (double v : masks->w[i].data()) n += v != 0.0;
    } else {
      n += p.value.numel();
    }
  }
  return n;
}

}  // namespace hmnas
