#include "hmnas/derive.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <tuple>
#include <sstream>

#include "hmnas/error.hpp"
#include "hmnas/ops.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::hierarchical_masks: return "hierarchical_masks";
    case Provenance::heuristic_top2: return "heuristic_top2";
    case Provenance::random: return "random";
  }
  return "?";
}

std::vector<int> used_kinds(const SearchSpaceSpec& spec) {
  std::vector<int> k{static_cast<int>(CellKind::normal)};
  if (!spec.reduction_positions().empty()) k.push_back(static_cast<int>(CellKind::reduce));
  if (static_cast<int>(spec.reduction_positions().size()) == spec.num_cells) k.erase(k.begin());
  return k;
}

bool DerivedArch::degenerate() const {
  for (int k : used_kinds(spec))
    if (cells[k].empty()) return true;
  return false;
}

namespace {

std::vector<double> softmax(const double* v, int n) {
  std::vector<double> out(v, v + n);
  const double m = *std::max_element(out.begin(), out.end());
  double s = 0.0;
  for (double& x : out) s += (x = std::exp(x - m));
  for (double& x : out) x /= s;
  return out;
}

std::vector<double> alpha_softmax(const Supernet& net, int k, int edge) {
  const int n = net.spec.num_candidate_ops();
  return softmax(net.arch.alpha[k].data().data() + static_cast<std::size_t>(edge) * n, n);
}

std::vector<double> beta_softmax(const Supernet& net, int k, int node) {
  return softmax(net.arch.beta[k].data().data() + edge_offset(node), node + 2);
}

void sort_edges(DerivedArch& a) {
  for (auto& c : a.cells)
    std::sort(c.begin(), c.end(), [](const DerivedEdge& x, const DerivedEdge& y) {
      return x.node != y.node ? x.node < y.node : x.from < y.from;
    });
}

}  // namespace

void attach_importance(DerivedArch& arch, const Supernet& net) {
  if (!(arch.spec == net.spec)) throw SpecError("architecture and supernet use different search spaces");
  for (int k = 0; k < kNumCellKinds; ++k) {
    for (int i = 0; i < net.spec.intermediate_nodes(); ++i) {
      const auto p = beta_softmax(net, k, i);
      double total = 0.0;
      for (const auto& e : arch.cells[k])
        if (e.node == i) total += p[e.from];
      for (auto& e : arch.cells[k])
        if (e.node == i) e.importance = p[e.from] / total;
    }
  }
}

DerivedArch from_masks(const Supernet& net, const BinaryMasks& masks) {
  check_mask_shapes(net, masks);
  DerivedArch a;
  a.spec = net.spec;
  a.provenance = Provenance::hierarchical_masks;
  const int n = net.spec.num_candidate_ops();
  for (int k = 0; k < kNumCellKinds; ++k) {
    for (int e = 0; e < net.spec.num_edges(); ++e) {
      if (masks.beta[k][e] == 0.0) continue;
      DerivedEdge d{edge_ref(e).to - 2, edge_ref(e).from, {}, 0.0};
      for (int o = 0; o < n; ++o)
        if (masks.alpha[k][e * n + o] != 0.0) d.ops.push_back(o);
      if (!d.ops.empty()) a.cells[k].push_back(d);
    }
  }
  sort_edges(a);
  attach_importance(a, net);
  return a;
}

DerivedArch derive_heuristic(const Supernet& net, EncodingLevel level) {
  DerivedArch a;
  a.spec = net.spec;
  a.provenance = Provenance::heuristic_top2;
  for (int k = 0; k < kNumCellKinds; ++k) {
    for (int i = 0; i < net.spec.intermediate_nodes(); ++i) {
      const auto pb = beta_softmax(net, k, i);
      std::vector<std::pair<double, int>> score;  // (strength, from)
      std::vector<int> best_op(i + 2);
      for (int j = 0; j < i + 2; ++j) {
        const auto pa = alpha_softmax(net, k, edge_index(i, j));
        best_op[j] = static_cast<int>(std::max_element(pa.begin(), pa.end()) - pa.begin());
        score.push_back({level == EncodingLevel::multi ? pb[j] : pa[best_op[j]], j});
      }
      // strongest first, lower predecessor on ties
      std::stable_sort(score.begin(), score.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
      for (int r = 0; r < 2; ++r) a.cells[k].push_back({i, score[r].second, {best_op[score[r].second]}, 0.0});
    }
  }
  sort_edges(a);
  attach_importance(a, net);
  return a;
}

DerivedArch sample_random_arch(const SearchSpaceSpec& spec, std::uint64_t seed) {
  spec.validate();
  DerivedArch a;
  a.spec = spec;
  a.provenance = Provenance::random;
  Rng rng(derive_seed(seed, "random-arch"));
  const int n = spec.num_candidate_ops();
  for (int k = 0; k < kNumCellKinds; ++k) {
    for (int i = 0; i < spec.intermediate_nodes(); ++i) {
      std::vector<int> preds(i + 2);
      std::iota(preds.begin(), preds.end(), 0);
      rng.shuffle(preds.begin(), preds.end());
      for (int r = 0; r < 2; ++r) a.cells[k].push_back({i, preds[r], {static_cast<int>(rng.below(n))}, 0.0});
    }
    // equal split until a supernet supplies β
    for (auto& e : a.cells[k]) e.importance = 0.5;
  }
  sort_edges(a);
  return a;
}

BinaryMasks arch_masks(const Supernet& net, const DerivedArch& arch) {
  if (!(arch.spec == net.spec)) throw SpecError("architecture and supernet use different search spaces");
  BinaryMasks m = net.all_ones_masks();
  const int n = net.spec.num_candidate_ops();
  for (int k = 0; k < kNumCellKinds; ++k) {
    m.alpha[k].fill(0.0);
    m.beta[k].fill(0.0);
    for (const auto& e : arch.cells[k]) {
      const int id = edge_index(e.node, e.from);
      m.beta[k][id] = 1.0;
      for (int o : e.ops) m.alpha[k][id * n + o] = 1.0;
    }
  }
  return m;
}

Tensor discrete_forward(const Supernet& net, const DerivedArch& arch, const Tensor& batch, bool training) {
  if (!(arch.spec == net.spec)) throw SpecError("architecture and supernet use different search spaces");
  Tape t;
  std::vector<Var> P;
  for (const auto& p : net.params) P.push_back(t.leaf(p.value));
  auto conv_bn = [&](const ConvBnSlot& s, Var h) {
    if (s.relu) h = ops::relu(h);
    const int ks = net.params[s.conv].value.dim(2);
    h = ops::conv2d(h, P[s.conv], {s.stride, (ks - 1) / 2, 1, 1});
    return ops::batch_norm(h, P[s.gamma], P[s.beta], training, &net.bn[s.bn].mean, &net.bn[s.bn].var);
  };
  auto run_op = [&](const OpSlot& slot, const Var& x) {
    std::vector<Var> pv;
    for (int id : slot.params) pv.push_back(P[id]);
    std::vector<BnSlot> bn;
    for (int id : slot.bns) bn.push_back({&net.bn[id], nullptr});
    return op_forward(slot.kind, x, pv, slot.stride, training, bn);
  };

  Var stem = conv_bn(net.stem, t.leaf(batch));
  Var s0 = stem, s1 = stem;
  for (const auto& L : net.cells) {
    const int k = static_cast<int>(L.kind);
    std::vector<Var> states{conv_bn(L.pre0, s0), conv_bn(L.pre1, s1)};
    const int stride = L.kind == CellKind::reduce ? 2 : 1;
    const Shape& in = states[1].shape();
    const Shape node_shape{in[0], L.channels, (in[2] + stride - 1) / stride, (in[3] + stride - 1) / stride};
    for (int i = 0; i < net.spec.intermediate_nodes(); ++i) {
      std::vector<Var> terms;
      for (const auto& e : arch.cells[k]) {
        if (e.node != i) continue;
        const int id = edge_index(i, e.from);
        const auto pa = alpha_softmax(net, k, id);
        double kept = 0.0;
        for (int o : e.ops) kept += pa[o];
        std::vector<Var> mixed;
        for (int o : e.ops) mixed.push_back(ops::mul_const(run_op(L.edges[id][o], states[e.from]), pa[o] / kept));
        terms.push_back(ops::mul_const(ops::add_n(mixed), e.importance));
      }
      states.push_back(terms.empty() ? t.constant(Tensor(node_shape, 0.0)) : ops::add_n(terms));
    }
    Var out = ops::concat_channels(std::span<const Var>(states).subspan(2));
    s0 = s1;
    s1 = out;
  }
  return ops::linear(ops::global_avg_pool(s1), P[net.head_w], P[net.head_b]).value();
}

std::vector<ImportanceRow> edge_importance_report(const Supernet& net) {
  std::vector<ImportanceRow> rows;
  for (int k : net.used_kinds())
    for (int i = 0; i < net.spec.intermediate_nodes(); ++i) {
      const auto p = beta_softmax(net, k, i);
      for (int j = 0; j < i + 2; ++j) rows.push_back({k, i, j, p[j]});
    }
  return rows;
}

std::vector<double> node_mean_importance(const std::vector<ImportanceRow>& rows, int kind, int nodes) {
  std::vector<double> sum(nodes, 0.0), cnt(nodes, 0.0);
  for (const auto& r : rows) {
    if (r.kind != kind || r.node < 0 || r.node >= nodes) continue;
    sum[r.node] += r.importance;
    cnt[r.node] += 1.0;
  }
  for (int i = 0; i < nodes; ++i) sum[i] = cnt[i] > 0 ? sum[i] / cnt[i] : 0.0;
  return sum;
}

std::vector<ImportanceStat> aggregate_importance(const std::vector<std::vector<ImportanceRow>>& runs) {
  std::map<std::tuple<int, int, int>, std::vector<double>> by_edge;
  for (const auto& run : runs)
    for (const auto& r : run) by_edge[{r.kind, r.node, r.from}].push_back(r.importance);
  std::vector<ImportanceStat> out;
  for (const auto& [key, v] : by_edge) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const auto [kind, node, from] = key;
    out.push_back({kind, node, from, mean, v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0, static_cast<int>(v.size())});
  }
  return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw PathError("cannot open " + path.string() + " for writing");
  return f;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

void write_importance_csv(const std::vector<ImportanceRow>& rows, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << "kind,node,from,importance\n";
  for (const auto& r : rows)
    f << cell_kind_name(CellKind(r.kind)) << ',' << r.node << ',' << r.from << ',' << fmt("%.17g", r.importance) << '\n';
  if (!f) throw PathError("failed writing " + path.string());
}

std::vector<ImportanceRow> read_importance_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw PathError("cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "kind,node,from,importance") throw FormatError("unexpected importance CSV header", 0);
  std::vector<ImportanceRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string kind, node, from, imp;
    std::getline(ss, kind, ',');
    std::getline(ss, node, ',');
    std::getline(ss, from, ',');
    std::getline(ss, imp, ',');
    const int k = kind == "normal" ? 0 : kind == "reduce" ? 1 : -1;
    if (k < 0) throw FormatError("unknown cell kind '" + kind + "' in importance CSV", 0);
    rows.push_back({k, std::stoi(node), std::stoi(from), std::stod(imp)});
  }
  return rows;
}

void write_importance_stats_csv(const std::vector<ImportanceStat>& stats, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << "kind,node,from,mean,std,n\n";
  for (const auto& s : stats)
    f << cell_kind_name(CellKind(s.kind)) << ',' << s.node << ',' << s.from << ',' << fmt("%.17g", s.mean) << ','
      << fmt("%.17g", s.stddev) << ',' << s.n << '\n';
  if (!f) throw PathError("failed writing " + path.string());
}

OpHistogram op_histogram(const DerivedArch& arch, CellKind kind) {
  OpHistogram h;
  h.edges_per_node.assign(arch.spec.intermediate_nodes(), 0);
  h.ops_per_edge.assign(arch.spec.num_candidate_ops() + 1, 0);
  for (const auto& e : arch.cells[static_cast<int>(kind)]) {
    ++h.edges_per_node.at(e.node);
    ++h.ops_per_edge.at(e.ops.size());
  }
  return h;
}

void write_histogram_csvs(const OpHistogram& h, const std::filesystem::path& edges_csv,
                          const std::filesystem::path& ops_csv) {
  auto f = open_out(edges_csv);
  f << "node_index,num_edges\n";
  for (std::size_t i = 0; i < h.edges_per_node.size(); ++i) f << i << ',' << h.edges_per_node[i] << '\n';
  auto g = open_out(ops_csv);
  g << "num_ops,num_edges\n";
  for (std::size_t n = 1; n < h.ops_per_edge.size(); ++n) g << n << ',' << h.ops_per_edge[n] << '\n';
  if (!f || !g) throw PathError("failed writing histogram CSVs");
}

namespace {

std::string node_label(int id) {
  if (id == 0) return "c_{k-2}";
  if (id == 1) return "c_{k-1}";
  return std::to_string(id - 2);
}

}  // namespace

std::string dot_string(const DerivedArch& arch) {
  std::ostringstream o;
  o << "digraph arch {\n  rankdir=LR;\n";
  for (int k : used_kinds(arch.spec)) {
    const std::string kn = cell_kind_name(CellKind(k));
    auto id = [&](const std::string& label) { return "\"" + kn + ":" + label + "\""; };
    o << "  subgraph cluster_" << kn << " {\n    label=\"" << kn << "\";\n";
    std::vector<bool> live(arch.spec.intermediate_nodes(), false);
    for (const auto& e : arch.cells[k]) live[e.node] = true;
    o << "    " << id("c_{k-2}") << " [label=\"c_{k-2}\"];\n";
    o << "    " << id("c_{k-1}") << " [label=\"c_{k-1}\"];\n";
    for (int i = 0; i < arch.spec.intermediate_nodes(); ++i)
      if (live[i]) o << "    " << id(std::to_string(i)) << " [label=\"" << i << "\"];\n";
    o << "    " << id("c_{k}") << " [label=\"c_{k}\"];\n";
    for (const auto& e : arch.cells[k]) {
      std::string ops;
      for (std::size_t j = 0; j < e.ops.size(); ++j) {
        if (j) ops += ',';
        ops += op_name(arch.spec.ops[e.ops[j]]);
      }
      o << "    " << id(node_label(e.from)) << " -> " << id(std::to_string(e.node)) << " [label=\"" << ops << " "
        << fmt("%.3f", e.importance) << "\"];\n";
    }
    for (int i = 0; i < arch.spec.intermediate_nodes(); ++i)
      if (live[i]) o << "    " << id(std::to_string(i)) << " -> " << id("c_{k}") << ";\n";
    o << "  }\n";
  }
  o << "}\n";
  return o.str();
}

void export_dot(const DerivedArch& arch, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << dot_string(arch);
  if (!f) throw PathError("failed writing " + path.string());
}

}  // namespace hmnas
