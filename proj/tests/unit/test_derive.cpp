#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "doctest.h"
#include "hmnas/derive.hpp"
#include "hmnas/error.hpp"
#include "test_util.hpp"

using namespace hmnas;
using hmnas::testing::random_tensor;

namespace {

SearchSpaceSpec micro_spec() {
  SearchSpaceSpec s;
  s.nodes_per_cell = 4;
  s.num_cells = 1;
  s.init_channels = 2;
  s.num_classes = 3;
  s.ops = {OpKind::sep_conv_3x3, OpKind::max_pool_3x3};
  s.reduction_cells = std::vector<int>{};
  return s;
}

SearchSpaceSpec five_node(std::vector<OpKind> ops) {
  SearchSpaceSpec s;
  s.nodes_per_cell = 5;
  s.num_cells = 2;
  s.init_channels = 2;
  s.ops = std::move(ops);
  s.reduction_cells = std::vector<int>{1};
  return s;
}

std::filesystem::path tmp(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / "hmnas_test_derive";
  std::filesystem::create_directories(d);
  return d / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

BinaryMasks random_op_edge_masks(const Supernet& net, Rng& rng, double density) {
  BinaryMasks m = net.all_ones_masks();
  for (int k = 0; k < kNumCellKinds; ++k) {
    for (double& v : m.alpha[k].data()) v = rng.bernoulli(density) ? 1.0 : 0.0;
    for (double& v : m.beta[k].data()) v = rng.bernoulli(density) ? 1.0 : 0.0;
  }
  return m;
}

}  // namespace

TEST_CASE("all-ones masks keep the full DAG") {
  SearchSpaceSpec s;
  Supernet net = build_supernet(s, 1);
  const DerivedArch a = from_masks(net, net.all_ones_masks());
  CHECK(a.provenance == Provenance::hierarchical_masks);
  CHECK(a.cells[0].size() == static_cast<std::size_t>(s.num_edges()));
  for (const auto& e : a.cells[0]) CHECK(e.ops.size() == s.ops.size());
  const OpHistogram h = op_histogram(a);
  CHECK(h.edges_per_node == std::vector<int>{2, 3, 4, 5});
  CHECK(h.ops_per_edge[s.ops.size()] == s.num_edges());
  CHECK_FALSE(a.degenerate());
}

TEST_CASE("edge masks override op masks") {
  Supernet net = build_supernet(five_node(all_op_kinds()), 2);
  BinaryMasks m = net.all_ones_masks();
  m.beta[0][3] = 0.0;
  const DerivedArch a = from_masks(net, m);
  const EdgeRef r = edge_ref(3);
  for (const auto& e : a.cells[0]) CHECK_FALSE((e.node == r.to - 2 && e.from == r.from));
  CHECK(a.cells[0].size() == 4);
}

TEST_CASE("from_masks matches a brute-force set construction") {
  Rng rng(5);
  Supernet net = build_supernet(five_node({OpKind::sep_conv_3x3, OpKind::avg_pool_3x3, OpKind::identity}), 3);
  const int n = 3;
  for (int trial = 0; trial < 50; ++trial) {
    const BinaryMasks m = random_op_edge_masks(net, rng, 0.6);
    const DerivedArch a = from_masks(net, m);
    for (int k = 0; k < kNumCellKinds; ++k) {
      std::set<std::pair<int, int>> want_edges;
      std::map<std::pair<int, int>, std::set<int>> want_ops;
      for (int node = 0; node < 2; ++node)
        for (int from = 0; from < node + 2; ++from) {
          const int e = (node == 0 ? 0 : 2) + from;
          std::set<int> ops;
          for (int o = 0; o < n; ++o)
            if (m.alpha[k][e * n + o] == 1.0) ops.insert(o);
          if (m.beta[k][e] == 1.0 && !ops.empty()) {
            want_edges.insert({node, from});
            want_ops[{node, from}] = ops;
          }
        }
      std::set<std::pair<int, int>> got_edges;
      double node_sum[2] = {0.0, 0.0};
      for (const auto& e : a.cells[k]) {
        got_edges.insert({e.node, e.from});
        CHECK(std::set<int>(e.ops.begin(), e.ops.end()) == want_ops[{e.node, e.from}]);
        node_sum[e.node] += e.importance;
      }
      CHECK(got_edges == want_edges);
      for (int node = 0; node < 2; ++node) {
        const bool any = std::any_of(want_edges.begin(), want_edges.end(), [&](auto p) { return p.first == node; });
        if (any) CHECK(std::abs(node_sum[node] - 1.0) < 1e-12);
      }
      const OpHistogram h = op_histogram(a, CellKind(k));
      std::vector<int> per_node(2, 0), per_ops(n + 1, 0);
      for (const auto& [edge, ops] : want_ops) {
        ++per_node[edge.first];
        ++per_ops[ops.size()];
      }
      CHECK(h.edges_per_node == per_node);
      CHECK(h.ops_per_edge == per_ops);
    }
  }
}

TEST_CASE("heuristic ordering and tie-break") {
  Supernet net = build_supernet(five_node({OpKind::sep_conv_3x3, OpKind::max_pool_3x3, OpKind::identity}), 1);
  // node 1 (three predecessors) gets beta (0.9, 0.1, 0.05)
  net.arch.beta[0][2] = 0.9;
  net.arch.beta[0][3] = 0.1;
  net.arch.beta[0][4] = 0.05;
  // alpha row (0.2, 0.2, 0.1) on edge 2
  net.arch.alpha[0][2 * 3 + 0] = 0.2;
  net.arch.alpha[0][2 * 3 + 1] = 0.2;
  net.arch.alpha[0][2 * 3 + 2] = 0.1;
  const DerivedArch a = derive_heuristic(net, EncodingLevel::multi);
  std::vector<int> node1;
  for (const auto& e : a.cells[0])
    if (e.node == 1) node1.push_back(e.from);
  CHECK(node1 == std::vector<int>{0, 1});
  CHECK(a.cells[0][2].from == 0);
  CHECK(a.cells[0][2].ops == std::vector<int>{0});
}

TEST_CASE("single and multi level disagree when beta contradicts alpha") {
  Supernet net = build_supernet(five_node({OpKind::sep_conv_3x3, OpKind::max_pool_3x3}), 1);
  for (int k = 0; k < kNumCellKinds; ++k) {
    net.arch.alpha[k].fill(0.0);
    net.arch.beta[k].fill(0.0);
  }
  // node 1: beta prefers predecessors 2 and 1; alpha confidence prefers 0 and 1
  const double beta[3] = {-1.0, 0.5, 1.0};
  const double conf[3] = {2.0, 1.0, 0.1};  // alpha gap on each edge's row
  for (int j = 0; j < 3; ++j) {
    net.arch.beta[0][2 + j] = beta[j];
    net.arch.alpha[0][(2 + j) * 2 + 1] = conf[j];
  }
  const DerivedArch multi = derive_heuristic(net, EncodingLevel::multi);
  const DerivedArch single = derive_heuristic(net, EncodingLevel::single);
  auto froms = [](const DerivedArch& a) {
    std::vector<int> f;
    for (const auto& e : a.cells[0])
      if (e.node == 1) f.push_back(e.from);
    return f;
  };
  CHECK(froms(multi) == std::vector<int>{1, 2});
  CHECK(froms(single) == std::vector<int>{0, 1});
  for (const DerivedArch* a : {&multi, &single}) {
    for (int k : used_kinds(a->spec)) {
      const OpHistogram h = op_histogram(*a, CellKind(k));
      for (int c : h.edges_per_node) CHECK(c == 2);
      CHECK(h.ops_per_edge[1] == 4);
    }
  }
  // shifting a node's beta keeps the selection
  Supernet shifted = net;
  for (int j = 0; j < 3; ++j) shifted.arch.beta[0][2 + j] += 3.5;
  CHECK(derive_heuristic(shifted, EncodingLevel::multi).cells == multi.cells);
}

TEST_CASE("random architectures") {
  const SearchSpaceSpec s = micro_spec();
  CHECK(sample_random_arch(s, 3) == sample_random_arch(s, 3));
  const DerivedArch a = sample_random_arch(s, 3);
  CHECK(a.cells[0].size() == 2);
  for (const auto& e : a.cells[0]) CHECK(e.ops.size() == 1);

  // four possible architectures: one op choice per edge
  std::map<std::pair<int, int>, int> freq;
  const int n = 10000;
  for (int seed = 0; seed < n; ++seed) {
    const DerivedArch r = sample_random_arch(s, seed);
    ++freq[{r.cells[0][0].ops[0], r.cells[0][1].ops[0]}];
  }
  CHECK(freq.size() == 4);
  const double p = 0.25, mean = n * p, sd = std::sqrt(n * p * (1 - p));
  double chi2 = 0.0;
  for (const auto& [arch, c] : freq) {
    CHECK(std::abs(c - mean) < 3 * sd);
    chi2 += (c - mean) * (c - mean) / mean;
  }
  CHECK(chi2 < 16.27);  // 3 dof, p = 0.001

  SearchSpaceSpec big;
  const DerivedArch b = sample_random_arch(big, 9);
  for (int k = 0; k < kNumCellKinds; ++k) {
    const OpHistogram h = op_histogram(b, CellKind(k));
    for (int c : h.edges_per_node) CHECK(c == 2);
  }
}

TEST_CASE("edge importance report") {
  SearchSpaceSpec s;
  Supernet net = build_supernet(s, 4);
  const auto rows = edge_importance_report(net);
  std::map<std::pair<int, int>, double> sums;
  for (const auto& r : rows) {
    sums[{r.kind, r.node}] += r.importance;
    CHECK(std::abs(r.importance - 1.0 / (r.node + 2)) < 1e-3);
  }
  for (const auto& [key, v] : sums) CHECK(std::abs(v - 1.0) < 1e-12);
  const auto means = node_mean_importance(rows, 0, s.intermediate_nodes());
  for (int i = 0; i < s.intermediate_nodes(); ++i) CHECK(std::abs(means[i] - 1.0 / (i + 2)) < 1e-12);

  Supernet shifted = net;
  for (double& v : shifted.arch.beta[0].data()) v += 0.75;
  const auto rows2 = edge_importance_report(shifted);
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(std::abs(rows2[i].importance - rows[i].importance) < 1e-15);
}

TEST_CASE("importance aggregation matches a recomputation from the CSVs") {
  SearchSpaceSpec s;
  s.nodes_per_cell = 5;
  std::vector<std::vector<ImportanceRow>> runs;
  std::vector<std::filesystem::path> files;
  for (int seed = 0; seed < 5; ++seed) {
    Supernet net = build_supernet(s, seed);
    Rng rng(seed);
    for (double& v : net.arch.beta[0].data()) v = rng.normal();
    runs.push_back(edge_importance_report(net));
    files.push_back(tmp("imp" + std::to_string(seed) + ".csv"));
    write_importance_csv(runs.back(), files.back());
  }
  const auto stats = aggregate_importance(runs);
  write_importance_stats_csv(stats, tmp("imp_stats.csv"));

  // spreadsheet-style: read every file's column, then mean and sample sd
  std::map<std::string, std::vector<double>> cols;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto cut = line.rfind(',');
      cols[line.substr(0, cut)].push_back(std::strtod(line.c_str() + cut + 1, nullptr));
    }
  }
  CHECK(cols.size() == stats.size());
  for (const auto& st : stats) {
    const std::string key = std::string(cell_kind_name(CellKind(st.kind))) + "," + std::to_string(st.node) + "," +
                            std::to_string(st.from);
    const auto& v = cols.at(key);
    double m = 0.0;
    for (double x : v) m += x;
    m /= v.size();
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    var /= v.size() - 1;
    CHECK(st.n == 5);
    CHECK(std::abs(st.mean - m) < 1e-15);
    CHECK(std::abs(st.stddev - std::sqrt(var)) < 1e-15);
  }
  const auto back = read_importance_csv(files[0]);
  REQUIRE(back.size() == runs[0].size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i].importance == runs[0][i].importance);
}

TEST_CASE("every discrete micro setting matches the explicit network") {
  // per edge: off, op 0 or op 1; everything off is excluded
  int settings = 0;
  for (int c0 = 0; c0 < 3; ++c0)
    for (int c1 = 0; c1 < 3; ++c1) {
      if (c0 == 0 && c1 == 0) continue;
      ++settings;
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Supernet net = build_supernet(micro_spec(), seed);
        Rng rng(seed + 40);
        for (double& v : net.arch.alpha[0].data()) v = rng.normal();
        for (double& v : net.arch.beta[0].data()) v = rng.normal();
        for (auto& b : net.bn) {
          for (double& v : b.mean.data()) v = 0.1 * rng.normal();
          for (double& v : b.var.data()) v = 1.0 + 0.2 * rng.uniform();
        }
        BinaryMasks m = net.all_ones_masks();
        const int choice[2] = {c0, c1};
        for (int e = 0; e < 2; ++e) {
          m.beta[0][e] = choice[e] ? 1.0 : 0.0;
          for (int o = 0; o < 2; ++o) m.alpha[0][e * 2 + o] = choice[e] == o + 1 ? 1.0 : 0.0;
        }
        const DerivedArch a = from_masks(net, m);
        const Tensor x = random_tensor({3, 3, 6, 6}, seed + 7);
        for (bool training : {true, false})
          CHECK(max_abs_diff(supernet_logits(net, x, &m, training), discrete_forward(net, a, x, training)) < 1e-10);
      }
    }
  CHECK(settings == 8);
}

TEST_CASE("masked supernet equals the rebuilt network on larger cells") {
  Rng rng(11);
  Supernet net = build_supernet(five_node({OpKind::sep_conv_3x3, OpKind::dil_conv_3x3, OpKind::max_pool_3x3,
                                           OpKind::avg_pool_3x3, OpKind::identity}),
                                3);
  for (int k = 0; k < kNumCellKinds; ++k) {
    for (double& v : net.arch.alpha[k].data()) v = rng.normal();
    for (double& v : net.arch.beta[k].data()) v = rng.normal();
  }
  for (int trial = 0; trial < 10; ++trial) {
    const BinaryMasks m = random_op_edge_masks(net, rng, 0.6);
    const DerivedArch a = from_masks(net, m);
    const Tensor x = random_tensor({2, 3, 8, 8}, trial);
    CHECK(max_abs_diff(supernet_logits(net, x, &m, true), discrete_forward(net, a, x, true)) < 1e-10);
    const BinaryMasks back = arch_masks(net, a);
    CHECK(max_abs_diff(supernet_logits(net, x, &back, true), supernet_logits(net, x, &m, true)) < 1e-12);
  }
}

TEST_CASE("dot export") {
  DerivedArch empty;
  empty.spec = micro_spec();
  const std::string e = dot_string(empty);
  CHECK(e.find("->") == std::string::npos);
  CHECK(e.find("c_{k-2}") != std::string::npos);
  CHECK(e.find("c_{k}") != std::string::npos);
  CHECK(empty.degenerate());

  Supernet net = build_supernet(five_node({OpKind::sep_conv_3x3, OpKind::max_pool_3x3}), 2);
  BinaryMasks m = net.all_ones_masks();
  m.alpha[0][1] = 0.0;  // edge 0 keeps one op, the rest keep both
  const DerivedArch a = from_masks(net, m);
  export_dot(a, tmp("a.dot"));
  export_dot(a, tmp("b.dot"));
  CHECK(slurp(tmp("a.dot")) == slurp(tmp("b.dot")));

  const std::string text = slurp(tmp("a.dot"));
  const std::regex edge_re("\"normal:([^\"]+)\" -> \"normal:(\\d+)\" \\[label=\"([a-z0-9_,]+) ([0-9.]+)\"\\]");
  std::map<std::pair<std::string, int>, std::pair<std::string, std::string>> parsed;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), edge_re); it != std::sregex_iterator(); ++it)
    parsed[{(*it)[1], std::stoi((*it)[2])}] = {(*it)[3], (*it)[4]};
  CHECK(parsed.size() == a.cells[0].size());
  const auto two = parsed.at({"c_{k-1}", 0});
  CHECK(two.first == "sep_conv_3x3,max_pool_3x3");
  CHECK(parsed.at({"c_{k-2}", 0}).first == "sep_conv_3x3");
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.3f", a.cells[0][1].importance);
  CHECK(two.second == buf);
  CHECK_THROWS_AS(export_dot(a, "/nonexistent-dir/x.dot"), PathError);
}
