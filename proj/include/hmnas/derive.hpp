#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hmnas/searchspace.hpp"

namespace hmnas {

enum class Provenance { hierarchical_masks, heuristic_top2, random };
const char* provenance_name(Provenance p);

// Which encoding the heuristic ranks edges by: multi uses softmax(β),
// single ignores β and uses each edge's strongest op weight.
enum class EncodingLevel { single, multi };

struct DerivedEdge {
  int node;              // intermediate index (0-based)
  int from;              // predecessor id: 0 = c_{k-2}, 1 = c_{k-1}, 2.. = intermediates
  std::vector<int> ops;  // indices into spec.ops, ascending
  double importance = 0.0;
  bool operator==(const DerivedEdge&) const = default;
};

struct DerivedArch {
  SearchSpaceSpec spec;
  Provenance provenance = Provenance::hierarchical_masks;
  std::array<std::vector<DerivedEdge>, kNumCellKinds> cells;  // sorted by (node, from)

  // True if a cell kind in use has no surviving edge at all.
  bool degenerate() const;
  bool operator==(const DerivedArch&) const = default;
};

std::vector<int> used_kinds(const SearchSpaceSpec& spec);

DerivedArch from_masks(const Supernet& net, const BinaryMasks& masks);
DerivedArch derive_heuristic(const Supernet& net, EncodingLevel level);
// Uniform: two distinct incoming edges per node, one op per edge.
DerivedArch sample_random_arch(const SearchSpaceSpec& spec, std::uint64_t seed);

// Fills edge importance with softmax(β) renormalized over each node's surviving edges.
void attach_importance(DerivedArch& arch, const Supernet& net);

// Op and edge masks selecting exactly the architecture; weight masks all ones.
BinaryMasks arch_masks(const Supernet& net, const DerivedArch& arch);

/// Evaluates the architecture as an explicit network: every surviving op on
/// every surviving edge, op weights from softmax(α) renormalized over the
/// kept ops, edge weights from `importance`. Uses the supernet's weights.
Tensor discrete_forward(const Supernet& net, const DerivedArch& arch, const Tensor& batch, bool training);

struct ImportanceRow {
  int kind;
  int node;
  int from;
  double importance;
};
// Per intermediate node, softmax(β) over its incoming edges.
std::vector<ImportanceRow> edge_importance_report(const Supernet& net);
// Mean incoming importance per (kind, node).
std::vector<double> node_mean_importance(const std::vector<ImportanceRow>& rows, int kind, int nodes);

struct ImportanceStat {
  int kind, node, from;
  double mean, stddev;  // sample standard deviation (n - 1)
  int n;
};
std::vector<ImportanceStat> aggregate_importance(const std::vector<std::vector<ImportanceRow>>& runs);

void write_importance_csv(const std::vector<ImportanceRow>& rows, const std::filesystem::path& path);
std::vector<ImportanceRow> read_importance_csv(const std::filesystem::path& path);
void write_importance_stats_csv(const std::vector<ImportanceStat>& stats, const std::filesystem::path& path);

struct OpHistogram {
  std::vector<int> edges_per_node;  // [node]
  std::vector<int> ops_per_edge;    // [num_ops] -> number of edges, index 0 unused
};
OpHistogram op_histogram(const DerivedArch& arch, CellKind kind = CellKind::normal);
void write_histogram_csvs(const OpHistogram& h, const std::filesystem::path& edges_csv,
                          const std::filesystem::path& ops_csv);

std::string dot_string(const DerivedArch& arch);
void export_dot(const DerivedArch& arch, const std::filesystem::path& path);

}  // namespace hmnas
