#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ibg/basis.hpp"
#include "ibg/common.hpp"
#include "ibg/edges.hpp"
#include "ibg/model.hpp"

namespace ibg {

enum class Metric { Accuracy = 0, CrossEntropy = 1 };

// One feature node of the interaction graph: its coordinate in the basis,
// its importance (the basis eigenvalue), an optional interpretation label,
// and the community assigned by clustering (-1 until then).
struct GraphNode {
  Eigen::Index index = 0;
  double importance = 0.0;
  std::string label;
  int community = -1;
};

// A basis bundle plus one edge matrix per section gap. Nodes per section are
// listed in decreasing importance; node 0 of each section is the constant.
struct InteractionGraph {
  BasisBundle basis;
  std::vector<EdgeMatrix> gaps;
  std::vector<std::vector<GraphNode>> nodes;
};

// Validates shape and dataset consistency and derives the node lists.
InteractionGraph build_graph(BasisBundle basis, std::vector<EdgeMatrix> gaps);

// Per-gap 0/1 matrices, same shape as the edge matrices: 1 keeps the edge,
// 0 severs the input node from that output node's recomputation.
using EdgeMasks = std::vector<Mat>;

EdgeMasks full_masks(const InteractionGraph& graph);

// Mean task metric over a batch of logits: fraction of correct argmax rows,
// or mean cross entropy via a stable log-softmax.
double eval_metric(const Mat& logits, const std::vector<int32_t>& labels, Metric metric);

// Runs the network with the given edge masks applied and returns the metric
// on the batch. With every mask all ones the result is bit-identical to the
// plain forward pass. Output nodes sharing a mask row share one forward.
double ablate_edges(const SequentialNetwork& net, const Batch& batch,
                    const std::vector<int32_t>& labels, const InteractionGraph& graph,
                    const EdgeMasks& masks, Metric metric);

struct AblationReport {
  std::string kind;  // "edge" or "node"
  Metric metric = Metric::Accuracy;
  double threshold = 0.0;
  Eigen::Index kept = 0;
  double metric_at_kept = 0.0;
  int iterations = 0;
  bool attainable = true;
  double epsilon = 0.0;  // value of the smallest kept edge
  std::vector<std::pair<Eigen::Index, double>> curve;
};

// Minimal number of edges of one gap (sorted by size, ties by indices) whose
// retention keeps the metric at or past the threshold; binary search over
// the cut point. Other gaps stay fully intact.
AblationReport bisect_min_edges(const SequentialNetwork& net, const Batch& batch,
                                const std::vector<int32_t>& labels, const InteractionGraph& graph,
                                int gap, double threshold, Metric metric);

// Metric as a function of how many of a section's nonconstant nodes are
// kept, in decreasing importance order. The constant node always stays.
AblationReport node_ablation_curve(const SequentialNetwork& net, const Batch& batch,
                                   const std::vector<int32_t>& labels,
                                   const InteractionGraph& graph, int section, Metric metric,
                                   double threshold);

struct ModularityResult {
  std::vector<std::vector<int>> community;  // per section, per node id
  double gamma = 1.0;
  double eps = 0.0;
  double q = 0.0;
  int restarts = 0;
};

// Leiden clustering of the undirected graph whose vertices are all nodes of
// all sections and whose weights are log(e / eps) for edges above eps. The
// best of ten seeded restarts wins; equal scores keep the earliest restart.
ModularityResult cluster_modules(const InteractionGraph& graph, double eps, double gamma,
                                 uint64_t seed);

// Score of a given assignment under the same scaled-edge objective.
double modularity_q(const InteractionGraph& graph, const std::vector<std::vector<int>>& community,
                    double eps, double gamma);

// Copies community ids onto the graph's node lists.
void apply_communities(InteractionGraph& graph, const ModularityResult& result);

struct ProbeReport {
  int section = 0;
  Eigen::Index feature = 0;
  double auroc = 0.5;
  bool flipped = false;
  double variance_fraction = 0.0;
  double base_metric = 0.0;
  double intervened_metric = 0.0;
  double delta = 0.0;
};

// Reads one feature at the last token of a section against binary labels:
// rank AUROC (orientation-corrected), the fraction of the feature's variance
// explained by the labels, and the accuracy change when each datapoint's
// feature value is replaced by its class-conditional mean.
ProbeReport probe_metrics(const SequentialNetwork& net, const Batch& batch,
                          const std::vector<int32_t>& labels, const InteractionGraph& graph,
                          int section, Eigen::Index feature);

// Serializes nodes, communities, and all edge values.
void export_graph_json(const InteractionGraph& graph, const std::string& path);

// Graphviz rendering; edges below min_edge are dropped and each gap keeps at
// most max_edges_per_gap of its largest edges (0 disables the cap).
void export_graph_dot(const InteractionGraph& graph, const std::string& path,
                      double min_edge = 0.0, Eigen::Index max_edges_per_gap = 0);

}  // namespace ibg
