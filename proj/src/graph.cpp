#include "ibg/graph.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>

#include "ibg/util.hpp"

namespace ibg {

namespace {

const char* kind_name(BasisKind k) {
  switch (k) {
    case BasisKind::Neuron: return "neuron";
    case BasisKind::Pca: return "pca";
    case BasisKind::Lib: return "lib";
    case BasisKind::Gib: return "gib";
  }
  return "unknown";
}

bool all_ones(const Mat& m) { return (m.array() == 1.0).all(); }

bool binary_entries(const Mat& m) {
  return ((m.array() == 0.0) || (m.array() == 1.0)).all();
}

void check_masks(const InteractionGraph& graph, const EdgeMasks& masks) {
  check(masks.size() == graph.gaps.size(), "one mask per section gap expected");
  for (size_t g = 0; g < masks.size(); ++g) {
    check(masks[g].rows() == graph.gaps[g].e.rows() && masks[g].cols() == graph.gaps[g].e.cols(),
          "mask shape does not match the edge matrix");
    check(binary_entries(masks[g]), "mask entries must be 0 or 1");
  }
}

// Shared state for repeated masked evaluations on one batch.
struct EvalContext {
  const SequentialNetwork& net;
  const Batch& batch;
  const std::vector<int32_t>& labels;
  ActivationRecord acts;
  Mat base_logits;
};

EvalContext make_context(const SequentialNetwork& net, const Batch& batch,
                         const std::vector<int32_t>& labels) {
  check(static_cast<Eigen::Index>(labels.size()) == batch.n, "one label per datapoint expected");
  return EvalContext{net, batch, labels, forward_sections(net, batch), logits(net, batch)};
}

// Output nodes sharing a mask row share one masked forward pass.
struct MaskGroups {
  bool all_ones = false;
  std::vector<std::pair<Vec, std::vector<Eigen::Index>>> groups;
};

MaskGroups group_rows(const Mat& mask) {
  MaskGroups mg;
  mg.all_ones = all_ones(mask);
  if (mg.all_ones) return mg;
  std::map<std::string, size_t> seen;
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    std::string key(static_cast<size_t>(mask.cols()), '0');
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      if (mask(i, j) == 1.0) key[static_cast<size_t>(j)] = '1';
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen.emplace(key, mg.groups.size());
      mg.groups.push_back({mask.row(i).transpose(), {i}});
    } else {
      mg.groups[it->second].second.push_back(i);
    }
  }
  return mg;
}

// Recomputes one datapoint's logits under the masks. A prefix of fully kept
// gaps reuses the recorded activations, so the unmasked network is returned
// bit for bit.
Vec ablated_logits_row(const EvalContext& ctx, const InteractionGraph& graph,
                       const std::vector<MaskGroups>& groups, const Vec* final_mask,
                       Eigen::Index x) {
  const SequentialNetwork& net = ctx.net;
  const Eigen::Index T = net.T;
  const int S = net.section_count();
  bool pristine = true;
  Mat cur;
  for (int g = 0; g < S - 1; ++g) {
    const MaskGroups& mg = groups[static_cast<size_t>(g)];
    if (pristine && mg.all_ones) continue;
    const InteractionBasis& bi = graph.basis.sections[static_cast<size_t>(g)];
    const InteractionBasis& bo = graph.basis.sections[static_cast<size_t>(g) + 1];
    const Eigen::Index kin1 = bi.kept + 1;
    const Eigen::Index ko1 = bo.kept + 1;
    Mat raw = pristine ? Mat(ctx.acts.sec(g).middleRows(x * T, T)) : cur;
    Mat ghat(T, ko1);
    if (mg.all_ones) {
      Mat out = gap_forward(net, g, g + 1, raw, nullptr);
      ghat = (bo.c.topRows(ko1) * out.transpose()).transpose();
    } else {
      Mat fhat = (bi.c.topRows(kin1) * raw.transpose()).transpose();
      for (const auto& [row_mask, outs] : mg.groups) {
        Mat fm = fhat;
        for (Eigen::Index j = 0; j < kin1; ++j)
          if (row_mask(j) == 0.0) fm.col(j).setZero();
        Mat z = (bi.c_pinv.leftCols(kin1) * fm.transpose()).transpose();
        Mat out = gap_forward(net, g, g + 1, z, nullptr);
        Mat oh = (bo.c.topRows(ko1) * out.transpose()).transpose();
        for (Eigen::Index i : outs) ghat.col(i) = oh.col(i);
      }
    }
    cur = (bo.c_pinv.leftCols(ko1) * ghat.transpose()).transpose();
    pristine = false;
  }
  if (final_mask != nullptr && !(final_mask->array() == 1.0).all()) {
    const InteractionBasis& bl = graph.basis.sections.back();
    const Eigen::Index k1 = bl.kept + 1;
    Mat raw = pristine ? Mat(ctx.acts.sec(S - 1).middleRows(x * T, T)) : cur;
    Mat fhat = (bl.c.topRows(k1) * raw.transpose()).transpose();
    for (Eigen::Index j = 0; j < k1; ++j)
      if ((*final_mask)(j) == 0.0) fhat.col(j).setZero();
    cur = (bl.c_pinv.leftCols(k1) * fhat.transpose()).transpose();
    pristine = false;
  }
  if (pristine) return ctx.base_logits.row(x).transpose();
  return tail_logits(net, cur);
}

double masked_metric(const EvalContext& ctx, const InteractionGraph& graph, const EdgeMasks& masks,
                     const Vec* final_mask, Metric metric) {
  check_masks(graph, masks);
  if (final_mask != nullptr) {
    check(final_mask->size() == graph.basis.sections.back().kept + 1,
          "final node mask size mismatch");
    check((*final_mask)(0) == 1.0, "the constant node cannot be ablated");
  }
  bool untouched = final_mask == nullptr || (final_mask->array() == 1.0).all();
  for (const Mat& m : masks) untouched = untouched && all_ones(m);
  if (untouched) return eval_metric(ctx.base_logits, ctx.labels, metric);

  std::vector<MaskGroups> groups;
  groups.reserve(masks.size());
  for (const Mat& m : masks) groups.push_back(group_rows(m));
  Mat lg(ctx.batch.n, ctx.base_logits.cols());
  for (Eigen::Index x = 0; x < ctx.batch.n; ++x)
    lg.row(x) = ablated_logits_row(ctx, graph, groups, final_mask, x).transpose();
  return eval_metric(lg, ctx.labels, metric);
}

// Metric comparisons tolerate a hair of rounding around the threshold.
bool meets(double value, double threshold, Metric metric) {
  if (metric == Metric::CrossEntropy) return value <= threshold + 1e-12;
  return value >= threshold - 1e-12;
}

}  // namespace

InteractionGraph build_graph(BasisBundle basis, std::vector<EdgeMatrix> gaps) {
  const size_t S = basis.sections.size();
  check(S >= 2, "a graph needs at least two sections");
  check(gaps.size() == S - 1, "one edge matrix per section gap expected");
  for (size_t g = 0; g < gaps.size(); ++g) {
    const EdgeMatrix& em = gaps[g];
    check(em.section == static_cast<int>(g), "edge matrices out of section order");
    check(em.kept_in == basis.sections[g].kept && em.kept_out == basis.sections[g + 1].kept,
          "edge matrix node counts disagree with the basis");
    check(em.e.rows() == em.kept_out + 1 && em.e.cols() == em.kept_in + 1,
          "edge matrix shape mismatch");
    check(em.data_fingerprint == basis.data_fingerprint,
          "edge matrices and basis come from different activations");
  }
  InteractionGraph graph;
  graph.basis = std::move(basis);
  graph.gaps = std::move(gaps);
  for (size_t s = 0; s < S; ++s) {
    const InteractionBasis& b = graph.basis.sections[s];
    std::vector<GraphNode> nodes;
    for (Eigen::Index j = 0; j <= b.kept; ++j) {
      GraphNode nd;
      nd.index = j;
      nd.importance = b.lambda(j);
      nodes.push_back(nd);
    }
    std::stable_sort(nodes.begin(), nodes.end(), [](const GraphNode& a, const GraphNode& b2) {
      if (a.importance != b2.importance) return a.importance > b2.importance;
      return a.index < b2.index;
    });
    graph.nodes.push_back(std::move(nodes));
  }
  return graph;
}

EdgeMasks full_masks(const InteractionGraph& graph) {
  EdgeMasks masks;
  for (const EdgeMatrix& em : graph.gaps) masks.push_back(Mat::Ones(em.e.rows(), em.e.cols()));
  return masks;
}

double eval_metric(const Mat& lg, const std::vector<int32_t>& labels, Metric metric) {
  check(lg.rows() == static_cast<Eigen::Index>(labels.size()), "one label per logit row expected");
  check(lg.rows() > 0, "empty batch");
  const Eigen::Index n = lg.rows();
  if (metric == Metric::Accuracy) {
    double hits = 0.0;
    for (Eigen::Index x = 0; x < n; ++x) {
      Eigen::Index arg;
      lg.row(x).maxCoeff(&arg);
      if (arg == static_cast<Eigen::Index>(labels[static_cast<size_t>(x)])) hits += 1.0;
    }
    return hits / static_cast<double>(n);
  }
  double total = 0.0;
  for (Eigen::Index x = 0; x < n; ++x) {
    const int32_t lab = labels[static_cast<size_t>(x)];
    check(lab >= 0 && lab < lg.cols(), "label outside the logit range");
    const double m = lg.row(x).maxCoeff();
    const double lse = m + std::log((lg.row(x).array() - m).exp().sum());
    total += lse - lg(x, lab);
  }
  return total / static_cast<double>(n);
}

double ablate_edges(const SequentialNetwork& net, const Batch& batch,
                    const std::vector<int32_t>& labels, const InteractionGraph& graph,
                    const EdgeMasks& masks, Metric metric) {
  EvalContext ctx = make_context(net, batch, labels);
  return masked_metric(ctx, graph, masks, nullptr, metric);
}

namespace {

struct EdgeRef {
  double v = 0.0;
  Eigen::Index i = 0, j = 0;
};

// Decreasing size; equal sizes by row then column index.
std::vector<EdgeRef> sorted_edges(const Mat& e) {
  std::vector<EdgeRef> refs;
  refs.reserve(static_cast<size_t>(e.size()));
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j) refs.push_back({e(i, j), i, j});
  std::sort(refs.begin(), refs.end(), [](const EdgeRef& a, const EdgeRef& b) {
    if (a.v != b.v) return a.v > b.v;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  return refs;
}

void finish_report(AblationReport& rep) {
  std::sort(rep.curve.begin(), rep.curve.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
}

}  // namespace

AblationReport bisect_min_edges(const SequentialNetwork& net, const Batch& batch,
                                const std::vector<int32_t>& labels, const InteractionGraph& graph,
                                int gap, double threshold, Metric metric) {
  check_cfg(gap >= 0 && gap < static_cast<int>(graph.gaps.size()), "gap index out of range");
  EvalContext ctx = make_context(net, batch, labels);
  const std::vector<EdgeRef> refs = sorted_edges(graph.gaps[static_cast<size_t>(gap)].e);
  const Eigen::Index total = static_cast<Eigen::Index>(refs.size());

  AblationReport rep;
  rep.kind = "edge";
  rep.metric = metric;
  rep.threshold = threshold;

  std::map<Eigen::Index, double> cache;
  auto value = [&](Eigen::Index k) {
    auto it = cache.find(k);
    if (it != cache.end()) return it->second;
    EdgeMasks masks = full_masks(graph);
    masks[static_cast<size_t>(gap)].setZero();
    for (Eigen::Index r = 0; r < k; ++r)
      masks[static_cast<size_t>(gap)](refs[static_cast<size_t>(r)].i,
                                      refs[static_cast<size_t>(r)].j) = 1.0;
    double v = masked_metric(ctx, graph, masks, nullptr, metric);
    cache.emplace(k, v);
    rep.curve.push_back({k, v});
    ++rep.iterations;
    return v;
  };

  if (!meets(value(total), threshold, metric)) {
    rep.attainable = false;
    rep.kept = total;
    rep.metric_at_kept = cache.at(total);
    rep.epsilon = total > 0 ? refs.back().v : 0.0;
    finish_report(rep);
    return rep;
  }
  Eigen::Index kept = total;
  if (meets(value(0), threshold, metric)) {
    kept = 0;
  } else {
    Eigen::Index lo = 0, hi = total;
    while (hi - lo > 1) {
      Eigen::Index mid = lo + (hi - lo) / 2;
      if (meets(value(mid), threshold, metric))
        hi = mid;
      else
        lo = mid;
    }
    kept = hi;
  }
  rep.kept = kept;
  rep.metric_at_kept = cache.at(kept);
  rep.epsilon = kept > 0 ? refs[static_cast<size_t>(kept) - 1].v : 0.0;
  finish_report(rep);
  return rep;
}

AblationReport node_ablation_curve(const SequentialNetwork& net, const Batch& batch,
                                   const std::vector<int32_t>& labels,
                                   const InteractionGraph& graph, int section, Metric metric,
                                   double threshold) {
  const int S = static_cast<int>(graph.basis.sections.size());
  check_cfg(section >= 0 && section < S, "section index out of range");
  EvalContext ctx = make_context(net, batch, labels);
  const InteractionBasis& b = graph.basis.sections[static_cast<size_t>(section)];

  // Nonconstant nodes in decreasing importance; equal importances by index.
  std::vector<Eigen::Index> order;
  for (Eigen::Index j = 1; j <= b.kept; ++j) order.push_back(j);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index c) {
    if (b.lambda(a) != b.lambda(c)) return b.lambda(a) > b.lambda(c);
    return a < c;
  });
  const Eigen::Index K = static_cast<Eigen::Index>(order.size());

  std::vector<Eigen::Index> ks;
  if (K <= 400) {
    for (Eigen::Index k = 0; k <= K; ++k) ks.push_back(k);
  } else {
    ks.push_back(0);
    for (int i = 0; i <= 127; ++i) {
      double t = static_cast<double>(i) / 127.0;
      ks.push_back(static_cast<Eigen::Index>(
          std::llround(std::pow(static_cast<double>(K), t))));
    }
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  }

  AblationReport rep;
  rep.kind = "node";
  rep.metric = metric;
  rep.threshold = threshold;
  rep.attainable = false;
  rep.kept = K;

  for (Eigen::Index k : ks) {
    EdgeMasks masks = full_masks(graph);
    Vec final_mask;
    const Vec* fm = nullptr;
    if (section == S - 1) {
      final_mask = Vec::Ones(b.kept + 1);
      for (Eigen::Index r = k; r < K; ++r) final_mask(order[static_cast<size_t>(r)]) = 0.0;
      fm = &final_mask;
    } else {
      Mat& m = masks[static_cast<size_t>(section)];
      for (Eigen::Index r = k; r < K; ++r) m.col(order[static_cast<size_t>(r)]).setZero();
    }
    double v = masked_metric(ctx, graph, masks, fm, metric);
    rep.curve.push_back({k, v});
    ++rep.iterations;
    if (!rep.attainable && meets(v, threshold, metric)) {
      rep.attainable = true;
      rep.kept = k;
      rep.metric_at_kept = v;
    }
  }
  if (!rep.attainable) rep.metric_at_kept = rep.curve.back().second;
  finish_report(rep);
  return rep;
}

namespace {

// The layered graph flattened to one undirected weighted graph: vertices are
// (section, node) pairs, weights log(e / eps) for edges above eps.
struct FlatEdge {
  int u = 0, v = 0;
  double w = 0.0;
};

struct FlatGraph {
  int nv = 0;
  std::vector<FlatEdge> edges;
  std::vector<double> deg;
  double two_m = 0.0;
  std::vector<std::vector<int>> vid;  // section -> node id -> vertex
};

FlatGraph flatten(const InteractionGraph& graph, double eps) {
  check_cfg(eps > 0.0 && std::isfinite(eps), "eps must be positive");
  FlatGraph fg;
  for (const auto& sec : graph.nodes) {
    std::vector<int> ids;
    for (size_t j = 0; j < sec.size(); ++j) ids.push_back(fg.nv++);
    fg.vid.push_back(std::move(ids));
  }
  fg.deg.assign(static_cast<size_t>(fg.nv), 0.0);
  for (size_t g = 0; g < graph.gaps.size(); ++g) {
    const Mat& e = graph.gaps[g].e;
    for (Eigen::Index i = 0; i < e.rows(); ++i)
      for (Eigen::Index j = 0; j < e.cols(); ++j) {
        if (!(e(i, j) > eps)) continue;
        const double w = std::log(e(i, j) / eps);
        if (w <= 0.0) continue;
        const int u = fg.vid[g + 1][static_cast<size_t>(i)];
        const int v = fg.vid[g][static_cast<size_t>(j)];
        fg.edges.push_back({u, v, w});
        fg.deg[static_cast<size_t>(u)] += w;
        fg.deg[static_cast<size_t>(v)] += w;
        fg.two_m += 2.0 * w;
      }
  }
  check_cfg(!fg.edges.empty(), "no edge exceeds eps");
  return fg;
}

double flat_q(const FlatGraph& fg, const std::vector<int>& comm, double gamma) {
  double q = 0.0;
  for (const FlatEdge& e : fg.edges)
    if (comm[static_cast<size_t>(e.u)] == comm[static_cast<size_t>(e.v)])
      q += 2.0 * e.w / fg.two_m;
  std::map<int, double> tot;
  for (int v = 0; v < fg.nv; ++v) tot[comm[static_cast<size_t>(v)]] += fg.deg[static_cast<size_t>(v)];
  for (const auto& [c, d] : tot) q -= gamma * (d / fg.two_m) * (d / fg.two_m);
  return q;
}

// Aggregate view used between Leiden levels. Self-loop weight is stored once;
// it contributes twice to a vertex's strength.
struct AggGraph {
  int nv = 0;
  std::vector<std::map<int, double>> nbr;
  std::vector<double> self;
  std::vector<double> strength;
  double two_m = 0.0;
};

AggGraph agg_from_flat(const FlatGraph& fg) {
  AggGraph ag;
  ag.nv = fg.nv;
  ag.nbr.resize(static_cast<size_t>(fg.nv));
  ag.self.assign(static_cast<size_t>(fg.nv), 0.0);
  for (const FlatEdge& e : fg.edges) {
    ag.nbr[static_cast<size_t>(e.u)][e.v] += e.w;
    ag.nbr[static_cast<size_t>(e.v)][e.u] += e.w;
  }
  ag.strength = fg.deg;
  ag.two_m = fg.two_m;
  return ag;
}

// One pass of queue-driven greedy moves; communities are ids in [0, nv).
bool local_move(const AggGraph& ag, std::vector<int>& comm, double gamma, std::mt19937_64& rng) {
  const size_t nv = static_cast<size_t>(ag.nv);
  std::vector<double> tot(nv, 0.0);
  std::vector<int> size(nv, 0);
  for (size_t u = 0; u < nv; ++u) {
    tot[static_cast<size_t>(comm[u])] += ag.strength[u];
    size[static_cast<size_t>(comm[u])] += 1;
  }
  std::vector<int> free_ids;
  for (size_t c = 0; c < nv; ++c)
    if (size[c] == 0) free_ids.push_back(static_cast<int>(c));

  std::vector<int> order(nv);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::deque<int> queue(order.begin(), order.end());
  std::vector<char> queued(nv, 1);

  bool any = false;
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop_front();
    queued[static_cast<size_t>(u)] = 0;
    const int cu = comm[static_cast<size_t>(u)];
    const double ku = ag.strength[static_cast<size_t>(u)];
    tot[static_cast<size_t>(cu)] -= ku;
    size[static_cast<size_t>(cu)] -= 1;

    std::map<int, double> wc;
    for (const auto& [v, w] : ag.nbr[static_cast<size_t>(u)]) wc[comm[static_cast<size_t>(v)]] += w;
    wc[cu] += 0.0;

    // Proportional-to-Q score of joining community c; an empty community
    // scores zero, so weak attachments dissolve into singletons.
    int best = size[static_cast<size_t>(cu)] == 0 ? cu : (free_ids.empty() ? cu : free_ids.back());
    double best_score = size[static_cast<size_t>(cu)] == 0 || !free_ids.empty() ? 0.0
                                                                                : -1e300;
    for (const auto& [c, w] : wc) {
      const double score = w - gamma * ku * tot[static_cast<size_t>(c)] / ag.two_m;
      if (score > best_score) {
        best_score = score;
        best = c;
      }
    }
    if (best != cu) any = true;
    if (best != cu && size[static_cast<size_t>(best)] == 0 && !free_ids.empty() &&
        best == free_ids.back())
      free_ids.pop_back();
    if (size[static_cast<size_t>(cu)] == 0 && best != cu) free_ids.push_back(cu);
    comm[static_cast<size_t>(u)] = best;
    tot[static_cast<size_t>(best)] += ku;
    size[static_cast<size_t>(best)] += 1;
    if (best != cu)
      for (const auto& [v, w] : ag.nbr[static_cast<size_t>(u)])
        if (comm[static_cast<size_t>(v)] != best && !queued[static_cast<size_t>(v)]) {
          queue.push_back(v);
          queued[static_cast<size_t>(v)] = 1;
        }
  }
  return any;
}

// Splits each community into connected sub-communities: every vertex starts
// alone and still-single vertices greedily join the best positively scoring
// sub-community inside their own community.
std::vector<int> refine(const AggGraph& ag, const std::vector<int>& comm, double gamma,
                        std::mt19937_64& rng) {
  const size_t nv = static_cast<size_t>(ag.nv);
  std::vector<int> sub(nv);
  std::iota(sub.begin(), sub.end(), 0);
  std::vector<double> stot(ag.strength);
  std::vector<int> ssize(nv, 1);

  std::vector<int> order(nv);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (const int u : order) {
    if (sub[static_cast<size_t>(u)] != u || ssize[static_cast<size_t>(u)] != 1) continue;
    const double ku = ag.strength[static_cast<size_t>(u)];
    std::map<int, double> ws;
    for (const auto& [v, w] : ag.nbr[static_cast<size_t>(u)])
      if (comm[static_cast<size_t>(v)] == comm[static_cast<size_t>(u)])
        ws[sub[static_cast<size_t>(v)]] += w;
    int best = u;
    double best_score = 0.0;
    for (const auto& [s, w] : ws) {
      if (s == u) continue;
      const double score = w - gamma * ku * stot[static_cast<size_t>(s)] / ag.two_m;
      if (score > best_score) {
        best_score = score;
        best = s;
      }
    }
    if (best != u) {
      sub[static_cast<size_t>(u)] = best;
      stot[static_cast<size_t>(best)] += ku;
      ssize[static_cast<size_t>(best)] += 1;
      ssize[static_cast<size_t>(u)] -= 1;
    }
  }
  return sub;
}

std::vector<int> leiden_once(const FlatGraph& fg, double gamma, uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed);
  AggGraph ag = agg_from_flat(fg);
  std::vector<int> to_agg(static_cast<size_t>(fg.nv));
  std::iota(to_agg.begin(), to_agg.end(), 0);
  std::vector<int> comm(static_cast<size_t>(fg.nv));
  std::iota(comm.begin(), comm.end(), 0);

  while (true) {
    local_move(ag, comm, gamma, rng);
    std::vector<int> sub = refine(ag, comm, gamma, rng);

    // Compact sub-community ids in ascending order of their old id.
    std::map<int, int> compact;
    for (int u = 0; u < ag.nv; ++u) compact.emplace(sub[static_cast<size_t>(u)], 0);
    int na = 0;
    for (auto& [old_id, new_id] : compact) new_id = na++;
    if (na == ag.nv) break;

    AggGraph next;
    next.nv = na;
    next.nbr.resize(static_cast<size_t>(na));
    next.self.assign(static_cast<size_t>(na), 0.0);
    next.strength.assign(static_cast<size_t>(na), 0.0);
    next.two_m = ag.two_m;
    std::vector<int> next_comm(static_cast<size_t>(na), -1);
    for (int u = 0; u < ag.nv; ++u) {
      const int a = compact.at(sub[static_cast<size_t>(u)]);
      next.self[static_cast<size_t>(a)] += ag.self[static_cast<size_t>(u)];
      next_comm[static_cast<size_t>(a)] = comm[static_cast<size_t>(u)];
      for (const auto& [v, w] : ag.nbr[static_cast<size_t>(u)]) {
        if (v <= u) continue;
        const int b2 = compact.at(sub[static_cast<size_t>(v)]);
        if (a == b2)
          next.self[static_cast<size_t>(a)] += w;
        else {
          next.nbr[static_cast<size_t>(a)][b2] += w;
          next.nbr[static_cast<size_t>(b2)][a] += w;
        }
      }
    }
    for (int a = 0; a < na; ++a) {
      double s = 2.0 * next.self[static_cast<size_t>(a)];
      for (const auto& [v, w] : next.nbr[static_cast<size_t>(a)]) s += w;
      next.strength[static_cast<size_t>(a)] = s;
    }
    for (int& t : to_agg) t = compact.at(sub[static_cast<size_t>(t)]);
    // Aggregate communities inherit their members' assignment, renumbered
    // into [0, na) so the move bookkeeping stays in range.
    std::map<int, int> cc;
    for (int c : next_comm) cc.emplace(c, 0);
    int nc = 0;
    for (auto& [old_id, new_id] : cc) new_id = nc++;
    for (int& c : next_comm) c = cc.at(c);
    ag = std::move(next);
    comm = std::move(next_comm);
  }

  std::vector<int> result(static_cast<size_t>(fg.nv));
  for (size_t o = 0; o < result.size(); ++o)
    result[o] = comm[static_cast<size_t>(to_agg[o])];
  return result;
}

std::vector<int> flatten_communities(const FlatGraph& fg,
                                     const std::vector<std::vector<int>>& community) {
  check(community.size() == fg.vid.size(), "community shape mismatch");
  std::vector<int> comm(static_cast<size_t>(fg.nv), 0);
  for (size_t s = 0; s < community.size(); ++s) {
    check(community[s].size() == fg.vid[s].size(), "community shape mismatch");
    for (size_t j = 0; j < community[s].size(); ++j) {
      check(community[s][j] >= 0, "community ids must be nonnegative");
      comm[static_cast<size_t>(fg.vid[s][j])] = community[s][j];
    }
  }
  return comm;
}

}  // namespace

double modularity_q(const InteractionGraph& graph, const std::vector<std::vector<int>>& community,
                    double eps, double gamma) {
  FlatGraph fg = flatten(graph, eps);
  return flat_q(fg, flatten_communities(fg, community), gamma);
}

ModularityResult cluster_modules(const InteractionGraph& graph, double eps, double gamma,
                                 uint64_t seed) {
  check_cfg(gamma > 0.0 && std::isfinite(gamma), "gamma must be positive");
  FlatGraph fg = flatten(graph, eps);

  std::vector<int> best;
  double best_q = -std::numeric_limits<double>::infinity();
  const int restarts = 10;
  for (int rr = 0; rr < restarts; ++rr) {
    std::vector<int> comm = leiden_once(fg, gamma, fork_seed(seed, "leiden" + std::to_string(rr)));
    const double q = flat_q(fg, comm, gamma);
    if (q > best_q) {
      best_q = q;
      best = std::move(comm);
    }
  }

  // Stable labels: communities numbered by first appearance in vertex order.
  std::map<int, int> relabel;
  int next_label = 0;
  for (int v = 0; v < fg.nv; ++v) {
    auto [it, fresh] = relabel.emplace(best[static_cast<size_t>(v)], next_label);
    if (fresh) ++next_label;
  }
  ModularityResult res;
  res.gamma = gamma;
  res.eps = eps;
  res.q = best_q;
  res.restarts = restarts;
  for (const auto& ids : fg.vid) {
    std::vector<int> sec;
    for (int v : ids) sec.push_back(relabel.at(best[static_cast<size_t>(v)]));
    res.community.push_back(std::move(sec));
  }
  return res;
}

void apply_communities(InteractionGraph& graph, const ModularityResult& result) {
  check(result.community.size() == graph.nodes.size(), "community shape mismatch");
  for (size_t s = 0; s < graph.nodes.size(); ++s) {
    check(result.community[s].size() == graph.nodes[s].size(), "community shape mismatch");
    for (GraphNode& nd : graph.nodes[s])
      nd.community = result.community[s][static_cast<size_t>(nd.index)];
  }
}

ProbeReport probe_metrics(const SequentialNetwork& net, const Batch& batch,
                          const std::vector<int32_t>& labels, const InteractionGraph& graph,
                          int section, Eigen::Index feature) {
  const int S = static_cast<int>(graph.basis.sections.size());
  check_cfg(section >= 0 && section < S, "section index out of range");
  const InteractionBasis& b = graph.basis.sections[static_cast<size_t>(section)];
  check_cfg(feature >= 0 && feature <= b.kept, "feature index out of range");
  check(static_cast<Eigen::Index>(labels.size()) == batch.n, "one label per datapoint expected");
  Eigen::Index n1 = 0;
  for (int32_t l : labels) {
    check_cfg(l == 0 || l == 1, "probe labels must be 0 or 1");
    n1 += l;
  }
  const Eigen::Index n = batch.n;
  const Eigen::Index n0 = n - n1;
  check_cfg(n0 > 0 && n1 > 0, "probe labels must contain both classes");

  EvalContext ctx = make_context(net, batch, labels);
  const Eigen::Index T = net.T;

  // Feature value at the last token of each datapoint.
  Vec v(n);
  for (Eigen::Index x = 0; x < n; ++x)
    v(x) = b.c.row(feature).dot(ctx.acts.sec(section).row(x * T + T - 1));

  ProbeReport rep;
  rep.section = section;
  rep.feature = feature;

  // Rank AUROC with midranks for ties.
  std::vector<Eigen::Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index c) { return v(a) < v(c); });
  Vec rank(n);
  for (size_t lo = 0; lo < idx.size();) {
    size_t hi = lo;
    while (hi + 1 < idx.size() && v(idx[hi + 1]) == v(idx[lo])) ++hi;
    const double mid = 0.5 * (static_cast<double>(lo) + static_cast<double>(hi)) + 1.0;
    for (size_t k = lo; k <= hi; ++k) rank(idx[k]) = mid;
    lo = hi + 1;
  }
  double rank1 = 0.0;
  for (Eigen::Index x = 0; x < n; ++x)
    if (labels[static_cast<size_t>(x)] == 1) rank1 += rank(x);
  const double u1 = rank1 - 0.5 * static_cast<double>(n1) * static_cast<double>(n1 + 1);
  double auroc = u1 / (static_cast<double>(n0) * static_cast<double>(n1));
  rep.flipped = auroc < 0.5;
  rep.auroc = rep.flipped ? 1.0 - auroc : auroc;

  // Fraction of the feature's variance carried by the class split.
  double mu0 = 0.0, mu1 = 0.0;
  for (Eigen::Index x = 0; x < n; ++x)
    (labels[static_cast<size_t>(x)] == 1 ? mu1 : mu0) += v(x);
  mu0 /= static_cast<double>(n0);
  mu1 /= static_cast<double>(n1);
  const double mean = v.mean();
  const double var = v.array().square().mean() - mean * mean;
  const double p0 = static_cast<double>(n0) / static_cast<double>(n);
  const double p1 = static_cast<double>(n1) / static_cast<double>(n);
  const double between = p0 * p1 * (mu1 - mu0) * (mu1 - mu0);
  rep.variance_fraction = var > 0.0 ? std::min(1.0, between / var) : 0.0;

  rep.base_metric = eval_metric(ctx.base_logits, labels, Metric::Accuracy);

  // Replace the feature value with its class-conditional mean and rerun the
  // network from this section; other coordinates of the activation stay put.
  Mat lg(n, ctx.base_logits.cols());
  for (Eigen::Index x = 0; x < n; ++x) {
    const double target = labels[static_cast<size_t>(x)] == 1 ? mu1 : mu0;
    Mat cur = ctx.acts.sec(section).middleRows(x * T, T);
    cur.row(T - 1) += (target - v(x)) * b.c_pinv.col(feature).transpose();
    for (int g = section; g < S - 1; ++g) cur = gap_forward(net, g, g + 1, cur, nullptr);
    lg.row(x) = tail_logits(net, cur).transpose();
  }
  rep.intervened_metric = eval_metric(lg, labels, Metric::Accuracy);
  rep.delta = rep.intervened_metric - rep.base_metric;
  return rep;
}

void export_graph_json(const InteractionGraph& graph, const std::string& path) {
  nlohmann::json doc;
  doc["basis"]["kind"] = kind_name(graph.basis.kind);
  doc["basis"]["fingerprint"] = graph.basis.data_fingerprint;
  doc["basis"]["sections"] = graph.basis.sections.size();
  doc["sections"] = nlohmann::json::array();
  for (size_t s = 0; s < graph.nodes.size(); ++s) {
    nlohmann::json sec;
    sec["section"] = s;
    sec["nodes"] = nlohmann::json::array();
    for (const GraphNode& nd : graph.nodes[s]) {
      sec["nodes"].push_back({{"id", nd.index},
                              {"importance", nd.importance},
                              {"label", nd.label},
                              {"community", nd.community}});
    }
    doc["sections"].push_back(std::move(sec));
  }
  doc["gaps"] = nlohmann::json::array();
  for (size_t g = 0; g < graph.gaps.size(); ++g) {
    const EdgeMatrix& em = graph.gaps[g];
    nlohmann::json gap;
    gap["from"] = g;
    gap["to"] = g + 1;
    gap["averaging"] = em.config.averaging == EdgeAveraging::Rms ? "rms" : "sum_squares";
    gap["exact"] = em.sources.exact;
    gap["edges"] = nlohmann::json::array();
    for (Eigen::Index i = 0; i < em.e.rows(); ++i)
      for (Eigen::Index j = 0; j < em.e.cols(); ++j)
        gap["edges"].push_back({{"i", i}, {"j", j}, {"w", em.e(i, j)}});
    doc["gaps"].push_back(std::move(gap));
  }
  std::ofstream out(path);
  check_cfg(out.good(), "cannot write " + path);
  out << doc.dump(1) << "\n";
}

void export_graph_dot(const InteractionGraph& graph, const std::string& path, double min_edge,
                      Eigen::Index max_edges_per_gap) {
  std::ofstream out(path);
  check_cfg(out.good(), "cannot write " + path);
  out << "digraph interactions {\n  rankdir=BT;\n  node [shape=circle, fontsize=9];\n";
  for (size_t s = 0; s < graph.nodes.size(); ++s) {
    out << "  { rank=same;";
    for (const GraphNode& nd : graph.nodes[s]) {
      out << " s" << s << "_" << nd.index;
    }
    out << " }\n";
    for (const GraphNode& nd : graph.nodes[s]) {
      out << "  s" << s << "_" << nd.index << " [label=\""
          << (nd.label.empty() ? "f" + std::to_string(nd.index) : nd.label) << "\"";
      if (nd.community >= 0) out << ", colorscheme=set28, style=filled, fillcolor="
                                 << nd.community % 8 + 1;
      out << "];\n";
    }
  }
  double emax = 0.0;
  for (const EdgeMatrix& em : graph.gaps) emax = std::max(emax, em.e.maxCoeff());
  for (size_t g = 0; g < graph.gaps.size(); ++g) {
    std::vector<EdgeRef> refs = sorted_edges(graph.gaps[g].e);
    Eigen::Index emitted = 0;
    for (const EdgeRef& r : refs) {
      if (r.v <= min_edge || r.v <= 0.0) break;
      if (max_edges_per_gap > 0 && emitted == max_edges_per_gap) break;
      const double rel = r.v / emax;
      out << "  s" << g << "_" << r.j << " -> s" << g + 1 << "_" << r.i
          << " [penwidth=" << 0.3 + 6.0 * rel * rel << ", arrowsize=0.4];\n";
      ++emitted;
    }
  }
  out << "}\n";
}

}  // namespace ibg
