#include "ibg/edges.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ibg/container.hpp"
#include "ibg/util.hpp"

namespace ibg {

namespace {

struct AlphaNode {
  double eval;
  double weight;
};

// Trapezoid nodes over [0, 1] with halved endpoint weights. The alpha = 0
// node evaluates just inside the interval: the integral never sees the single
// point where piecewise activations switch regime, and the right limit is
// what lets positively homogeneous gaps collapse onto the endpoint integrand.
std::vector<AlphaNode> alpha_grid(const IgConfig& cfg) {
  if (cfg.shortcut) return {{1.0, 1.0}};
  double p = 1.0 / cfg.alpha_steps;
  std::vector<AlphaNode> nodes;
  nodes.reserve(static_cast<size_t>(cfg.alpha_steps) + 1);
  for (int k = 0; k <= cfg.alpha_steps; ++k) {
    double w = (k == 0 || k == cfg.alpha_steps) ? 0.5 * p : p;
    double a = (k == 0) ? 1e-6 * p : k * p;
    nodes.push_back({a, w});
  }
  return nodes;
}

// Validated dimensions and cropped basis factors for one section gap.
struct EdgeSetup {
  int l = 0;
  Eigen::Index wl = 0, wt = 0;      // raw section widths
  Eigen::Index kin1 = 0, ko1 = 0;   // retained node counts plus the constant
  Mat cp_cols;                      // wl x kin1, reconstruction onto raw coords
  Mat c_out;                        // ko1 x wt, retained out-node rows
};

EdgeSetup make_setup(const SequentialNetwork& net, const ActivationRecord& acts,
                     const InteractionBasis& in_basis, const InteractionBasis& out_basis,
                     const IgConfig& cfg) {
  check_cfg(cfg.alpha_steps >= 1, "edges: alpha_steps must be at least 1");
  check(in_basis.section >= 0 && in_basis.section + 1 == out_basis.section,
        "edges: bases must sit on adjacent sections, in order");
  check(out_basis.section < net.section_count(),
        "edges: out-section index exceeds the network");
  EdgeSetup s;
  s.l = in_basis.section;
  s.wl = net.section_width(s.l);
  s.wt = net.section_width(s.l + 1);
  check(in_basis.width() == s.wl && out_basis.width() == s.wt,
        "edges: basis widths do not match the network sections");
  check(acts.n >= 1 && acts.T == net.T, "edges: empty or mismatched activation record");
  check(static_cast<int>(acts.sections.size()) > s.l && acts.sections[static_cast<size_t>(s.l)].size() > 0,
        "edges: activation record lacks the in-section");
  check(acts.sec(s.l).rows() == acts.n * net.T && acts.sec(s.l).cols() == s.wl,
        "edges: in-section activations have the wrong shape");
  if (cfg.shortcut && !gap_elementwise(net, s.l, s.l + 1))
    check_cfg(cfg.approx_linear,
              "edges: the endpoint shortcut across a token-mixing gap needs the "
              "approximately-linear declaration");
  s.kin1 = in_basis.kept + 1;
  s.ko1 = out_basis.kept + 1;
  s.cp_cols = in_basis.c_pinv.leftCols(s.kin1);
  s.c_out = out_basis.c.topRows(s.ko1);
  return s;
}

// Contract integrated raw-coordinate gradients (rows x T*wl) against the
// in-node activations: a(row, j) = sum_t g(row, t-slab) cp[:, j] * fhat(t, j).
Mat node_attributions(const EdgeSetup& s, int T, const Mat& gsum, const Mat& fhat) {
  Mat a = Mat::Zero(gsum.rows(), s.kin1);
  for (int t = 0; t < T; ++t) {
    Mat contrib = gsum.middleCols(static_cast<Eigen::Index>(t) * s.wl, s.wl) * s.cp_cols;
    contrib.array().rowwise() *= fhat.row(t).head(s.kin1).array();
    a += contrib;
  }
  return a;
}

EdgeMatrix finalize(const EdgeSetup& s, const IgConfig& cfg, const SourceConfig& src,
                    const ActivationRecord& acts, Mat e2) {
  EdgeMatrix em;
  em.section = s.l;
  em.kept_in = s.kin1 - 1;
  em.kept_out = s.ko1 - 1;
  em.config = cfg;
  em.sources = src;
  em.data_fingerprint = activation_fingerprint(acts);
  em.e = cfg.averaging == EdgeAveraging::Rms ? Mat(e2.cwiseSqrt()) : std::move(e2);
  check(em.e.allFinite(), "edges: non-finite attribution averages");
  return em;
}

}  // namespace

bool gap_elementwise(const SequentialNetwork& net, int sec_from, int sec_to) {
  check(sec_from >= 0 && sec_from < sec_to && sec_to < net.section_count(),
        "gap_elementwise: bad section range");
  for (int li = net.section_at[static_cast<size_t>(sec_from)] + 1;
       li <= net.section_at[static_cast<size_t>(sec_to)]; ++li) {
    switch (net.layers[static_cast<size_t>(li)].kind) {
      case LayerKind::Linear:
      case LayerKind::Activation:
      case LayerKind::ResidualConcat:
      case LayerKind::ResidualAdd:
        break;
      default:
        return false;
    }
  }
  return true;
}

EdgeMatrix ig_edges(const SequentialNetwork& net, const ActivationRecord& acts,
                    const InteractionBasis& in_basis, const InteractionBasis& out_basis,
                    const IgConfig& cfg, AttributionSamples* keep) {
  EdgeSetup s = make_setup(net, acts, in_basis, out_basis, cfg);
  const int T = net.T;
  std::vector<AlphaNode> nodes = alpha_grid(cfg);

  // One cotangent row per retained out-node and out-token: row (s*ko1 + i)
  // holds out-node i's row of C in token slab s.
  Mat cot = Mat::Zero(static_cast<Eigen::Index>(T) * s.ko1, static_cast<Eigen::Index>(T) * s.wt);
  for (int tok = 0; tok < T; ++tok)
    cot.block(static_cast<Eigen::Index>(tok) * s.ko1, static_cast<Eigen::Index>(tok) * s.wt,
              s.ko1, s.wt) = s.c_out;

  if (keep) {
    keep->section = s.l;
    keep->n = acts.n;
    keep->T = T;
    keep->kept_in = s.kin1 - 1;
    keep->kept_out = s.ko1 - 1;
    keep->a.clear();
    keep->a.reserve(static_cast<size_t>(acts.n));
  }

  Mat e2 = Mat::Zero(s.ko1, s.kin1);
  Mat gsum(static_cast<Eigen::Index>(T) * s.ko1, static_cast<Eigen::Index>(T) * s.wl);
  for (Eigen::Index x = 0; x < acts.n; ++x) {
    Mat f_raw = acts.sec(s.l).middleRows(x * T, T);
    Mat fhat = (in_basis.c * f_raw.transpose()).transpose();
    Mat f_proj = (in_basis.c_pinv * fhat.transpose()).transpose();
    gsum.setZero();
    for (const AlphaNode& node : nodes) {
      GapCache cache;
      gap_forward(net, s.l, s.l + 1, node.eval * f_proj, &cache);
      gsum.noalias() += node.weight * gap_vjp(net, s.l, s.l + 1, cache, cot);
    }
    Mat a = node_attributions(s, T, gsum, fhat);
    for (int tok = 0; tok < T; ++tok)
      e2.array() += a.middleRows(static_cast<Eigen::Index>(tok) * s.ko1, s.ko1).array().square();
    if (keep) keep->a.push_back(std::move(a));
  }
  e2 /= static_cast<double>(acts.n) * T;
  return finalize(s, cfg, SourceConfig{}, acts, std::move(e2));
}

EdgeMatrix stochastic_edges(const SequentialNetwork& net, const ActivationRecord& acts,
                            const InteractionBasis& in_basis,
                            const InteractionBasis& out_basis, const IgConfig& cfg,
                            const SourceConfig& sources) {
  check_cfg(sources.r >= 1, "edges: stochastic sources need r >= 1");
  SourceConfig src = sources;
  src.exact = false;

  // When no layer in the gap mixes token positions the out-token sum has a
  // single term per position, the +-1 factors square away, and the estimator
  // coincides with its infinite-sample limit; compute that limit directly.
  if (gap_token_local(net, in_basis.section, in_basis.section + 1)) {
    EdgeMatrix em = ig_edges(net, acts, in_basis, out_basis, cfg, nullptr);
    em.sources = src;
    return em;
  }

  EdgeSetup s = make_setup(net, acts, in_basis, out_basis, cfg);
  const int T = net.T;
  const int R = src.r;
  std::vector<AlphaNode> nodes = alpha_grid(cfg);

  // Stacked cotangents, one block of ko1 rows per source draw: row
  // (r*ko1 + i) carries phi_{r,s} C_i across token slabs s.
  Mat cot(static_cast<Eigen::Index>(R) * s.ko1, static_cast<Eigen::Index>(T) * s.wt);
  Mat gsum(cot.rows(), static_cast<Eigen::Index>(T) * s.wl);
  Mat e2 = Mat::Zero(s.ko1, s.kin1);
  for (Eigen::Index x = 0; x < acts.n; ++x) {
    Mat f_raw = acts.sec(s.l).middleRows(x * T, T);
    Mat fhat = (in_basis.c * f_raw.transpose()).transpose();
    Mat f_proj = (in_basis.c_pinv * fhat.transpose()).transpose();
    for (int rep = 0; rep < R; ++rep)
      for (int tok = 0; tok < T; ++tok)
        cot.block(static_cast<Eigen::Index>(rep) * s.ko1,
                  static_cast<Eigen::Index>(tok) * s.wt, s.ko1, s.wt) =
            rademacher(src.seed, static_cast<uint64_t>(x), static_cast<uint64_t>(rep),
                       static_cast<uint64_t>(tok)) *
            s.c_out;
    gsum.setZero();
    for (const AlphaNode& node : nodes) {
      GapCache cache;
      gap_forward(net, s.l, s.l + 1, node.eval * f_proj, &cache);
      gsum.noalias() += node.weight * gap_vjp(net, s.l, s.l + 1, cache, cot);
    }
    Mat a = node_attributions(s, T, gsum, fhat);
    for (int rep = 0; rep < R; ++rep)
      e2.array() += a.middleRows(static_cast<Eigen::Index>(rep) * s.ko1, s.ko1).array().square();
  }
  e2 /= static_cast<double>(acts.n) * T * R;
  return finalize(s, cfg, src, acts, std::move(e2));
}

Mat source_error_estimate(const AttributionSamples& samples, int r) {
  check_cfg(r >= 1, "source_error_estimate: r must be at least 1");
  check(samples.n >= 1 && static_cast<Eigen::Index>(samples.a.size()) == samples.n,
        "source_error_estimate: malformed sample set");
  Eigen::Index ko1 = samples.kept_out + 1;
  Eigen::Index kin1 = samples.kept_in + 1;
  Mat acc = Mat::Zero(ko1, kin1);
  for (const Mat& a : samples.a) {
    check(a.rows() == static_cast<Eigen::Index>(samples.T) * ko1 && a.cols() == kin1,
          "source_error_estimate: sample tensor has the wrong shape");
    // Cross-token products of squared attributions: the sum is structurally
    // non-negative and empty for single-token data.
    std::vector<Mat> sq;
    sq.reserve(static_cast<size_t>(samples.T));
    for (int tok = 0; tok < samples.T; ++tok)
      sq.push_back(a.middleRows(static_cast<Eigen::Index>(tok) * ko1, ko1).array().square());
    for (int tok = 0; tok < samples.T; ++tok)
      for (int up = tok + 1; up < samples.T; ++up)
        acc.array() += 2.0 * sq[static_cast<size_t>(tok)].array() *
                       sq[static_cast<size_t>(up)].array();
  }
  double n = static_cast<double>(samples.n);
  double T = static_cast<double>(samples.T);
  return acc * (2.0 / (static_cast<double>(r) * n * n * T * T));
}

void save_edges(const std::string& path, const EdgeMatrix& m) {
  BinWriter w(path);
  w.raw("IBGEDGES", 8);
  w.u32(1);
  w.i64(m.section);
  w.i64(m.kept_in);
  w.i64(m.kept_out);
  w.i64(m.config.alpha_steps);
  w.u8(m.config.shortcut ? 1 : 0);
  w.u8(m.config.approx_linear ? 1 : 0);
  w.u8(static_cast<uint8_t>(m.config.averaging));
  w.u8(m.sources.exact ? 1 : 0);
  w.i64(m.sources.r);
  w.i64(static_cast<int64_t>(m.sources.seed));
  w.str(m.data_fingerprint);
  w.mat(m.e);
  w.close();
}

EdgeMatrix load_edges(const std::string& path) {
  BinReader r(path);
  r.expect_magic("IBGEDGES", "edge matrix");
  uint32_t version = r.u32();
  check(version == 1,
        "edge matrix " + path + ": unsupported version " + std::to_string(version));
  EdgeMatrix m;
  m.section = static_cast<int>(r.i64());
  m.kept_in = r.i64();
  m.kept_out = r.i64();
  m.config.alpha_steps = static_cast<int>(r.i64());
  m.config.shortcut = r.u8() != 0;
  m.config.approx_linear = r.u8() != 0;
  uint8_t avg = r.u8();
  check(avg <= 1, "edge matrix " + path + ": bad averaging code");
  m.config.averaging = static_cast<EdgeAveraging>(avg);
  m.sources.exact = r.u8() != 0;
  m.sources.r = static_cast<int>(r.i64());
  m.sources.seed = static_cast<uint64_t>(r.i64());
  m.data_fingerprint = r.str();
  m.e = r.mat();
  check(m.kept_in >= 0 && m.kept_out >= 0 && m.e.rows() == m.kept_out + 1 &&
            m.e.cols() == m.kept_in + 1,
        "edge matrix " + path + ": inconsistent dimensions");
  check(m.e.allFinite() && m.e.minCoeff() >= 0.0,
        "edge matrix " + path + ": entries must be finite and non-negative");
  return m;
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check_cfg(in.good(), "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string bytes = ss.str();
  return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace ibg
