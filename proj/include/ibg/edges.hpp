#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ibg/basis.hpp"
#include "ibg/common.hpp"
#include "ibg/model.hpp"

namespace ibg {

enum class EdgeAveraging : uint8_t { Rms = 0, SumSquares = 1 };

// Straight-line integrated gradients from a zero baseline, on a trapezoid
// grid over alpha with endpoint weights halved. The alpha = 0 node samples
// the integrand just right of zero: the integral never sees the single point
// where piecewise activations switch, and the right limit is what makes the
// grid collapse exactly for positively homogeneous gaps.
struct IgConfig {
  int alpha_steps = 50;        // trapezoid intervals; the grid has alpha_steps + 1 nodes
  bool shortcut = false;       // evaluate the integrand only at alpha = 1
  bool approx_linear = false;  // permit the shortcut across a token-mixing gap
  EdgeAveraging averaging = EdgeAveraging::Rms;
};

// Averaged attributions between the retained nodes of two adjacent-section
// bases. Entry (i, j) quantifies the influence of in-node j on out-node i
// (node 0 is the constant). Rms entries are the root mean square over
// datapoints and out-tokens; SumSquares stores the same quantity without the
// final square root.
struct EdgeMatrix {
  int section = 0;  // edges span sections (section, section + 1)
  Eigen::Index kept_in = 0;
  Eigen::Index kept_out = 0;
  IgConfig config;
  SourceConfig sources;
  std::string data_fingerprint;
  Mat e;  // (kept_out + 1) x (kept_in + 1), non-negative

  Eigen::Index rows() const { return kept_out + 1; }
  Eigen::Index cols() const { return kept_in + 1; }
};

// Per-sample, per-out-token attributions from an exact run; datapoint x holds
// rows (s * (kept_out + 1) + i) over columns j.
struct AttributionSamples {
  int section = 0;
  Eigen::Index n = 0;
  int T = 1;
  Eigen::Index kept_in = 0;
  Eigen::Index kept_out = 0;
  std::vector<Mat> a;
};

// True when every layer between the two sections acts independently per token
// and feature (linear maps, residual wiring, elementwise activations).
bool gap_elementwise(const SequentialNetwork& net, int sec_from, int sec_to);

// Exact attributions: full out-token sums. `keep`, when non-null, receives
// the per-sample tensors needed by source_error_estimate.
EdgeMatrix ig_edges(const SequentialNetwork& net, const ActivationRecord& acts,
                    const InteractionBasis& in_basis, const InteractionBasis& out_basis,
                    const IgConfig& cfg, AttributionSamples* keep = nullptr);

// Random-source estimator contracting the out-token sum against +-1 probes
// before differentiating. Gaps whose per-position gradients decouple are
// computed exactly (the contraction is vacuous there), matching the
// estimator's R -> infinity limit.
EdgeMatrix stochastic_edges(const SequentialNetwork& net, const ActivationRecord& acts,
                            const InteractionBasis& in_basis,
                            const InteractionBasis& out_basis, const IgConfig& cfg,
                            const SourceConfig& sources);

// Predicted variance of the squared-edge estimator at source count r, from
// exact per-sample attributions. Entry (i, j) scales as 1/r and 1/n.
Mat source_error_estimate(const AttributionSamples& samples, int r);

void save_edges(const std::string& path, const EdgeMatrix& m);
EdgeMatrix load_edges(const std::string& path);

// Hex digest of a file's bytes, for content-addressed references.
std::string file_digest(const std::string& path);

}  // namespace ibg
