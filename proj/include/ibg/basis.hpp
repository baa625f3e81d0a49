#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ibg/common.hpp"
#include "ibg/model.hpp"

namespace ibg {

enum class BasisKind : uint8_t { Neuron = 0, Pca = 1, Lib = 2, Gib = 3 };

const char* basis_kind_name(BasisKind k);
BasisKind basis_kind_from_name(const std::string& name);

// Per-section PCA of the recorded activations, token positions pooled into
// the sample axis. Every factor leaves coordinate 0 (the constant feature)
// in place: centering subtracts the mean of coordinates >= 1 via a matrix H
// that is the identity plus -mean in column 0, the rotation U embeds the
// eigenvectors of the centered Gram as rows over coordinates >= 1, and d
// holds the Gram eigenvalues descending with d(0) = 1 for the constant.
struct PcaTransform {
  int section = 0;
  Vec mean;               // mean(0) == 1
  Mat u;                  // rows >= 1 are eigenvectors; row 0 / col 0 unit
  Vec d;                  // descending over j >= 1; d(0) == 1
  Eigen::Index kept = 0;  // count of j >= 1 with d(j) > tol
  double tol = 1e-15;

  Eigen::Index width() const { return mean.size(); }
  Mat center_matrix() const;    // H
  Mat uncenter_matrix() const;  // H^{-1}: identity plus +mean in column 0
  // Whitening map f -> whitened coords: rescale(U H f) with directions at or
  // below tol zeroed. unwhiten() is its pseudo-inverse H^{-1} U^T rescale.
  Mat whiten() const;
  Mat unwhiten() const;
};

// samples: rows are pooled (datapoint, token) feature vectors with the
// constant 1 in column 0. Warns on stderr when rows < columns (the Gram is
// then rank-deficient; thresholding handles the null directions).
PcaTransform compute_pca(const Mat& samples, int section, double tol);
PcaTransform compute_pca(const ActivationRecord& acts, int section, double tol);

struct SourceConfig {
  bool exact = true;
  int r = 1;  // random probe vectors per datapoint when not exact
  uint64_t seed = 0;
};

// Gram matrix of the Jacobian of the target section's transformed features
// with respect to the whitened coordinates of `section`, averaged over the
// dataset and token positions.
struct JacobianGram {
  int section = 0;
  int target_section = 0;
  Mat m;  // symmetric PSD over whitened coordinates
  SourceConfig sources;
};

// c_target: full basis transform at target_section (its row 0 must be the
// unit row so the constant stays isolated). pca: the PCA factors at
// `section`, fitted on the same activations.
JacobianGram compute_M(const SequentialNetwork& net, const ActivationRecord& acts,
                       int section, int target_section, const PcaTransform& pca,
                       const Mat& c_target, const SourceConfig& src);

// A full per-section feature transform f_hat = C f together with the factors
// it was assembled from. Node importance lives in `lambda` (lambda(0) = 1 for
// the constant node; descending over j >= 1 for spectral kinds, per-coordinate
// for the identity baseline); spectral nodes whose importance is at or below
// lambda_tol have their row of C zeroed and are counted out of `kept`. c_pinv
// reconstructs activations from the retained nodes:
// C C^+ = diag(1 x (kept+1), 0 x rest).
struct InteractionBasis {
  int section = 0;
  BasisKind kind = BasisKind::Lib;
  PcaTransform pca;
  Mat v;                  // rows >= 1 are Jacobian-Gram eigenvectors; unit row/col 0
  Vec lambda;
  Eigen::Index kept = 0;
  double lambda_tol = 1e-15;
  Mat c;
  Mat c_pinv;

  Eigen::Index width() const { return lambda.size(); }
};

struct BasisOptions {
  double pca_tol = 1e-15;
  double lambda_tol = 1e-15;
  SourceConfig sources;
};

// Backward recursion over sections: the last section gets the unrescaled PCA
// transform C = U H (all directions kept), every earlier section aligns with
// the next section's transformed features through the Jacobian Gram and gets
// C = sqrt(Lambda) V rescale(U H) with near-null importance directions
// dropped.
std::vector<InteractionBasis> compute_lib(const SequentialNetwork& net,
                                          const ActivationRecord& acts,
                                          const BasisOptions& opt);

// Variant aligning every section directly with the final section's features
// instead of the adjacent one. Same base case; always exact Jacobians.
std::vector<InteractionBasis> compute_gib(const SequentialNetwork& net,
                                          const ActivationRecord& acts,
                                          const BasisOptions& opt);

// Whitened PCA baseline: C = rescale(U H) at inner sections, C = U H at the
// final section; importance = Gram eigenvalues.
std::vector<InteractionBasis> compute_pca_bases(const SequentialNetwork& net,
                                                const ActivationRecord& acts,
                                                const BasisOptions& opt);

// Identity baseline: C = I; importance = mean squared activation per
// coordinate on the fitting data.
std::vector<InteractionBasis> compute_neuron_bases(const SequentialNetwork& net,
                                                   const ActivationRecord& acts);

struct BasisBundle {
  BasisKind kind = BasisKind::Lib;
  BasisOptions opt;
  std::string data_fingerprint;  // hex digest of the fitting activations
  std::vector<InteractionBasis> sections;
};

std::string activation_fingerprint(const ActivationRecord& acts);

void save_basis_bundle(const std::string& path, const BasisBundle& b);
BasisBundle load_basis_bundle(const std::string& path);

}  // namespace ibg
