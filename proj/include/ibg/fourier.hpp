#pragma once

#include <complex>
#include <string>
#include <vector>

#include "ibg/basis.hpp"
#include "ibg/common.hpp"
#include "ibg/graph.hpp"
#include "ibg/model.hpp"

namespace ibg {

// Two-dimensional discrete Fourier transform of a real function on the
// (x, y) grid of Z_p x Z_p, p odd. Modes run over k in [-(p-1)/2, (p-1)/2]^2
// and coef is indexed (kx + K, ky + K) with K = (p-1)/2. The synthesis
// convention is f(x, y) = sum_k coef_k exp(+2*pi*i (kx x + ky y) / p), and
// real input makes coef at -k the exact conjugate of coef at k.
struct FourierSpectrum {
  int p = 0;
  Eigen::MatrixXcd coef;

  // Amplitude of one mode, and its phase in grid units: coef = a exp(2 pi i phi / p)
  // with phi in (-p/2, p/2].
  double amp(int kx, int ky) const;
  double phase(int kx, int ky) const;
};

// One sinusoidal term of the real-form expansion. Cos covers the constant,
// x-only, y-only, and general-pair families; when the (kx, ky) and (kx, -ky)
// pair carry nearly equal weight the pair is rewritten as a cos*cos or
// sin*sin product. A product term keeps both underlying modes (a_plus at
// (kx, ky), a_minus at (kx, -ky)) so synthesis stays exact; a plain Cos term
// uses only the plus slot. Amplitudes are the doubled mode amplitudes 2a and
// phases are in grid units.
enum class TermForm { Const, Cos, CosProduct, SinProduct };

struct FourierTerm {
  TermForm form = TermForm::Cos;
  int kx = 0;
  int ky = 0;  // signed for Cos; positive for product forms
  double coefficient = 0.0;
  double fraction = 0.0;  // share of total variance, 0 for Const
  double a_plus = 0.0;
  double phi_plus = 0.0;
  double a_minus = 0.0;
  double phi_minus = 0.0;
};

// Full term expansion of one feature grid: terms sorted by descending
// variance fraction (the constant term, if any, comes last), fractions
// summing to 1, and a rendered label like "70% cos(7x+7y) + 30% cos(31x+31y)"
// that drops terms below 1% of the variance.
struct FourierTermList {
  int p = 0;
  double mean = 0.0;
  double variance = 0.0;
  std::vector<FourierTerm> terms;
  std::string label;
};

// Forward transform of a p x p grid of feature values. The grid must be
// square, match p, and p must be odd.
FourierSpectrum fft2_decompose(const Mat& grid, int p);

// Inverse transform back to the value grid.
Mat synthesize_spectrum(const FourierSpectrum& spec);

// Collapse a spectrum into real sinusoidal terms with product rewriting.
FourierTermList sinusoidal_label(const FourierSpectrum& spec);

// Rebuild the value grid from a term list; exact up to the pruning floor.
Mat synthesize_terms(const FourierTermList& list);

// Largest single-term variance fraction. Throws ConfigError for a
// zero-variance (constant) feature, whose score is undefined.
double monosemanticity_score(const FourierTermList& list);

// Label for one basis feature of one section.
struct FeatureLabel {
  int section = 0;
  Eigen::Index feature = 0;
  std::string label;
  double score = 0.0;
  FourierTermList terms;
};

// Evaluates every kept feature of the section's basis on the full (x, y)
// grid (ids x, y, "=" with "=" = p), reading the last sequence position, and
// labels each feature's grid. A constant feature gets score 0.
std::vector<FeatureLabel> label_section_features(const SequentialNetwork& net,
                                                 const InteractionBasis& basis, int p);

// Copies label strings onto the matching graph nodes.
void apply_labels(InteractionGraph& graph, const std::vector<FeatureLabel>& labels);

// Writes the label table as a JSON array of {section, feature, label, score, terms}.
void export_labels_json(const std::vector<FeatureLabel>& labels, const std::string& path);

}  // namespace ibg
