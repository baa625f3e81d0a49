#include "ibg/fourier.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <utility>

namespace ibg {

namespace {

constexpr double kTau = 6.283185307179586476925286766559;

void check_spectrum(const FourierSpectrum& spec) {
  check_cfg(spec.p >= 1 && spec.p % 2 == 1, "modulus must be a positive odd number");
  check(spec.coef.rows() == spec.p && spec.coef.cols() == spec.p,
        "spectrum shape must match its modulus");
  check(spec.coef.allFinite(), "spectrum must be finite");
}

Mat inverse_transform(int p, const Eigen::MatrixXcd& coef) {
  const int K = (p - 1) / 2;
  Eigen::MatrixXcd v(p, p);
  for (int x = 0; x < p; ++x)
    for (int r = 0; r < p; ++r)
      v(x, r) = std::polar(1.0, kTau * static_cast<double>(r - K) * x / p);
  return (v * coef * v.transpose()).real();
}

// A cosine factor cos(2 pi (k t + phi) / p) is closer to a sine when its
// phase sits near a quarter period; the form repeats every half period up
// to sign.
bool sin_like(double phi, int p) {
  const double half = p / 2.0;
  double m = std::fmod(phi, half);
  if (m < 0.0) m += half;
  return m >= p / 8.0 && m < 3.0 * p / 8.0;
}

std::string k_part(int k, char axis) {
  std::string s;
  if (k != 1) s += std::to_string(k);
  s += axis;
  return s;
}

std::string render_term(const FourierTerm& t) {
  switch (t.form) {
    case TermForm::Const:
      return "const";
    case TermForm::CosProduct:
      return "cos(" + k_part(t.kx, 'x') + ")cos(" + k_part(t.ky, 'y') + ")";
    case TermForm::SinProduct:
      return "sin(" + k_part(t.kx, 'x') + ")sin(" + k_part(t.ky, 'y') + ")";
    case TermForm::Cos: {
      std::string arg;
      if (t.kx != 0) arg = k_part(t.kx, 'x');
      if (t.ky != 0) {
        if (t.ky > 0 && !arg.empty()) arg += '+';
        if (t.ky < 0) arg += '-';
        arg += k_part(std::abs(t.ky), 'y');
      }
      return "cos(" + arg + ")";
    }
  }
  return "";
}

std::string form_name(TermForm form) {
  switch (form) {
    case TermForm::Const: return "const";
    case TermForm::Cos: return "cos";
    case TermForm::CosProduct: return "cos_product";
    case TermForm::SinProduct: return "sin_product";
  }
  return "";
}

}  // namespace

double FourierSpectrum::amp(int kx, int ky) const {
  const int K = (p - 1) / 2;
  check(std::abs(kx) <= K && std::abs(ky) <= K, "mode outside the spectrum");
  return std::abs(coef(kx + K, ky + K));
}

double FourierSpectrum::phase(int kx, int ky) const {
  const int K = (p - 1) / 2;
  check(std::abs(kx) <= K && std::abs(ky) <= K, "mode outside the spectrum");
  return p * std::arg(coef(kx + K, ky + K)) / kTau;
}

FourierSpectrum fft2_decompose(const Mat& grid, int p) {
  check_cfg(p >= 1 && p % 2 == 1, "modulus must be a positive odd number");
  check(grid.rows() == grid.cols(), "feature grid must be square");
  check(grid.rows() == p, "feature grid must match the modulus");
  check_finite(grid, "feature grid");

  const int K = (p - 1) / 2;
  Eigen::MatrixXcd w(p, p);
  for (int r = 0; r < p; ++r)
    for (int x = 0; x < p; ++x)
      w(r, x) = std::polar(1.0 / p, -kTau * static_cast<double>(r - K) * x / p);

  FourierSpectrum spec;
  spec.p = p;
  spec.coef = w * grid.cast<std::complex<double>>() * w.transpose();

  // Real input pairs mode k with -k as conjugates; enforce that exactly so
  // downstream term extraction sees clean real cosines.
  for (int kx = 0; kx <= K; ++kx)
    for (int ky = (kx == 0 ? 0 : -K); ky <= K; ++ky) {
      std::complex<double>& fwd = spec.coef(kx + K, ky + K);
      std::complex<double>& bwd = spec.coef(-kx + K, -ky + K);
      if (kx == 0 && ky == 0) {
        fwd = fwd.real();
        continue;
      }
      const std::complex<double> avg = 0.5 * (fwd + std::conj(bwd));
      fwd = avg;
      bwd = std::conj(avg);
    }
  return spec;
}

Mat synthesize_spectrum(const FourierSpectrum& spec) {
  check_spectrum(spec);
  return inverse_transform(spec.p, spec.coef);
}

FourierTermList sinusoidal_label(const FourierSpectrum& spec) {
  check_spectrum(spec);
  const int p = spec.p;
  const int K = (p - 1) / 2;

  FourierTermList out;
  out.p = p;
  out.mean = spec.coef(K, K).real();

  // One canonical mode per conjugate pair; each carries variance 2 a^2.
  struct Mode {
    int kx, ky;
    double c2, phi, var;  // c2 is the doubled amplitude of the real cosine
    bool used = false;
  };
  std::vector<Mode> modes;
  std::map<std::pair<int, int>, size_t> at;
  double total = 0.0;
  for (int kx = 0; kx <= K; ++kx)
    for (int ky = (kx == 0 ? 1 : -K); ky <= K; ++ky) {
      const double a = spec.amp(kx, ky);
      total += 2.0 * a * a;
      modes.push_back({kx, ky, 2.0 * a, spec.phase(kx, ky), 2.0 * a * a});
    }
  out.variance = total;

  // A grid whose variance is numerically nil next to its power is constant;
  // without this gate the transform's rounding dust would masquerade as
  // structure.
  if (total <= 1e-26 * (total + out.mean * out.mean)) {
    out.variance = 0.0;
    FourierTerm constant;
    constant.form = TermForm::Const;
    constant.coefficient = out.mean;
    out.terms.push_back(constant);
    out.label = "const";
    return out;
  }

  // Drop modes that hold a negligible share; they stay accounted in total.
  {
    std::vector<Mode> kept;
    for (const Mode& m : modes)
      if (m.var > 1e-26 * total) {
        at[{m.kx, m.ky}] = kept.size();
        kept.push_back(m);
      }
    modes = std::move(kept);
  }

  // Merge (kx, ky) with (kx, -ky) into a product when their weights nearly
  // match: cos(u) + cos(v) = 2 cos((u+v)/2) cos((u-v)/2), and each factor
  // turns into a sine when its phase sits a quarter period off.
  std::vector<FourierTerm> terms;
  for (Mode& m : modes) {
    if (m.used || m.kx < 1 || m.ky < 1) continue;
    auto it = at.find({m.kx, -m.ky});
    if (it == at.end()) continue;
    Mode& partner = modes[it->second];
    if (partner.used) continue;
    const double hi = std::max(m.c2, partner.c2);
    if (std::abs(m.c2 - partner.c2) >= 0.05 * hi) continue;
    m.used = partner.used = true;
    FourierTerm t;
    const bool su = sin_like(0.5 * (m.phi + partner.phi), p);
    const bool sv = sin_like(0.5 * (m.phi - partner.phi), p);
    t.form = (su && sv) ? TermForm::SinProduct : TermForm::CosProduct;
    t.kx = m.kx;
    t.ky = m.ky;
    t.coefficient = m.c2 + partner.c2;
    t.fraction = (m.var + partner.var) / total;
    t.a_plus = m.c2;
    t.phi_plus = m.phi;
    t.a_minus = partner.c2;
    t.phi_minus = partner.phi;
    terms.push_back(t);
  }
  for (const Mode& m : modes) {
    if (m.used) continue;
    FourierTerm t;
    t.form = TermForm::Cos;
    t.kx = m.kx;
    t.ky = m.ky;
    t.coefficient = m.c2;
    t.fraction = m.var / total;
    t.a_plus = m.c2;
    t.phi_plus = m.phi;
    terms.push_back(t);
  }

  std::stable_sort(terms.begin(), terms.end(), [](const FourierTerm& a, const FourierTerm& b) {
    if (a.fraction != b.fraction) return a.fraction > b.fraction;
    if (a.kx != b.kx) return a.kx < b.kx;
    return a.ky < b.ky;
  });
  FourierTerm constant;
  constant.form = TermForm::Const;
  constant.coefficient = out.mean;
  terms.push_back(constant);
  out.terms = std::move(terms);

  std::string label;
  for (const FourierTerm& t : out.terms) {
    if (t.fraction < 0.01) continue;
    if (!label.empty()) label += " + ";
    label += std::to_string(llround(t.fraction * 100.0)) + "% " + render_term(t);
  }
  out.label = label.empty() ? "const" : label;
  return out;
}

Mat synthesize_terms(const FourierTermList& list) {
  check_cfg(list.p >= 1 && list.p % 2 == 1, "modulus must be a positive odd number");
  const int p = list.p;
  const int K = (p - 1) / 2;
  Eigen::MatrixXcd coef = Eigen::MatrixXcd::Zero(p, p);
  auto add_pair = [&](int kx, int ky, double c2, double phi) {
    check(std::abs(kx) <= K && std::abs(ky) <= K, "term mode outside the spectrum");
    const std::complex<double> half = std::polar(0.5 * c2, kTau * phi / p);
    coef(kx + K, ky + K) += half;
    coef(-kx + K, -ky + K) += std::conj(half);
  };
  for (const FourierTerm& t : list.terms) {
    switch (t.form) {
      case TermForm::Const:
        break;
      case TermForm::Cos:
        add_pair(t.kx, t.ky, t.a_plus, t.phi_plus);
        break;
      case TermForm::CosProduct:
      case TermForm::SinProduct:
        add_pair(t.kx, t.ky, t.a_plus, t.phi_plus);
        add_pair(t.kx, -t.ky, t.a_minus, t.phi_minus);
        break;
    }
  }
  coef(K, K) += list.mean;
  return inverse_transform(p, coef);
}

double monosemanticity_score(const FourierTermList& list) {
  check_cfg(list.variance > 0.0, "monosemanticity of a constant feature is undefined");
  double best = 0.0;
  for (const FourierTerm& t : list.terms) best = std::max(best, t.fraction);
  return best;
}

std::vector<FeatureLabel> label_section_features(const SequentialNetwork& net,
                                                 const InteractionBasis& basis, int p) {
  check_cfg(p >= 3 && p % 2 == 1, "modulus must be odd and at least 3");
  check(net.token_input, "feature labeling needs a token-input network");
  check(net.T == 3, "feature labeling expects (x, y, =) sequences");
  check(!net.layers.empty() && net.layers.front().kind == LayerKind::Embed &&
            net.layers.front().tok_table.rows() > p,
        "vocabulary must cover tokens 0 through p");
  const int s = basis.section;
  check(s >= 0 && s < net.section_count(), "basis section outside the network");
  check(basis.width() == net.section_width(s), "basis width must match its section");

  Batch batch;
  batch.n = static_cast<Eigen::Index>(p) * p;
  batch.ids.reserve(static_cast<size_t>(batch.n) * 3);
  for (int x = 0; x < p; ++x)
    for (int y = 0; y < p; ++y) {
      batch.ids.push_back(x);
      batch.ids.push_back(y);
      batch.ids.push_back(p);
    }
  const std::vector<int> only{s};
  ActivationRecord acts = forward_sections(net, batch, &only);

  Mat last(batch.n, basis.width());
  for (Eigen::Index i = 0; i < batch.n; ++i)
    last.row(i) = acts.sec(s).row(i * net.T + net.T - 1);
  Mat fhat = (basis.c.topRows(basis.kept + 1) * last.transpose()).transpose();

  std::vector<FeatureLabel> labels;
  labels.reserve(static_cast<size_t>(basis.kept));
  Mat grid(p, p);
  for (Eigen::Index j = 1; j <= basis.kept; ++j) {
    for (int x = 0; x < p; ++x)
      for (int y = 0; y < p; ++y) grid(x, y) = fhat(static_cast<Eigen::Index>(x) * p + y, j);
    FourierTermList list = sinusoidal_label(fft2_decompose(grid, p));
    FeatureLabel fl;
    fl.section = s;
    fl.feature = j;
    fl.label = list.label;
    fl.score = list.variance > 0.0 ? monosemanticity_score(list) : 0.0;
    fl.terms = std::move(list);
    labels.push_back(std::move(fl));
  }
  return labels;
}

void apply_labels(InteractionGraph& graph, const std::vector<FeatureLabel>& labels) {
  for (const FeatureLabel& fl : labels) {
    check(fl.section >= 0 && fl.section < static_cast<int>(graph.nodes.size()),
          "label section outside the graph");
    bool hit = false;
    for (GraphNode& nd : graph.nodes[fl.section])
      if (nd.index == fl.feature) {
        nd.label = fl.label;
        hit = true;
        break;
      }
    check(hit, "label names a feature the graph does not keep");
  }
}

void export_labels_json(const std::vector<FeatureLabel>& labels, const std::string& path) {
  nlohmann::json doc = nlohmann::json::array();
  for (const FeatureLabel& fl : labels) {
    nlohmann::json row;
    row["section"] = fl.section;
    row["feature"] = fl.feature;
    row["label"] = fl.label;
    row["score"] = fl.score;
    row["terms"] = nlohmann::json::array();
    for (const FourierTerm& t : fl.terms.terms) {
      nlohmann::json term;
      term["form"] = form_name(t.form);
      term["kx"] = t.kx;
      term["ky"] = t.ky;
      term["coefficient"] = t.coefficient;
      term["fraction"] = t.fraction;
      row["terms"].push_back(term);
    }
    doc.push_back(row);
  }
  std::ofstream out(path);
  check_cfg(out.good(), "cannot write " + path);
  out << doc.dump(1) << "\n";
}

}  // namespace ibg
