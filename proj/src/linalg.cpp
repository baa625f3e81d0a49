#include "ibg/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace ibg {

namespace {

void sign_fix(Mat& vectors) {
  for (Eigen::Index c = 0; c < vectors.cols(); ++c) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
      double m = std::abs(vectors(r, c));
      if (m > best) {
        best = m;
        arg = r;
      }
    }
    if (vectors(arg, c) < 0.0) vectors.col(c) = -vectors.col(c);
  }
}

bool lex_less_desc(const Mat& vectors, Eigen::Index a, Eigen::Index b) {
  for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
    if (vectors(r, a) != vectors(r, b)) return vectors(r, a) > vectors(r, b);
  }
  return false;
}

}  // namespace

SymEigen eig_sym(const Mat& a, double sym_tol) {
  check(a.rows() == a.cols(), "eig_sym: matrix must be square");
  check(a.size() > 0, "eig_sym: matrix must be non-empty");
  check_finite(a, "eig_sym");
  double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  check(asym <= sym_tol, "eig_sym: asymmetry " + std::to_string(asym) + " exceeds tolerance");

  Mat sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> solver(sym);
  check(solver.info() == Eigen::Success, "eig_sym: eigendecomposition failed to converge");

  const Eigen::Index n = sym.rows();
  Mat vecs = solver.eigenvectors();
  Vec vals = solver.eigenvalues();
  sign_fix(vecs);

  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) {
    if (vals(x) != vals(y)) return vals(x) > vals(y);
    return lex_less_desc(vecs, x, y);
  });

  SymEigen out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = vals(order[static_cast<size_t>(i)]);
    out.vectors.col(i) = vecs.col(order[static_cast<size_t>(i)]);
  }
  return out;
}

Vec pinv_sqrt_diag(const Vec& d, double tol) {
  check(tol >= 0.0, "pinv_sqrt_diag: tolerance must be non-negative");
  check_finite(d, "pinv_sqrt_diag");
  Vec out(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    check(d(i) >= -tol, "pinv_sqrt_diag: entry " + std::to_string(d(i)) + " below -tolerance");
    out(i) = d(i) > tol ? 1.0 / std::sqrt(d(i)) : 0.0;
  }
  return out;
}

Vec sqrt_clamped(const Vec& d, double tol) {
  check(tol >= 0.0, "sqrt_clamped: tolerance must be non-negative");
  check_finite(d, "sqrt_clamped");
  Vec out(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    check(d(i) >= -tol, "sqrt_clamped: entry " + std::to_string(d(i)) + " below -tolerance");
    out(i) = d(i) > 0.0 ? std::sqrt(d(i)) : 0.0;
  }
  return out;
}

}  // namespace ibg
