#pragma once

#include "ibg/common.hpp"

namespace ibg {

// Eigendecomposition of a symmetric matrix. `values` descending; column i of
// `vectors` is the unit eigenvector for values(i). Deterministic conventions:
// each eigenvector's largest-magnitude entry (first index on magnitude ties)
// is made positive; among exactly equal eigenvalues, eigenvectors are ordered
// lexicographically descending.
struct SymEigen {
  Vec values;
  Mat vectors;
};

SymEigen eig_sym(const Mat& a, double sym_tol = 1e-9);

// Elementwise 1/sqrt(d) with entries <= tol mapped to zero. Entries below
// -tol are rejected; small negatives inside the tolerance band clamp to zero.
Vec pinv_sqrt_diag(const Vec& d, double tol);

// Elementwise sqrt(max(d, 0)) with the same negative-entry policy.
Vec sqrt_clamped(const Vec& d, double tol);

}  // namespace ibg
