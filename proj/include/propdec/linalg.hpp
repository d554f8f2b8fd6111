#pragma once

// Small dense linear algebra: one-sided Jacobi SVD, Gram-Schmidt,
// principal angles, random orthogonal frames. Everything here is sized
// for d_model x d_model matrices, not for large problems.

#include <algorithm>
#include <numeric>

#include "propdec/rng.hpp"
#include "propdec/tensor.hpp"

namespace propdec {

struct SvdResult {
    Mat u;  // m x n, columns are left singular vectors
    Vec s;  // n singular values, descending
    Mat v;  // n x n, columns are right singular vectors
};

// One-sided Jacobi SVD of a square (or tall) matrix A = U S V^T.
// Rotates column pairs of a working copy of A until all pairs are
// orthogonal; the orthogonalized columns are U*S and the accumulated
// rotations give V.
SvdResult svd(const Mat& a, int max_sweeps = 60, double tol = 1e-13);

// Modified Gram-Schmidt on the columns of a (m x n). Returns m x r with
// r <= n orthonormal columns; near-dependent columns are dropped.
Mat orthonormalize_columns(const Mat& a, double drop_tol = 1e-10);

// Principal angles (degrees, ascending) between the column spans of two
// orthonormal bases with the same row count.
Vec principal_angles_deg(const Mat& basis_a, const Mat& basis_b);

inline double max_principal_angle_deg(const Mat& a, const Mat& b) {
    Vec ang = principal_angles_deg(a, b);
    return ang.empty() ? 0.0 : ang.back();
}

// Random orthogonal d x d matrix (QR of a Gaussian matrix, deterministic
// in the generator state).
Mat random_orthogonal(int d, Rng& rng);

// Symmetric eigendecomposition by classic two-sided Jacobi; used as an
// independent route when validating the SVD. Returns eigenvalues
// (descending) and the matching eigenvector columns.
void jacobi_eigh(const Mat& a, Vec& eigenvalues, Mat& eigenvectors);

} // namespace propdec
