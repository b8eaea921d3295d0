#pragma once

#include "ncdssm/common.hpp"

#include <vector>

namespace ncdssm::la {

/// Cholesky factor of a symmetric PSD matrix. Tolerates semidefinite input:
/// pivots within -tol..0 are clamped to zero, pivots below -tol (with
/// tol = 1e-12 * ||m||) raise NotPositiveSemiDefinite. Asymmetric input
/// (relative to 1e-10) is rejected.
Mat cholesky(const Mat& m);

/// R factor of a Householder QR with the diagonal normalized nonnegative.
/// Requires rows >= cols; returns the cols x cols upper-triangular block.
Mat qr_r_factor(const Mat& a);

/// Lower-triangular L with L L^T = a a^T + b b^T, computed as the transposed
/// R factor of the stacked matrix [a b]^T. Factors may be rectangular; only
/// the row counts must agree.
Mat sum_matrix_sqrts(const Mat& a_sqrt, const Mat& b_sqrt);

/// Left fold of sum_matrix_sqrts over a non-empty factor list.
Mat reduce_sum_matrix_sqrts(const std::vector<Mat>& factors);

/// Matrix exponential by scaling-and-squaring around a 13th-order Pade
/// approximant.
Mat matrix_exponential(const Mat& a);

/// Largest singular value via power iteration on a^T a.
double spectral_norm(const Mat& a, int iters = 50);

/// One power-iteration refresh of the right singular vector estimate, then
/// sigma = ||a v||. Used where the iteration state persists across calls.
double spectral_norm_step(const Mat& a, Vec& v);

/// Solves l x = b (or l^T x = b when transposed) for lower-triangular l.
/// Raises SingularFactor when a diagonal entry falls below 1e-12.
Mat tri_solve(const Mat& l, const Mat& b, bool transposed = false);

}  // namespace ncdssm::la
