#include "ncdssm/sqrt_linalg.hpp"

#include <Eigen/QR>

#include <cmath>

namespace ncdssm::la {

Mat cholesky(const Mat& m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("cholesky: matrix must be square");
  const double scale = m.norm();
  const double sym_tol = 1e-10 * std::max(scale, 1.0);
  if ((m - m.transpose()).norm() > sym_tol)
    throw NotPositiveSemiDefinite("cholesky: input is not symmetric");
  const double pivot_tol = 1e-12 * std::max(scale, 1.0);

  const int n = static_cast<int>(m.rows());
  Mat l = Mat::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    double d = m(j, j);
    for (int k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (d < -pivot_tol)
      throw NotPositiveSemiDefinite("cholesky: negative pivot at column " + std::to_string(j));
    if (d <= pivot_tol) {
      // Semidefinite direction: zero pivot, zero column.
      l(j, j) = 0.0;
      continue;
    }
    l(j, j) = std::sqrt(d);
    for (int i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

Mat qr_r_factor(const Mat& a) {
  if (a.rows() < a.cols()) throw std::invalid_argument("qr_r_factor: requires rows >= cols");
  Eigen::HouseholderQR<Mat> qr(a);
  const int p = static_cast<int>(a.cols());
  Mat r = qr.matrixQR().topRows(p).triangularView<Eigen::Upper>();
  for (int i = 0; i < p; ++i)
    if (r(i, i) < 0.0) r.row(i) = -r.row(i);
  return r;
}

Mat sum_matrix_sqrts(const Mat& a_sqrt, const Mat& b_sqrt) {
  if (a_sqrt.rows() != b_sqrt.rows())
    throw std::invalid_argument("sum_matrix_sqrts: row counts differ");
  const long n = a_sqrt.rows();
  Mat stacked(a_sqrt.cols() + b_sqrt.cols(), n);
  stacked.topRows(a_sqrt.cols()) = a_sqrt.transpose();
  stacked.bottomRows(b_sqrt.cols()) = b_sqrt.transpose();
  if (stacked.rows() < n) {
    // Fewer combined columns than rows: pad with zeros so QR yields an n x n factor.
    Mat padded = Mat::Zero(n, n);
    padded.topRows(stacked.rows()) = stacked;
    stacked.swap(padded);
  }
  return qr_r_factor(stacked).transpose();
}

Mat reduce_sum_matrix_sqrts(const std::vector<Mat>& factors) {
  if (factors.empty())
    throw std::invalid_argument("reduce_sum_matrix_sqrts: empty factor list");
  if (factors.size() == 1) {
    // Canonicalize through a degenerate sum so the output is always a
    // lower-triangular factor with nonnegative diagonal.
    return sum_matrix_sqrts(factors[0], Mat::Zero(factors[0].rows(), 1));
  }
  Mat acc = factors[0];
  for (std::size_t i = 1; i < factors.size(); ++i) acc = sum_matrix_sqrts(acc, factors[i]);
  return acc;
}

namespace {

// Pade-13 numerator/denominator split: U odd, V even in the argument.
void pade13_uv(const Mat& b, Mat& u, Mat& v) {
  static const double c[14] = {
      64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
      129060195264000.0,   10559470521600.0,    670442572800.0,     33522128640.0,
      1323241920.0,        40840800.0,          960960.0,           16380.0,
      182.0,               1.0};
  const long n = b.rows();
  const Mat ident = Mat::Identity(n, n);
  const Mat b2 = b * b;
  const Mat b4 = b2 * b2;
  const Mat b6 = b4 * b2;
  u = b * (b6 * (c[13] * b6 + c[11] * b4 + c[9] * b2) + c[7] * b6 + c[5] * b4 + c[3] * b2 +
           c[1] * ident);
  v = b6 * (c[12] * b6 + c[10] * b4 + c[8] * b2) + c[6] * b6 + c[4] * b4 + c[2] * b2 + c[0] * ident;
}

}  // namespace

Mat matrix_exponential(const Mat& a) {
  if (a.rows() != a.cols())
    throw std::invalid_argument("matrix_exponential: matrix must be square");
  const double theta13 = 5.371920351148152;
  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();  // 1-norm
  int s = 0;
  if (norm > theta13) s = static_cast<int>(std::ceil(std::log2(norm / theta13)));
  const Mat b = a / std::pow(2.0, s);
  Mat u, v;
  pade13_uv(b, u, v);
  Mat f = (v - u).partialPivLu().solve(v + u);
  for (int i = 0; i < s; ++i) f = f * f;
  return f;
}

double spectral_norm_step(const Mat& a, Vec& v) {
  const double nv = v.norm();
  if (nv == 0.0) return 0.0;
  v /= nv;
  Vec av = a * v;
  Vec w = a.transpose() * av;
  const double nw = w.norm();
  if (nw > 0.0) v = w / nw;
  return (a * v).norm();
}

double spectral_norm(const Mat& a, int iters) {
  if (iters < 1) throw std::invalid_argument("spectral_norm: iters must be >= 1");
  if (a.size() == 0 || a.norm() == 0.0) return 0.0;
  // Fixed start direction keeps results reproducible; perturbed if orthogonal
  // to the dominant subspace the first sweep fixes it.
  Vec v = Vec::Ones(a.cols());
  double sigma = 0.0;
  for (int i = 0; i < iters; ++i) sigma = spectral_norm_step(a, v);
  return sigma;
}

Mat tri_solve(const Mat& l, const Mat& b, bool transposed) {
  if (l.rows() != l.cols()) throw std::invalid_argument("tri_solve: factor must be square");
  if (l.rows() != b.rows()) throw std::invalid_argument("tri_solve: shape mismatch");
  for (long i = 0; i < l.rows(); ++i)
    if (std::abs(l(i, i)) < 1e-12)
      throw SingularFactor("tri_solve: factor diagonal below 1e-12 at " + std::to_string(i));
  if (transposed) return l.transpose().triangularView<Eigen::Upper>().solve(b);
  return l.triangularView<Eigen::Lower>().solve(b);
}

}  // namespace ncdssm::la
