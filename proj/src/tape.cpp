#include "ncdssm/tape.hpp"

#include "ncdssm/sqrt_linalg.hpp"

#include <Eigen/LU>
#include <Eigen/QR>

#include <cmath>

namespace ncdssm::ad {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double softplus_scalar(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Pade-13 coefficients, shared by the forward pass and the backward recursion.
constexpr double kPade13[14] = {
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
    129060195264000.0,   10559470521600.0,    670442572800.0,     33522128640.0,
    1323241920.0,        40840800.0,          960960.0,           16380.0,
    182.0,               1.0};

[[noreturn]] void shape_error(const char* op) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes");
}

// Lower triangle mirrored onto the upper one.
Mat copyltu(const Mat& m) {
  Mat out = m.triangularView<Eigen::Lower>();
  out += Mat(m.triangularView<Eigen::StrictlyLower>()).transpose();
  return out;
}

}  // namespace

Eigen::Map<const Mat> Tape::node_value(std::int32_t id) const {
  const Node& n = nodes_[id];
  return Eigen::Map<const Mat>(val_buf_.data() + n.val, n.rows, n.cols);
}

Eigen::Map<Mat> Tape::node_adj(std::int32_t id) {
  const Node& n = nodes_[id];
  return Eigen::Map<Mat>(adj_buf_.data() + n.val, n.rows, n.cols);
}

Eigen::Map<const Mat> Tape::value(Var v) const { return node_value(v.id); }

Eigen::Map<const Mat> Tape::adjoint(Var v) const {
  const Node& n = nodes_[v.id];
  return Eigen::Map<const Mat>(adj_buf_.data() + n.val, n.rows, n.cols);
}

std::size_t Tape::stash(const Mat& m) {
  const std::size_t off = cache_top_;
  cache_top_ += m.size();
  if (cache_buf_.size() < cache_top_)
    cache_buf_.resize(std::max(cache_top_, cache_buf_.size() * 2));
  Eigen::Map<Mat>(cache_buf_.data() + off, m.rows(), m.cols()) = m;
  return off;
}

Eigen::Map<const Mat> Tape::stashed(std::size_t off, int rows, int cols) const {
  return Eigen::Map<const Mat>(cache_buf_.data() + off, rows, cols);
}

Var Tape::push(Op op, const Mat& value, std::initializer_list<std::int32_t> inputs) {
  Node n;
  n.op = op;
  n.rows = static_cast<std::int32_t>(value.rows());
  n.cols = static_cast<std::int32_t>(value.cols());
  n.val = val_top_;
  n.nin = static_cast<std::uint8_t>(inputs.size());
  int i = 0;
  for (std::int32_t id : inputs) n.in[i++] = id;
  val_top_ += value.size();
  if (val_buf_.size() < val_top_) val_buf_.resize(std::max(val_top_, val_buf_.size() * 2));
  Eigen::Map<Mat>(val_buf_.data() + n.val, n.rows, n.cols) = value;
  nodes_.push_back(n);
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1), n.rows, n.cols};
}

void Tape::clear() {
  nodes_.clear();
  val_top_ = 0;
  cache_top_ = 0;
}

Var Tape::constant(const Mat& v) { return push(Op::Constant, v, {}); }
Var Tape::leaf(const Mat& v) { return push(Op::Leaf, v, {}); }

Var Tape::unary_check(Var a) const {
  if (a.tape != this) throw std::invalid_argument("tape: var belongs to another tape");
  return a;
}

Var Tape::matmul(Var a, Var b) {
  if (a.cols != b.rows) shape_error("matmul");
  Mat out = value(a) * value(b);
  return push(Op::MatMul, out, {a.id, b.id});
}

Var Tape::add(Var a, Var b) {
  if (a.rows != b.rows || a.cols != b.cols) shape_error("add");
  Mat out = value(a) + value(b);
  return push(Op::Add, out, {a.id, b.id});
}

Var Tape::sub(Var a, Var b) {
  if (a.rows != b.rows || a.cols != b.cols) shape_error("subtract");
  Mat out = value(a) - value(b);
  return push(Op::Sub, out, {a.id, b.id});
}

Var Tape::scale(Var a, double c) {
  Mat out = value(a) * c;
  Var v = push(Op::Scale, out, {a.id});
  nodes_.back().scalar = c;
  return v;
}

Var Tape::scale_by(Var a, Var s) {
  if (!s.is_scalar()) shape_error("scale_by");
  Mat out = value(a) * value(s)(0, 0);
  return push(Op::ScaleByVar, out, {a.id, s.id});
}

Var Tape::transpose(Var a) {
  Mat out = value(a).transpose();
  return push(Op::Transpose, out, {a.id});
}

Var Tape::tanh(Var a) {
  Mat out = value(a).array().tanh();
  return push(Op::Tanh, out, {a.id});
}

Var Tape::softplus(Var a) {
  Mat out = value(a).unaryExpr([](double x) { return softplus_scalar(x); });
  return push(Op::Softplus, out, {a.id});
}

Var Tape::exp(Var a) {
  Mat out = value(a).array().exp();
  return push(Op::Exp, out, {a.id});
}

Var Tape::log(Var a) {
  Mat out = value(a).array().log();
  return push(Op::Log, out, {a.id});
}

Var Tape::square(Var a) {
  Mat out = value(a).array().square();
  return push(Op::Square, out, {a.id});
}

Var Tape::sqrt(Var a) {
  Mat out = value(a).array().sqrt();
  return push(Op::Sqrt, out, {a.id});
}

Var Tape::reciprocal(Var a) {
  Mat out = value(a).array().inverse();
  return push(Op::Reciprocal, out, {a.id});
}

Var Tape::mul(Var a, Var b) {
  if (a.rows != b.rows || a.cols != b.cols) shape_error("mul");
  Mat out = value(a).cwiseProduct(value(b));
  return push(Op::Mul, out, {a.id, b.id});
}

Var Tape::reduce_sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = value(a).sum();
  return push(Op::ReduceSum, out, {a.id});
}

Var Tape::concat_rows(Var a, Var b) {
  if (a.cols != b.cols) shape_error("concat_rows");
  Mat out(a.rows + b.rows, a.cols);
  out.topRows(a.rows) = value(a);
  out.bottomRows(b.rows) = value(b);
  return push(Op::ConcatRows, out, {a.id, b.id});
}

Var Tape::concat_cols(Var a, Var b) {
  if (a.rows != b.rows) shape_error("concat_cols");
  Mat out(a.rows, a.cols + b.cols);
  out.leftCols(a.cols) = value(a);
  out.rightCols(b.cols) = value(b);
  return push(Op::ConcatCols, out, {a.id, b.id});
}

Var Tape::slice(Var a, int r0, int c0, int rows, int cols) {
  if (r0 < 0 || c0 < 0 || r0 + rows > a.rows || c0 + cols > a.cols) shape_error("slice");
  Mat out = value(a).block(r0, c0, rows, cols);
  Var v = push(Op::Slice, out, {a.id});
  nodes_.back().aux_i[0] = r0;
  nodes_.back().aux_i[1] = c0;
  return v;
}

Var Tape::diag_embed(Var v) {
  if (v.cols != 1) shape_error("diag_embed");
  Mat out = Mat::Zero(v.rows, v.rows);
  out.diagonal() = value(v).col(0);
  return push(Op::DiagEmbed, out, {v.id});
}

Var Tape::scale_rows(Var a, Var v) {
  if (v.cols != 1 || v.rows != a.rows) shape_error("scale_rows");
  Mat out = value(v).col(0).asDiagonal() * value(a);
  return push(Op::ScaleRows, out, {a.id, v.id});
}

Var Tape::softmax_rows(Var a) {
  Mat out = value(a);
  for (long r = 0; r < out.rows(); ++r) {
    const double mx = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return push(Op::SoftmaxRows, out, {a.id});
}

Var Tape::cholesky(Var a) {
  if (a.rows != a.cols) shape_error("cholesky");
  Mat out = la::cholesky(value(a));
  return push(Op::Cholesky, out, {a.id});
}

Var Tape::qr_r_factor(Var a) {
  if (a.rows < a.cols) shape_error("qr_r_factor");
  const int p = a.cols;
  Eigen::HouseholderQR<Mat> qr(Mat(value(a)));
  Mat r = qr.matrixQR().topRows(p).triangularView<Eigen::Upper>();
  Mat q = qr.householderQ() * Mat::Identity(a.rows, p);
  for (int i = 0; i < p; ++i) {
    if (r(i, i) < 0.0) {
      r.row(i) = -r.row(i);
      q.col(i) = -q.col(i);
    }
  }
  Var v = push(Op::QrRFactor, r, {a.id});
  nodes_.back().aux = stash(q);
  return v;
}

Var Tape::tri_solve(Var l, Var b, bool transposed) {
  if (l.rows != l.cols || l.rows != b.rows) shape_error("tri_solve");
  Mat out = la::tri_solve(value(l), value(b), transposed);
  Var v = push(Op::TriSolve, out, {l.id, b.id});
  nodes_.back().scalar = transposed ? 1.0 : 0.0;
  return v;
}

Var Tape::matrix_exponential(Var a) {
  if (a.rows != a.cols) shape_error("matrix_exponential");
  const int n = a.rows;
  const Mat av = value(a);
  const double theta13 = 5.371920351148152;
  const double norm = av.cwiseAbs().colwise().sum().maxCoeff();
  int s = 0;
  if (norm > theta13) s = static_cast<int>(std::ceil(std::log2(norm / theta13)));

  const Mat ident = Mat::Identity(n, n);
  const Mat b = av / std::pow(2.0, s);
  const Mat b2 = b * b;
  const Mat b4 = b2 * b2;
  const Mat b6 = b4 * b2;
  const double* c = kPade13;
  const Mat u = b * (b6 * (c[13] * b6 + c[11] * b4 + c[9] * b2) + c[7] * b6 + c[5] * b4 +
                     c[3] * b2 + c[1] * ident);
  const Mat v = b6 * (c[12] * b6 + c[10] * b4 + c[8] * b2) + c[6] * b6 + c[4] * b4 + c[2] * b2 +
                c[0] * ident;
  Mat f = (v - u).partialPivLu().solve(v + u);

  // Cache the whole chain for the backward recursion: the scaled argument,
  // its powers, the Pade halves, and every pre-squaring iterate.
  const std::size_t aux = stash(b);
  stash(b2);
  stash(b4);
  stash(b6);
  stash(u);
  stash(v);
  for (int j = 0; j < s; ++j) {
    stash(f);
    f = f * f;
  }
  Var out = push(Op::MatrixExp, f, {a.id});
  nodes_.back().aux = aux;
  nodes_.back().aux_i[0] = s;
  return out;
}

Var Tape::gaussian_logpdf(Var x, Var mean, Var factor) {
  if (x.cols != 1 || mean.cols != 1 || x.rows != mean.rows || factor.rows != factor.cols ||
      factor.rows != x.rows)
    shape_error("gaussian_logpdf");
  const int k = x.rows;
  const Mat lv = value(factor);
  for (int i = 0; i < k; ++i)
    if (lv(i, i) <= 0.0) throw SingularFactor("gaussian_logpdf: factor diagonal must be positive");
  const Vec r = lv.triangularView<Eigen::Lower>().solve(Vec(value(x) - value(mean)));
  double val = -0.5 * r.squaredNorm() - 0.5 * k * kLog2Pi;
  for (int i = 0; i < k; ++i) val -= std::log(lv(i, i));
  Mat out(1, 1);
  out(0, 0) = val;
  return push(Op::GaussianLogPdf, out, {x.id, mean.id, factor.id});
}

void Tape::backward(Var root) {
  if (!root.is_scalar()) throw std::invalid_argument("backward: root must be 1x1");
  unary_check(root);
  adj_buf_.assign(val_top_, 0.0);
  touched_.assign(nodes_.size(), 0);
  node_adj(root.id)(0, 0) = 1.0;
  touched_[root.id] = 1;
  for (std::int32_t id = root.id; id >= 0; --id) {
    if (!touched_[id]) continue;
    backward_node(nodes_[id]);
  }
}

void Tape::backward_node(const Node& n) {
  const std::int32_t self = static_cast<std::int32_t>(&n - nodes_.data());
  auto bar = [&]() { return node_adj(self); };
  auto in_val = [&](int i) { return node_value(n.in[i]); };
  // Accumulation helper; constants do not collect gradients.
  auto acc = [&](int i, const Mat& g) {
    const std::int32_t id = n.in[i];
    if (nodes_[id].op == Op::Constant) return;
    node_adj(id) += g;
    touched_[id] = 1;
  };

  switch (n.op) {
    case Op::Constant:
    case Op::Leaf:
      break;
    case Op::MatMul:
      acc(0, bar() * in_val(1).transpose());
      acc(1, in_val(0).transpose() * bar());
      break;
    case Op::Add:
      acc(0, bar());
      acc(1, bar());
      break;
    case Op::Sub:
      acc(0, bar());
      acc(1, -bar());
      break;
    case Op::Scale:
      acc(0, n.scalar * bar());
      break;
    case Op::ScaleByVar: {
      const double s = in_val(1)(0, 0);
      acc(0, s * bar());
      Mat gs(1, 1);
      gs(0, 0) = bar().cwiseProduct(in_val(0)).sum();
      acc(1, gs);
      break;
    }
    case Op::Transpose:
      acc(0, bar().transpose());
      break;
    case Op::Tanh: {
      const Mat y = node_value(self);
      acc(0, bar().cwiseProduct((1.0 - y.array().square()).matrix()));
      break;
    }
    case Op::Softplus:
      acc(0, bar().cwiseProduct(in_val(0).unaryExpr([](double x) { return sigmoid_scalar(x); })));
      break;
    case Op::Exp:
      acc(0, bar().cwiseProduct(node_value(self)));
      break;
    case Op::Log:
      acc(0, bar().cwiseQuotient(in_val(0)));
      break;
    case Op::Square:
      acc(0, 2.0 * bar().cwiseProduct(in_val(0)));
      break;
    case Op::Sqrt:
      acc(0, 0.5 * bar().cwiseQuotient(node_value(self)));
      break;
    case Op::Reciprocal: {
      const Mat y = node_value(self);
      acc(0, -bar().cwiseProduct(y).cwiseProduct(y));
      break;
    }
    case Op::Mul:
      acc(0, bar().cwiseProduct(in_val(1)));
      acc(1, bar().cwiseProduct(in_val(0)));
      break;
    case Op::ReduceSum:
      acc(0, Mat::Constant(nodes_[n.in[0]].rows, nodes_[n.in[0]].cols, bar()(0, 0)));
      break;
    case Op::ConcatRows: {
      const int ra = nodes_[n.in[0]].rows;
      acc(0, bar().topRows(ra));
      acc(1, bar().bottomRows(n.rows - ra));
      break;
    }
    case Op::ConcatCols: {
      const int ca = nodes_[n.in[0]].cols;
      acc(0, bar().leftCols(ca));
      acc(1, bar().rightCols(n.cols - ca));
      break;
    }
    case Op::Slice: {
      Mat g = Mat::Zero(nodes_[n.in[0]].rows, nodes_[n.in[0]].cols);
      g.block(n.aux_i[0], n.aux_i[1], n.rows, n.cols) = bar();
      acc(0, g);
      break;
    }
    case Op::DiagEmbed: {
      Mat g(n.rows, 1);
      g.col(0) = bar().diagonal();
      acc(0, g);
      break;
    }
    case Op::ScaleRows: {
      acc(0, in_val(1).col(0).asDiagonal() * bar());
      Mat gv(n.rows, 1);
      gv.col(0) = bar().cwiseProduct(in_val(0)).rowwise().sum();
      acc(1, gv);
      break;
    }
    case Op::SoftmaxRows: {
      const Mat y = node_value(self);
      Mat g = bar().cwiseProduct(y);
      const Vec rowdot = g.rowwise().sum();
      g -= rowdot.asDiagonal() * Mat(y);
      acc(0, g);
      break;
    }
    case Op::Cholesky: {
      // Adjoint with respect to the (symmetric) input: sym(L^{-T} P L^{-1})
      // with P the lower triangle of L^T Lbar, diagonal halved.
      const Mat l = node_value(self);
      Mat p = Mat(l.transpose() * bar()).triangularView<Eigen::Lower>();
      p.diagonal() *= 0.5;
      const Mat lp = l.transpose().triangularView<Eigen::Upper>().solve(p);  // L^{-T} P
      const Mat g = l.transpose().triangularView<Eigen::Upper>().solve(lp.transpose());
      acc(0, 0.5 * (g + g.transpose()));
      break;
    }
    case Op::QrRFactor: {
      const int p = n.cols;
      const Mat q = stashed(n.aux, nodes_[n.in[0]].rows, p);
      const Mat r = node_value(self);
      const Mat m = copyltu(r * bar().transpose());
      // g = Q * m * R^{-T}
      const Mat mrt = r.triangularView<Eigen::Upper>().solve(m.transpose()).transpose();
      acc(0, q * mrt);
      break;
    }
    case Op::TriSolve: {
      const bool transposed = n.scalar != 0.0;
      const Mat l = in_val(0);
      const Mat x = node_value(self);
      if (!transposed) {
        const Mat gb = l.transpose().triangularView<Eigen::Upper>().solve(Mat(bar()));
        acc(1, gb);
        acc(0, Mat((-gb * x.transpose()).triangularView<Eigen::Lower>()));
      } else {
        const Mat gb = l.triangularView<Eigen::Lower>().solve(Mat(bar()));
        acc(1, gb);
        acc(0, Mat((-x * gb.transpose()).triangularView<Eigen::Lower>()));
      }
      break;
    }
    case Op::MatrixExp: {
      const int nn = n.rows;
      const int s = n.aux_i[0];
      std::size_t off = n.aux;
      const Mat b = stashed(off, nn, nn);
      off += nn * nn;
      const Mat b2 = stashed(off, nn, nn);
      off += nn * nn;
      const Mat b4 = stashed(off, nn, nn);
      off += nn * nn;
      const Mat b6 = stashed(off, nn, nn);
      off += nn * nn;
      const Mat u = stashed(off, nn, nn);
      off += nn * nn;
      const Mat v = stashed(off, nn, nn);
      off += nn * nn;

      Mat g = bar();
      // Undo the squaring chain.
      for (int j = s - 1; j >= 0; --j) {
        const Mat fj = stashed(off + static_cast<std::size_t>(j) * nn * nn, nn, nn);
        g = g * fj.transpose() + fj.transpose() * g;
      }
      const Mat f0 = s > 0 ? Mat(stashed(off, nn, nn)) : Mat(node_value(self));
      const Mat d = v - u;
      const Mat gn = d.transpose().partialPivLu().solve(g);
      const Mat gd = -gn * f0.transpose();
      const Mat gv = gn + gd;
      const Mat gu = gn - gd;

      const double* c = kPade13;
      const Mat ident = Mat::Identity(nn, nn);
      const Mat p1 = c[13] * b6 + c[11] * b4 + c[9] * b2;
      const Mat w = b6 * p1 + c[7] * b6 + c[5] * b4 + c[3] * b2 + c[1] * ident;
      const Mat p2 = c[12] * b6 + c[10] * b4 + c[8] * b2;

      Mat gb = gu * w.transpose();
      const Mat gw = b.transpose() * gu;
      Mat gb6 = gw * p1.transpose() + c[7] * gw + gv * p2.transpose() + c[6] * gv;
      const Mat gp1 = b6.transpose() * gw;
      const Mat gp2 = b6.transpose() * gv;
      Mat gb4 = c[5] * gw + c[4] * gv + c[11] * gp1 + c[10] * gp2;
      Mat gb2 = c[3] * gw + c[2] * gv + c[9] * gp1 + c[8] * gp2;
      // b6 = b4 * b2, b4 = b2 * b2, b2 = b * b.
      gb4 += gb6 * b2.transpose();
      gb2 += b4.transpose() * gb6;
      gb2 += gb4 * b2.transpose() + b2.transpose() * gb4;
      gb += gb2 * b.transpose() + b.transpose() * gb2;
      acc(0, gb / std::pow(2.0, s));
      break;
    }
    case Op::GaussianLogPdf: {
      const double g = bar()(0, 0);
      const Mat l = in_val(2);
      const int k = nodes_[n.in[0]].rows;
      const Vec diff = in_val(0).col(0) - in_val(1).col(0);
      const Vec r = l.triangularView<Eigen::Lower>().solve(diff);
      const Vec w = l.transpose().triangularView<Eigen::Upper>().solve(r);
      acc(0, Mat(-g * w));
      acc(1, Mat(g * w));
      Mat gl = Mat((w * r.transpose()).triangularView<Eigen::Lower>());
      for (int i = 0; i < k; ++i) gl(i, i) -= 1.0 / l(i, i);
      acc(2, Mat(g * gl));
      break;
    }
  }
}

}  // namespace ncdssm::ad
