#pragma once

#include "ncdssm/common.hpp"

#include <cstdint>
#include <vector>

namespace ncdssm::ad {

class Tape;

/// Handle to a recorded node. Carries its shape so downstream recording can
/// validate without touching the tape.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;
  std::int32_t rows = 0;
  std::int32_t cols = 0;

  bool valid() const { return tape != nullptr && id >= 0; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
};

enum class Op : std::uint8_t {
  Constant,
  Leaf,
  MatMul,
  Add,
  Sub,
  Scale,        // by a compile-time-known double
  ScaleByVar,   // by a recorded 1x1 scalar
  Transpose,
  Tanh,
  Softplus,
  Exp,
  Log,
  Square,
  Sqrt,
  Reciprocal,
  Mul,          // elementwise
  ReduceSum,
  ConcatRows,
  ConcatCols,
  Slice,
  DiagEmbed,
  ScaleRows,    // row i of the matrix scaled by v(i)
  SoftmaxRows,
  Cholesky,
  QrRFactor,
  TriSolve,
  MatrixExp,
  GaussianLogPdf,
};

/// Append-only reverse-mode tape over dense matrix values. Forward values are
/// computed eagerly at record time. Storage lives in flat arenas that survive
/// clear(), so a reused tape records without allocating.
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(const Mat& v);
  Var leaf(const Mat& v);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var scale_by(Var a, Var s);
  Var transpose(Var a);
  Var tanh(Var a);
  Var softplus(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);
  Var sqrt(Var a);
  Var reciprocal(Var a);
  Var mul(Var a, Var b);
  Var reduce_sum(Var a);
  Var concat_rows(Var a, Var b);
  Var concat_cols(Var a, Var b);
  Var slice(Var a, int r0, int c0, int rows, int cols);
  Var diag_embed(Var v);
  Var scale_rows(Var a, Var v);
  Var softmax_rows(Var a);
  Var cholesky(Var a);
  Var qr_r_factor(Var a);
  Var tri_solve(Var l, Var b, bool transposed = false);
  Var matrix_exponential(Var a);
  Var gaussian_logpdf(Var x, Var mean, Var factor);

  /// Runs the reverse sweep from a scalar root. Adjoints of earlier backward
  /// calls are discarded.
  void backward(Var root);

  Eigen::Map<const Mat> value(Var v) const;
  Eigen::Map<const Mat> adjoint(Var v) const;

  std::size_t size() const { return nodes_.size(); }

  /// Forgets all nodes but keeps arena capacity.
  void clear();

private:
  struct Node {
    Op op;
    std::uint8_t nin = 0;
    std::int32_t in[3] = {-1, -1, -1};
    std::int32_t rows = 0;
    std::int32_t cols = 0;
    std::size_t val = 0;    // offset into val_buf_
    std::size_t aux = 0;    // offset into cache_buf_ (op-dependent)
    std::int32_t aux_i[2] = {0, 0};
    double scalar = 0.0;
  };

  Eigen::Map<const Mat> node_value(std::int32_t id) const;
  Eigen::Map<Mat> node_adj(std::int32_t id);
  Var push(Op op, const Mat& value, std::initializer_list<std::int32_t> inputs);
  std::size_t stash(const Mat& m);
  Eigen::Map<const Mat> stashed(std::size_t off, int rows, int cols) const;
  Var unary_check(Var a) const;
  void backward_node(const Node& n);

  std::vector<Node> nodes_;
  std::vector<double> val_buf_;
  std::vector<double> adj_buf_;
  std::vector<double> cache_buf_;
  std::vector<char> touched_;
  std::size_t val_top_ = 0;
  std::size_t cache_top_ = 0;
};

}  // namespace ncdssm::ad
