#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mpc/rng.hpp"

namespace mpc {

// All numeric work is dense 64-bit, row-major so serialized buffers read in
// row-major order.
using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskMatrix =
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A named learnable tensor. Lives outside any tape; forward passes reference
// it through Tape::param and backward() accumulates into `grad`.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)),
        value(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
};

class Tape;

// Cheap handle to a tape node.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  // Zero matrix if the node never received gradient.
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Record of one forward pass: nodes are appended in execution order, which is
// already a topological order, so backward() is a single reverse sweep that
// visits each node exactly once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Matrix value, bool requires_grad = false);
  Var constant(double value);  // 1x1
  Var param(Param& p);

  // Seeds dLoss/dLoss = 1 and sweeps the tape in reverse. Every parameter
  // referenced by the pass receives accumulated dLoss/dParam in Param::grad;
  // tensors not on a path to the loss keep exactly zero gradient.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  friend struct OpAccess;

  struct Node {
    Matrix value;
    Matrix grad;  // empty until first gradient arrives
    bool requires_grad = false;
    std::function<void()> backfn;  // pushes this node's grad to its parents
    Param* bound = nullptr;
  };

  Var emplace(Matrix value, bool requires_grad, std::function<void()> backfn);
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  // Lazily sized gradient accumulator.
  Matrix& grad_buffer(int id);

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Forward primitives. Shape mismatches and invalid arguments throw
// std::invalid_argument.
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b);     // (m,k)x(k,n)
Var matmul_nt(Var a, Var b);  // a * b^T : (m,k)x(n,k) -> (m,n)
Var matmul_tn(Var a, Var b);  // a^T * b : (k,m)x(k,n) -> (m,n)
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var add_row_broadcast(Var a, Var row);  // row is (1,n), added to every row
Var concat_cols(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, Eigen::Index first, Eigen::Index count);
// Row gather; also the embedding lookup (table rows indexed by ids). Backward
// scatter-adds, so duplicate indices accumulate.
Var gather_rows(Var a, const std::vector<int>& rows);
// Softmax over the last axis restricted to mask!=0 entries. Masked entries
// are exactly 0 and each row's active entries sum to 1. Every row needs at
// least one active entry.
Var masked_softmax(Var a, const MaskMatrix& mask);
Var sigmoid(Var a);
Var relu(Var a);  // subgradient 0 at the kink
Var gelu(Var a);  // exact erf form
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-12);
// Inverted dropout; identity when !train or p == 0.
Var dropout(Var x, double p, Rng& rng, bool train);
Var sum(Var a);
Var mean(Var a);
// Fused softmax + NLL, mean over rows; `gold` holds one class id per row.
Var softmax_xent_mean(Var logits, const std::vector<int>& gold);
// -sum(log p[r,c]) over picks; inputs are probabilities (post-softmax).
Var nll_picks(Var probs, const std::vector<std::pair<int, int>>& picks);
// Binary cross-entropy from logits (numerically fused), mean over rows;
// logits is (n,1), labels are 0/1.
Var sigmoid_bce_mean(Var logits, const std::vector<double>& labels);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Finite-difference verification harness.
// ---------------------------------------------------------------------------

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_param;
  Eigen::Index worst_row = 0;
  Eigen::Index worst_col = 0;
};

// Central differences over every coordinate of every listed parameter.
// `build_loss` must be deterministic (fix the RNG, disable dropout) and
// scalar-valued. Relative error per coordinate is
// |analytic - numeric| / max(1e-8, |numeric|).
FiniteDiffReport finite_diff_check(std::span<Param* const> params,
                                   const std::function<Var(Tape&)>& build_loss,
                                   double h = 1e-4);

// Single-tensor form: fn maps a leaf to a scalar loss.
double finite_diff_check(const std::function<Var(Tape&, Var)>& fn,
                         const Matrix& point, double h = 1e-4);

}  // namespace mpc
