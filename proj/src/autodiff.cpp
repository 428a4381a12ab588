#include "mpc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace mpc {

namespace {

using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

// Internal accessor so op free functions can reach tape nodes.
struct OpAccess {
  static Tape::Node& node(Var v) { return v.tape()->node(v.id()); }
  static Matrix& gbuf(Var v) { return v.tape()->grad_buffer(v.id()); }
  static bool needs_grad(Var v) { return node(v).requires_grad; }
  static Var make(Tape& t, Matrix value, bool requires_grad) {
    return t.emplace(std::move(value), requires_grad, nullptr);
  }
  static void set_backfn(Var v, std::function<void()> fn) {
    node(v).backfn = std::move(fn);
  }
};

namespace {

using A = OpAccess;

Tape& same_tape(Var a, Var b) {
  require(a.valid() && b.valid(), "op on invalid Var");
  require(a.tape() == b.tape(), "op mixes Vars from different tapes");
  return *a.tape();
}

const Matrix& grad_of(Var v) { return A::node(v).grad; }

}  // namespace

// ---------------------------------------------------------------------------
// Tape / Var
// ---------------------------------------------------------------------------

const Matrix& Var::value() const {
  if (tape_ == nullptr) throw std::logic_error("value() on invalid Var");
  return tape_->node(id_).value;
}

const Matrix& Var::grad() const {
  if (tape_ == nullptr) throw std::logic_error("grad() on invalid Var");
  // Lazily materialize zeros so untouched tensors report an exact-zero grad.
  return tape_->grad_buffer(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  require(v.rows() == 1 && v.cols() == 1, "scalar() on non-scalar Var");
  return v(0, 0);
}

Var Tape::emplace(Matrix value, bool requires_grad,
                  std::function<void()> backfn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backfn = std::move(backfn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad_buffer(int id) {
  Node& n = node(id);
  if (n.grad.size() == 0)
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::input(Matrix value, bool requires_grad) {
  return emplace(std::move(value), requires_grad, nullptr);
}

Var Tape::constant(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return emplace(std::move(m), false, nullptr);
}

Var Tape::param(Param& p) {
  Var v = emplace(p.value, true, nullptr);
  node(v.id()).bound = &p;
  return v;
}

void Tape::backward(Var loss) {
  require(loss.valid() && loss.tape() == this, "backward: loss not on tape");
  require(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be scalar");
  grad_buffer(loss.id()).setConstant(1.0);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = node(id);
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backfn) n.backfn();
    if (n.bound != nullptr) n.bound->grad += n.grad;
  }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace {

Var matmul_impl(Var a, Var b, bool ta, bool tb) {
  Tape& t = same_tape(a, b);
  const Eigen::Index ar = ta ? a.cols() : a.rows();
  const Eigen::Index ak = ta ? a.rows() : a.cols();
  const Eigen::Index bk = tb ? b.cols() : b.rows();
  const Eigen::Index bc = tb ? b.rows() : b.cols();
  require(ak == bk, "matmul: inner dimensions do not match");

  Matrix v(ar, bc);
  if (!ta && !tb)
    v.noalias() = a.value() * b.value();
  else if (!ta && tb)
    v.noalias() = a.value() * b.value().transpose();
  else if (ta && !tb)
    v.noalias() = a.value().transpose() * b.value();
  else
    v.noalias() = a.value().transpose() * b.value().transpose();

  const bool rg = A::needs_grad(a) || A::needs_grad(b);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [a, b, out, ta, tb]() {
      const Matrix& g = grad_of(out);
      if (A::needs_grad(a)) {
        if (!ta && !tb)
          A::gbuf(a).noalias() += g * b.value().transpose();
        else if (!ta && tb)
          A::gbuf(a).noalias() += g * b.value();
        else if (ta && !tb)
          A::gbuf(a).noalias() += b.value() * g.transpose();
        else
          A::gbuf(a).noalias() += b.value().transpose() * g.transpose();
      }
      if (A::needs_grad(b)) {
        if (!ta && !tb)
          A::gbuf(b).noalias() += a.value().transpose() * g;
        else if (!ta && tb)
          A::gbuf(b).noalias() += g.transpose() * a.value();
        else if (ta && !tb)
          A::gbuf(b).noalias() += a.value() * g;
        else
          A::gbuf(b).noalias() += g.transpose() * a.value().transpose();
      }
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Var elementwise_unary(Var a, Fwd fwd, Bwd dfn) {
  Tape& t = *a.tape();
  Matrix v = a.value().unaryExpr(fwd);
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [a, out, dfn]() {
      A::gbuf(a).array() +=
          grad_of(out).array() * a.value().unaryExpr(dfn).array();
    });
  }
  return out;
}

}  // namespace

Var matmul(Var a, Var b) { return matmul_impl(a, b, false, false); }
Var matmul_nt(Var a, Var b) { return matmul_impl(a, b, false, true); }
Var matmul_tn(Var a, Var b) { return matmul_impl(a, b, true, false); }

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  const bool rg = A::needs_grad(a) || A::needs_grad(b);
  Var out = A::make(t, a.value() + b.value(), rg);
  if (rg) {
    A::set_backfn(out, [a, b, out]() {
      if (A::needs_grad(a)) A::gbuf(a) += grad_of(out);
      if (A::needs_grad(b)) A::gbuf(b) += grad_of(out);
    });
  }
  return out;
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  const bool rg = A::needs_grad(a) || A::needs_grad(b);
  Var out = A::make(t, a.value() - b.value(), rg);
  if (rg) {
    A::set_backfn(out, [a, b, out]() {
      if (A::needs_grad(a)) A::gbuf(a) += grad_of(out);
      if (A::needs_grad(b)) A::gbuf(b) -= grad_of(out);
    });
  }
  return out;
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  const bool rg = A::needs_grad(a) || A::needs_grad(b);
  Var out = A::make(t, a.value().cwiseProduct(b.value()), rg);
  if (rg) {
    A::set_backfn(out, [a, b, out]() {
      const Matrix& g = grad_of(out);
      if (A::needs_grad(a)) A::gbuf(a).array() += g.array() * b.value().array();
      if (A::needs_grad(b)) A::gbuf(b).array() += g.array() * a.value().array();
    });
  }
  return out;
}

Var scale(Var a, double c) {
  Tape& t = *a.tape();
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, a.value() * c, rg);
  if (rg) {
    A::set_backfn(out, [a, out, c]() { A::gbuf(a) += grad_of(out) * c; });
  }
  return out;
}

Var add_scalar(Var a, double c) {
  Tape& t = *a.tape();
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, (a.value().array() + c).matrix(), rg);
  if (rg) {
    A::set_backfn(out, [a, out]() { A::gbuf(a) += grad_of(out); });
  }
  return out;
}

Var add_row_broadcast(Var a, Var row) {
  Tape& t = same_tape(a, row);
  require(row.rows() == 1 && row.cols() == a.cols(),
          "add_row_broadcast: row must be (1, cols(a))");
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  const bool rg = A::needs_grad(a) || A::needs_grad(row);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [a, row, out]() {
      const Matrix& g = grad_of(out);
      if (A::needs_grad(a)) A::gbuf(a) += g;
      if (A::needs_grad(row)) A::gbuf(row) += g.colwise().sum();
    });
  }
  return out;
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: empty part list");
  Tape& t = *parts[0].tape();
  Eigen::Index total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    require(p.rows() == parts[0].rows(), "concat_cols: row mismatch");
    total += p.cols();
    rg = rg || A::needs_grad(p);
  }
  Matrix v(parts[0].rows(), total);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    std::vector<Var> saved(parts.begin(), parts.end());
    A::set_backfn(out, [saved, out]() {
      const Matrix& g = grad_of(out);
      Eigen::Index at = 0;
      for (const Var& p : saved) {
        if (A::needs_grad(p)) A::gbuf(p) += g.middleCols(at, p.cols());
        at += p.cols();
      }
    });
  }
  return out;
}

Var concat_cols(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat_cols(std::span<const Var>(parts, 2));
}

Var slice_cols(Var a, Eigen::Index first, Eigen::Index count) {
  Tape& t = *a.tape();
  require(first >= 0 && count >= 1 && first + count <= a.cols(),
          "slice_cols: range out of bounds");
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, a.value().middleCols(first, count), rg);
  if (rg) {
    A::set_backfn(out, [a, out, first, count]() {
      A::gbuf(a).middleCols(first, count) += grad_of(out);
    });
  }
  return out;
}

Var gather_rows(Var a, const std::vector<int>& rows) {
  Tape& t = *a.tape();
  require(!rows.empty(), "gather_rows: empty index list");
  for (const int r : rows)
    require(r >= 0 && r < a.rows(), "gather_rows: index out of range");
  Matrix v(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [a, out, rows]() {
      const Matrix& g = grad_of(out);
      for (std::size_t i = 0; i < rows.size(); ++i)
        A::gbuf(a).row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }
  return out;
}

Var masked_softmax(Var a, const MaskMatrix& mask) {
  Tape& t = *a.tape();
  require(mask.rows() == a.rows() && mask.cols() == a.cols(),
          "masked_softmax: mask shape mismatch");
  const Matrix& x = a.value();
  Matrix p = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    int active = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask(r, c)) {
        mx = std::max(mx, x(r, c));
        ++active;
      }
    }
    require(active > 0, "masked_softmax: row with no active entries");
    double denom = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask(r, c)) {
        p(r, c) = std::exp(x(r, c) - mx);
        denom += p(r, c);
      }
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      if (mask(r, c)) p(r, c) /= denom;
  }
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, std::move(p), rg);
  if (rg) {
    A::set_backfn(out, [a, out]() {
      // dx = p .* (g - sum(g .* p)) per row; masked entries have p == 0.
      const Matrix& g = grad_of(out);
      const Matrix& p = out.value();
      Matrix& da = A::gbuf(a);
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double dot = g.row(r).cwiseProduct(p.row(r)).sum();
        da.row(r).array() +=
            p.row(r).array() * (g.row(r).array() - dot);
      }
    });
  }
  return out;
}

Var sigmoid(Var a) {
  Tape& t = *a.tape();
  Matrix v = a.value().unaryExpr(
      [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [a, out]() {
      const Matrix& s = out.value();
      A::gbuf(a).array() +=
          grad_of(out).array() * s.array() * (1.0 - s.array());
    });
  }
  return out;
}

Var relu(Var a) {
  return elementwise_unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return elementwise_unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = same_tape(x, gamma);
  same_tape(x, beta);
  require(gamma.rows() == 1 && gamma.cols() == x.cols(),
          "layer_norm: gamma must be (1, cols)");
  require(beta.rows() == 1 && beta.cols() == x.cols(),
          "layer_norm: beta must be (1, cols)");
  const Eigen::Index n = x.cols();
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var =
        (xv.row(r).array() - mu).square().sum() / static_cast<double>(n);
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix v = xhat;
  v.array().rowwise() *= gamma.value().row(0).array();
  v.rowwise() += beta.value().row(0);
  const bool rg =
      A::needs_grad(x) || A::needs_grad(gamma) || A::needs_grad(beta);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [x, gamma, beta, out, xhat, inv_std, n]() {
      const Matrix& g = grad_of(out);
      if (A::needs_grad(beta)) A::gbuf(beta) += g.colwise().sum();
      if (A::needs_grad(gamma))
        A::gbuf(gamma) += g.cwiseProduct(xhat).colwise().sum();
      if (A::needs_grad(x)) {
        Matrix& dx = A::gbuf(x);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const RowArray dxhat =
              g.row(r).array() * gamma.value().row(0).array();
          const double m1 = dxhat.mean();
          const double m2 = (dxhat * xhat.row(r).array()).mean();
          dx.row(r).array() +=
              inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
        }
      }
    });
  }
  return out;
}

Var dropout(Var x, double p, Rng& rng, bool train) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  Tape& t = *x.tape();
  const bool rg = A::needs_grad(x);
  if (!train || p == 0.0) {
    Var out = A::make(t, x.value(), rg);
    if (rg) A::set_backfn(out, [x, out]() { A::gbuf(x) += grad_of(out); });
    return out;
  }
  Matrix mask(x.rows(), x.cols());
  const double keep_scale = 1.0 / (1.0 - p);
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c)
      mask(r, c) = rng.bernoulli(p) ? 0.0 : keep_scale;
  Var out = A::make(t, x.value().cwiseProduct(mask), rg);
  if (rg) {
    A::set_backfn(out, [x, out, mask]() {
      A::gbuf(x).array() += grad_of(out).array() * mask.array();
    });
  }
  return out;
}

Var sum(Var a) {
  Tape& t = *a.tape();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out,
                  [a, out]() { A::gbuf(a).array() += grad_of(out)(0, 0); });
  }
  return out;
}

Var mean(Var a) {
  Tape& t = *a.tape();
  Matrix v(1, 1);
  v(0, 0) = a.value().mean();
  const bool rg = A::needs_grad(a);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    const double inv = 1.0 / static_cast<double>(a.value().size());
    A::set_backfn(out, [a, out, inv]() {
      A::gbuf(a).array() += grad_of(out)(0, 0) * inv;
    });
  }
  return out;
}

Var softmax_xent_mean(Var logits, const std::vector<int>& gold) {
  Tape& t = *logits.tape();
  const Matrix& x = logits.value();
  require(static_cast<Eigen::Index>(gold.size()) == x.rows(),
          "softmax_xent_mean: one gold id per row required");
  for (const int g : gold)
    require(g >= 0 && g < x.cols(), "softmax_xent_mean: gold id out of range");
  Matrix probs(x.rows(), x.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    const RowArray e = (x.row(r).array() - mx).exp();
    const double denom = e.sum();
    probs.row(r) = (e / denom).matrix();
    const double lse = mx + std::log(denom);
    total += lse - x(r, gold[static_cast<std::size_t>(r)]);
  }
  const double inv_rows = 1.0 / static_cast<double>(x.rows());
  Matrix v(1, 1);
  v(0, 0) = total * inv_rows;
  const bool rg = A::needs_grad(logits);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [logits, out, probs, gold, inv_rows]() {
      const double g = grad_of(out)(0, 0);
      Matrix& dl = A::gbuf(logits);
      dl += probs * (g * inv_rows);
      for (Eigen::Index r = 0; r < probs.rows(); ++r)
        dl(r, gold[static_cast<std::size_t>(r)]) -= g * inv_rows;
    });
  }
  return out;
}

Var nll_picks(Var probs, const std::vector<std::pair<int, int>>& picks) {
  Tape& t = *probs.tape();
  require(!picks.empty(), "nll_picks: empty pick list");
  const Matrix& p = probs.value();
  double total = 0.0;
  for (const auto& [r, c] : picks) {
    require(r >= 0 && r < p.rows() && c >= 0 && c < p.cols(),
            "nll_picks: pick out of range");
    require(p(r, c) > 0.0, "nll_picks: picked probability is zero");
    total -= std::log(p(r, c));
  }
  Matrix v(1, 1);
  v(0, 0) = total;
  const bool rg = A::needs_grad(probs);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [probs, out, picks]() {
      const double g = grad_of(out)(0, 0);
      Matrix& dp = A::gbuf(probs);
      for (const auto& [r, c] : picks) dp(r, c) -= g / probs.value()(r, c);
    });
  }
  return out;
}

Var sigmoid_bce_mean(Var logits, const std::vector<double>& labels) {
  Tape& t = *logits.tape();
  const Matrix& z = logits.value();
  require(z.cols() == 1, "sigmoid_bce_mean: logits must be a column");
  require(static_cast<Eigen::Index>(labels.size()) == z.rows(),
          "sigmoid_bce_mean: one label per row required");
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double zi = z(r, 0);
    const double y = labels[static_cast<std::size_t>(r)];
    require(y >= 0.0 && y <= 1.0, "sigmoid_bce_mean: label outside [0,1]");
    total += std::max(zi, 0.0) - zi * y + std::log1p(std::exp(-std::abs(zi)));
  }
  const double inv_rows = 1.0 / static_cast<double>(z.rows());
  Matrix v(1, 1);
  v(0, 0) = total * inv_rows;
  const bool rg = A::needs_grad(logits);
  Var out = A::make(t, std::move(v), rg);
  if (rg) {
    A::set_backfn(out, [logits, out, labels, inv_rows]() {
      const double g = grad_of(out)(0, 0);
      Matrix& dz = A::gbuf(logits);
      for (Eigen::Index r = 0; r < dz.rows(); ++r) {
        const double s = 1.0 / (1.0 + std::exp(-logits.value()(r, 0)));
        dz(r, 0) += g * inv_rows * (s - labels[static_cast<std::size_t>(r)]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

FiniteDiffReport finite_diff_check(std::span<Param* const> params,
                                   const std::function<Var(Tape&)>& build_loss,
                                   double h) {
  for (Param* p : params) p->zero_grad();
  std::vector<Matrix> analytic;
  {
    Tape tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
    analytic.reserve(params.size());
    for (const Param* p : params) analytic.push_back(p->grad);
  }
  const auto eval = [&build_loss]() {
    Tape tape;
    return build_loss(tape).scalar();
  };
  FiniteDiffReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
        const double orig = p.value(r, c);
        p.value(r, c) = orig + h;
        const double fp = eval();
        p.value(r, c) = orig - h;
        const double fm = eval();
        p.value(r, c) = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double abs_err = std::abs(analytic[i](r, c) - numeric);
        const double rel = abs_err / std::max(1e-8, std::abs(numeric));
        if (rel > report.max_rel_error) {
          report.max_rel_error = rel;
          report.max_abs_error = abs_err;
          report.worst_param = p.name;
          report.worst_row = r;
          report.worst_col = c;
        }
      }
    }
  }
  return report;
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& fn,
                         const Matrix& point, double h) {
  Matrix analytic;
  {
    Tape tape;
    Var x = tape.input(point, true);
    Var loss = fn(tape, x);
    tape.backward(loss);
    analytic = x.grad();
  }
  double max_rel = 0.0;
  for (Eigen::Index r = 0; r < point.rows(); ++r) {
    for (Eigen::Index c = 0; c < point.cols(); ++c) {
      Matrix shifted = point;
      shifted(r, c) = point(r, c) + h;
      Tape tp;
      const double fp = fn(tp, tp.input(shifted, false)).scalar();
      shifted(r, c) = point(r, c) - h;
      Tape tm;
      const double fm = fn(tm, tm.input(shifted, false)).scalar();
      const double numeric = (fp - fm) / (2.0 * h);
      const double rel =
          std::abs(analytic(r, c) - numeric) / std::max(1e-8, std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace mpc
