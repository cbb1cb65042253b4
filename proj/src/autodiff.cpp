#include "ddvae/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

#include "ddvae/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ddvae::ad {

#if defined(__GLIBC__)
namespace {
// Every step allocates and frees many large node buffers. Serving them from
// the heap instead of fresh mmap regions avoids a page-fault storm.
const bool g_heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
}  // namespace
#endif
namespace {

std::string shape_str(const Mat& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

Tape& same_tape(const Tensor& a, const Tensor& b) {
  if (!a.valid() || a.tape() != b.tape()) throw std::logic_error("tensors recorded on different tapes");
  return *a.tape();
}

Eigen::Index broadcast_dim(Eigen::Index x, Eigen::Index y, const char* op) {
  if (x == y || y == 1) return x;
  if (x == 1) return y;
  throw ShapeError(std::string(op) + ": incompatible broadcast dimensions " + std::to_string(x) + " and " +
                   std::to_string(y));
}

Mat expand(const Mat& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

// Sums a broadcast gradient back down to the operand's shape.
Mat reduce_to(const Mat& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Mat r = g;
  if (rows == 1 && r.rows() != 1) r = r.colwise().sum().eval();
  if (cols == 1 && r.cols() != 1) r = r.rowwise().sum().eval();
  return r;
}

template <class Fwd, class Dfn>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Dfn dfdx) {
  Tape& tape = *a.tape();
  Mat out = a.value().unaryExpr(fwd);
  const int ia = a.id();
  return tape.record(op, std::move(out), {ia}, [ia, dfdx](Tape& t, int self) {
    const Mat& x = t.value(ia);
    const Mat& y = t.value(self);
    Mat d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) d.data()[i] = dfdx(x.data()[i], y.data()[i]);
    t.accumulate(ia, t.upstream(self).cwiseProduct(d));
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor / Tape

const Mat& Tensor::value() const { return tape_->value(id_); }

double Tensor::scalar() const {
  const Mat& v = value();
  if (v.size() != 1) throw ShapeError("scalar(): tensor has shape " + shape_str(v));
  return v(0, 0);
}

bool Tensor::requires_grad() const { return tape_->needs_grad(id_); }

Tensor Tape::push(Node node) {
  if (check_finite_ && !node.value.allFinite()) {
    throw NumericalError(std::string("non-finite value produced by ") + node.op);
  }
  nodes_.push_back(std::move(node));
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::constant(Mat value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Tensor Tape::variable(Mat value) {
  Node n;
  n.op = "variable";
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Tensor Tape::param(Parameter& p) {
  Node n;
  n.op = "param";
  n.value = p.value;
  if (grad_enabled_ && !p.frozen) {
    n.requires_grad = true;
    n.param = &p;
  }
  return push(std::move(n));
}

Tensor Tape::record(const char* op, Mat value, std::vector<int> parents, Backward backward) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
    throw std::logic_error(std::string("gradient shape mismatch at ") + n.op + ": " + shape_str(g) + " vs " +
                           shape_str(n.value));
  }
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward called twice on the same tape");
  if (loss.tape() != this) throw std::logic_error("loss was not recorded on this tape");
  if (loss.value().size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.value()));
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad = Mat::Ones(1, 1);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols()) {
        n.param->zero_grad();
      }
      n.param->grad += n.grad;
    }
    if (n.backward) n.backward(*this, id);
  }
}

Mat Tape::grad(const Tensor& t) const {
  const Node& n = nodes_[t.id()];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// ---------------------------------------------------------------------------
// Linear algebra / arithmetic

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.value()) + " x " + shape_str(b.value()));
  }
  Mat out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.upstream(self);
    if (t.needs_grad(ia)) {
      Mat ga(g.rows(), t.value(ib).rows());
      ga.noalias() = g * t.value(ib).transpose();
      t.accumulate(ia, ga);
    }
    if (t.needs_grad(ib)) {
      Mat gb(t.value(ia).cols(), g.cols());
      gb.noalias() = t.value(ia).transpose() * g;
      t.accumulate(ib, gb);
    }
  });
}

namespace {

enum class BinOp { Add, Sub, Mul };

Tensor binary(const char* op, BinOp kind, const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  const Eigen::Index rows = broadcast_dim(a.rows(), b.rows(), op);
  const Eigen::Index cols = broadcast_dim(a.cols(), b.cols(), op);
  Mat out;
  const Mat& av = a.value();
  const Mat& bv = b.value();
  const bool same = av.rows() == bv.rows() && av.cols() == bv.cols();
  if (same) {
    switch (kind) {
      case BinOp::Add: out = av + bv; break;
      case BinOp::Sub: out = av - bv; break;
      case BinOp::Mul: out = av.cwiseProduct(bv); break;
    }
  } else {
    const Mat ae = expand(av, rows, cols);
    const Mat be = expand(bv, rows, cols);
    switch (kind) {
      case BinOp::Add: out = ae + be; break;
      case BinOp::Sub: out = ae - be; break;
      case BinOp::Mul: out = ae.cwiseProduct(be); break;
    }
  }
  const int ia = a.id(), ib = b.id();
  return tape.record(op, std::move(out), {ia, ib}, [ia, ib, kind](Tape& t, int self) {
    const Mat& g = t.upstream(self);
    const Mat& av = t.value(ia);
    const Mat& bv = t.value(ib);
    if (t.needs_grad(ia)) {
      if (kind == BinOp::Mul) {
        t.accumulate(ia, reduce_to(g.cwiseProduct(expand(bv, g.rows(), g.cols())), av.rows(), av.cols()));
      } else {
        t.accumulate(ia, reduce_to(g, av.rows(), av.cols()));
      }
    }
    if (t.needs_grad(ib)) {
      if (kind == BinOp::Mul) {
        t.accumulate(ib, reduce_to(g.cwiseProduct(expand(av, g.rows(), g.cols())), bv.rows(), bv.cols()));
      } else if (kind == BinOp::Sub) {
        t.accumulate(ib, reduce_to(-g, bv.rows(), bv.cols()));
      } else {
        t.accumulate(ib, reduce_to(g, bv.rows(), bv.cols()));
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::Mul, a, b); }

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  const int ia = a.id();
  return a.tape()->record("scale", a.value() * c, {ia},
                          [ia, c](Tape& t, int self) { t.accumulate(ia, t.upstream(self) * c); });
}

Tensor add_scalar(const Tensor& a, double c) {
  const int ia = a.id();
  return a.tape()->record("add_scalar", (a.value().array() + c).matrix(), {ia},
                          [ia](Tape& t, int self) { t.accumulate(ia, t.upstream(self)); });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      "leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a, [](double x) { return ddvae::softplus(x); },
      [](double x, double) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary(
      "clamp_min", a, [floor](double x) { return x < floor ? floor : x; },
      [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& a) {
  const Mat& x = a.value();
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const int ia = a.id();
  return a.tape()->record("softmax", std::move(y), {ia}, [ia](Tape& t, int self) {
    const Mat& y = t.value(self);
    const Mat& g = t.upstream(self);
    // dx = y * (g - <g, y>) per row
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Mat d = g;
    d.colwise() -= dot;
    t.accumulate(ia, d.cwiseProduct(y));
  });
}

Tensor log_softmax(const Tensor& a) {
  const Mat& x = a.value();
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = (x.row(r).array() - lse).matrix();
  }
  const int ia = a.id();
  return a.tape()->record("log_softmax", std::move(y), {ia}, [ia](Tape& t, int self) {
    const Mat& y = t.value(self);
    const Mat& g = t.upstream(self);
    const Eigen::VectorXd gsum = g.rowwise().sum();
    Mat d = y.array().exp().matrix();
    for (Eigen::Index r = 0; r < d.rows(); ++r) d.row(r) *= gsum(r);
    t.accumulate(ia, g - d);
  });
}

// ---------------------------------------------------------------------------
// Reductions and indexing

Tensor sum(const Tensor& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.tape()->record("sum", std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& x = t.value(ia);
    t.accumulate(ia, Mat::Constant(x.rows(), x.cols(), t.upstream(self)(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const auto n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Tensor row_sum(const Tensor& a) {
  Mat out = a.value().rowwise().sum();
  const int ia = a.id();
  return a.tape()->record("row_sum", std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& x = t.value(ia);
    t.accumulate(ia, t.upstream(self).replicate(1, x.cols()));
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& tape = *parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const Tensor& p : parts) {
    if (p.tape() != &tape) throw std::logic_error("tensors recorded on different tapes");
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Mat out(rows, cols);
  Eigen::Index off = 0;
  for (const Tensor& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return tape.record("concat_cols", std::move(out), ids, [ids, widths](Tape& t, int self) {
    const Mat& g = t.upstream(self);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.accumulate(ids[i], g.middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& tape = *parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (const Tensor& p : parts) {
    if (p.tape() != &tape) throw std::logic_error("tensors recorded on different tapes");
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
    ids.push_back(p.id());
    heights.push_back(p.rows());
  }
  Mat out(rows, cols);
  Eigen::Index off = 0;
  for (const Tensor& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return tape.record("concat_rows", std::move(out), ids, [ids, heights](Tape& t, int self) {
    const Mat& g = t.upstream(self);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.accumulate(ids[i], g.middleRows(off, heights[i]));
      off += heights[i];
    }
  });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(a.value()));
  }
  Mat out = a.value().middleCols(start, count);
  const int ia = a.id();
  return a.tape()->record("slice_cols", std::move(out), {ia}, [ia, start, count](Tape& t, int self) {
    const Mat& x = t.value(ia);
    Mat g = Mat::Zero(x.rows(), x.cols());
    g.middleCols(start, count) = t.upstream(self);
    t.accumulate(ia, g);
  });
}

Tensor take_rows(const Tensor& a, std::span<const int> index) {
  const Mat& x = a.value();
  Mat out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw ShapeError("take_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  }
  const int ia = a.id();
  std::vector<int> idx(index.begin(), index.end());
  return a.tape()->record("take_rows", std::move(out), {ia}, [ia, idx](Tape& t, int self) {
    const Mat& x = t.value(ia);
    const Mat& g = t.upstream(self);
    Mat acc = Mat::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) acc.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, acc);
  });
}

Tensor pick(const Tensor& a, std::span<const int> column) {
  const Mat& x = a.value();
  if (static_cast<Eigen::Index>(column.size()) != x.rows()) throw ShapeError("pick: one column per row required");
  Mat out(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (column[r] < 0 || column[r] >= x.cols()) throw ShapeError("pick: column out of range");
    out(r, 0) = x(r, column[r]);
  }
  const int ia = a.id();
  std::vector<int> col(column.begin(), column.end());
  return a.tape()->record("pick", std::move(out), {ia}, [ia, col](Tape& t, int self) {
    const Mat& x = t.value(ia);
    const Mat& g = t.upstream(self);
    Mat acc = Mat::Zero(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) acc(r, col[r]) = g(r, 0);
    t.accumulate(ia, acc);
  });
}

Tensor reshape(const Tensor& a, Eigen::Index rows, Eigen::Index cols) {
  const Mat& x = a.value();
  if (rows * cols != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x) + " as (" + std::to_string(rows) + "x" +
                     std::to_string(cols) + ")");
  }
  Mat out = Eigen::Map<const Mat>(x.data(), rows, cols);
  const int ia = a.id();
  return a.tape()->record("reshape", std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& x = t.value(ia);
    const Mat& g = t.upstream(self);
    t.accumulate(ia, Eigen::Map<const Mat>(g.data(), x.rows(), x.cols()));
  });
}

// ---------------------------------------------------------------------------
// Model-specific primitives

Tensor kl_node(Kernel kernel, Prior prior, const Tensor& mu, const Tensor& sigma) {
  Tape& tape = same_tape(mu, sigma);
  const Mat& m = mu.value();
  const Mat& s = sigma.value();
  if (m.rows() != s.rows() || m.cols() != s.cols()) throw ShapeError("kl_node: mu/sigma shape mismatch");
  Mat out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) out.data()[i] = kl(kernel, prior, m.data()[i], s.data()[i]);
  const int im = mu.id(), is = sigma.id();
  return tape.record("kl_node", std::move(out), {im, is}, [kernel, prior, im, is](Tape& t, int self) {
    const Mat& m = t.value(im);
    const Mat& s = t.value(is);
    const Mat& g = t.upstream(self);
    Mat gm(m.rows(), m.cols());
    Mat gs(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const KlGradient d = kl_grad(kernel, prior, m.data()[i], s.data()[i]);
      gm.data()[i] = g.data()[i] * d.d_mu;
      gs.data()[i] = g.data()[i] * d.d_sigma;
    }
    t.accumulate(im, gm);
    t.accumulate(is, gs);
  });
}

namespace {
std::atomic<std::uint64_t> g_log_sigma_tau_nodes{0};
}  // namespace

std::uint64_t log_sigma_tau_node_count() { return g_log_sigma_tau_nodes.load(); }

Tensor log_sigma_tau_node(const Tensor& x, Temperature tau) {
  ++g_log_sigma_tau_nodes;
  return unary(
      "log_sigma_tau", x, [tau](double v) { return log_sigma_tau(v, tau); },
      [tau](double v, double) { return log_sigma_tau_dx(v, tau); });
}

}  // namespace ddvae::ad
