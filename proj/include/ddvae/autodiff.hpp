#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ddvae/kernels.hpp"
#include "ddvae/relaxation.hpp"

namespace ddvae::ad {

/// Dense row-major f64 matrix; rows index the batch axis.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named trainable array living outside any tape. Backward passes
/// accumulate into `grad`; frozen parameters enter tapes as constants.
struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  bool frozen = false;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Tensor {
 public:
  Tensor() = default;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Records primitive operations in execution order (which is a topological
/// order) and replays them backwards once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Mat value);
  /// Leaf that requires grad; read its gradient with grad() after backward.
  Tensor variable(Mat value);
  /// Parameter leaf. Frozen parameters, or any parameter on a tape with
  /// gradients disabled, are recorded as constants.
  Tensor param(Parameter& p);

  /// Reverse sweep from a 1x1 loss. Gradients reaching parameter leaves are
  /// added to Parameter::grad. A tape can be swept once.
  void backward(const Tensor& loss);

  /// Gradient of the loss with respect to t; zeros if none reached it.
  Mat grad(const Tensor& t) const;

  bool consumed() const { return consumed_; }
  bool grad_enabled() const { return grad_enabled_; }
  /// Throw NumericalError as soon as a primitive produces NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }
  std::size_t size() const { return nodes_.size(); }

  // Primitive-author interface.
  Tensor record(const char* op, Mat value, std::vector<int> parents, Backward backward);
  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& upstream(int id) const { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }
  void accumulate(int id, const Mat& g);

 private:
  struct Node {
    const char* op = "";
    Mat value;
    Mat grad;
    std::vector<int> parents;
    Backward backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  Tensor push(Node node);

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool check_finite_ = false;
  bool consumed_ = false;
};

// Linear algebra and elementwise arithmetic. Binary elementwise ops
// broadcast a 1-row, 1-column or 1x1 operand against the other.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
/// max(a, floor) with zero gradient where the floor is active.
Tensor clamp_min(const Tensor& a, double floor);

/// Row-wise softmax / log-softmax over the last axis.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum across columns: (r x c) -> (r x 1).
Tensor row_sum(const Tensor& a);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
/// Gathers rows: out[i] = a[index[i]]; used for embedding lookup.
Tensor take_rows(const Tensor& a, std::span<const int> index);
/// out[i, 0] = a[i, column[i]].
Tensor pick(const Tensor& a, std::span<const int> column);
/// Row-major reinterpretation with the same element count.
Tensor reshape(const Tensor& a, Eigen::Index rows, Eigen::Index cols);

/// Elementwise closed-form KL of proposals (mu, sigma) against the prior,
/// with gradients from kernels::kl_grad.
Tensor kl_node(Kernel kernel, Prior prior, const Tensor& mu, const Tensor& sigma);
/// Elementwise stable log sigma_tau(x); tau is a constant.
Tensor log_sigma_tau_node(const Tensor& x, Temperature tau);

/// Number of log_sigma_tau nodes recorded by this process so far.
std::uint64_t log_sigma_tau_node_count();

}  // namespace ddvae::ad
