#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ddvae/autodiff.hpp"

namespace ddvae::ad {

/// Owns parameters in registration order; pointers stay valid for the
/// store's lifetime.
class ParameterStore {
 public:
  Parameter& add(std::string name, Mat init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  /// Parameters whose name starts with the given prefix.
  std::vector<Parameter*> with_prefix(const std::string& prefix);

  void zero_grad();
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

Mat uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng);

/// y = x W + b, W of shape (in x out).
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in, int out, std::mt19937_64& rng);

  Tensor operator()(Tape& tape, const Tensor& x) const;
  int in() const { return in_; }
  int out() const { return out_; }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  int in_ = 0;
  int out_ = 0;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParameterStore& store, const std::string& name, int vocab, int dim, std::mt19937_64& rng);

  Tensor operator()(Tape& tape, std::span<const int> ids) const;
  int dim() const { return dim_; }

 private:
  Parameter* table_ = nullptr;
  int dim_ = 0;
};

/// Gated recurrent unit:
///   r = sigmoid([x, h] W_r + b_r),  u = sigmoid([x, h] W_u + b_u)
///   n = tanh(x W_n + r * (h U_n) + b_n)
///   h' = (1 - u) * n + u * h
/// W_r and W_u are stored side by side as one (in + hidden) x 2*hidden matrix.
/// Weights are U(-k, k) with k = 1/sqrt(hidden); biases start at zero.
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterStore& store, const std::string& name, int input, int hidden, std::mt19937_64& rng);

  Tensor step(Tape& tape, const Tensor& x, const Tensor& h) const;

  int input() const { return input_; }
  int hidden() const { return hidden_; }
  Parameter& reset_update_weight() const { return *w_ru_; }
  Parameter& reset_update_bias() const { return *b_ru_; }
  Parameter& candidate_input_weight() const { return *w_n_; }
  Parameter& candidate_hidden_weight() const { return *u_n_; }
  Parameter& candidate_bias() const { return *b_n_; }

 private:
  Parameter* w_ru_ = nullptr;
  Parameter* b_ru_ = nullptr;
  Parameter* w_n_ = nullptr;
  Parameter* u_n_ = nullptr;
  Parameter* b_n_ = nullptr;
  int input_ = 0;
  int hidden_ = 0;
};

}  // namespace ddvae::ad
