#include "ddvae/layers.hpp"

#include <cmath>

#include "ddvae/errors.hpp"

namespace ddvae::ad {

Parameter& ParameterStore::add(std::string name, Mat init) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->value = std::move(init);
  p->zero_grad();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::with_prefix(const std::string& prefix) {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->name.starts_with(prefix)) out.push_back(p.get());
  }
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

Mat uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, std::mt19937_64& rng)
    : in_(in), out_(out) {
  weight_ = &store.add(name + ".weight", uniform_init(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  bias_ = &store.add(name + ".bias", Mat::Zero(1, out));
}

Tensor Linear::operator()(Tape& tape, const Tensor& x) const {
  if (x.cols() != in_) throw ShapeError("linear: expected " + std::to_string(in_) + " input columns");
  return add(matmul(x, tape.param(*weight_)), tape.param(*bias_));
}

Embedding::Embedding(ParameterStore& store, const std::string& name, int vocab, int dim, std::mt19937_64& rng)
    : dim_(dim) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat table(vocab, dim);
  for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = dist(rng);
  table_ = &store.add(name + ".table", std::move(table));
}

Tensor Embedding::operator()(Tape& tape, std::span<const int> ids) const {
  return take_rows(tape.param(*table_), ids);
}

GruCell::GruCell(ParameterStore& store, const std::string& name, int input, int hidden, std::mt19937_64& rng)
    : input_(input), hidden_(hidden) {
  const double k = 1.0 / std::sqrt(static_cast<double>(hidden));
  w_ru_ = &store.add(name + ".w_ru", uniform_init(input + hidden, 2 * hidden, k, rng));
  b_ru_ = &store.add(name + ".b_ru", Mat::Zero(1, 2 * hidden));
  w_n_ = &store.add(name + ".w_n", uniform_init(input, hidden, k, rng));
  u_n_ = &store.add(name + ".u_n", uniform_init(hidden, hidden, k, rng));
  b_n_ = &store.add(name + ".b_n", Mat::Zero(1, hidden));
}

Tensor GruCell::step(Tape& tape, const Tensor& x, const Tensor& h) const {
  if (x.cols() != input_ || h.cols() != hidden_ || x.rows() != h.rows()) {
    throw ShapeError("gru_cell: expected x (B x " + std::to_string(input_) + ") and h (B x " +
                     std::to_string(hidden_) + ")");
  }
  const Tensor xh_parts[] = {x, h};
  const Tensor xh = concat_cols(xh_parts);
  const Tensor gates = sigmoid(add(matmul(xh, tape.param(*w_ru_)), tape.param(*b_ru_)));
  const Tensor r = slice_cols(gates, 0, hidden_);
  const Tensor u = slice_cols(gates, hidden_, hidden_);
  const Tensor hu = matmul(h, tape.param(*u_n_));
  const Tensor n = tanh(add(add(matmul(x, tape.param(*w_n_)), mul(r, hu)), tape.param(*b_n_)));
  // (1 - u) * n + u * h == n + u * (h - n)
  return add(n, mul(u, sub(h, n)));
}

}  // namespace ddvae::ad
