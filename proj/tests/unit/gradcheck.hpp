#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <vector>

#include "ddvae/autodiff.hpp"

namespace gradcheck {

using ddvae::ad::Mat;
using ddvae::ad::Tape;
using ddvae::ad::Tensor;

inline Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// ||a - n|| / max(||a||, ||n||), with a floor on the denominator.
inline double rel_error(const Mat& analytic, const Mat& numeric) {
  const double denom = std::max({analytic.norm(), numeric.norm(), 1e-10});
  return (analytic - numeric).norm() / denom;
}

/// f builds a scalar from variables holding `inputs`. Returns the worst
/// relative error between tape gradients and central differences.
inline double check(const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& f, std::vector<Mat> inputs,
                    double h = 1e-6) {
  Tape tape;
  std::vector<Tensor> vars;
  for (const Mat& m : inputs) vars.push_back(tape.variable(m));
  tape.backward(f(tape, vars));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Mat analytic = tape.grad(vars[k]);
    Mat numeric(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Mat> shifted = inputs;
        shifted[k].data()[i] += delta;
        Tape t(false);
        std::vector<Tensor> vs;
        for (const Mat& m : shifted) vs.push_back(t.constant(m));
        return f(t, vs).scalar();
      };
      numeric.data()[i] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    worst = std::max(worst, rel_error(analytic, numeric));
  }
  return worst;
}

/// Same check against parameters: `loss` runs a fresh forward pass.
inline double check_params(const std::function<double()>& loss_value, const std::function<void()>& backward,
                           const std::vector<ddvae::ad::Parameter*>& params, double h = 1e-6) {
  for (auto* p : params) p->zero_grad();
  backward();
  double worst = 0.0;
  for (auto* p : params) {
    Mat numeric(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double keep = p->value.data()[i];
      p->value.data()[i] = keep + h;
      const double up = loss_value();
      p->value.data()[i] = keep - h;
      const double down = loss_value();
      p->value.data()[i] = keep;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, rel_error(p->grad, numeric));
  }
  return worst;
}

}  // namespace gradcheck
