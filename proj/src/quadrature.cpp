#include "ddvae/quadrature.hpp"

#include <cmath>
#include <numbers>

#include "ddvae/errors.hpp"

namespace ddvae {
namespace {

double simpson_step(const std::function<double(double)>& f, double a, double b, double fa, double fm,
                    double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) {
    return left + right + delta / 15.0;
  }
  return simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                        int max_depth) {
  const double fa = f(a);
  const double fb = f(b);
  const double m = 0.5 * (a + b);
  const double fm = f(m);
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return simpson_step(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

double kl_by_quadrature(Kernel kernel, Prior prior, double mu, double sigma, double tol) {
  if (!(sigma > 0.0)) throw DomainError("sigma must be positive");
  if (prior == Prior::UniformCube && !is_bounded(kernel)) {
    throw UnsupportedError("gaussian kernel has no KL against the uniform prior");
  }
  const auto log_prior = [prior](double z) {
    if (prior == Prior::StdNormal) return -0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi);
    return std::abs(z) <= 1.0 ? -std::log(2.0) : -INFINITY;
  };
  const auto integrand = [&](double z) {
    const double q = density(kernel, (z - mu) / sigma) / sigma;
    if (q <= 0.0) return 0.0;
    return q * (std::log(q) - log_prior(z));
  };
  const double half_width = is_bounded(kernel) ? sigma : 12.0 * sigma;
  // Split at the center: several kernels have a kink there.
  return adaptive_simpson(integrand, mu - half_width, mu, tol / 2.0) +
         adaptive_simpson(integrand, mu, mu + half_width, tol / 2.0);
}

double kernel_moment(Kernel kernel, int k, double tol) {
  const auto integrand = [&](double e) { return std::pow(e, k) * density(kernel, e); };
  const double w = is_bounded(kernel) ? 1.0 : 12.0;
  return adaptive_simpson(integrand, -w, 0.0, tol / 2.0) + adaptive_simpson(integrand, 0.0, w, tol / 2.0);
}

}  // namespace ddvae
