#pragma once

#include <functional>

#include "ddvae/kernels.hpp"

namespace ddvae {

/// Adaptive Simpson integration of f over [a, b] to absolute tolerance tol.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol = 1e-9,
                        int max_depth = 50);

/// KL(q || prior) by direct integration of q log(q / p) over the support of q
/// (0 log 0 = 0). Independent of the closed forms; used as their oracle.
double kl_by_quadrature(Kernel kernel, Prior prior, double mu, double sigma, double tol = 1e-9);

/// E[eps^k] under the standardized kernel, by quadrature.
double kernel_moment(Kernel kernel, int k, double tol = 1e-12);

}  // namespace ddvae
