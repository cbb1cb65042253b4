#include "ddvae/kernels.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "ddvae/errors.hpp"

namespace ddvae {
namespace {

constexpr double kPi = std::numbers::pi;
const double kHalfLog2Pi = 0.5 * std::log(2.0 * kPi);

// Slack for support checks; squash can land one ulp outside [-1, 1].
constexpr double kSupportSlack = 1e-12;

void require_positive_sigma(double sigma) {
  if (!(sigma > 0.0)) {
    throw DomainError("sigma must be positive, got " + std::to_string(sigma));
  }
}

// Negative entropy of the standardized kernel, E[log K(eps)], for the
// bounded rows; the prior-specific constants below are built from it.
double neg_entropy(Kernel kernel) {
  switch (kernel) {
    case Kernel::Uniform: return -std::log(2.0);
    case Kernel::Triangular: return -0.5;
    case Kernel::Epanechnikov: return -5.0 / 3.0 + std::log(3.0);
    case Kernel::Quartic: return -47.0 / 15.0 + std::log(15.0);
    case Kernel::Triweight: return -319.0 / 70.0 + std::log(70.0);
    case Kernel::Tricube:
      return -1111.0 / 140.0 + kPi * std::sqrt(3.0) / 2.0 + std::log(70.0 * std::sqrt(3.0));
    case Kernel::Cosine: return -1.0 + std::log(kPi / 2.0);
    case Kernel::Gaussian: return -kHalfLog2Pi - 0.5;
  }
  throw std::logic_error("unknown kernel");
}

}  // namespace

std::string_view to_string(Kernel kernel) {
  switch (kernel) {
    case Kernel::Uniform: return "uniform";
    case Kernel::Triangular: return "triangular";
    case Kernel::Epanechnikov: return "epanechnikov";
    case Kernel::Quartic: return "quartic";
    case Kernel::Triweight: return "triweight";
    case Kernel::Tricube: return "tricube";
    case Kernel::Cosine: return "cosine";
    case Kernel::Gaussian: return "gaussian";
  }
  return "?";
}

std::string_view to_string(Prior prior) {
  return prior == Prior::StdNormal ? "std_normal" : "uniform_cube";
}

Kernel parse_kernel(std::string_view name) {
  for (Kernel k : kAllKernels) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown kernel '" + std::string(name) + "'");
}

Prior parse_prior(std::string_view name) {
  if (name == "std_normal") return Prior::StdNormal;
  if (name == "uniform_cube") return Prior::UniformCube;
  throw std::invalid_argument("unknown prior '" + std::string(name) + "'");
}

bool is_bounded(Kernel kernel) { return kernel != Kernel::Gaussian; }

double density(Kernel kernel, double eps) {
  const double a = std::abs(eps);
  if (kernel == Kernel::Gaussian) {
    return std::exp(-0.5 * eps * eps) / std::sqrt(2.0 * kPi);
  }
  if (a > 1.0) return 0.0;
  const double u = 1.0 - eps * eps;
  switch (kernel) {
    case Kernel::Uniform: return 0.5;
    case Kernel::Triangular: return 1.0 - a;
    case Kernel::Epanechnikov: return 0.75 * u;
    case Kernel::Quartic: return 15.0 / 16.0 * u * u;
    case Kernel::Triweight: return 35.0 / 32.0 * u * u * u;
    case Kernel::Tricube: {
      const double c = 1.0 - a * a * a;
      return 70.0 / 81.0 * c * c * c;
    }
    case Kernel::Cosine: return kPi / 4.0 * std::cos(kPi * eps / 2.0);
    case Kernel::Gaussian: break;
  }
  throw std::logic_error("unknown kernel");
}

double peak(Kernel kernel) { return density(kernel, 0.0); }

double variance(Kernel kernel) {
  switch (kernel) {
    case Kernel::Uniform: return 1.0 / 3.0;
    case Kernel::Triangular: return 1.0 / 6.0;
    case Kernel::Epanechnikov: return 1.0 / 5.0;
    case Kernel::Quartic: return 1.0 / 7.0;
    case Kernel::Triweight: return 1.0 / 9.0;
    case Kernel::Tricube: return 35.0 / 243.0;
    case Kernel::Cosine: return 1.0 - 8.0 / (kPi * kPi);
    case Kernel::Gaussian: return 1.0;
  }
  throw std::logic_error("unknown kernel");
}

double sigma2_coefficient(Kernel kernel) { return 0.5 * variance(kernel); }

double kl_to_std_normal(Kernel kernel, double mu, double sigma) {
  require_positive_sigma(sigma);
  return 0.5 * mu * mu + sigma2_coefficient(kernel) * sigma * sigma - std::log(sigma) +
         kHalfLog2Pi + neg_entropy(kernel);
}

double kl_to_uniform(Kernel kernel, double mu, double sigma) {
  if (!is_bounded(kernel)) {
    throw UnsupportedError("gaussian kernel has no KL against the uniform prior");
  }
  require_positive_sigma(sigma);
  if (mu - sigma < -1.0 - kSupportSlack || mu + sigma > 1.0 + kSupportSlack) {
    throw DomainError("proposal support [" + std::to_string(mu - sigma) + ", " +
                      std::to_string(mu + sigma) + "] exceeds [-1, 1]");
  }
  return neg_entropy(kernel) + std::log(2.0) - std::log(sigma);
}

double kl(Kernel kernel, Prior prior, double mu, double sigma) {
  return prior == Prior::StdNormal ? kl_to_std_normal(kernel, mu, sigma)
                                   : kl_to_uniform(kernel, mu, sigma);
}

KlGradient kl_grad(Kernel kernel, Prior prior, double mu, double sigma) {
  if (prior == Prior::StdNormal) {
    require_positive_sigma(sigma);
    return {mu, 2.0 * sigma2_coefficient(kernel) * sigma - 1.0 / sigma};
  }
  // Validates support and kernel.
  (void)kl_to_uniform(kernel, mu, sigma);
  return {0.0, -1.0 / sigma};
}

Squashed squash(double mu, double sigma) {
  require_positive_sigma(sigma);
  const double hi = std::tanh(mu + sigma);
  const double lo = std::tanh(mu - sigma);
  return {(hi + lo) / 2.0, (hi - lo) / 2.0};
}

std::vector<double> reparameterize(std::span<const double> mu, std::span<const double> sigma,
                                   std::span<const double> eps) {
  if (mu.size() != sigma.size() || mu.size() != eps.size()) {
    throw ShapeError("reparameterize: dimension mismatch");
  }
  std::vector<double> z(mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = eps[i] * sigma[i] + mu[i];
  return z;
}

SampleBuffer::SampleBuffer(Kernel kernel, std::uint64_t seed) : kernel_(kernel), rng_(seed) {}

void SampleBuffer::reseed(std::uint64_t seed) { rng_.seed(seed); }

void SampleBuffer::restore_surplus(std::span<const double> values) {
  accepted_.assign(values.begin(), values.end());
}

double SampleBuffer::acceptance_rate() const {
  return proposed_ == 0 ? 0.0 : static_cast<double>(accepted_count_) / static_cast<double>(proposed_);
}

void SampleBuffer::refill(std::size_t deficit) {
  if (kernel_ == Kernel::Gaussian) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < deficit; ++i) accepted_.push_back(normal(rng_));
    proposed_ += deficit;
    accepted_count_ += deficit;
    return;
  }
  const double k0 = peak(kernel_);
  std::uniform_real_distribution<double> candidate(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t got = 0;
  while (got < deficit) {
    const auto batch = static_cast<std::size_t>(std::ceil(static_cast<double>(deficit - got) * 2.0 * k0));
    for (std::size_t i = 0; i < batch; ++i) {
      const double eps = candidate(rng_);
      if (unit(rng_) * k0 < density(kernel_, eps)) {
        accepted_.push_back(eps);
        ++got;
      }
    }
    proposed_ += batch;
  }
  accepted_count_ += got;
}

void SampleBuffer::sample_into(std::span<double> out) {
  if (accepted_.size() < out.size()) refill(out.size() - accepted_.size());
  for (double& v : out) {
    v = accepted_.front();
    accepted_.pop_front();
  }
}

std::vector<double> SampleBuffer::sample(std::size_t n) {
  std::vector<double> out(n);
  sample_into(out);
  return out;
}

}  // namespace ddvae
