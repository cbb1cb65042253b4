#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ddvae {

/// Location-scale proposal families. All but Gaussian have support [-1, 1]
/// in standardized units.
enum class Kernel {
  Uniform,
  Triangular,
  Epanechnikov,
  Quartic,
  Triweight,
  Tricube,
  Cosine,
  Gaussian,
};

enum class Prior {
  StdNormal,    // N(0, 1) per dimension
  UniformCube,  // U[-1, 1] per dimension
};

inline constexpr Kernel kBoundedKernels[] = {
    Kernel::Uniform,   Kernel::Triangular, Kernel::Epanechnikov, Kernel::Quartic,
    Kernel::Triweight, Kernel::Tricube,    Kernel::Cosine,
};

inline constexpr Kernel kAllKernels[] = {
    Kernel::Uniform,   Kernel::Triangular, Kernel::Epanechnikov, Kernel::Quartic,
    Kernel::Triweight, Kernel::Tricube,    Kernel::Cosine,       Kernel::Gaussian,
};

std::string_view to_string(Kernel kernel);
std::string_view to_string(Prior prior);
/// Parses the lowercase config names ("uniform", "tricube", ...). Throws
/// std::invalid_argument on unknown names.
Kernel parse_kernel(std::string_view name);
Prior parse_prior(std::string_view name);

bool is_bounded(Kernel kernel);

/// Standardized density K(eps) (mu = 0, sigma = 1).
double density(Kernel kernel, double eps);

/// Peak value K(0).
double peak(Kernel kernel);

/// Variance of the standardized kernel. The std-normal KL carries half of it
/// as the coefficient of sigma^2.
double variance(Kernel kernel);

/// Coefficient c in KL(q || N(0,1)) = mu^2/2 + c*sigma^2 - log(sigma) + const.
double sigma2_coefficient(Kernel kernel);

double kl_to_std_normal(Kernel kernel, double mu, double sigma);

/// KL against U[-1, 1]. Requires a bounded kernel whose support
/// [mu - sigma, mu + sigma] lies inside [-1, 1].
double kl_to_uniform(Kernel kernel, double mu, double sigma);

double kl(Kernel kernel, Prior prior, double mu, double sigma);

struct KlGradient {
  double d_mu = 0.0;
  double d_sigma = 0.0;
};

/// Partial derivatives of the closed-form KL with respect to (mu, sigma).
KlGradient kl_grad(Kernel kernel, Prior prior, double mu, double sigma);

struct Squashed {
  double mu = 0.0;
  double sigma = 0.0;
};

/// Maps an unconstrained (mu, sigma > 0) to a proposal whose support
/// [mu' - sigma', mu' + sigma'] = [tanh(mu - sigma), tanh(mu + sigma)].
Squashed squash(double mu, double sigma);

/// Bandwidth floor applied after softplus/squash.
inline constexpr double kSigmaFloor = 1e-6;

/// z[i] = eps[i] * sigma[i] + mu[i].
std::vector<double> reparameterize(std::span<const double> mu, std::span<const double> sigma,
                                   std::span<const double> eps);

/// Rejection sampler for standardized kernel draws with a surplus buffer.
///
/// Uniform candidates on [-1, 1] are accepted with probability
/// K(eps) / K(0); each refill draws ceil(m * 2K(0)) candidates for a deficit
/// of m and repeats until the deficit is covered. Accepted surplus is kept
/// for later requests. The Gaussian kernel is sampled directly.
class SampleBuffer {
 public:
  SampleBuffer(Kernel kernel, std::uint64_t seed);

  std::vector<double> sample(std::size_t n);
  void sample_into(std::span<double> out);

  /// Restarts the generator; banked samples are kept.
  void reseed(std::uint64_t seed);

  Kernel kernel() const { return kernel_; }
  std::size_t banked() const { return accepted_.size(); }
  const std::deque<double>& surplus() const { return accepted_; }
  void restore_surplus(std::span<const double> values);

  std::uint64_t proposed() const { return proposed_; }
  std::uint64_t accepted() const { return accepted_count_; }
  double acceptance_rate() const;

 private:
  void refill(std::size_t deficit);

  Kernel kernel_;
  std::deque<double> accepted_;
  std::mt19937_64 rng_;
  std::uint64_t proposed_ = 0;
  std::uint64_t accepted_count_ = 0;
};

}  // namespace ddvae
