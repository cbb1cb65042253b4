#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "ddvae/data.hpp"
#include "ddvae/relaxation.hpp"
#include "ddvae/seqmodel.hpp"

namespace ddvae {

/// A minibatch: items and per-item weights summing to 1, so every batch
/// quantity is a weighted mean over examples.
struct Batch {
  std::vector<Sequence> items;
  std::vector<double> weights;

  static Batch uniform(std::vector<Sequence> items);
};

struct ElboTerms {
  double reconstruction = 0.0;
  double kl = 0.0;
  double beta = 0.0;
  double total = 0.0;  // reconstruction - beta * kl
};

/// Scalar graph nodes for one ELBO evaluation plus their values.
struct ElboGraph {
  ElboTerms terms;
  ad::Tensor reconstruction;
  ad::Tensor kl;     // off the path from total when beta == 0
  ad::Tensor total;  // maximize; negate for a loss
  EncoderOutput encoder;
  ad::Tensor z;
};

/// Single-sample ELBO with the categorical log-likelihood
/// sum_i log pi_{x,i,x_i}(z). beta == 0 leaves the KL out of the graph and
/// reports it as a value only.
ElboGraph standard_elbo(ad::Tape& tape, const VaeModel& model, const Batch& batch, SampleBuffer& buffer,
                        double beta);

/// ELBO with the relaxed argmax indicator:
/// sum_i sum_{s != x_i} log sigma_tau(pi_{x,i,x_i}(z) - pi_{x,i,s}(z)).
ElboGraph relaxed_elbo(ad::Tape& tape, const VaeModel& model, const Batch& batch, SampleBuffer& buffer,
                       double beta, Temperature tau);

/// Reconstruction term only, with the encoder frozen for the duration of
/// the call. Gradients reach decoder parameters only.
ElboGraph finetune_loss(ad::Tape& tape, VaeModel& model, const Batch& batch, SampleBuffer& buffer);

/// Diagnostic form of the indicator reconstruction term: the number of
/// examples whose sampled z does not decode back to the example. The
/// reconstruction is finite (log 1 = 0 for every element) iff violations == 0.
struct IndicatorResult {
  std::size_t violations = 0;
  bool finite = true;
};

IndicatorResult indicator_recon(const VaeModel& model, const Batch& batch, SampleBuffer& buffer);

struct ErrorRateEstimate {
  double value = 0.0;
  std::size_t n_samples = 0;
  double std_err = 0.0;
};

/// Batch decoder z (rows) -> sequences.
using DecodeFn = std::function<std::vector<Sequence>(const ad::Mat&)>;

/// Monte Carlo estimate of P(decode(z) != x) for x from the dataset
/// measure and z ~ q(z | x). Proposals hold one row per dataset item.
ErrorRateEstimate error_rate(const DecodeFn& decode, const ProposalParams& proposals, const Dataset& data,
                             std::size_t n_samples, SampleBuffer& buffer, std::mt19937_64& rng);

ErrorRateEstimate error_rate(const VaeModel& model, const Dataset& data, std::size_t n_samples,
                             std::uint64_t seed);

/// Proposal density q(z | item) for a factorized kernel.
double proposal_density(Kernel kernel, const ProposalParams& proposals, Eigen::Index item,
                        std::span<const double> z);

struct OptimalDecision {
  std::size_t item = 0;
  bool zero_density = false;  // every p(x) q(z | x) was 0; item is the first
};

/// argmax_x p(x) q(z | x) by enumeration; ties go to the lowest item index
/// (items are in lexicographic order). Throws std::invalid_argument for a
/// non-enumerable dataset.
OptimalDecision optimal_decoder(const ProposalParams& proposals, const Dataset& data, Kernel kernel,
                                std::span<const double> z);

/// Importance-sampled error rate of the optimal decoder,
/// 1 - E_{z ~ p(z)} [p(x*) q(z | x*) / p(z)]. The reported std_err is the
/// sample standard error of the importance weights.
ErrorRateEstimate optimal_error_rate(const ProposalParams& proposals, const Dataset& data, Kernel kernel,
                                     Prior prior, std::size_t n_prior_samples, std::mt19937_64& rng);

ErrorRateEstimate optimal_error_rate(const VaeModel& model, const Dataset& data, std::size_t n_prior_samples,
                                     std::uint64_t seed);

/// Draws z from the prior, one row per sample.
ad::Mat sample_prior(Prior prior, std::size_t n, int dims, std::mt19937_64& rng);
double prior_density(Prior prior, std::span<const double> z);

}  // namespace ddvae
