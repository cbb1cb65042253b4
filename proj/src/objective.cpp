#include "ddvae/objective.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "ddvae/errors.hpp"

namespace ddvae {

using ad::Mat;
using ad::Tape;
using ad::Tensor;

Batch Batch::uniform(std::vector<Sequence> items) {
  Batch b;
  b.weights.assign(items.size(), items.empty() ? 0.0 : 1.0 / static_cast<double>(items.size()));
  b.items = std::move(items);
  return b;
}

namespace {

void check_weights(const Batch& batch) {
  if (batch.items.empty()) throw ShapeError("empty batch");
  if (batch.weights.size() != batch.items.size()) throw ShapeError("one weight per batch item required");
}

Mat row_weights(const DecoderOutput& dec, const Batch& batch) {
  Mat w(static_cast<Eigen::Index>(dec.targets.size()), 1);
  for (std::size_t r = 0; r < dec.targets.size(); ++r) {
    w(static_cast<Eigen::Index>(r), 0) = batch.weights[static_cast<std::size_t>(dec.row_example[r])] * dec.row_mask[r];
  }
  return w;
}

Tensor weighted_kl(Tape& tape, const VaeModel& model, const EncoderOutput& enc, const Batch& batch) {
  const Tensor per_dim = ad::kl_node(model.spec().kernel, model.spec().prior, enc.mu, enc.sigma);
  const Mat w = Eigen::Map<const Mat>(batch.weights.data(), static_cast<Eigen::Index>(batch.weights.size()), 1);
  return ad::sum(ad::mul(ad::row_sum(per_dim), tape.constant(w)));
}

ElboGraph assemble(Tensor recon, Tensor kl, double beta, EncoderOutput enc, Tensor z) {
  ElboGraph g;
  g.reconstruction = recon;
  g.kl = kl;
  // With beta == 0 the KL node stays off the path from the total, so no
  // gradient flows through it.
  g.total = beta == 0.0 ? recon : ad::sub(recon, ad::scale(kl, beta));
  g.encoder = enc;
  g.z = z;
  g.terms.reconstruction = recon.scalar();
  g.terms.kl = kl.scalar();
  g.terms.beta = beta;
  g.terms.total = g.terms.reconstruction - beta * g.terms.kl;
  return g;
}

Tensor log_likelihood(Tape& tape, const DecoderOutput& dec, const Batch& batch) {
  const Tensor picked = ad::pick(ad::log_softmax(dec.logits), dec.targets);
  return ad::sum(ad::mul(picked, tape.constant(row_weights(dec, batch))));
}

}  // namespace

ElboGraph standard_elbo(Tape& tape, const VaeModel& model, const Batch& batch, SampleBuffer& buffer, double beta) {
  check_weights(batch);
  const EncoderOutput enc = model.encode(tape, batch.items);
  const Tensor z = sample_latents(tape, enc, buffer);
  const DecoderOutput dec = model.decode_logits(tape, z, batch.items);
  return assemble(log_likelihood(tape, dec, batch), weighted_kl(tape, model, enc, batch), beta, enc, z);
}

ElboGraph relaxed_elbo(Tape& tape, const VaeModel& model, const Batch& batch, SampleBuffer& buffer, double beta,
                       Temperature tau) {
  check_weights(batch);
  const EncoderOutput enc = model.encode(tape, batch.items);
  const Tensor z = sample_latents(tape, enc, buffer);
  const DecoderOutput dec = model.decode_logits(tape, z, batch.items);
  const Tensor scores = ad::softmax(dec.logits);
  const Tensor truth = ad::pick(scores, dec.targets);
  const Tensor log_ind = ad::log_sigma_tau_node(ad::sub(truth, scores), tau);
  // Weight every competitor s != x_i; the target column itself is masked.
  Mat w = row_weights(dec, batch).replicate(1, scores.cols());
  for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, dec.targets[static_cast<std::size_t>(r)]) = 0.0;
  const Tensor recon = ad::sum(ad::mul(log_ind, tape.constant(std::move(w))));
  return assemble(recon, weighted_kl(tape, model, enc, batch), beta, enc, z);
}

ElboGraph finetune_loss(Tape& tape, VaeModel& model, const Batch& batch, SampleBuffer& buffer) {
  check_weights(batch);
  struct FreezeGuard {
    VaeModel& m;
    explicit FreezeGuard(VaeModel& model) : m(model) { m.set_encoder_frozen(true); }
    ~FreezeGuard() { m.set_encoder_frozen(false); }
  } guard(model);
  const EncoderOutput enc = model.encode(tape, batch.items);
  const Tensor z = sample_latents(tape, enc, buffer);
  const DecoderOutput dec = model.decode_logits(tape, z, batch.items);
  return assemble(log_likelihood(tape, dec, batch), weighted_kl(tape, model, enc, batch), 0.0, enc, z);
}

IndicatorResult indicator_recon(const VaeModel& model, const Batch& batch, SampleBuffer& buffer) {
  check_weights(batch);
  const ProposalParams params = model.proposals(batch.items);
  const Mat z = sample_latents(params, buffer);
  std::size_t max_len = 0;
  for (const Sequence& s : batch.items) max_len = std::max(max_len, s.size());
  const std::vector<Sequence> decoded = model.deterministic_decode(z, max_len);
  IndicatorResult r;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    if (decoded[i] != batch.items[i]) ++r.violations;
  }
  r.finite = r.violations == 0;
  return r;
}

ErrorRateEstimate error_rate(const DecodeFn& decode, const ProposalParams& proposals, const Dataset& data,
                             std::size_t n_samples, SampleBuffer& buffer, std::mt19937_64& rng) {
  if (n_samples == 0) throw std::invalid_argument("error_rate needs at least one sample");
  if (static_cast<std::size_t>(proposals.batch()) != data.size()) {
    throw ShapeError("one proposal row per dataset item required");
  }
  std::discrete_distribution<std::size_t> pick_item(data.measure.begin(), data.measure.end());
  std::vector<std::size_t> idx(n_samples);
  for (std::size_t& i : idx) i = pick_item(rng);
  ProposalParams chosen;
  chosen.mu.resize(static_cast<Eigen::Index>(n_samples), proposals.dims());
  chosen.sigma.resize(static_cast<Eigen::Index>(n_samples), proposals.dims());
  for (std::size_t s = 0; s < n_samples; ++s) {
    chosen.mu.row(static_cast<Eigen::Index>(s)) = proposals.mu.row(static_cast<Eigen::Index>(idx[s]));
    chosen.sigma.row(static_cast<Eigen::Index>(s)) = proposals.sigma.row(static_cast<Eigen::Index>(idx[s]));
  }
  const Mat z = sample_latents(chosen, buffer);
  const std::vector<Sequence> decoded = decode(z);
  std::size_t errors = 0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    if (decoded[s] != data.items[idx[s]]) ++errors;
  }
  ErrorRateEstimate e;
  e.n_samples = n_samples;
  e.value = static_cast<double>(errors) / static_cast<double>(n_samples);
  e.std_err = std::sqrt(e.value * (1.0 - e.value) / static_cast<double>(n_samples));
  return e;
}

ErrorRateEstimate error_rate(const VaeModel& model, const Dataset& data, std::size_t n_samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SampleBuffer buffer(model.spec().kernel, seed ^ 0x9e3779b97f4a7c15ULL);
  const ProposalParams proposals = model.proposals(data.items);
  const DecodeFn decode = [&](const Mat& z) { return model.deterministic_decode(z, data.max_len); };
  return error_rate(decode, proposals, data, n_samples, buffer, rng);
}

double proposal_density(Kernel kernel, const ProposalParams& proposals, Eigen::Index item, std::span<const double> z) {
  double q = 1.0;
  for (Eigen::Index d = 0; d < proposals.dims(); ++d) {
    const double s = proposals.sigma(item, d);
    q *= density(kernel, (z[static_cast<std::size_t>(d)] - proposals.mu(item, d)) / s) / s;
    if (q == 0.0) break;
  }
  return q;
}

OptimalDecision optimal_decoder(const ProposalParams& proposals, const Dataset& data, Kernel kernel,
                                std::span<const double> z) {
  if (!data.enumerable) throw std::invalid_argument("dataset not enumerable");
  if (static_cast<std::size_t>(proposals.batch()) != data.size()) {
    throw ShapeError("one proposal row per dataset item required");
  }
  OptimalDecision best;
  double best_score = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double score = data.measure[i] * proposal_density(kernel, proposals, static_cast<Eigen::Index>(i), z);
    if (score > best_score) {
      best_score = score;
      best.item = i;
    }
  }
  best.zero_density = best_score == 0.0;
  return best;
}

double prior_density(Prior prior, std::span<const double> z) {
  double p = 1.0;
  for (double v : z) {
    if (prior == Prior::StdNormal) {
      p *= std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
    } else {
      p *= std::abs(v) <= 1.0 ? 0.5 : 0.0;
    }
  }
  return p;
}

Mat sample_prior(Prior prior, std::size_t n, int dims, std::mt19937_64& rng) {
  Mat z(static_cast<Eigen::Index>(n), dims);
  if (prior == Prior::StdNormal) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = dist(rng);
  } else {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = dist(rng);
  }
  return z;
}

ErrorRateEstimate optimal_error_rate(const ProposalParams& proposals, const Dataset& data, Kernel kernel, Prior prior,
                                     std::size_t n_prior_samples, std::mt19937_64& rng) {
  if (!data.enumerable) throw std::invalid_argument("dataset not enumerable");
  if (n_prior_samples == 0) throw std::invalid_argument("optimal_error_rate needs at least one sample");
  const Mat z = sample_prior(prior, n_prior_samples, static_cast<int>(proposals.dims()), rng);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (Eigen::Index s = 0; s < z.rows(); ++s) {
    const std::span<const double> zs(z.row(s).data(), static_cast<std::size_t>(z.cols()));
    const OptimalDecision d = optimal_decoder(proposals, data, kernel, zs);
    double w = 0.0;
    if (!d.zero_density) {
      w = data.measure[d.item] * proposal_density(kernel, proposals, static_cast<Eigen::Index>(d.item), zs) /
          prior_density(prior, zs);
    }
    sum += w;
    sum_sq += w * w;
  }
  const auto n = static_cast<double>(n_prior_samples);
  const double mean = sum / n;
  const double var = n > 1.0 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
  ErrorRateEstimate e;
  e.n_samples = n_prior_samples;
  e.value = 1.0 - mean;
  e.std_err = std::sqrt(var / n);
  return e;
}

ErrorRateEstimate optimal_error_rate(const VaeModel& model, const Dataset& data, std::size_t n_prior_samples,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ProposalParams proposals = model.proposals(data.items);
  return optimal_error_rate(proposals, data, model.spec().kernel, model.spec().prior, n_prior_samples, rng);
}

}  // namespace ddvae
