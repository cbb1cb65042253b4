#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "ddvae/errors.hpp"
#include "ddvae/objective.hpp"
#include "gradcheck.hpp"

using namespace ddvae;
using ad::Mat;
using ad::Tape;
using ad::Tensor;

namespace {

/// Tile i of dimension 0 spans 2 p(x_i) of [-1, 1]; dimension 1 is the full
/// interval. With the uniform kernel every importance weight is exactly 1.
ProposalParams tiling(const Dataset& data) {
  ProposalParams p;
  p.mu.resize(static_cast<Eigen::Index>(data.size()), 2);
  p.sigma.resize(static_cast<Eigen::Index>(data.size()), 2);
  double left = -1.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double w = data.measure[i];
    const auto r = static_cast<Eigen::Index>(i);
    p.mu(r, 0) = left + w;
    p.sigma(r, 0) = w;
    p.mu(r, 1) = 0.0;
    p.sigma(r, 1) = 1.0;
    left += 2.0 * w;
  }
  return p;
}

double inverse_softplus(double y) { return std::log(std::expm1(y)); }

/// Decoder that emits the teacher tokens with overwhelming confidence and an
/// encoder that places each item on its tile.
class LookupVae final : public VaeModel {
 public:
  LookupVae(const Dataset& data, double confidence)
      : VaeModel(ModelSpec{Architecture::Gru, Kernel::Uniform, Prior::StdNormal, 2}, data.vocab),
        data_(data),
        tiles_(tiling(data)),
        confidence_(confidence) {
    for (std::size_t i = 0; i < data.size(); ++i) index_[data.items[i]] = i;
  }

  DecoderOutput decode_logits(Tape& tape, const Tensor& z, std::span<const Sequence> teacher) const override {
    DecoderOutput out;
    const std::size_t b = teacher.size();
    const std::size_t steps = data_.max_len + 1;
    Mat logits = Mat::Zero(static_cast<Eigen::Index>(steps * b), vocab_.scored_size);
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t row = t * b + i;
        const int target = t < teacher[i].size() ? teacher[i][t] : vocab_.eos_id;
        out.targets.push_back(target);
        out.row_example.push_back(static_cast<int>(i));
        out.row_mask.push_back(1.0);
        logits(static_cast<Eigen::Index>(row), target) = confidence_;
      }
    }
    // Keep z on the graph so gradients have somewhere to go.
    out.logits = ad::add(tape.constant(logits), ad::scale(ad::sum(z), 0.0));
    return out;
  }

  std::vector<Sequence> deterministic_decode(const Mat& z, std::size_t) const override {
    std::vector<Sequence> out;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      Sequence found = {vocab_.undefined_id};
      for (Eigen::Index i = 0; i < tiles_.batch(); ++i) {
        if (std::abs(z(r, 0) - tiles_.mu(i, 0)) <= tiles_.sigma(i, 0)) {
          found = data_.items[static_cast<std::size_t>(i)];
          break;
        }
      }
      out.push_back(found);
    }
    return out;
  }

 protected:
  Tensor encoder_head(Tape& tape, std::span<const Sequence> batch) const override {
    Mat raw(static_cast<Eigen::Index>(batch.size()), 4);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const auto i = static_cast<Eigen::Index>(index_.at(batch[k]));
      const auto r = static_cast<Eigen::Index>(k);
      raw(r, 0) = tiles_.mu(i, 0);
      raw(r, 1) = tiles_.mu(i, 1);
      raw(r, 2) = inverse_softplus(tiles_.sigma(i, 0));
      raw(r, 3) = inverse_softplus(tiles_.sigma(i, 1));
    }
    return tape.constant(raw);
  }

 private:
  const Dataset& data_;
  ProposalParams tiles_;
  double confidence_;
  std::map<Sequence, std::size_t> index_;
};

// Plain-loop forward pass of GruVae for the oracle comparison.
struct LoopGru {
  const ad::ParameterStore& ps;
  int hidden;

  const Mat& p(const std::string& n) const { return ps.find(n)->value; }

  std::vector<double> cell(const std::string& name, const std::vector<double>& x, const std::vector<double>& h) const {
    const Mat& wru = p(name + ".w_ru");
    const Mat& bru = p(name + ".b_ru");
    const Mat& wn = p(name + ".w_n");
    const Mat& un = p(name + ".u_n");
    const Mat& bn = p(name + ".b_n");
    const std::size_t in = x.size();
    const auto H = static_cast<std::size_t>(hidden);
    std::vector<double> out(H);
    for (std::size_t j = 0; j < H; ++j) {
      double ar = bru(0, static_cast<Eigen::Index>(j)), au = bru(0, static_cast<Eigen::Index>(j + H));
      for (std::size_t k = 0; k < in; ++k) {
        ar += x[k] * wru(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
        au += x[k] * wru(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j + H));
      }
      for (std::size_t k = 0; k < H; ++k) {
        ar += h[k] * wru(static_cast<Eigen::Index>(in + k), static_cast<Eigen::Index>(j));
        au += h[k] * wru(static_cast<Eigen::Index>(in + k), static_cast<Eigen::Index>(j + H));
      }
      const double r = 1.0 / (1.0 + std::exp(-ar));
      const double u = 1.0 / (1.0 + std::exp(-au));
      double xn = bn(0, static_cast<Eigen::Index>(j)), hn = 0.0;
      for (std::size_t k = 0; k < in; ++k) xn += x[k] * wn(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
      for (std::size_t k = 0; k < H; ++k) hn += h[k] * un(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
      const double n = std::tanh(xn + r * hn);
      out[j] = (1.0 - u) * n + u * h[j];
    }
    return out;
  }

  std::vector<double> linear(const std::string& name, const std::vector<double>& x) const {
    const Mat& w = p(name + ".weight");
    const Mat& b = p(name + ".bias");
    std::vector<double> out(static_cast<std::size_t>(w.cols()));
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      double a = b(0, j);
      for (Eigen::Index k = 0; k < w.rows(); ++k) a += x[static_cast<std::size_t>(k)] * w(k, j);
      out[static_cast<std::size_t>(j)] = a;
    }
    return out;
  }

  std::vector<double> embed(const std::string& name, int tok) const {
    const Mat& t = p(name + ".table");
    return {t.row(tok).data(), t.row(tok).data() + t.cols()};
  }
};

struct LoopResult {
  double recon = 0.0;
  double relaxed = 0.0;
  double kl = 0.0;
};

LoopResult loop_elbo(const GruVae& model, const std::vector<Sequence>& items, const std::vector<double>& weights,
                     const std::vector<double>& eps, double tau) {
  const ModelSpec& spec = model.spec();
  const Vocab& vocab = model.vocab();
  LoopGru g{model.parameters(), spec.hidden};
  const auto d = static_cast<std::size_t>(spec.latent_dim);
  LoopResult res;
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::vector<std::vector<double>> h(static_cast<std::size_t>(spec.layers),
                                       std::vector<double>(static_cast<std::size_t>(spec.hidden), 0.0));
    for (int tok : items[i]) {
      std::vector<double> x = g.embed("encoder.embed", tok);
      for (int l = 0; l < spec.layers; ++l) {
        h[l] = g.cell("encoder.gru" + std::to_string(l), x, h[l]);
        x = h[l];
      }
    }
    const std::vector<double> head = g.linear("encoder.head", h.back());
    std::vector<double> z(d);
    double kl_i = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double mu_raw = head[k];
      const double sp = softplus(head[d + k]);
      const double hi = std::tanh(mu_raw + sp), lo = std::tanh(mu_raw - sp);
      const double mu = 0.5 * (1.0 - kSigmaFloor) * (hi + lo);
      const double sigma = std::max(0.5 * (hi - lo), kSigmaFloor);
      z[k] = mu + eps[i * d + k] * sigma;
      kl_i += kl(spec.kernel, spec.prior, mu, sigma);
    }
    for (int l = 0; l < spec.layers; ++l) h[l] = g.linear("decoder.init" + std::to_string(l), z);
    int input = vocab.bos_id;
    double rec = 0.0, rel = 0.0;
    for (std::size_t t = 0; t <= items[i].size(); ++t) {
      std::vector<double> x = g.embed("decoder.embed", input);
      for (int l = 0; l < spec.layers; ++l) {
        h[l] = g.cell("decoder.gru" + std::to_string(l), x, h[l]);
        x = h[l];
      }
      const std::vector<double> logits = g.linear("decoder.out", x);
      double m = logits[0];
      for (double v : logits) m = std::max(m, v);
      double z_sum = 0.0;
      for (double v : logits) z_sum += std::exp(v - m);
      const int target = t < items[i].size() ? items[i][t] : vocab.eos_id;
      rec += logits[static_cast<std::size_t>(target)] - m - std::log(z_sum);
      const double pt = std::exp(logits[static_cast<std::size_t>(target)] - m) / z_sum;
      for (std::size_t s = 0; s < logits.size(); ++s) {
        if (static_cast<int>(s) == target) continue;
        rel += log_sigma_tau(pt - std::exp(logits[s] - m) / z_sum, Temperature(tau));
      }
      input = target;
    }
    res.recon += weights[i] * rec;
    res.relaxed += weights[i] * rel;
    res.kl += weights[i] * kl_i;
  }
  return res;
}

ModelSpec tiny_spec(Kernel kernel = Kernel::Uniform, Prior prior = Prior::UniformCube) {
  ModelSpec s;
  s.kernel = kernel;
  s.prior = prior;
  s.embedding = 3;
  s.hidden = 5;
  s.layers = 2;
  s.init_seed = 11;
  return s;
}

Batch sample_batch() {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  Batch b;
  for (std::size_t i : {0u, 13u, 40u, 63u}) b.items.push_back(data.items[i]);
  b.weights = {0.1, 0.2, 0.3, 0.4};
  return b;
}

}  // namespace

TEST_CASE("one-hot decoder gives a zero reconstruction term") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  LookupVae model(data, 1000.0);
  SampleBuffer buf(Kernel::Uniform, 1);
  Tape tape;
  const ElboGraph g = standard_elbo(tape, model, Batch::uniform(data.items), buf, 1.0);
  CHECK(g.terms.reconstruction == 0.0);
  CHECK(g.terms.total == g.terms.reconstruction - g.terms.beta * g.terms.kl);
}

TEST_CASE("relaxed term on a one-hot decoder") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  LookupVae model(data, 1000.0);
  SampleBuffer buf(Kernel::Uniform, 1);
  Tape tape;
  const Temperature tau(0.1);
  const ElboGraph g = relaxed_elbo(tape, model, Batch::uniform(data.items), buf, 0.0, tau);
  // 6 symbols + eos per string, |scored vocab| - 1 = 2 competitors each.
  const double expected = 7.0 * 2.0 * log_sigma_tau(1.0, tau);
  CHECK(g.terms.reconstruction == doctest::Approx(expected).epsilon(1e-12));

  SUBCASE("ties contribute log tau") {
    LookupVae flat(data, 0.0);
    Tape t2;
    const ElboGraph f = relaxed_elbo(t2, flat, Batch::uniform({data.items[3]}), buf, 0.0, tau);
    CHECK(f.terms.reconstruction == doctest::Approx(7.0 * 2.0 * std::log(0.1)).epsilon(1e-12));
  }

  SUBCASE("lowering tau drives the term to zero monotonically") {
    double prev = -1e300;
    for (double t : {0.1, 0.05, 0.01, 1e-3, 1e-4}) {
      Tape tt;
      const double r = relaxed_elbo(tt, model, Batch::uniform(data.items), buf, 0.0, Temperature(t)).terms.reconstruction;
      CHECK(r >= prev);
      prev = r;
    }
    CHECK(std::abs(prev) < 1e-12);
  }
}

TEST_CASE("proposal equal to the prior has zero KL") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  ModelSpec spec = tiny_spec(Kernel::Gaussian, Prior::StdNormal);
  GruVae model(spec, data.vocab, data.max_len);
  // Zero the encoder head so mu = 0 and sigma = softplus(b); set b so sigma = 1.
  model.parameters().find("encoder.head.weight")->value.setZero();
  Mat& bias = model.parameters().find("encoder.head.bias")->value;
  bias << 0.0, 0.0, inverse_softplus(1.0), inverse_softplus(1.0);
  SampleBuffer buf(Kernel::Gaussian, 2);
  Tape tape;
  const ElboGraph g = standard_elbo(tape, model, Batch::uniform({data.items[0], data.items[9]}), buf, 1.0);
  CHECK(std::abs(g.terms.kl) < 1e-12);
}

TEST_CASE("graph values match a plain-loop oracle") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  GruVae model(tiny_spec(), data.vocab, data.max_len);
  const Batch batch = sample_batch();
  const double tau = 0.2;
  SampleBuffer a(Kernel::Uniform, 5), b(Kernel::Uniform, 5), c(Kernel::Uniform, 5);
  const std::vector<double> eps = c.sample(batch.items.size() * 2);
  const LoopResult oracle = loop_elbo(model, batch.items, batch.weights, eps, tau);
  Tape t1, t2;
  const ElboGraph s = standard_elbo(t1, model, batch, a, 0.5);
  const ElboGraph r = relaxed_elbo(t2, model, batch, b, 0.5, Temperature(tau));
  CHECK(std::abs(s.terms.reconstruction - oracle.recon) < 1e-10);
  CHECK(std::abs(s.terms.kl - oracle.kl) < 1e-10);
  CHECK(std::abs(r.terms.reconstruction - oracle.relaxed) < 1e-10);
  CHECK(std::abs(r.terms.kl - oracle.kl) < 1e-10);
  CHECK(s.terms.total == s.terms.reconstruction - 0.5 * s.terms.kl);
  CHECK(s.terms.kl >= -1e-9);
}

TEST_CASE("relaxed ELBO gradient matches finite differences") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  for (auto [kernel, prior] : {std::pair{Kernel::Uniform, Prior::UniformCube}, std::pair{Kernel::Tricube, Prior::StdNormal}}) {
    CAPTURE(to_string(kernel));
    GruVae model(tiny_spec(kernel, prior), data.vocab, data.max_len);
    const Batch batch = sample_batch();
    auto value = [&] {
      SampleBuffer buf(kernel, 8);
      Tape t(false);
      return relaxed_elbo(t, model, batch, buf, 0.3, Temperature(0.3)).terms.total;
    };
    const double err = gradcheck::check_params(
        value,
        [&] {
          SampleBuffer buf(kernel, 8);
          Tape t;
          t.backward(relaxed_elbo(t, model, batch, buf, 0.3, Temperature(0.3)).total);
        },
        model.parameters().all());
    CHECK(err < 1e-4);
  }
}

TEST_CASE("beta = 0 keeps the KL term off the gradient path") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  GruVae model(tiny_spec(), data.vocab, data.max_len);
  const Batch batch = sample_batch();
  model.parameters().zero_grad();
  SampleBuffer b1(Kernel::Uniform, 3);
  Tape t1;
  const ElboGraph g = standard_elbo(t1, model, batch, b1, 0.0);
  t1.backward(g.total);
  std::vector<Mat> with_zero;
  for (auto* p : model.parameters().all()) with_zero.push_back(p->grad);
  CHECK(g.terms.kl > 0.0);

  model.parameters().zero_grad();
  SampleBuffer b2(Kernel::Uniform, 3);
  Tape t2;
  t2.backward(standard_elbo(t2, model, batch, b2, 0.0).reconstruction);
  std::size_t k = 0;
  for (auto* p : model.parameters().all()) CHECK(p->grad == with_zero[k++]);
}

TEST_CASE("fine-tune loss") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  GruVae model(tiny_spec(), data.vocab, data.max_len);
  const Batch batch = sample_batch();
  SampleBuffer b1(Kernel::Uniform, 4), b2(Kernel::Uniform, 4);
  Tape t1, t2;
  const ElboGraph s = standard_elbo(t1, model, batch, b1, 1.0);
  model.parameters().zero_grad();
  const ElboGraph f = finetune_loss(t2, model, batch, b2);
  CHECK(f.terms.reconstruction == s.terms.reconstruction);
  t2.backward(f.total);
  for (auto* p : model.encoder_parameters()) {
    CHECK(p->grad.isZero(0.0));
    CHECK_FALSE(p->frozen);
  }
  double decoder_mass = 0.0;
  for (auto* p : model.decoder_parameters()) decoder_mass += p->grad.cwiseAbs().sum();
  CHECK(decoder_mass > 0.0);
}

TEST_CASE("indicator reconstruction") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  LookupVae perfect(data, 1000.0);
  SampleBuffer buf(Kernel::Uniform, 6);
  const IndicatorResult ok = indicator_recon(perfect, Batch::uniform(data.items), buf);
  CHECK(ok.violations == 0);
  CHECK(ok.finite);

  GruVae untrained(tiny_spec(), data.vocab, data.max_len);
  const IndicatorResult bad = indicator_recon(untrained, Batch::uniform(data.items), buf);
  CHECK(bad.violations > 0);
  CHECK_FALSE(bad.finite);
}

TEST_CASE("error rate estimates") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  const ProposalParams tiles = tiling(data);
  LookupVae lookup(data, 1000.0);
  std::mt19937_64 rng(1);
  SampleBuffer buf(Kernel::Uniform, 2);
  const DecodeFn truth = [&](const Mat& z) { return lookup.deterministic_decode(z, 6); };
  CHECK(error_rate(truth, tiles, data, 5000, buf, rng).value == 0.0);

  const Sequence all_ones(6, 1);
  const DecodeFn constant = [&](const Mat& z) { return std::vector<Sequence>(static_cast<std::size_t>(z.rows()), all_ones); };
  const ErrorRateEstimate e = error_rate(constant, tiles, data, 20000, buf, rng);
  const double exact = 1.0 - std::pow(0.8, 6);
  CHECK(std::abs(e.value - exact) < 3.0 * e.std_err);
  CHECK(e.std_err == doctest::Approx(std::sqrt(e.value * (1 - e.value) / 20000.0)));
  CHECK_THROWS(error_rate(constant, tiles, data, 0, buf, rng));

  std::mt19937_64 r1(9), r2(9);
  SampleBuffer s1(Kernel::Uniform, 9), s2(Kernel::Uniform, 9);
  CHECK(error_rate(constant, tiles, data, 300, s1, r1).value == error_rate(constant, tiles, data, 300, s2, r2).value);
}

TEST_CASE("optimal decoder") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  const ProposalParams tiles = tiling(data);
  for (std::size_t i : {0u, 17u, 63u}) {
    const std::vector<double> z = {tiles.mu(static_cast<Eigen::Index>(i), 0), 0.3};
    const OptimalDecision d = optimal_decoder(tiles, data, Kernel::Uniform, z);
    CHECK(d.item == i);
    CHECK_FALSE(d.zero_density);
  }
  const std::vector<double> outside = {0.0, 1.5};
  const OptimalDecision none = optimal_decoder(tiles, data, Kernel::Uniform, outside);
  CHECK(none.zero_density);
  CHECK(none.item == 0);

  std::mt19937_64 rng(3);
  const ErrorRateEstimate exact = optimal_error_rate(tiles, data, Kernel::Uniform, Prior::UniformCube, 10000, rng);
  CHECK(std::abs(exact.value) < 1e-12);

  Dataset images;
  images.items = {Sequence(784, 0)};
  images.measure = {1.0};
  images.vocab = Vocab::pixels();
  ProposalParams one;
  one.mu = Mat::Zero(1, 2);
  one.sigma = Mat::Ones(1, 2);
  CHECK_THROWS_WITH_AS(optimal_decoder(one, images, Kernel::Uniform, outside), "dataset not enumerable",
                       std::invalid_argument);
  CHECK_THROWS_AS(optimal_error_rate(one, images, Kernel::Uniform, Prior::UniformCube, 10, rng), std::invalid_argument);
}

TEST_CASE("optimal error rate bounds the trained-decoder error rate") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  GruVae model(tiny_spec(), data.vocab, data.max_len);
  const ProposalParams prop = model.proposals(data.items);
  std::mt19937_64 rng(4);
  const ErrorRateEstimate opt = optimal_error_rate(prop, data, Kernel::Uniform, Prior::UniformCube, 10000, rng);
  CHECK(opt.value >= -3.0 * opt.std_err);
  SampleBuffer buf(Kernel::Uniform, 4);
  const DecodeFn decode = [&](const Mat& z) { return model.deterministic_decode(z, 6); };
  const ErrorRateEstimate dec = error_rate(decode, prop, data, 10000, buf, rng);
  CHECK(opt.value <= dec.value + 3.0 * std::hypot(opt.std_err, dec.std_err));
}

TEST_CASE("prior helpers") {
  std::mt19937_64 rng(5);
  const Mat z = sample_prior(Prior::UniformCube, 1000, 2, rng);
  CHECK(z.cwiseAbs().maxCoeff() <= 1.0);
  const std::vector<double> in = {0.2, -0.9}, out = {0.2, 1.1};
  CHECK(prior_density(Prior::UniformCube, in) == 0.25);
  CHECK(prior_density(Prior::UniformCube, out) == 0.0);
  const std::vector<double> origin = {0.0};
  CHECK(prior_density(Prior::StdNormal, origin) == doctest::Approx(1.0 / std::sqrt(2.0 * M_PI)));
}

TEST_CASE("standard ELBO and fine-tune gradients match finite differences") {
  const Dataset data = Dataset::synthetic(SyntheticSpec{});
  for (auto [kernel, prior] : {std::pair{Kernel::Uniform, Prior::UniformCube}, std::pair{Kernel::Gaussian, Prior::StdNormal}}) {
    CAPTURE(to_string(kernel));
    GruVae model(tiny_spec(kernel, prior), data.vocab, data.max_len);
    const Batch batch = sample_batch();
    const double err = gradcheck::check_params(
        [&] {
          SampleBuffer buf(kernel, 8);
          Tape t(false);
          return standard_elbo(t, model, batch, buf, 0.7).terms.total;
        },
        [&] {
          SampleBuffer buf(kernel, 8);
          Tape t;
          t.backward(standard_elbo(t, model, batch, buf, 0.7).total);
        },
        model.parameters().all());
    CHECK(err < 1e-4);
    const double ft = gradcheck::check_params(
        [&] {
          SampleBuffer buf(kernel, 8);
          Tape t(false);
          return finetune_loss(t, model, batch, buf).terms.total;
        },
        [&] {
          SampleBuffer buf(kernel, 8);
          Tape t;
          t.backward(finetune_loss(t, model, batch, buf).total);
        },
        model.decoder_parameters());
    CHECK(ft < 1e-4);
  }
}
