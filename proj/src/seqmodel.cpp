#include "ddvae/seqmodel.hpp"

#include <algorithm>
#include <random>

#include "ddvae/errors.hpp"

namespace ddvae {

using ad::Mat;
using ad::Tape;
using ad::Tensor;

std::string_view to_string(Architecture arch) { return arch == Architecture::Gru ? "gru" : "mlp"; }

Architecture parse_architecture(std::string_view name) {
  if (name == "gru") return Architecture::Gru;
  if (name == "mlp") return Architecture::Mlp;
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

void ModelSpec::validate() const {
  if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
  if (prior == Prior::UniformCube && !is_bounded(kernel)) {
    throw ConfigError("the gaussian kernel cannot be used with the uniform_cube prior");
  }
  if (architecture == Architecture::Gru && (embedding < 1 || hidden < 1 || layers < 1)) {
    throw ConfigError("gru model needs positive embedding, hidden and layers");
  }
  if (architecture == Architecture::Mlp && mlp_sizes.size() < 2) {
    throw ConfigError("mlp_sizes needs the input width and at least one hidden width");
  }
}

int argmax_token(std::span<const double> scores, int undefined_id) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(scores.size()); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
    if (i != best && scores[i] == scores[best]) return undefined_id;
  }
  return best;
}

namespace {

Mat softmax_rows(const Mat& logits) {
  Mat y(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    y.row(r) = (logits.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

// ---------------------------------------------------------------------------
// VaeModel

VaeModel::VaeModel(ModelSpec spec, Vocab vocab) : spec_(std::move(spec)), vocab_(std::move(vocab)) {
  spec_.validate();
}

void VaeModel::set_encoder_frozen(bool frozen) {
  for (ad::Parameter* p : encoder_parameters()) p->frozen = frozen;
}

void VaeModel::check_batch(std::span<const Sequence> batch, std::size_t max_len) const {
  if (batch.empty()) throw ShapeError("empty batch");
  for (const Sequence& s : batch) {
    if (max_len > 0 && s.size() > max_len) {
      throw ShapeError("sequence of length " + std::to_string(s.size()) + " exceeds the maximum " +
                       std::to_string(max_len));
    }
    for (int t : s) {
      if (t < 0 || t >= vocab_.scored_size || t == vocab_.eos_id) {
        throw ShapeError("token id " + std::to_string(t) + " is not a data symbol");
      }
    }
  }
}

EncoderOutput VaeModel::encode(Tape& tape, std::span<const Sequence> batch) const {
  const int d = spec_.latent_dim;
  const Tensor raw = encoder_head(tape, batch);
  const Tensor mu_raw = ad::slice_cols(raw, 0, d);
  const Tensor sigma_pos = ad::softplus(ad::slice_cols(raw, d, d));
  EncoderOutput out;
  if (spec_.prior == Prior::UniformCube) {
    const Tensor hi = ad::tanh(ad::add(mu_raw, sigma_pos));
    const Tensor lo = ad::tanh(ad::sub(mu_raw, sigma_pos));
    // Shrinking the centre keeps a floored support inside the cube when tanh saturates.
    out.mu = ad::scale(ad::add(hi, lo), 0.5 * (1.0 - kSigmaFloor));
    out.sigma = ad::clamp_min(ad::scale(ad::sub(hi, lo), 0.5), kSigmaFloor);
  } else {
    out.mu = mu_raw;
    out.sigma = ad::clamp_min(sigma_pos, kSigmaFloor);
  }
  return out;
}

Mat VaeModel::decode_scores(const Mat& z, std::span<const Sequence> teacher) const {
  Tape tape(false);
  const DecoderOutput out = decode_logits(tape, tape.constant(z), teacher);
  return softmax_rows(out.logits.value());
}

ProposalParams VaeModel::proposals(std::span<const Sequence> items, std::size_t chunk) const {
  ProposalParams all;
  all.mu.resize(static_cast<Eigen::Index>(items.size()), spec_.latent_dim);
  all.sigma.resize(static_cast<Eigen::Index>(items.size()), spec_.latent_dim);
  for (std::size_t start = 0; start < items.size(); start += chunk) {
    const std::size_t n = std::min(chunk, items.size() - start);
    Tape tape(false);
    const EncoderOutput enc = encode(tape, items.subspan(start, n));
    all.mu.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = enc.mu.value();
    all.sigma.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = enc.sigma.value();
  }
  return all;
}

Tensor sample_latents(Tape& tape, const EncoderOutput& enc, SampleBuffer& buffer) {
  Mat eps(enc.mu.rows(), enc.mu.cols());
  buffer.sample_into(std::span<double>(eps.data(), static_cast<std::size_t>(eps.size())));
  return ad::add(enc.mu, ad::mul(enc.sigma, tape.constant(std::move(eps))));
}

Mat sample_latents(const ProposalParams& params, SampleBuffer& buffer) {
  Mat eps(params.mu.rows(), params.mu.cols());
  buffer.sample_into(std::span<double>(eps.data(), static_cast<std::size_t>(eps.size())));
  return params.mu + params.sigma.cwiseProduct(eps);
}

// ---------------------------------------------------------------------------
// GruVae

GruVae::GruVae(ModelSpec spec, Vocab vocab, std::size_t max_len)
    : VaeModel(std::move(spec), std::move(vocab)), max_len_(max_len) {
  if (!vocab_.sequential()) throw ConfigError("gru model requires a vocabulary with bos/eos");
  std::mt19937_64 rng(spec_.init_seed);
  const int v = vocab_.size();
  const int h = spec_.hidden;
  enc_embed_ = ad::Embedding(params_, "encoder.embed", v, spec_.embedding, rng);
  for (int l = 0; l < spec_.layers; ++l) {
    enc_cells_.emplace_back(params_, "encoder.gru" + std::to_string(l), l == 0 ? spec_.embedding : h, h, rng);
  }
  enc_head_ = ad::Linear(params_, "encoder.head", h, 2 * spec_.latent_dim, rng);
  for (int l = 0; l < spec_.layers; ++l) {
    dec_init_.emplace_back(params_, "decoder.init" + std::to_string(l), spec_.latent_dim, h, rng);
  }
  dec_embed_ = ad::Embedding(params_, "decoder.embed", v, spec_.embedding, rng);
  for (int l = 0; l < spec_.layers; ++l) {
    dec_cells_.emplace_back(params_, "decoder.gru" + std::to_string(l), l == 0 ? spec_.embedding : h, h, rng);
  }
  dec_out_ = ad::Linear(params_, "decoder.out", h, vocab_.scored_size, rng);
}

Tensor GruVae::encoder_head(Tape& tape, std::span<const Sequence> batch) const {
  check_batch(batch, max_len_);
  const auto b = static_cast<Eigen::Index>(batch.size());
  std::size_t longest = 0;
  bool ragged = false;
  for (const Sequence& s : batch) {
    ragged = ragged || s.size() != batch.front().size();
    longest = std::max(longest, s.size());
  }
  std::vector<Tensor> h(enc_cells_.size(), tape.constant(Mat::Zero(b, spec_.hidden)));
  std::vector<int> tokens(batch.size());
  for (std::size_t t = 0; t < longest; ++t) {
    Mat mask(b, 1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const bool live = t < batch[i].size();
      tokens[i] = live ? batch[i][t] : 0;
      mask(static_cast<Eigen::Index>(i), 0) = live ? 1.0 : 0.0;
    }
    Tensor x = enc_embed_(tape, tokens);
    const Tensor m = ragged ? tape.constant(mask) : Tensor();
    for (std::size_t l = 0; l < enc_cells_.size(); ++l) {
      Tensor next = enc_cells_[l].step(tape, x, h[l]);
      if (ragged) next = ad::add(h[l], ad::mul(m, ad::sub(next, h[l])));
      h[l] = next;
      x = next;
    }
  }
  return enc_head_(tape, h.back());
}

std::vector<Tensor> GruVae::initial_state(Tape& tape, const Tensor& z) const {
  if (z.cols() != spec_.latent_dim) throw ShapeError("latent dimension mismatch");
  std::vector<Tensor> h;
  for (const ad::Linear& init : dec_init_) h.push_back(init(tape, z));
  return h;
}

Tensor GruVae::step(Tape& tape, std::vector<Tensor>& h, std::span<const int> tokens) const {
  Tensor x = dec_embed_(tape, tokens);
  for (std::size_t l = 0; l < dec_cells_.size(); ++l) {
    h[l] = dec_cells_[l].step(tape, x, h[l]);
    x = h[l];
  }
  return x;
}

DecoderOutput GruVae::decode_logits(Tape& tape, const Tensor& z, std::span<const Sequence> teacher) const {
  check_batch(teacher, max_len_);
  if (static_cast<std::size_t>(z.rows()) != teacher.size()) throw ShapeError("one latent row per sequence required");
  const std::size_t b = teacher.size();
  std::size_t longest = 0;
  for (const Sequence& s : teacher) longest = std::max(longest, s.size());
  const std::size_t steps = longest + 1;

  std::vector<Tensor> h = initial_state(tape, z);
  std::vector<Tensor> tops;
  DecoderOutput out;
  out.targets.resize(steps * b);
  out.row_example.resize(steps * b);
  out.row_mask.resize(steps * b);
  std::vector<int> inputs(b);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < b; ++i) {
      const Sequence& s = teacher[i];
      inputs[i] = t == 0 ? vocab_.bos_id : (t - 1 < s.size() ? s[t - 1] : vocab_.eos_id);
      const std::size_t row = t * b + i;
      out.targets[row] = t < s.size() ? s[t] : vocab_.eos_id;
      out.row_example[row] = static_cast<int>(i);
      out.row_mask[row] = t <= s.size() ? 1.0 : 0.0;
    }
    tops.push_back(step(tape, h, inputs));
  }
  out.logits = dec_out_(tape, ad::concat_rows(tops));
  return out;
}

std::vector<Sequence> GruVae::deterministic_decode(const Mat& z, std::size_t max_len) const {
  if (max_len > max_len_) throw ShapeError("max_len exceeds the model's maximum sequence length");
  const auto b = static_cast<std::size_t>(z.rows());
  Tape tape(false);
  std::vector<Tensor> h = initial_state(tape, tape.constant(z));
  std::vector<Sequence> out(b);
  std::vector<bool> done(b, false);
  std::vector<int> inputs(b, vocab_.bos_id);
  std::size_t active = b;
  for (std::size_t t = 0; t < max_len && active > 0; ++t) {
    const Tensor top = step(tape, h, inputs);
    const Mat scores = softmax_rows(dec_out_(tape, top).value());
    for (std::size_t i = 0; i < b; ++i) {
      if (done[i]) continue;
      const auto row = scores.row(static_cast<Eigen::Index>(i));
      const int tok = argmax_token(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                                   vocab_.undefined_id);
      if (tok == vocab_.eos_id) {
        done[i] = true;
        --active;
        continue;
      }
      out[i].push_back(tok);
      inputs[i] = tok;
      if (tok == vocab_.undefined_id) {
        // No embedding is fed back once decoding has stopped.
        inputs[i] = vocab_.eos_id;
        done[i] = true;
        --active;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// MlpVae

MlpVae::MlpVae(ModelSpec spec, Vocab vocab)
    : VaeModel(std::move(spec), std::move(vocab)), positions_(spec_.mlp_sizes.front()) {
  std::mt19937_64 rng(spec_.init_seed);
  const std::vector<int>& sizes = spec_.mlp_sizes;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    enc_layers_.emplace_back(params_, "encoder.fc" + std::to_string(i), sizes[i], sizes[i + 1], rng);
  }
  enc_layers_.emplace_back(params_, "encoder.head", sizes.back(), 2 * spec_.latent_dim, rng);
  std::vector<int> dec_sizes(sizes.rbegin(), sizes.rend() - 1);
  dec_sizes.insert(dec_sizes.begin(), spec_.latent_dim);
  for (std::size_t i = 0; i + 1 < dec_sizes.size(); ++i) {
    dec_layers_.emplace_back(params_, "decoder.fc" + std::to_string(i), dec_sizes[i], dec_sizes[i + 1], rng);
  }
  dec_layers_.emplace_back(params_, "decoder.out", dec_sizes.back(), positions_ * vocab_.scored_size, rng);
}

Tensor MlpVae::encoder_head(Tape& tape, std::span<const Sequence> batch) const {
  check_batch(batch, static_cast<std::size_t>(positions_));
  Mat x(static_cast<Eigen::Index>(batch.size()), positions_);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (static_cast<int>(batch[i].size()) != positions_) throw ShapeError("mlp input has the wrong length");
    for (int p = 0; p < positions_; ++p) x(static_cast<Eigen::Index>(i), p) = static_cast<double>(batch[i][p]);
  }
  Tensor h = tape.constant(std::move(x));
  for (std::size_t i = 0; i < enc_layers_.size(); ++i) {
    h = enc_layers_[i](tape, h);
    if (i + 1 < enc_layers_.size()) h = ad::leaky_relu(h);
  }
  return h;
}

Tensor MlpVae::decoder_logits(Tape& tape, const Tensor& z) const {
  if (z.cols() != spec_.latent_dim) throw ShapeError("latent dimension mismatch");
  Tensor h = z;
  for (std::size_t i = 0; i < dec_layers_.size(); ++i) {
    h = dec_layers_[i](tape, h);
    if (i + 1 < dec_layers_.size()) h = ad::leaky_relu(h);
  }
  return ad::reshape(h, h.rows() * positions_, vocab_.scored_size);
}

DecoderOutput MlpVae::decode_logits(Tape& tape, const Tensor& z, std::span<const Sequence> teacher) const {
  check_batch(teacher, static_cast<std::size_t>(positions_));
  if (static_cast<std::size_t>(z.rows()) != teacher.size()) throw ShapeError("one latent row per example required");
  DecoderOutput out;
  out.logits = decoder_logits(tape, z);
  const std::size_t rows = teacher.size() * static_cast<std::size_t>(positions_);
  out.targets.resize(rows);
  out.row_example.resize(rows);
  out.row_mask.assign(rows, 1.0);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    for (int p = 0; p < positions_; ++p) {
      const std::size_t row = i * static_cast<std::size_t>(positions_) + static_cast<std::size_t>(p);
      out.targets[row] = teacher[i][p];
      out.row_example[row] = static_cast<int>(i);
    }
  }
  return out;
}

std::vector<Sequence> MlpVae::deterministic_decode(const Mat& z, std::size_t /*max_len*/) const {
  Tape tape(false);
  const Mat scores = softmax_rows(decoder_logits(tape, tape.constant(z)).value());
  std::vector<Sequence> out(static_cast<std::size_t>(z.rows()), Sequence(static_cast<std::size_t>(positions_)));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const auto row = scores.row(r);
    const int tok = argmax_token(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                                 vocab_.undefined_id);
    out[static_cast<std::size_t>(r / positions_)][static_cast<std::size_t>(r % positions_)] = tok;
  }
  return out;
}

std::unique_ptr<VaeModel> make_model(const ModelSpec& spec, const Vocab& vocab, std::size_t max_len) {
  if (spec.architecture == Architecture::Gru) return std::make_unique<GruVae>(spec, vocab, max_len);
  return std::make_unique<MlpVae>(spec, vocab);
}

}  // namespace ddvae
