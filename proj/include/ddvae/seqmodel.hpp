#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ddvae/autodiff.hpp"
#include "ddvae/data.hpp"
#include "ddvae/kernels.hpp"
#include "ddvae/layers.hpp"

namespace ddvae {

enum class Architecture { Gru, Mlp };

std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view name);

struct ModelSpec {
  Architecture architecture = Architecture::Gru;
  Kernel kernel = Kernel::Uniform;
  Prior prior = Prior::UniformCube;
  int latent_dim = 2;
  // Recurrent encoder/decoder.
  int embedding = 8;
  int hidden = 128;
  int layers = 2;
  // Fully connected encoder; the decoder mirrors it.
  std::vector<int> mlp_sizes = {kImagePixels, 256, 128, 32};
  std::uint64_t init_seed = 0;

  /// Throws ConfigError for inconsistent settings (e.g. Gaussian kernel with
  /// the uniform prior).
  void validate() const;
};

/// Per-example proposal location/bandwidth, one row per example.
struct ProposalParams {
  ad::Mat mu;
  ad::Mat sigma;

  Eigen::Index batch() const { return mu.rows(); }
  Eigen::Index dims() const { return mu.cols(); }
};

struct EncoderOutput {
  ad::Tensor mu;
  ad::Tensor sigma;

  ProposalParams values() const { return {mu.value(), sigma.value()}; }
};

/// Teacher-forced decoder output. Row r of `logits` scores target
/// `targets[r]` of example `row_example[r]`; rows with `row_mask` 0 are
/// padding.
struct DecoderOutput {
  ad::Tensor logits;
  std::vector<int> targets;
  std::vector<int> row_example;
  std::vector<double> row_mask;
};

/// Deterministic-decoding autoencoder: encoder producing bounded (or
/// Gaussian) proposals and a decoder scoring tokens.
class VaeModel {
 public:
  virtual ~VaeModel() = default;

  const ModelSpec& spec() const { return spec_; }
  const Vocab& vocab() const { return vocab_; }
  ad::ParameterStore& parameters() { return params_; }
  const ad::ParameterStore& parameters() const { return params_; }
  std::vector<ad::Parameter*> encoder_parameters() { return params_.with_prefix("encoder."); }
  std::vector<ad::Parameter*> decoder_parameters() { return params_.with_prefix("decoder."); }
  void set_encoder_frozen(bool frozen);

  /// Proposal parameters; squashed into (-1, 1) for the uniform prior,
  /// softplus bandwidth for the normal prior, bandwidth floored at 1e-6.
  EncoderOutput encode(ad::Tape& tape, std::span<const Sequence> batch) const;

  virtual DecoderOutput decode_logits(ad::Tape& tape, const ad::Tensor& z,
                                      std::span<const Sequence> teacher) const = 0;

  /// Token score rows (softmax of the logits) without gradients.
  ad::Mat decode_scores(const ad::Mat& z, std::span<const Sequence> teacher) const;

  /// Greedy argmax decoding, one sequence per row of z. Exact ties between
  /// the top two scores emit the undefined token and stop decoding.
  virtual std::vector<Sequence> deterministic_decode(const ad::Mat& z, std::size_t max_len) const = 0;

  /// Gradient-free encoding of many items, processed in chunks.
  ProposalParams proposals(std::span<const Sequence> items, std::size_t chunk = 1024) const;

 protected:
  VaeModel(ModelSpec spec, Vocab vocab);

  /// Raw encoder head: (B x 2*latent) holding [mu_raw | sigma_raw].
  virtual ad::Tensor encoder_head(ad::Tape& tape, std::span<const Sequence> batch) const = 0;
  void check_batch(std::span<const Sequence> batch, std::size_t max_len) const;

  ModelSpec spec_;
  Vocab vocab_;
  // Mutable so forward passes on const models can hand parameters to tapes.
  mutable ad::ParameterStore params_;
};

/// Two stacked GRUs over token embeddings. The decoder's initial hidden
/// state per layer is an affine map of z; inputs are bos, x_1..x_n and
/// targets x_1..x_n, eos.
class GruVae final : public VaeModel {
 public:
  GruVae(ModelSpec spec, Vocab vocab, std::size_t max_len);

  DecoderOutput decode_logits(ad::Tape& tape, const ad::Tensor& z, std::span<const Sequence> teacher) const override;
  std::vector<Sequence> deterministic_decode(const ad::Mat& z, std::size_t max_len) const override;
  std::size_t max_len() const { return max_len_; }

 protected:
  ad::Tensor encoder_head(ad::Tape& tape, std::span<const Sequence> batch) const override;

 private:
  std::vector<ad::Tensor> initial_state(ad::Tape& tape, const ad::Tensor& z) const;
  ad::Tensor step(ad::Tape& tape, std::vector<ad::Tensor>& h, std::span<const int> tokens) const;

  std::size_t max_len_;
  ad::Embedding enc_embed_;
  std::vector<ad::GruCell> enc_cells_;
  ad::Linear enc_head_;
  std::vector<ad::Linear> dec_init_;
  ad::Embedding dec_embed_;
  std::vector<ad::GruCell> dec_cells_;
  ad::Linear dec_out_;
};

/// Fully connected encoder/decoder with leaky ReLU; each input position is
/// an independent token (pixel) decoded without autoregression.
class MlpVae final : public VaeModel {
 public:
  MlpVae(ModelSpec spec, Vocab vocab);

  DecoderOutput decode_logits(ad::Tape& tape, const ad::Tensor& z, std::span<const Sequence> teacher) const override;
  std::vector<Sequence> deterministic_decode(const ad::Mat& z, std::size_t max_len) const override;

 protected:
  ad::Tensor encoder_head(ad::Tape& tape, std::span<const Sequence> batch) const override;

 private:
  ad::Tensor decoder_logits(ad::Tape& tape, const ad::Tensor& z) const;

  int positions_;
  std::vector<ad::Linear> enc_layers_;
  std::vector<ad::Linear> dec_layers_;
};

std::unique_ptr<VaeModel> make_model(const ModelSpec& spec, const Vocab& vocab, std::size_t max_len);

/// Argmax over one score row with the undefined-token tie rule.
int argmax_token(std::span<const double> scores, int undefined_id);

/// z = mu + eps * sigma with eps drawn from the buffer (one row per example).
ad::Tensor sample_latents(ad::Tape& tape, const EncoderOutput& enc, SampleBuffer& buffer);
ad::Mat sample_latents(const ProposalParams& params, SampleBuffer& buffer);

}  // namespace ddvae
