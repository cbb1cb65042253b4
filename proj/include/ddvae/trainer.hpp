#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ddvae/checkpoint.hpp"
#include "ddvae/objective.hpp"
#include "ddvae/relaxation.hpp"
#include "ddvae/seqmodel.hpp"

namespace ddvae {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 512;
  // Examples per epoch. 0 means one shuffled pass over the items; for an
  // enumerable dataset a positive value draws that many items from the
  // measure (with replacement).
  std::size_t epoch_size = 0;
  double lr_initial = 5e-3;
  int lr_halve_every = 20;  // 0 keeps the rate constant
  // Over fine-tune epochs counted from 0; unset continues the halving schedule.
  std::optional<Schedule> finetune_lr;
  std::optional<double> grad_clip;
  Schedule beta_schedule = Schedule::constant(1.0);
  std::optional<Schedule> tau_schedule;  // none trains the plain beta-VAE
  int pretrain_epochs = 0;
  int finetune_epochs = 0;
  std::uint64_t seed = 0;
  // Enumerable data only: every step sees all items weighted by the measure.
  bool weighted_batches = false;

  int checkpoint_every = 25;
  int eval_every = 1;  // 0 evaluates only at the end of each phase
  std::vector<std::string> eval_modes = {"seq_acc"};
  std::size_t eval_samples = 2000;
  std::size_t eval_prior_samples = 2000;
  int knn_k = 5;

  /// Throws ConfigError.
  void validate() const;
  int total_epochs() const { return epochs + finetune_epochs; }
};

/// Learning rate for a global epoch: lr_initial halved every lr_halve_every
/// epochs, or the finetune_lr schedule during fine-tuning when set.
double learning_rate(const TrainConfig& cfg, int epoch);

/// Adam with bias correction over a fixed parameter list.
class AdamState {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::vector<ad::Parameter*> params);

  void step(double lr);
  std::int64_t steps() const { return step_; }
  const std::vector<ad::Parameter*>& parameters() const { return params_; }

  void save(std::vector<Record>& out) const;
  void load(const std::vector<Record>& records);

 private:
  std::vector<ad::Parameter*> params_;
  std::vector<ad::Mat> m_;
  std::vector<ad::Mat> v_;
  std::int64_t step_ = 0;
};

/// Clamps every gradient entry to [-c, c].
void clip_gradients(const std::vector<ad::Parameter*>& params, double c);

/// One metrics CSV row. Unset values are written as empty cells.
struct MetricsRow {
  std::string phase;
  int epoch = 0;
  double lr = 0.0;
  std::optional<double> beta;
  std::optional<double> tau;
  double elbo_total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  std::map<std::string, double> eval;
};

inline constexpr const char* kMetricsHeader =
    "phase,epoch,lr,beta,tau,elbo_total,recon,kl,seq_acc,delta_hat,delta_hat_se,delta_opt_hat,delta_opt_hat_se,"
    "kl_mean,knn,knn1";

std::string format_metrics_row(const MetricsRow& row);

struct EvalOptions {
  std::size_t delta_samples = 10000;
  std::size_t prior_samples = 10000;
  std::uint64_t seed = 0;
  int knn_k = 5;
};

using Metrics = std::map<std::string, double>;

/// Modes: seq_acc, delta_hat, delta_opt_hat, knn, kl_mean. knn scores
/// `data` against `reference` latents (or against `data` itself when no
/// reference is given) and reports knn (k = knn_k) and knn1.
Metrics evaluate(const VaeModel& model, const Dataset& data, const Dataset* reference,
                 const std::vector<std::string>& modes, const EvalOptions& options);

/// Majority vote among the k nearest reference points (Euclidean). Vote
/// ties go to the tied label whose member is nearest to the query.
double knn_accuracy(const ad::Mat& reference, std::span<const int> reference_labels, const ad::Mat& query,
                    std::span<const int> query_labels, int k);

/// Runs training then decoder fine-tuning, one global epoch counter across
/// both phases. Every random stream derives from (seed, epoch), so a run
/// resumed from a checkpoint continues exactly as the unbroken run.
class Trainer {
 public:
  Trainer(TrainConfig config, VaeModel& model, const Dataset& train, const Dataset* test = nullptr);

  /// Metrics file (rewritten from the header when training starts at epoch
  /// 0, truncated to completed epochs on resume) and checkpoint directory.
  void set_output(std::filesystem::path metrics_csv, std::filesystem::path checkpoint_dir);

  /// Runs global epochs until `stop_epoch` (exclusive) or the end.
  void run(std::optional<int> stop_epoch = std::nullopt);

  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

  int next_epoch() const { return next_epoch_; }
  bool finished() const { return next_epoch_ >= config_.total_epochs(); }
  const std::vector<MetricsRow>& rows() const { return rows_; }
  const TrainConfig& config() const { return config_; }

  /// The minibatches of one epoch. With weighted_batches each item appears
  /// batch_size / n times (at least once) and the copies share its weight.
  std::vector<Batch> make_batches(int epoch) const;

 private:
  void run_epoch(int epoch);
  void enter_phase(int epoch);
  void append_row(const MetricsRow& row);

  TrainConfig config_;
  VaeModel& model_;
  const Dataset& train_;
  const Dataset* test_;
  AdamState adam_;
  SampleBuffer buffer_;
  int next_epoch_ = 0;
  bool in_finetune_ = false;
  std::vector<MetricsRow> rows_;
  std::optional<std::filesystem::path> metrics_path_;
  std::optional<std::filesystem::path> checkpoint_dir_;
};

}  // namespace ddvae
