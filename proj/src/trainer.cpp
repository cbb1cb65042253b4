#include "ddvae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ddvae/errors.hpp"

namespace ddvae {

using ad::Mat;
using ad::Parameter;

namespace {

enum Stream : std::uint32_t { kBatches = 1, kLatents = 2, kEval = 3 };

std::uint64_t derive_seed(std::uint64_t seed, int epoch, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(stream)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<Sequence> decode_chunked(const VaeModel& model, const Mat& z, std::size_t max_len) {
  constexpr Eigen::Index kChunk = 1024;
  std::vector<Sequence> out;
  out.reserve(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index start = 0; start < z.rows(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, z.rows() - start);
    std::vector<Sequence> part = model.deterministic_decode(z.middleRows(start, n), max_len);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0 || pretrain_epochs < 0 || finetune_epochs < 0) throw ConfigError("epoch counts must be >= 0");
  if (pretrain_epochs > epochs) throw ConfigError("pretrain_epochs exceeds epochs");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(lr_initial > 0.0)) throw ConfigError("lr_initial must be positive");
  if (lr_halve_every < 0) throw ConfigError("lr_halve_every must be >= 0");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");

  if (checkpoint_every < 0 || eval_every < 0) throw ConfigError("cadences must be >= 0");
  if (knn_k <= 0) throw ConfigError("knn_k must be positive");
  try {
    beta_schedule.validate();
    if (tau_schedule) tau_schedule->validate();
    if (finetune_lr) finetune_lr->validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  if (beta_schedule.start_value < 0.0 || beta_schedule.end_value < 0.0) throw ConfigError("beta must be >= 0");
  if (finetune_lr && !(finetune_lr->start_value > 0.0 && finetune_lr->end_value > 0.0)) {
    throw ConfigError("finetune_lr must be positive");
  }
  if (tau_schedule) {
    for (double v : {tau_schedule->start_value, tau_schedule->end_value}) {
      if (!(v > 0.0 && v < 1.0)) throw ConfigError("tau schedule values must lie in (0, 1)");
    }
  }
  for (const std::string& m : eval_modes) {
    if (m != "seq_acc" && m != "delta_hat" && m != "delta_opt_hat" && m != "knn" && m != "kl_mean") {
      throw ConfigError("unknown eval mode '" + m + "'");
    }
  }
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  if (cfg.finetune_lr && epoch >= cfg.epochs) return schedule_value(*cfg.finetune_lr, epoch - cfg.epochs);
  if (cfg.lr_halve_every == 0) return cfg.lr_initial;
  return cfg.lr_initial * std::ldexp(1.0, -(epoch / cfg.lr_halve_every));
}

// ---------------------------------------------------------------------------
// Adam

AdamState::AdamState(std::vector<Parameter*> params) : params_(std::move(params)) {
  for (const Parameter* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamState::step(double lr) {
  ++step_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.size() != p.value.size()) continue;
    m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * p.grad;
    v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + kEps);
  }
}

void AdamState::save(std::vector<Record>& out) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter m{params_[i]->name, m_[i], {}, false};
    Parameter v{params_[i]->name, v_[i], {}, false};
    out.push_back(to_record(m, "adam.m/"));
    out.push_back(to_record(v, "adam.v/"));
  }
  out.push_back(scalar_record("adam.step", static_cast<double>(step_)));
}

void AdamState::load(const std::vector<Record>& records) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (auto [prefix, target] : {std::pair{"adam.m/", &m_[i]}, std::pair{"adam.v/", &v_[i]}}) {
      const Record& r = require_record(records, prefix + params_[i]->name);
      if (r.data.size() != static_cast<std::size_t>(target->size())) {
        throw FormatError("optimizer state '" + r.name + "' has the wrong size");
      }
      std::copy(r.data.begin(), r.data.end(), target->data());
    }
  }
  step_ = static_cast<std::int64_t>(require_record(records, "adam.step").data.at(0));
}

void clip_gradients(const std::vector<Parameter*>& params, double c) {
  for (Parameter* p : params) p->grad = p->grad.cwiseMax(-c).cwiseMin(c);
}

// ---------------------------------------------------------------------------
// Metrics

std::string format_metrics_row(const MetricsRow& row) {
  std::ostringstream out;
  auto opt = [&](const std::optional<double>& v) {
    out << ',';
    if (v) out << fmt(*v);
  };
  auto eval = [&](const char* key) {
    out << ',';
    if (auto it = row.eval.find(key); it != row.eval.end()) out << fmt(it->second);
  };
  out << row.phase << ',' << row.epoch << ',' << fmt(row.lr);
  opt(row.beta);
  opt(row.tau);
  out << ',' << fmt(row.elbo_total) << ',' << fmt(row.recon) << ',' << fmt(row.kl);
  for (const char* key : {"seq_acc", "delta_hat", "delta_hat_se", "delta_opt_hat", "delta_opt_hat_se", "kl_mean",
                          "knn", "knn1"}) {
    eval(key);
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Evaluation

double knn_accuracy(const Mat& reference, std::span<const int> reference_labels, const Mat& query,
                    std::span<const int> query_labels, int k) {
  if (reference.rows() == 0 || query.rows() == 0) throw std::invalid_argument("knn needs non-empty point sets");
  if (static_cast<std::size_t>(reference.rows()) != reference_labels.size() ||
      static_cast<std::size_t>(query.rows()) != query_labels.size()) {
    throw ShapeError("one label per point required");
  }
  const auto kk = static_cast<std::size_t>(std::min<Eigen::Index>(k, reference.rows()));
  std::vector<std::pair<double, Eigen::Index>> dist(static_cast<std::size_t>(reference.rows()));
  std::size_t correct = 0;
  for (Eigen::Index q = 0; q < query.rows(); ++q) {
    for (Eigen::Index r = 0; r < reference.rows(); ++r) {
      dist[static_cast<std::size_t>(r)] = {(reference.row(r) - query.row(q)).squaredNorm(), r};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    // Neighbours come nearest first, so the first label to reach the top
    // count is the nearest among tied labels.
    std::map<int, int> votes;
    int best_label = reference_labels[static_cast<std::size_t>(dist[0].second)];
    int best_votes = 0;
    for (std::size_t j = 0; j < kk; ++j) {
      const int label = reference_labels[static_cast<std::size_t>(dist[j].second)];
      ++votes[label];
    }
    for (std::size_t j = 0; j < kk; ++j) {
      const int label = reference_labels[static_cast<std::size_t>(dist[j].second)];
      if (votes[label] > best_votes) {
        best_votes = votes[label];
        best_label = label;
      }
    }
    if (best_label == query_labels[static_cast<std::size_t>(q)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(query.rows());
}

Metrics evaluate(const VaeModel& model, const Dataset& data, const Dataset* reference,
                 const std::vector<std::string>& modes, const EvalOptions& options) {
  Metrics out;
  if (data.items.empty()) throw std::invalid_argument("cannot evaluate on an empty dataset");
  const ProposalParams proposals = model.proposals(data.items);
  for (const std::string& mode : modes) {
    if (mode == "seq_acc") {
      const std::vector<Sequence> decoded = decode_chunked(model, proposals.mu, data.max_len);
      std::size_t hits = 0;
      for (std::size_t i = 0; i < decoded.size(); ++i) hits += decoded[i] == data.items[i] ? 1 : 0;
      out["seq_acc"] = static_cast<double>(hits) / static_cast<double>(decoded.size());
    } else if (mode == "delta_hat") {
      std::mt19937_64 rng(options.seed);
      SampleBuffer buffer(model.spec().kernel, options.seed ^ 0x9e3779b97f4a7c15ULL);
      const DecodeFn decode = [&](const Mat& z) { return decode_chunked(model, z, data.max_len); };
      const ErrorRateEstimate e = error_rate(decode, proposals, data, options.delta_samples, buffer, rng);
      out["delta_hat"] = e.value;
      out["delta_hat_se"] = e.std_err;
    } else if (mode == "delta_opt_hat") {
      std::mt19937_64 rng(options.seed + 1);
      const ErrorRateEstimate e = optimal_error_rate(proposals, data, model.spec().kernel, model.spec().prior,
                                                     options.prior_samples, rng);
      out["delta_opt_hat"] = e.value;
      out["delta_opt_hat_se"] = e.std_err;
    } else if (mode == "kl_mean") {
      double total = 0.0;
      for (Eigen::Index i = 0; i < proposals.batch(); ++i) {
        double row = 0.0;
        for (Eigen::Index d = 0; d < proposals.dims(); ++d) {
          row += kl(model.spec().kernel, model.spec().prior, proposals.mu(i, d), proposals.sigma(i, d));
        }
        total += data.measure[static_cast<std::size_t>(i)] * row;
      }
      out["kl_mean"] = total;
    } else if (mode == "knn") {
      const Dataset& ref = reference != nullptr ? *reference : data;
      if (!data.has_labels() || !ref.has_labels()) throw std::invalid_argument("labels unavailable");
      const Mat ref_mu = reference != nullptr ? model.proposals(ref.items).mu : proposals.mu;
      out["knn"] = knn_accuracy(ref_mu, ref.labels, proposals.mu, data.labels, options.knn_k);
      out["knn1"] = knn_accuracy(ref_mu, ref.labels, proposals.mu, data.labels, 1);
    } else {
      throw std::invalid_argument("unknown eval mode '" + mode + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, VaeModel& model, const Dataset& train, const Dataset* test)
    : config_(std::move(config)), model_(model), train_(train), test_(test), buffer_(model.spec().kernel, 0) {
  config_.validate();
  if (train_.items.empty()) throw ConfigError("training set is empty");
  if (config_.weighted_batches && !train_.enumerable) throw ConfigError("weighted_batches needs an enumerable dataset");
  enter_phase(0);
}

void Trainer::set_output(std::filesystem::path metrics_csv, std::filesystem::path checkpoint_dir) {
  metrics_path_ = std::move(metrics_csv);
  checkpoint_dir_ = std::move(checkpoint_dir);
}

void Trainer::enter_phase(int epoch) {
  in_finetune_ = epoch >= config_.epochs && config_.finetune_epochs > 0;
  adam_ = AdamState(in_finetune_ ? model_.decoder_parameters() : model_.parameters().all());
}

std::vector<Batch> Trainer::make_batches(int epoch) const {
  std::mt19937_64 rng(derive_seed(config_.seed, epoch, kBatches));
  const auto bs = static_cast<std::size_t>(config_.batch_size);
  std::vector<Batch> batches;
  if (config_.weighted_batches) {
    // Each item appears batch_size / n times, sharing its weight.
    const std::size_t steps = config_.epoch_size == 0 ? 1 : (config_.epoch_size + bs - 1) / bs;
    const std::size_t copies = std::max<std::size_t>(1, bs / train_.size());
    Batch full;
    for (std::size_t c = 0; c < copies; ++c) {
      full.items.insert(full.items.end(), train_.items.begin(), train_.items.end());
      for (double m : train_.measure) full.weights.push_back(m / static_cast<double>(copies));
    }
    for (std::size_t s = 0; s < steps; ++s) batches.push_back(full);
    return batches;
  }
  std::vector<std::size_t> order;
  if (train_.enumerable && config_.epoch_size > 0) {
    std::discrete_distribution<std::size_t> pick(train_.measure.begin(), train_.measure.end());
    order.resize(config_.epoch_size);
    for (std::size_t& i : order) i = pick(rng);
  } else {
    order.resize(config_.epoch_size == 0 ? train_.size() : config_.epoch_size);
    std::vector<std::size_t> perm(train_.size());
    std::size_t filled = 0;
    while (filled < order.size()) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      const std::size_t n = std::min(perm.size(), order.size() - filled);
      std::copy_n(perm.begin(), n, order.begin() + static_cast<std::ptrdiff_t>(filled));
      filled += n;
    }
  }
  for (std::size_t start = 0; start < order.size(); start += bs) {
    std::vector<Sequence> items;
    for (std::size_t j = start; j < std::min(order.size(), start + bs); ++j) items.push_back(train_.items[order[j]]);
    batches.push_back(Batch::uniform(std::move(items)));
  }
  return batches;
}

void Trainer::run(std::optional<int> stop_epoch) {
  const int stop = std::min(stop_epoch.value_or(config_.total_epochs()), config_.total_epochs());
  if (metrics_path_) {
    // Keep the header and the rows of completed epochs only.
    std::vector<std::string> kept;
    if (next_epoch_ > 0) {
      std::ifstream in(*metrics_path_);
      std::string line;
      std::getline(in, line);
      for (int i = 0; i < next_epoch_ && std::getline(in, line); ++i) kept.push_back(line);
    }
    std::ofstream out(*metrics_path_, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + metrics_path_->string() + "'");
    out << kMetricsHeader << '\n';
    for (const std::string& l : kept) out << l << '\n';
  }
  while (next_epoch_ < stop) {
    const int epoch = next_epoch_;
    if (epoch == config_.epochs && !in_finetune_) enter_phase(epoch);
    run_epoch(epoch);
    next_epoch_ = epoch + 1;
    if (checkpoint_dir_) {
      const bool last = next_epoch_ == config_.total_epochs();
      if (last || (config_.checkpoint_every > 0 && next_epoch_ % config_.checkpoint_every == 0)) {
        std::filesystem::create_directories(*checkpoint_dir_);
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04d.ckpt", next_epoch_);
        save_checkpoint(*checkpoint_dir_ / name);
        if (last) save_checkpoint(*checkpoint_dir_ / "final.ckpt");
      }
    }
  }
}

void Trainer::run_epoch(int epoch) {
  const bool finetune = epoch >= config_.epochs;
  const int phase_epoch = finetune ? epoch - config_.epochs : epoch;
  const double lr = learning_rate(config_, epoch);
  MetricsRow row;
  row.phase = finetune ? "finetune" : "train";
  row.epoch = phase_epoch;
  row.lr = lr;
  double beta = 0.0;
  std::optional<Temperature> tau;
  if (!finetune) {
    beta = epoch < config_.pretrain_epochs ? 0.0 : schedule_value(config_.beta_schedule, epoch);
    row.beta = beta;
    if (config_.tau_schedule) {
      tau.emplace(schedule_value(*config_.tau_schedule, epoch));
      row.tau = tau->value();
    }
  }

  buffer_.reseed(derive_seed(config_.seed, epoch, kLatents));
  const std::vector<Batch> batches = make_batches(epoch);
  double sum_total = 0.0, sum_recon = 0.0, sum_kl = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    model_.parameters().zero_grad();
    ad::Tape tape;
    const ElboGraph g = finetune ? finetune_loss(tape, model_, batches[b], buffer_)
                        : tau  ? relaxed_elbo(tape, model_, batches[b], buffer_, beta, *tau)
                               : standard_elbo(tape, model_, batches[b], buffer_, beta);
    const char* bad = !std::isfinite(g.terms.reconstruction) ? "reconstruction"
                      : !std::isfinite(g.terms.kl)            ? "kl"
                      : !std::isfinite(g.terms.total)         ? "total"
                                                              : nullptr;
    if (bad != nullptr) {
      throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " (" + row.phase + "), batch " +
                           std::to_string(b) + ": " + bad + " term is " + fmt(bad[0] == 'r' ? g.terms.reconstruction
                                                                               : bad[0] == 'k'
                                                                                   ? g.terms.kl
                                                                                   : g.terms.total));
    }
    tape.backward(ad::neg(g.total));
    if (config_.grad_clip) clip_gradients(adam_.parameters(), *config_.grad_clip);
    adam_.step(lr);
    sum_total += g.terms.total;
    sum_recon += g.terms.reconstruction;
    sum_kl += g.terms.kl;
  }
  const auto n = static_cast<double>(batches.size());
  row.elbo_total = sum_total / n;
  row.recon = sum_recon / n;
  row.kl = sum_kl / n;

  const bool phase_end = epoch + 1 == config_.epochs || epoch + 1 == config_.total_epochs();
  const bool due = config_.eval_every > 0 && (phase_epoch + 1) % config_.eval_every == 0;
  if (!config_.eval_modes.empty() && (due || phase_end)) {
    EvalOptions opts;
    opts.delta_samples = config_.eval_samples;
    opts.prior_samples = config_.eval_prior_samples;
    opts.seed = derive_seed(config_.seed, epoch, kEval);
    opts.knn_k = config_.knn_k;
    std::vector<std::string> modes;
    for (const std::string& m : config_.eval_modes) {
      if (m != "knn") modes.push_back(m);
    }
    row.eval = evaluate(model_, train_, nullptr, modes, opts);
    if (std::find(config_.eval_modes.begin(), config_.eval_modes.end(), "knn") != config_.eval_modes.end()) {
      const Metrics knn = evaluate(model_, test_ != nullptr ? *test_ : train_, &train_, {"knn"}, opts);
      row.eval.insert(knn.begin(), knn.end());
    }
  }
  append_row(row);
}

void Trainer::append_row(const MetricsRow& row) {
  rows_.push_back(row);
  if (metrics_path_) {
    std::ofstream out(*metrics_path_, std::ios::app);
    out << format_metrics_row(row) << '\n';
  }
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::vector<Record> records;
  for (const Parameter* p : model_.parameters().all()) records.push_back(to_record(*p, "param/"));
  adam_.save(records);
  records.push_back(scalar_record("state.next_epoch", next_epoch_));
  records.push_back(scalar_record("state.finetune", in_finetune_ ? 1.0 : 0.0));
  Record surplus{"state.buffer", {buffer_.surplus().size()}, {buffer_.surplus().begin(), buffer_.surplus().end()}};
  records.push_back(std::move(surplus));
  write_records(path, records);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const std::vector<Record> records = read_records(path);
  load_parameters(records, model_.parameters(), "param/");
  next_epoch_ = static_cast<int>(require_record(records, "state.next_epoch").data.at(0));
  if (next_epoch_ < 0 || next_epoch_ > config_.total_epochs()) {
    throw FormatError("checkpoint epoch " + std::to_string(next_epoch_) + " is outside this configuration");
  }
  const bool finetune = require_record(records, "state.finetune").data.at(0) != 0.0;
  adam_ = AdamState(finetune ? model_.decoder_parameters() : model_.parameters().all());
  in_finetune_ = finetune;
  adam_.load(records);
  const Record& surplus = require_record(records, "state.buffer");
  buffer_.restore_surplus(surplus.data);
  rows_.clear();
}

}  // namespace ddvae
