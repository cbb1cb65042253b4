// ddvae: train, evaluate and inspect deterministic-decoding autoencoders.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ddvae/config.hpp"
#include "ddvae/errors.hpp"
#include "ddvae/quadrature.hpp"
#include "ddvae/trainer.hpp"

namespace fs = std::filesystem;
using namespace ddvae;

namespace {

constexpr int kConfigExit = 2;
constexpr int kRuntimeExit = 3;

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  int grid_n = 200;
  std::vector<std::string> modes;
  std::size_t count = 10;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) apply_seed(cfg, *o.seed);
  if (!o.out.empty()) cfg.output_dir = o.out;
  return cfg;
}

/// Loads parameters, reporting both sides when the shapes disagree.
void restore(VaeModel& model, const ExperimentConfig& cfg, const fs::path& checkpoint) {
  const std::vector<Record> records = read_records(checkpoint);
  try {
    load_parameters(records, model.parameters(), "param/");
  } catch (const FormatError& e) {
    std::ostringstream msg;
    msg << "checkpoint '" << checkpoint.string() << "' does not fit the configured model (architecture "
        << to_string(cfg.model.architecture) << ", latent_dim " << cfg.model.latent_dim << ", hidden "
        << cfg.model.hidden << ", layers " << cfg.model.layers << "): " << e.what() << "; checkpoint holds";
    for (const Record& r : records) {
      if (r.name.rfind("param/", 0) != 0) continue;
      msg << ' ' << r.name.substr(6) << '[';
      for (std::size_t i = 0; i < r.shape.size(); ++i) msg << (i ? "x" : "") << r.shape[i];
      msg << ']';
    }
    throw ConfigError(msg.str());
  }
}

int cmd_train(const Options& o) {
  ExperimentConfig cfg = resolve(o);
  LoadedData data = load_data(cfg.dataset);
  const auto model = make_model(cfg.model, data.train.vocab, data.train.max_len);
  fs::create_directories(cfg.output_dir);
  std::ofstream(cfg.output_dir / "resolved_config.json") << to_json(cfg) << '\n';
  Trainer trainer(cfg.train, *model, data.train, data.test ? &*data.test : nullptr);
  trainer.set_output(cfg.output_dir / "metrics.csv", cfg.output_dir / "checkpoints");
  if (!o.checkpoint.empty()) trainer.load_checkpoint(o.checkpoint);
  trainer.run();
  if (!trainer.rows().empty()) {
    const MetricsRow& last = trainer.rows().back();
    std::cout << last.phase << " epoch " << last.epoch << ": elbo " << num(last.elbo_total);
    for (const auto& [k, v] : last.eval) std::cout << ", " << k << ' ' << num(v);
    std::cout << '\n';
  }
  std::cout << "outputs in " << cfg.output_dir.string() << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  LoadedData data = load_data(cfg.dataset);
  const auto model = make_model(cfg.model, data.train.vocab, data.train.max_len);
  restore(*model, cfg, o.checkpoint);
  EvalOptions opts;
  opts.seed = cfg.train.seed;
  opts.knn_k = cfg.train.knn_k;
  const std::vector<std::string> modes = o.modes.empty() ? cfg.train.eval_modes : o.modes;
  Metrics all;
  for (const std::string& mode : modes) {
    Metrics m;
    if (mode == "knn") {
      const Dataset& query = data.test ? *data.test : data.train;
      m = evaluate(*model, query, &data.train, {mode}, opts);
    } else {
      m = evaluate(*model, data.train, nullptr, {mode}, opts);
    }
    all.insert(m.begin(), m.end());
  }
  const fs::path out_dir = o.out.empty() ? fs::path(o.checkpoint).parent_path() : fs::path(o.out);
  if (!out_dir.empty()) fs::create_directories(out_dir);
  std::ofstream csv(out_dir / "eval.csv");
  csv << "metric,value\n";
  for (const auto& [k, v] : all) {
    std::cout << k << ' ' << num(v) << '\n';
    csv << k << ',' << num(v) << '\n';
  }
  return 0;
}

int cmd_latent_dump(const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  LoadedData data = load_data(cfg.dataset);
  const auto model = make_model(cfg.model, data.train.vocab, data.train.max_len);
  restore(*model, cfg, o.checkpoint);
  if (o.grid_n < 1) throw ConfigError("--grid-n must be at least 1");
  const fs::path out_dir = o.out.empty() ? cfg.output_dir : fs::path(o.out);
  fs::create_directories(out_dir);

  const Dataset& shown = data.test ? *data.test : data.train;
  const ProposalParams prop = model->proposals(shown.items);
  std::ofstream lat(out_dir / "latents.csv");
  lat << "index";
  for (int d = 0; d < cfg.model.latent_dim; ++d) lat << ",mu" << d;
  for (int d = 0; d < cfg.model.latent_dim; ++d) lat << ",sigma" << d;
  lat << ",probability," << (shown.has_labels() ? "label" : "string") << '\n';
  for (Eigen::Index i = 0; i < prop.batch(); ++i) {
    lat << i;
    for (Eigen::Index d = 0; d < prop.dims(); ++d) lat << ',' << num(prop.mu(i, d));
    for (Eigen::Index d = 0; d < prop.dims(); ++d) lat << ',' << num(prop.sigma(i, d));
    const auto idx = static_cast<std::size_t>(i);
    lat << ',' << num(shown.measure[idx]) << ','
        << (shown.has_labels() ? std::to_string(shown.labels[idx]) : shown.vocab.render(shown.items[idx])) << '\n';
  }

  if (cfg.model.latent_dim != 2) throw ConfigError("grid mode needs latent_dim 2, got " + std::to_string(cfg.model.latent_dim));
  const double extent = cfg.model.prior == Prior::UniformCube ? 1.0 : 3.0;
  const int n = o.grid_n;
  ad::Mat z(static_cast<Eigen::Index>(n) * n, 2);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      const double u = n == 1 ? 0.0 : -extent + 2.0 * extent * a / (n - 1);
      const double v = n == 1 ? 0.0 : -extent + 2.0 * extent * b / (n - 1);
      z(a * n + b, 0) = u;
      z(a * n + b, 1) = v;
    }
  }
  std::ofstream grid(out_dir / "grid.csv");
  grid << "# extent [-" << extent << "," << extent << "]^2 (" << to_string(cfg.model.prior) << " prior)\n";
  grid << "z0,z1,decoded\n";
  constexpr Eigen::Index kChunk = 1024;
  for (Eigen::Index start = 0; start < z.rows(); start += kChunk) {
    const Eigen::Index len = std::min(kChunk, z.rows() - start);
    const std::vector<Sequence> dec = model->deterministic_decode(z.middleRows(start, len), shown.max_len);
    for (Eigen::Index r = 0; r < len; ++r) {
      grid << num(z(start + r, 0)) << ',' << num(z(start + r, 1)) << ','
           << shown.vocab.render(dec[static_cast<std::size_t>(r)]) << '\n';
    }
  }
  std::cout << "wrote " << (out_dir / "latents.csv").string() << " and " << (out_dir / "grid.csv").string() << '\n';
  return 0;
}

int cmd_kl_table() {
  std::cout << "kernel,prior,closed_form,quadrature,abs_diff\n";
  for (Prior prior : {Prior::StdNormal, Prior::UniformCube}) {
    for (Kernel k : kAllKernels) {
      if (prior == Prior::UniformCube && !is_bounded(k)) continue;
      const double closed = kl(k, prior, 0.0, 1.0);
      const double quad = kl_by_quadrature(k, prior, 0.0, 1.0);
      std::cout << to_string(k) << ',' << to_string(prior) << ',' << num(closed) << ',' << num(quad) << ','
                << num(std::abs(closed - quad)) << '\n';
    }
  }
  return 0;
}

int cmd_sample(const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  LoadedData data = load_data(cfg.dataset);
  const auto model = make_model(cfg.model, data.train.vocab, data.train.max_len);
  restore(*model, cfg, o.checkpoint);
  std::mt19937_64 rng(cfg.train.seed);
  const ad::Mat z = sample_prior(cfg.model.prior, o.count, cfg.model.latent_dim, rng);
  const std::vector<Sequence> dec = model->deterministic_decode(z, data.train.max_len);
  for (const Sequence& s : dec) std::cout << data.train.vocab.render(s) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic-decoding VAE toolkit"};
  app.require_subcommand(1);
  Options o;
  auto add_config = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--config", o.config, "Experiment config (JSON)");
    if (required) opt->required();
    c->add_option("--seed-override", o.seed, "Replace the training and initialization seed");
    c->add_option("--out", o.out, "Output directory");
  };
  CLI::App* train = app.add_subcommand("train", "Train (and fine-tune) a model");
  add_config(train, true);
  train->add_option("--checkpoint", o.checkpoint, "Resume from this checkpoint");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_config(eval, true);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  eval->add_option("--modes", o.modes, "seq_acc, delta_hat, delta_opt_hat, knn, kl_mean")->delimiter(',');
  CLI::App* dump = app.add_subcommand("latent-dump", "Write latents.csv and grid.csv");
  add_config(dump, true);
  dump->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  dump->add_option("--grid-n", o.grid_n, "Grid points per axis");
  CLI::App* table = app.add_subcommand("kl-table", "Closed-form KL next to quadrature at mu=0, sigma=1");
  CLI::App* sample = app.add_subcommand("sample", "Decode latents drawn from the prior");
  add_config(sample, true);
  sample->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  sample->add_option("--count", o.count, "Number of samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*dump) return cmd_latent_dump(o);
    if (*table) return cmd_kl_table();
    if (*sample) return cmd_sample(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeExit;
  }
  return 0;
}
