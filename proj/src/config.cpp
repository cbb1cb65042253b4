#include "ddvae/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ddvae/errors.hpp"

namespace ddvae {

using nlohmann::json;

namespace {

/// Reads fields of one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("key '" + path(key) + "' has the wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + path(key.c_str()) + "'");
    }
  }

 private:
  std::string label() const { return where_.empty() ? "config" : "'" + where_ + "'"; }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

Schedule parse_schedule(const json& j, const std::string& where) {
  Fields f(j, where);
  Schedule s;
  std::string mode = std::string(to_string(s.mode));
  f.get("start", s.start_value);
  f.get("end", s.end_value);
  f.get("start_epoch", s.start_epoch);
  f.get("end_epoch", s.end_epoch);
  f.get("mode", mode);
  f.get("clamp", s.clamp);
  f.finish();
  s.mode = wrap(where + ".mode", [&] { return parse_schedule_mode(mode); });
  wrap(where, [&] {
    s.validate();
    return 0;
  });
  return s;
}

json schedule_json(const Schedule& s) {
  return json{{"start", s.start_value},   {"end", s.end_value},
              {"start_epoch", s.start_epoch}, {"end_epoch", s.end_epoch},
              {"mode", std::string(to_string(s.mode))}, {"clamp", s.clamp}};
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  Fields top(root, "");
  top.get("name", cfg.name);
  std::string out_dir = cfg.output_dir.string();
  top.get("output_dir", out_dir);
  cfg.output_dir = out_dir;

  if (const json* d = top.child("dataset")) {
    Fields f(*d, "dataset");
    std::string kind = "synthetic";
    f.get("kind", kind);
    if (kind == "synthetic") {
      cfg.dataset.kind = DatasetKind::Synthetic;
      f.get("length", cfg.dataset.synthetic.length);
      f.get("p_one", cfg.dataset.synthetic.p_one);
      wrap("dataset", [&] {
        cfg.dataset.synthetic.validate();
        return 0;
      });
    } else if (kind == "mnist") {
      cfg.dataset.kind = DatasetKind::Mnist;
      std::string dir = cfg.dataset.mnist_dir.string();
      f.get("path", dir);
      f.get("threshold", cfg.dataset.threshold);
      f.get("train_limit", cfg.dataset.train_limit);
      f.get("test_limit", cfg.dataset.test_limit);
      cfg.dataset.mnist_dir = dir;
      if (!base_dir.empty() && cfg.dataset.mnist_dir.is_relative()) {
        cfg.dataset.mnist_dir = (base_dir / cfg.dataset.mnist_dir).lexically_normal();
      }
      if (!(cfg.dataset.threshold >= 0.0 && cfg.dataset.threshold < 1.0)) {
        throw ConfigError("key 'dataset.threshold' must lie in [0, 1)");
      }
    } else {
      throw ConfigError("key 'dataset.kind': unknown dataset '" + kind + "'");
    }
    f.finish();
  }

  bool init_seed_given = false;
  if (const json* m = top.child("model")) {
    Fields f(*m, "model");
    std::string arch = std::string(to_string(cfg.model.architecture));
    std::string kernel = std::string(to_string(cfg.model.kernel));
    std::string prior = std::string(to_string(cfg.model.prior));
    f.get("architecture", arch);
    f.get("kernel", kernel);
    f.get("prior", prior);
    f.get("latent_dim", cfg.model.latent_dim);
    f.get("embedding", cfg.model.embedding);
    f.get("hidden", cfg.model.hidden);
    f.get("layers", cfg.model.layers);
    f.get("mlp_sizes", cfg.model.mlp_sizes);
    init_seed_given = f.has("init_seed");
    f.get("init_seed", cfg.model.init_seed);
    f.finish();
    cfg.model.architecture = wrap("model.architecture", [&] { return parse_architecture(arch); });
    cfg.model.kernel = wrap("model.kernel", [&] { return parse_kernel(kernel); });
    cfg.model.prior = wrap("model.prior", [&] { return parse_prior(prior); });
  }

  if (const json* t = top.child("train")) {
    Fields f(*t, "train");
    TrainConfig& tc = cfg.train;
    f.get("epochs", tc.epochs);
    f.get("batch_size", tc.batch_size);
    f.get("epoch_size", tc.epoch_size);
    f.get("lr_initial", tc.lr_initial);
    f.get("lr_halve_every", tc.lr_halve_every);
    if (const json* c = f.child("grad_clip"); c && !c->is_null()) {
      if (!c->is_number()) throw ConfigError("key 'train.grad_clip' must be a number or null");
      tc.grad_clip = c->get<double>();
    }
    if (const json* c = f.child("finetune_lr"); c && !c->is_null()) {
      tc.finetune_lr = c->is_number() ? Schedule::constant(c->get<double>()) : parse_schedule(*c, "train.finetune_lr");
    }
    if (const json* b = f.child("beta_schedule")) tc.beta_schedule = parse_schedule(*b, "train.beta_schedule");
    if (const json* s = f.child("tau_schedule"); s && !s->is_null()) {
      tc.tau_schedule = parse_schedule(*s, "train.tau_schedule");
    }
    f.get("pretrain_epochs", tc.pretrain_epochs);
    f.get("finetune_epochs", tc.finetune_epochs);
    f.get("seed", tc.seed);
    f.get("weighted_batches", tc.weighted_batches);
    f.get("checkpoint_every", tc.checkpoint_every);
    f.get("eval_every", tc.eval_every);
    f.get("eval_modes", tc.eval_modes);
    f.get("eval_samples", tc.eval_samples);
    f.get("eval_prior_samples", tc.eval_prior_samples);
    f.get("knn_k", tc.knn_k);
    f.finish();
  }
  top.finish();

  if (!init_seed_given) cfg.model.init_seed = cfg.train.seed;
  if (cfg.dataset.kind == DatasetKind::Mnist && cfg.model.architecture != Architecture::Mlp) {
    throw ConfigError("key 'model.architecture': the mnist dataset needs the mlp architecture");
  }
  if (cfg.dataset.kind == DatasetKind::Synthetic && cfg.model.architecture != Architecture::Gru) {
    throw ConfigError("key 'model.architecture': the synthetic dataset needs the gru architecture");
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string to_json(const ExperimentConfig& cfg) {
  json ds;
  if (cfg.dataset.kind == DatasetKind::Synthetic) {
    ds = {{"kind", "synthetic"}, {"length", cfg.dataset.synthetic.length}, {"p_one", cfg.dataset.synthetic.p_one}};
  } else {
    ds = {{"kind", "mnist"},
          {"path", cfg.dataset.mnist_dir.string()},
          {"threshold", cfg.dataset.threshold},
          {"train_limit", cfg.dataset.train_limit},
          {"test_limit", cfg.dataset.test_limit}};
  }
  const ModelSpec& m = cfg.model;
  json model = {{"architecture", std::string(to_string(m.architecture))},
                {"kernel", std::string(to_string(m.kernel))},
                {"prior", std::string(to_string(m.prior))},
                {"latent_dim", m.latent_dim},
                {"embedding", m.embedding},
                {"hidden", m.hidden},
                {"layers", m.layers},
                {"mlp_sizes", m.mlp_sizes},
                {"init_seed", m.init_seed}};
  const TrainConfig& t = cfg.train;
  json train = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"epoch_size", t.epoch_size},
                {"lr_initial", t.lr_initial},
                {"lr_halve_every", t.lr_halve_every},
                {"finetune_lr", t.finetune_lr ? schedule_json(*t.finetune_lr) : json(nullptr)},
                {"grad_clip", t.grad_clip ? json(*t.grad_clip) : json(nullptr)},
                {"beta_schedule", schedule_json(t.beta_schedule)},
                {"tau_schedule", t.tau_schedule ? schedule_json(*t.tau_schedule) : json(nullptr)},
                {"pretrain_epochs", t.pretrain_epochs},
                {"finetune_epochs", t.finetune_epochs},
                {"seed", t.seed},
                {"weighted_batches", t.weighted_batches},
                {"checkpoint_every", t.checkpoint_every},
                {"eval_every", t.eval_every},
                {"eval_modes", t.eval_modes},
                {"eval_samples", t.eval_samples},
                {"eval_prior_samples", t.eval_prior_samples},
                {"knn_k", t.knn_k}};
  json root = {{"name", cfg.name},
               {"dataset", ds},
               {"model", model},
               {"train", train},
               {"output_dir", cfg.output_dir.string()}};
  return root.dump(2);
}

void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.train.seed = seed;
  cfg.model.init_seed = seed;
}

LoadedData load_data(const DatasetConfig& cfg) {
  if (cfg.kind == DatasetKind::Synthetic) return LoadedData{Dataset::synthetic(cfg.synthetic), std::nullopt};
  const MnistSplit split =
      mnist_load(MnistPaths::in_directory(cfg.mnist_dir), cfg.threshold, cfg.train_limit, cfg.test_limit);
  return LoadedData{Dataset::images(split.train, "mnist-train"), Dataset::images(split.test, "mnist-test")};
}

}  // namespace ddvae
