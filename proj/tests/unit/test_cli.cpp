#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ddvae/config.hpp"
#include "ddvae/errors.hpp"

using namespace ddvae;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run_cli(const std::string& args) {
  const std::string cmd = std::string(DDVAE_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  Result r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ddvae_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTinySynthetic = R"({
  "name": "tiny",
  "dataset": {"kind": "synthetic", "length": 6, "p_one": 0.8},
  "model": {"architecture": "gru", "kernel": "uniform", "prior": "uniform_cube", "latent_dim": 2,
            "embedding": 3, "hidden": 6, "layers": 1},
  "train": {"epochs": 2, "batch_size": 16, "epoch_size": 32, "finetune_epochs": 1, "pretrain_epochs": 1,
            "beta_schedule": {"start": 0.0, "end": 0.1, "start_epoch": 0, "end_epoch": 2, "mode": "linear"},
            "tau_schedule": {"start": 0.1, "end": 0.01, "start_epoch": 0, "end_epoch": 2, "mode": "log_linear"},
            "eval_modes": ["seq_acc", "delta_hat"], "eval_samples": 100, "seed": 4}
})";

/// Twenty random binary digits split 12/8, written in IDX form.
fs::path fake_mnist(const fs::path& dir) {
  const fs::path mnist = dir / "mnist";
  fs::create_directories(mnist);
  const MnistPaths paths = MnistPaths::in_directory(mnist);
  std::mt19937_64 rng(1);
  for (auto [images, labels, n] : {std::tuple{paths.train_images, paths.train_labels, 12},
                                   std::tuple{paths.test_images, paths.test_labels, 8}}) {
    IdxImages img;
    img.rows = 28;
    img.cols = 28;
    img.pixels.resize(static_cast<std::size_t>(n) * kImagePixels);
    for (auto& p : img.pixels) p = rng() % 2 ? 255 : 0;
    std::vector<std::uint8_t> lab(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) lab[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i % 3);
    write_idx_images(images, img);
    write_idx_labels(labels, lab);
  }
  return mnist;
}

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig cfg = parse_config(kTinySynthetic);
  CHECK(cfg.name == "tiny");
  CHECK(cfg.model.hidden == 6);
  CHECK(cfg.model.init_seed == 4);
  CHECK(cfg.train.tau_schedule.has_value());
  CHECK_FALSE(cfg.train.grad_clip.has_value());
  CHECK(cfg.train.finetune_epochs == 1);

  // The resolved form parses back to itself.
  const std::string resolved = to_json(cfg);
  CHECK(to_json(parse_config(resolved)) == resolved);

  SUBCASE("unknown keys are named") {
    std::string text = kTinySynthetic;
    text.replace(text.find("\"seed\""), 6, "\"betta\"");
    CHECK_THROWS_WITH_AS(parse_config(text), doctest::Contains("train.betta"), ConfigError);
  }
  SUBCASE("malformed JSON") {
    CHECK_THROWS_WITH_AS(parse_config("{\"name\": "), doctest::Contains("malformed JSON"), ConfigError);
  }
  SUBCASE("wrong types and values") {
    std::string text = kTinySynthetic;
    text.replace(text.find("\"epochs\": 2"), 11, "\"epochs\": \"two\"");
    CHECK_THROWS_AS(parse_config(text), ConfigError);
    text = kTinySynthetic;
    text.replace(text.find("\"p_one\": 0.8"), 12, "\"p_one\": 1.5");
    CHECK_THROWS_AS(parse_config(text), ConfigError);
    text = kTinySynthetic;
    text.replace(text.find("\"gru\""), 5, "\"mlp\"");
    CHECK_THROWS_AS(parse_config(text), ConfigError);
  }
  SUBCASE("fine-tune rate takes a number or a schedule") {
    std::string text = kTinySynthetic;
    text.replace(text.find("\"seed\": 4"), 9, "\"seed\": 4, \"finetune_lr\": 0.002");
    const ExperimentConfig c = parse_config(text);
    REQUIRE(c.train.finetune_lr.has_value());
    CHECK(c.train.finetune_lr->start_value == 0.002);
    CHECK(c.train.finetune_lr->end_value == 0.002);
    CHECK(to_json(parse_config(to_json(c))) == to_json(c));
    text = kTinySynthetic;
    text.replace(text.find("\"seed\": 4"), 9,
                 R"("seed": 4, "finetune_lr": {"start": 0.002, "end": 0.0001, "end_epoch": 9, "mode": "log_linear"})");
    CHECK(parse_config(text).train.finetune_lr->end_epoch == 9);
    CHECK_FALSE(cfg.train.finetune_lr.has_value());
  }
  SUBCASE("seed override moves both seeds") {
    ExperimentConfig c = cfg;
    apply_seed(c, 9);
    CHECK(c.train.seed == 9);
    CHECK(c.model.init_seed == 9);
  }
  SUBCASE("relative MNIST paths resolve against the config") {
    const ExperimentConfig m = parse_config(R"({"dataset": {"kind": "mnist", "path": "digits"},
        "model": {"architecture": "mlp", "kernel": "gaussian", "prior": "std_normal"}})",
                                            "/some/where");
    CHECK(m.dataset.mnist_dir == fs::path("/some/where/digits"));
  }
}

TEST_CASE("shipped presets parse") {
  for (const auto& entry : fs::directory_iterator(fs::path(DDVAE_SOURCE_DIR) / "presets")) {
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_config(entry.path()));
  }
}

TEST_CASE("command line: errors and exit codes") {
  const fs::path dir = scratch("errors");
  std::string text = kTinySynthetic;
  text.replace(text.find("\"seed\""), 6, "\"betta\"");
  put(dir / "typo.json", text);
  put(dir / "broken.json", "{\"train\": [1, 2");

  const Result typo = run_cli("train --config " + (dir / "typo.json").string());
  CHECK(typo.code == 2);
  CHECK(typo.output.find("train.betta") != std::string::npos);
  const Result broken = run_cli("train --config " + (dir / "broken.json").string());
  CHECK(broken.code == 2);
  CHECK(broken.output.find("malformed JSON") != std::string::npos);
  CHECK(run_cli("train").code == 2);
  CHECK(run_cli("frobnicate").code == 2);
  CHECK(run_cli("train --config " + (dir / "absent.json").string()).code == 2);
}

TEST_CASE("command line: kl-table") {
  const Result r = run_cli("kl-table");
  REQUIRE(r.code == 0);
  std::istringstream in(r.output);
  std::string line;
  std::getline(in, line);
  CHECK(line == "kernel,prior,closed_form,quadrature,abs_diff");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    const double diff = std::stod(line.substr(line.rfind(',') + 1));
    CHECK(diff < 1e-6);
  }
  CHECK(rows == 15);
}

TEST_CASE("command line: train, eval, dump and sample on synthetic data") {
  const fs::path dir = scratch("synthetic");
  put(dir / "tiny.json", kTinySynthetic);
  const std::string cfg = (dir / "tiny.json").string();
  REQUIRE(run_cli("train --config " + cfg + " --out " + (dir / "a").string()).code == 0);
  REQUIRE(run_cli("train --config " + cfg + " --out " + (dir / "b").string()).code == 0);
  CHECK(slurp(dir / "a/metrics.csv") == slurp(dir / "b/metrics.csv"));
  CHECK(fs::exists(dir / "a/resolved_config.json"));
  const fs::path ckpt = dir / "a/checkpoints/final.ckpt";
  REQUIRE(fs::exists(ckpt));

  const Result other_seed =
      run_cli("train --config " + cfg + " --seed-override 5 --out " + (dir / "c").string());
  CHECK(other_seed.code == 0);
  CHECK(slurp(dir / "c/metrics.csv") != slurp(dir / "a/metrics.csv"));

  const Result eval = run_cli("eval --config " + cfg + " --checkpoint " + ckpt.string() + " --modes seq_acc,kl_mean");
  REQUIRE(eval.code == 0);
  const auto pos = eval.output.find("seq_acc ");
  REQUIRE(pos != std::string::npos);
  const double acc = std::stod(eval.output.substr(pos + 8));
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(fs::exists(dir / "a/checkpoints/eval.csv"));

  const Result knn = run_cli("eval --config " + cfg + " --checkpoint " + ckpt.string() + " --modes knn");
  CHECK(knn.code == 3);
  CHECK(knn.output.find("labels unavailable") != std::string::npos);

  const Result dump = run_cli("latent-dump --config " + cfg + " --checkpoint " + ckpt.string() + " --grid-n 3 --out " +
                              (dir / "dump").string());
  REQUIRE(dump.code == 0);
  std::istringstream grid(slurp(dir / "dump/grid.csv"));
  std::string line;
  std::getline(grid, line);
  CHECK(line.find("[-1,1]") != std::string::npos);
  int rows = -1;
  while (std::getline(grid, line)) ++rows;
  CHECK(rows == 9);

  const Result sample = run_cli("sample --config " + cfg + " --checkpoint " + ckpt.string() + " --count 4");
  CHECK(sample.code == 0);
  CHECK(std::count(sample.output.begin(), sample.output.end(), '\n') == 4);

  SUBCASE("mismatched checkpoint is a config error") {
    std::string wider = kTinySynthetic;
    wider.replace(wider.find("\"hidden\": 6"), 11, "\"hidden\": 7");
    put(dir / "wider.json", wider);
    const Result r = run_cli("eval --config " + (dir / "wider.json").string() + " --checkpoint " + ckpt.string());
    CHECK(r.code == 2);
    CHECK(r.output.find("does not fit") != std::string::npos);
  }
}

TEST_CASE("command line: image data") {
  const fs::path dir = scratch("mnist");
  const fs::path mnist = fake_mnist(dir);
  put(dir / "mlp.json", R"({
    "dataset": {"kind": "mnist", "path": ")" + mnist.string() + R"("},
    "model": {"architecture": "mlp", "kernel": "gaussian", "prior": "std_normal", "mlp_sizes": [784, 8]},
    "train": {"epochs": 1, "batch_size": 4, "eval_modes": ["knn"], "knn_k": 1}
  })");
  const std::string cfg = (dir / "mlp.json").string();
  REQUIRE(run_cli("train --config " + cfg + " --out " + (dir / "run").string()).code == 0);
  const std::string metrics = slurp(dir / "run/metrics.csv");
  CHECK(metrics.find("train,0,") != std::string::npos);
  const std::string ckpt = (dir / "run/checkpoints/final.ckpt").string();

  const Result knn = run_cli("eval --config " + cfg + " --checkpoint " + ckpt + " --modes knn");
  CHECK(knn.code == 0);
  CHECK(knn.output.find("knn ") != std::string::npos);
  const Result opt = run_cli("eval --config " + cfg + " --checkpoint " + ckpt + " --modes delta_opt_hat");
  CHECK(opt.code == 3);
  CHECK(opt.output.find("dataset not enumerable") != std::string::npos);
}
