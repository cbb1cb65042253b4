#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ddvae {

using Sequence = std::vector<int>;

/// Token inventory. Ids are dense; data symbols come first, then the
/// specials. The decoder scores ids [0, scored_size); bos is input-only and
/// the undefined token is emitted only on exact score ties and never occurs
/// in data.
struct Vocab {
  std::vector<std::string> tokens;
  int bos_id = -1;
  int eos_id = -1;
  int undefined_id = -1;
  int scored_size = 0;

  int size() const { return static_cast<int>(tokens.size()); }
  bool sequential() const { return eos_id >= 0; }
  std::string render(const Sequence& seq) const;

  /// "0", "1", <eos>, <bos>, <undef>: autoregressive binary strings.
  static Vocab binary_strings();
  /// "0", "1", <undef>: one token per pixel, no bos/eos.
  static Vocab pixels();
};

struct SyntheticSpec {
  int length = 6;
  double p_one = 0.8;

  void validate() const;
};

struct WeightedSequence {
  Sequence tokens;
  double probability = 0.0;
};

/// All 2^length strings (as Vocab::binary_strings ids), in lexicographic
/// order, with their exact product-Bernoulli probabilities.
std::vector<WeightedSequence> synthetic_enumerate(const SyntheticSpec& spec);

std::vector<Sequence> synthetic_sample(const SyntheticSpec& spec, std::size_t n, std::mt19937_64& rng);

inline constexpr int kImageSide = 28;
inline constexpr int kImagePixels = kImageSide * kImageSide;

struct BinarizedImage {
  std::array<std::uint8_t, kImagePixels> pixels{};
  int label = -1;
};

struct IdxImages {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image
  std::size_t count() const { return rows * cols == 0 ? 0 : pixels.size() / (rows * cols); }
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// IDX readers/writers; all header integers big-endian. Readers throw
/// FormatError on bad magic or truncation.
IdxImages read_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);
void write_idx_images(const std::filesystem::path& path, const IdxImages& images);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

/// 1 where gray > threshold (strict), gray in [0, 1].
std::vector<std::uint8_t> binarize(std::span<const double> gray, double threshold = 0.3);
/// Raw 0..255 bytes scaled by 1/255, then binarized.
std::uint8_t binarize_byte(std::uint8_t raw, double threshold = 0.3);

struct MnistPaths {
  std::filesystem::path train_images;
  std::filesystem::path train_labels;
  std::filesystem::path test_images;
  std::filesystem::path test_labels;

  /// Classic file names inside a directory.
  static MnistPaths in_directory(const std::filesystem::path& dir);
};

struct MnistSplit {
  std::vector<BinarizedImage> train;
  std::vector<BinarizedImage> test;
};

/// Loads and binarizes both splits. A limit of 0 keeps every image;
/// otherwise the first `limit` are kept. Throws FormatError when image and
/// label counts differ.
MnistSplit mnist_load(const MnistPaths& paths, double threshold = 0.3, std::size_t train_limit = 0,
                      std::size_t test_limit = 0);

/// What the trainer consumes: items with a sampling measure.
struct Dataset {
  std::string name;
  Vocab vocab;
  std::vector<Sequence> items;
  std::vector<double> measure;  // sums to 1
  std::vector<int> labels;      // empty when unlabeled
  bool enumerable = false;      // items exhaust the support and measure is exact
  std::size_t max_len = 0;

  bool has_labels() const { return !labels.empty(); }
  std::size_t size() const { return items.size(); }

  static Dataset synthetic(const SyntheticSpec& spec);
  /// Uniform empirical measure over images, tokens = pixel values.
  static Dataset images(const std::vector<BinarizedImage>& images, std::string name);
};

/// index,probability,label,tokens
void export_csv(const Dataset& data, const std::filesystem::path& path);

}  // namespace ddvae
