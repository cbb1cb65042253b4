#include "ddvae/data.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "ddvae/errors.hpp"

namespace ddvae {
namespace {

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("'" + path.string() + "': truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return in;
}

std::vector<std::uint8_t> read_payload(std::istream& in, std::size_t n, const std::filesystem::path& path) {
  std::vector<std::uint8_t> data(n);
  if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n))) {
    throw FormatError("'" + path.string() + "': truncated IDX payload");
  }
  return data;
}

}  // namespace

std::string Vocab::render(const Sequence& seq) const {
  std::string out;
  for (int id : seq) {
    if (id < 0 || id >= size()) {
      out += "?";
    } else {
      out += tokens[id];
    }
  }
  return out;
}

Vocab Vocab::binary_strings() {
  Vocab v;
  v.tokens = {"0", "1", "<eos>", "<bos>", "<undef>"};
  v.eos_id = 2;
  v.bos_id = 3;
  v.undefined_id = 4;
  v.scored_size = 3;
  return v;
}

Vocab Vocab::pixels() {
  Vocab v;
  v.tokens = {"0", "1", "<undef>"};
  v.undefined_id = 2;
  v.scored_size = 2;
  return v;
}

void SyntheticSpec::validate() const {
  if (!(p_one > 0.0 && p_one < 1.0)) throw DomainError("p_one must lie in (0, 1)");
  if (length < 1 || length > 20) throw DomainError("synthetic length must be in [1, 20] for enumeration");
}

std::vector<WeightedSequence> synthetic_enumerate(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = std::size_t{1} << spec.length;
  std::vector<WeightedSequence> out(n);
  for (std::size_t code = 0; code < n; ++code) {
    WeightedSequence& w = out[code];
    w.tokens.resize(spec.length);
    w.probability = 1.0;
    int ones = 0;
    for (int i = 0; i < spec.length; ++i) {
      // First character is the most significant bit: lexicographic order.
      const int bit = static_cast<int>((code >> (spec.length - 1 - i)) & 1U);
      w.tokens[i] = bit;
      ones += bit;
    }
    w.probability = std::pow(spec.p_one, ones) * std::pow(1.0 - spec.p_one, spec.length - ones);
  }
  return out;
}

std::vector<Sequence> synthetic_sample(const SyntheticSpec& spec, std::size_t n, std::mt19937_64& rng) {
  spec.validate();
  std::bernoulli_distribution bit(spec.p_one);
  std::vector<Sequence> out(n, Sequence(spec.length));
  for (Sequence& s : out) {
    for (int& t : s) t = bit(rng) ? 1 : 0;
  }
  return out;
}

IdxImages read_idx_images(const std::filesystem::path& path) {
  std::ifstream in = open_binary(path);
  const std::uint32_t magic = read_be32(in, path);
  if (magic != kIdxImageMagic) throw FormatError("'" + path.string() + "': bad IDX image magic");
  const std::uint32_t count = read_be32(in, path);
  IdxImages images;
  images.rows = read_be32(in, path);
  images.cols = read_be32(in, path);
  images.pixels = read_payload(in, std::size_t{count} * images.rows * images.cols, path);
  return images;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  std::ifstream in = open_binary(path);
  const std::uint32_t magic = read_be32(in, path);
  if (magic != kIdxLabelMagic) throw FormatError("'" + path.string() + "': bad IDX label magic");
  const std::uint32_t count = read_be32(in, path);
  return read_payload(in, count, path);
}

void write_idx_images(const std::filesystem::path& path, const IdxImages& images) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_be32(out, kIdxImageMagic);
  write_be32(out, static_cast<std::uint32_t>(images.count()));
  write_be32(out, images.rows);
  write_be32(out, images.cols);
  out.write(reinterpret_cast<const char*>(images.pixels.data()), static_cast<std::streamsize>(images.pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_be32(out, kIdxLabelMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

std::vector<std::uint8_t> binarize(std::span<const double> gray, double threshold) {
  std::vector<std::uint8_t> out(gray.size());
  for (std::size_t i = 0; i < gray.size(); ++i) out[i] = gray[i] > threshold ? 1 : 0;
  return out;
}

std::uint8_t binarize_byte(std::uint8_t raw, double threshold) {
  return static_cast<double>(raw) / 255.0 > threshold ? 1 : 0;
}

MnistPaths MnistPaths::in_directory(const std::filesystem::path& dir) {
  return {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", dir / "t10k-images-idx3-ubyte",
          dir / "t10k-labels-idx1-ubyte"};
}

namespace {

std::vector<BinarizedImage> load_split(const std::filesystem::path& images_path,
                                       const std::filesystem::path& labels_path, double threshold,
                                       std::size_t limit) {
  const IdxImages images = read_idx_images(images_path);
  const std::vector<std::uint8_t> labels = read_idx_labels(labels_path);
  if (images.rows != kImageSide || images.cols != kImageSide) {
    throw FormatError("'" + images_path.string() + "': expected 28x28 images");
  }
  if (images.count() != labels.size()) {
    throw FormatError("count mismatch: " + std::to_string(images.count()) + " images in '" + images_path.string() +
                      "' but " + std::to_string(labels.size()) + " labels in '" + labels_path.string() + "'");
  }
  const std::size_t n = limit == 0 ? labels.size() : std::min(limit, labels.size());
  std::vector<BinarizedImage> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* src = images.pixels.data() + i * kImagePixels;
    for (int p = 0; p < kImagePixels; ++p) out[i].pixels[p] = binarize_byte(src[p], threshold);
    out[i].label = labels[i];
  }
  return out;
}

}  // namespace

MnistSplit mnist_load(const MnistPaths& paths, double threshold, std::size_t train_limit, std::size_t test_limit) {
  MnistSplit split;
  split.train = load_split(paths.train_images, paths.train_labels, threshold, train_limit);
  split.test = load_split(paths.test_images, paths.test_labels, threshold, test_limit);
  return split;
}

Dataset Dataset::synthetic(const SyntheticSpec& spec) {
  Dataset d;
  d.name = "synthetic";
  d.vocab = Vocab::binary_strings();
  for (WeightedSequence& w : synthetic_enumerate(spec)) {
    d.items.push_back(std::move(w.tokens));
    d.measure.push_back(w.probability);
  }
  d.enumerable = true;
  d.max_len = static_cast<std::size_t>(spec.length);
  return d;
}

Dataset Dataset::images(const std::vector<BinarizedImage>& images, std::string name) {
  Dataset d;
  d.name = std::move(name);
  d.vocab = Vocab::pixels();
  d.items.reserve(images.size());
  for (const BinarizedImage& img : images) {
    d.items.emplace_back(img.pixels.begin(), img.pixels.end());
    d.labels.push_back(img.label);
  }
  d.measure.assign(images.size(), images.empty() ? 0.0 : 1.0 / static_cast<double>(images.size()));
  d.enumerable = false;
  d.max_len = kImagePixels;
  return d;
}

void export_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << "index,probability,label,tokens\n" << std::setprecision(17);
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    out << i << ',' << data.measure[i] << ',' << (data.has_labels() ? data.labels[i] : -1) << ','
        << data.vocab.render(data.items[i]) << '\n';
  }
}

}  // namespace ddvae
