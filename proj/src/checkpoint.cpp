#include "ddvae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "ddvae/errors.hpp"

namespace ddvae {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void get_doubles(std::vector<double>& out, std::size_t n) {
    if (n > (bytes_.size() - pos_) / sizeof(double)) throw FormatError("checkpoint truncated");
    out.resize(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }

  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_records(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const Record& r : records) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    std::uint64_t count = 1;
    for (std::uint64_t d : r.shape) {
      put<std::uint64_t>(out, d);
      count *= d;
    }
    if (count != r.data.size()) throw std::logic_error("record '" + r.name + "' shape does not match data");
    out.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(count * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

std::vector<Record> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw FormatError("checkpoint header truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  Reader reader(std::move(bytes));
  (void)reader.get_string(sizeof(kCheckpointMagic));
  const auto version = reader.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = reader.get<std::uint32_t>();
  std::vector<Record> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    r.name = reader.get_string(reader.get<std::uint32_t>());
    const auto rank = reader.get<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      r.shape.push_back(reader.get<std::uint64_t>());
      n *= r.shape.back();
    }
    reader.get_doubles(r.data, n);
    records.push_back(std::move(r));
  }
  if (!reader.done()) throw FormatError("trailing bytes after last checkpoint record");
  return records;
}

Record to_record(const ad::Parameter& p, const std::string& prefix) {
  Record r;
  r.name = prefix + p.name;
  r.shape = {static_cast<std::uint64_t>(p.value.rows()), static_cast<std::uint64_t>(p.value.cols())};
  r.data.assign(p.value.data(), p.value.data() + p.value.size());
  return r;
}

Record scalar_record(const std::string& name, double value) { return Record{name, {1}, {value}}; }

const Record* find_record(const std::vector<Record>& records, const std::string& name) {
  for (const Record& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const Record& require_record(const std::vector<Record>& records, const std::string& name) {
  const Record* r = find_record(records, name);
  if (r == nullptr) throw FormatError("checkpoint is missing record '" + name + "'");
  return *r;
}

void load_parameters(const std::vector<Record>& records, ad::ParameterStore& store, const std::string& prefix) {
  for (ad::Parameter* p : store.all()) {
    const Record& r = require_record(records, prefix + p->name);
    if (r.shape.size() != 2 || r.shape[0] != static_cast<std::uint64_t>(p->value.rows()) ||
        r.shape[1] != static_cast<std::uint64_t>(p->value.cols())) {
      throw FormatError("shape mismatch for parameter '" + p->name + "'");
    }
    std::memcpy(p->value.data(), r.data.data(), r.data.size() * sizeof(double));
  }
}

}  // namespace ddvae
