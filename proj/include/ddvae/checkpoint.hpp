#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddvae/layers.hpp"

namespace ddvae {

/// One named array in a checkpoint file.
struct Record {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> data;
};

// File layout, all integers little-endian:
//   magic "DDVAECKP" (8 bytes) | u32 version | u32 record count
//   per record: u32 name length | name bytes | u32 rank | u64 dims[rank] |
//               f64 data[prod(dims)]
inline constexpr char kCheckpointMagic[8] = {'D', 'D', 'V', 'A', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_records(const std::filesystem::path& path, const std::vector<Record>& records);
/// Throws FormatError on wrong magic, unsupported version or truncation.
std::vector<Record> read_records(const std::filesystem::path& path);

Record to_record(const ad::Parameter& p, const std::string& prefix = "");
Record scalar_record(const std::string& name, double value);

const Record* find_record(const std::vector<Record>& records, const std::string& name);
const Record& require_record(const std::vector<Record>& records, const std::string& name);

/// Copies record values into matching parameters ("<prefix><name>").
/// Missing records or shape mismatches throw FormatError.
void load_parameters(const std::vector<Record>& records, ad::ParameterStore& store, const std::string& prefix = "");

}  // namespace ddvae
