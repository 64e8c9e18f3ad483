#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fewloc/diffcore/tensor.hpp"

namespace fewloc::diff {

// Binary layout, all integers little-endian:
//   magic "FWLCKPT\0" | u32 format_version | u32 entry_count |
//   per entry: u32 name_len, name bytes, u32 rank, u32 dims[rank],
//              f32 values[prod(dims)]

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointFormatVersion;
  std::vector<CheckpointEntry> entries;

  void put(std::string name, Shape shape, std::span<const double> values);
  const CheckpointEntry& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace fewloc::diff
