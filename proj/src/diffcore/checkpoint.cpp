#include "fewloc/diffcore/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace fewloc::diff {

namespace {

constexpr std::array<char, 8> kMagic{'F', 'W', 'L', 'C', 'K', 'P', 'T', '\0'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw CheckpointError("checkpoint truncated");
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

}  // namespace

void Checkpoint::put(std::string name, Shape shape, std::span<const double> values) {
  if (numel(shape) != values.size()) {
    throw CheckpointError("checkpoint entry '" + name + "' shape does not match value count");
  }
  CheckpointEntry entry{std::move(name), std::move(shape), {}};
  entry.values.reserve(values.size());
  for (double v : values) entry.values.push_back(static_cast<float>(v));
  entries.push_back(std::move(entry));
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw CheckpointError("checkpoint has no entry named '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, checkpoint.format_version);
  put_u32(out, static_cast<std::uint32_t>(checkpoint.entries.size()));
  for (const auto& e : checkpoint.entries) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto extent : e.shape) put_u32(out, static_cast<std::uint32_t>(extent));
    for (float v : e.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw CheckpointError("write to '" + path.string() + "' failed");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw CheckpointError("'" + path.string() + "' is not a checkpoint file");
  }
  Checkpoint ck;
  ck.format_version = get_u32(in);
  if (ck.format_version != kCheckpointFormatVersion) {
    throw CheckpointError("unsupported checkpoint format version " +
                          std::to_string(ck.format_version));
  }
  const std::uint32_t count = get_u32(in);
  ck.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t name_len = get_u32(in);
    e.name.resize(name_len);
    if (!in.read(e.name.data(), name_len)) throw CheckpointError("checkpoint truncated");
    const std::uint32_t rank = get_u32(in);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get_u32(in));
    const std::size_t n = numel(e.shape);
    e.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) e.values[k] = std::bit_cast<float>(get_u32(in));
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

}  // namespace fewloc::diff
