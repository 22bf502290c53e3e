#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "deepsteer/model.hpp"

namespace deepsteer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ManifestEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::size_t size() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  bool operator==(const ManifestEntry&) const = default;
};

/// "DSCK", version u32, entry count u32, then per entry: u16 name length, name,
/// u32 rank, u32 dims; then float32 payloads in manifest order. Little-endian.
template <typename Real>
void write_checkpoint(std::ostream& os, const ModelParams<Real>& p) {
  std::vector<ManifestEntry> manifest;
  p.visit([&](const std::string& name, std::span<const Real>, const std::vector<std::size_t>& shape) {
    ManifestEntry e{name, {}};
    for (auto d : shape) e.dims.push_back(static_cast<std::uint32_t>(d));
    manifest.push_back(std::move(e));
  });
  os.write("DSCK", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(manifest.size()));
  for (const auto& e : manifest) {
    detail::put_u16(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_u32(os, d);
  }
  p.visit([&](const std::string&, std::span<const Real> v, const std::vector<std::size_t>&) {
    for (Real x : v) detail::put_f32(os, static_cast<float>(x));
  });
  if (!os) throw IoError("checkpoint write failed");
}

inline std::vector<ManifestEntry> read_manifest(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "DSCK") throw IoError("not a DSCK checkpoint");
  const std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t n = detail::get_u32(is);
  std::vector<ManifestEntry> manifest(n);
  for (auto& e : manifest) {
    const std::uint16_t len = detail::get_u16(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    const std::uint32_t rank = detail::get_u32(is);
    if (!is || rank > 8) throw IoError("corrupt checkpoint manifest");
    e.dims.resize(rank);
    for (auto& d : e.dims) d = detail::get_u32(is);
  }
  if (!is) throw IoError("truncated checkpoint manifest");
  return manifest;
}

/// Reads a checkpoint into parameters shaped for `cfg`; names and dims must match exactly.
template <typename Real>
ModelParams<Real> read_checkpoint(std::istream& is, const ModelConfig& cfg) {
  const auto manifest = read_manifest(is);
  ModelParams<Real> p(cfg);
  std::size_t i = 0;
  p.visit([&](const std::string& name, std::span<Real>, const std::vector<std::size_t>& shape) {
    if (i >= manifest.size()) throw DimensionError("checkpoint has fewer blocks than the config needs");
    const ManifestEntry& e = manifest[i++];
    std::vector<std::uint32_t> want;
    for (auto d : shape) want.push_back(static_cast<std::uint32_t>(d));
    if (e.name != name || e.dims != want) {
      throw DimensionError("checkpoint block '" + e.name + "' does not match config block '" + name + "'");
    }
  });
  if (i != manifest.size()) throw DimensionError("checkpoint has more blocks than the config needs");
  p.visit([&](const std::string&, std::span<Real> v, const std::vector<std::size_t>&) {
    for (Real& x : v) x = static_cast<Real>(detail::get_f32(is));
  });
  if (!is) throw IoError("truncated checkpoint payload");
  return p;
}

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<Real>& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  write_checkpoint(os, p);
}

template <typename Real>
ModelParams<Real> load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_checkpoint<Real>(is, cfg);
}

}  // namespace deepsteer
