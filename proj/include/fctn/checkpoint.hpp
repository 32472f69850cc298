#pragma once

#include "fctn/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace fctn {

/// Malformed, truncated or incompatible file.
struct FormatError : Error {
  using Error::Error;
};

inline constexpr char kCheckpointMagic[8] = {'F', 'C', 'T', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Checkpoint layout, all integers little-endian:
///
///   magic "FCTNCKPT" | u32 version | u32 bytes per value (4 or 8)
///   u32 metadata length | metadata bytes
///   u32 parameter count
///   per parameter: u32 name length | name | u32 rank | u64 dims[rank]
///   per parameter, in manifest order: raw little-endian values
///
/// The manifest lists parameters in sorted-name order.
struct CheckpointInfo {
  std::uint32_t version = 0;
  std::uint32_t value_bytes = 0;
  std::string metadata;
  std::vector<std::pair<std::string, Shape>> manifest;
};

template <typename Scalar>
void save_checkpoint(const ParamStore<Scalar>& store, const std::filesystem::path& path,
                     const std::string& metadata = {});

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Throws FormatError when the file's precision differs from Scalar.
template <typename Scalar>
ParamStore<Scalar> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

}  // namespace fctn
