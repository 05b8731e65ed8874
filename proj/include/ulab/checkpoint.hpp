#pragma once

#include <filesystem>
#include <string>

#include "ulab/model.hpp"

namespace ulab::lm {

/// Binary layout (little-endian):
///   "ULAB" | u32 version=1 | u32 tensor count |
///   per tensor: u16 name length, name bytes, u8 rank, rank x u64 dims,
///               u8 dtype (0 = f32, 1 = f64), raw scalars.
std::string serialize(const ModelParams<float>& params);
std::string serialize(const ModelParams<double>& params);

/// Parses a checkpoint and checks it against `config` (names, order, shapes).
/// Stored dtype is converted to T if it differs.
template <typename T>
ModelParams<T> deserialize(const std::string& bytes, const ModelConfig& config);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params);

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

/// FNV-1a 64 of the serialized bytes, as 16 hex digits.
std::string fingerprint(const std::string& bytes);

}  // namespace ulab::lm
