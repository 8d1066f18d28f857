#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "demist/tensor.hpp"

namespace demist {

/// A named parameter handle. Tensor copies share storage, so writing through
/// `value.mutable_data()` updates the owning module.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// Checkpoint container layout (all integers little-endian):
///
///   bytes 0..7   magic "DMSTCKPT"
///   u32          format version (1)
///   u64          manifest length L in bytes
///   L bytes      UTF-8 JSON array of {"name", "shape", "offset", "count"}
///   payload      raw float32 values; "offset" is the byte offset of each
///                entry relative to the start of the payload
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  std::vector<float> values;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

template <typename T>
void save_params(const std::filesystem::path& path, const ParamList<T>& params);

/// Loads values into `params` by name. Any missing, extra, or mis-shaped entry
/// aborts the load with a message listing expected vs found shapes.
template <typename T>
void load_params(const std::filesystem::path& path, ParamList<T>& params);

}  // namespace demist
