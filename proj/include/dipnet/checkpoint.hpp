#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dipnet/model.hpp"
#include "dipnet/optim.hpp"

namespace dipnet {

// On-disk layout (everything little-endian):
//   magic "DIPNCKPT" | u32 version | fingerprint (u32 len + bytes)
//   | u64 step | rng text (u32 len + bytes)
//   | u32 counter count | counters (name, u64)
//   | u32 blob count    | blobs (name, u32 rank, u32 dims[], f32 values[])
//   | u32 crc32 over everything before the trailer
// Saving the result of a load reproduces the file byte for byte.
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::string fingerprint;  // architecture/mode descriptor, validated on restore
  int64_t step = 0;
  std::string rng_state;

  struct Blob {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> values;
  };
  std::vector<Blob> blobs;
  std::vector<std::pair<std::string, uint64_t>> counters;

  const Blob& blob(const std::string& name) const;
  uint64_t counter(const std::string& name) const;
};

void save_checkpoint(const CheckpointData& data, const std::string& path);
CheckpointData load_checkpoint(const std::string& path);

// Restoring into a mismatched architecture is refused.
void require_fingerprint(const CheckpointData& data, const std::string& expected);

// --- model/optimizer bridging ------------------------------------------------
// Parameters, BN statistics, and Adam moments are stored as f32 blobs under
// "<prefix>param:", "<prefix>bn_mean:", "<prefix>bn_var:", "<prefix>adam_m:",
// "<prefix>adam_v:" names, in registration order.

template <typename T>
void pack_model(CheckpointData& data, const std::string& prefix, const Model<T>& m);
template <typename T>
void unpack_model(const CheckpointData& data, const std::string& prefix, Model<T>& m);

template <typename T>
void pack_adam(CheckpointData& data, const std::string& prefix, Adam<T>& opt);
template <typename T>
void unpack_adam(const CheckpointData& data, const std::string& prefix, Adam<T>& opt);

}  // namespace dipnet
