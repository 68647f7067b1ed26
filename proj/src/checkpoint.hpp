// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rexmoe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> data;
};

struct RngCounters {
  std::uint64_t global_seed = 0;
  std::uint64_t data_counter = 0;  // next batch index
  std::uint64_t mask_counter = 0;  // next mask iteration
};

/// On disk: "RXMO", u32 version, u64 length + config JSON, tensor table,
/// optimizer table, u64 step, three u64 RNG counters, CRC32 of everything
/// before it. Tables are a u64 count of (u32 name length, name, u32 rank,
/// u64 dims, raw little-endian f64 values). All integers little-endian.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_json;
  std::vector<StoredTensor> tensors;
  std::vector<StoredTensor> optimizer;
  std::uint64_t step = 0;
  RngCounters rng;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
// Validates magic, CRC, version and structure before returning anything.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Writes to a sibling temp file and renames it into place.
void write_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace rexmoe
