// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rexmoe {

/// Byte-level token stream: every byte is one token id in [0, 256).
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  static Corpus load(const std::string& path);

  std::span<const std::uint8_t> bytes() const { return bytes_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// batch rows of seq_len + 1 ids; row b starts at an offset drawn from a
/// stream keyed by (seed, step, b). Inputs are ids [0, seq_len), targets
/// are ids [1, seq_len].
std::vector<std::int32_t> next_batch(const Corpus& corpus, std::int64_t step, std::uint64_t seed,
                                     std::int64_t batch, std::int64_t seq_len);

struct SplitBatch {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
};
SplitBatch split_batch(std::span<const std::int32_t> rows, std::int64_t batch, std::int64_t seq_len);

/// Deterministic English-like text of exactly `bytes` bytes.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);
void write_synthetic_corpus(const std::string& path, std::size_t bytes, std::uint64_t seed);

}  // namespace rexmoe
