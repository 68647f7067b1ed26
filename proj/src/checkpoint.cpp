// SPDX-License-Identifier: Apache-2.0
#include "checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "error.hpp"

namespace rexmoe {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'X', 'M', 'O'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void put_table(const std::vector<StoredTensor>& table) {
    put<std::uint64_t>(table.size());
    for (const auto& t : table) {
      put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
      put_bytes(t.name.data(), t.name.size());
      put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) put<std::uint64_t>(static_cast<std::uint64_t>(d));
      put_bytes(t.data.data(), t.data.size() * sizeof(double));
    }
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

  template <typename T>
  T get(const char* what) {
    T v;
    take(&v, sizeof(T), what);
    return v;
  }
  void take(void* dst, std::size_t n, const char* what) {
    if (static_cast<std::size_t>(end_ - p_) < n)
      throw IoError(std::string("checkpoint truncated while reading ") + what);
    std::memcpy(dst, p_, n);
    p_ += n;
  }
  std::vector<StoredTensor> get_table(const char* what) {
    const auto count = get<std::uint64_t>(what);
    std::vector<StoredTensor> table;
    for (std::uint64_t i = 0; i < count; ++i) {
      StoredTensor t;
      t.name.resize(get<std::uint32_t>(what));
      take(t.name.data(), t.name.size(), what);
      const auto rank = get<std::uint32_t>(what);
      if (rank > 8) throw IoError("checkpoint tensor '" + t.name + "' has implausible rank");
      std::uint64_t numel = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        const auto d = get<std::uint64_t>(what);
        if (d > (std::uint64_t{1} << 40)) throw IoError("checkpoint tensor '" + t.name + "' has implausible dims");
        t.shape.push_back(static_cast<std::int64_t>(d));
        numel *= d;
      }
      if (numel > remaining() / sizeof(double))
        throw IoError("checkpoint truncated inside tensor '" + t.name + "'");
      t.data.resize(numel);
      take(t.data.data(), numel * sizeof(double), what);
      table.push_back(std::move(t));
    }
    return table;
  }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

 private:
  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(ck.version);
  w.put<std::uint64_t>(ck.config_json.size());
  w.put_bytes(ck.config_json.data(), ck.config_json.size());
  w.put_table(ck.tensors);
  w.put_table(ck.optimizer);
  w.put<std::uint64_t>(ck.step);
  w.put<std::uint64_t>(ck.rng.global_seed);
  w.put<std::uint64_t>(ck.rng.data_counter);
  w.put<std::uint64_t>(ck.rng.mask_counter);
  w.put<std::uint32_t>(crc_of(w.out.data(), w.out.size()));
  return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw IoError("not a checkpoint file (bad magic or too short)");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc_of(bytes.data(), bytes.size() - 4) != stored_crc)
    throw ChecksumError("checkpoint CRC32 mismatch (file corrupted or truncated)");

  Reader r(bytes.data() + 4, bytes.size() - 8);
  Checkpoint ck;
  ck.version = r.get<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(ck.version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  const auto cfg_len = r.get<std::uint64_t>("config length");
  if (cfg_len > r.remaining()) throw IoError("checkpoint truncated inside config JSON");
  ck.config_json.resize(cfg_len);
  r.take(ck.config_json.data(), cfg_len, "config JSON");
  ck.tensors = r.get_table("tensor table");
  ck.optimizer = r.get_table("optimizer table");
  ck.step = r.get<std::uint64_t>("step");
  ck.rng.global_seed = r.get<std::uint64_t>("rng counters");
  ck.rng.data_counter = r.get<std::uint64_t>("rng counters");
  ck.rng.mask_counter = r.get<std::uint64_t>("rng counters");
  if (r.remaining() != 0) throw IoError("checkpoint has trailing bytes before the CRC");
  return ck;
}

void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace rexmoe
