// SPDX-License-Identifier: Apache-2.0
#include "corpus.hpp"

#include <array>
#include <fstream>
#include <iterator>
#include <string_view>

#include "error.hpp"
#include "rng.hpp"

namespace rexmoe {

Corpus Corpus::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IoError("corpus " + path + " is empty");
  return Corpus(std::move(bytes));
}

std::vector<std::int32_t> next_batch(const Corpus& corpus, std::int64_t step, std::uint64_t seed,
                                     std::int64_t batch, std::int64_t seq_len) {
  const auto n = static_cast<std::int64_t>(corpus.size());
  if (n < seq_len + 1)
    throw IoError("corpus of " + std::to_string(n) + " bytes is shorter than one sequence of " +
                  std::to_string(seq_len + 1));
  const std::uint64_t starts = static_cast<std::uint64_t>(n - seq_len);
  const std::uint64_t key = combine_keys(combine_keys(seed, hash_name("batch")), static_cast<std::uint64_t>(step));
  std::vector<std::int32_t> out;
  out.reserve(static_cast<std::size_t>(batch * (seq_len + 1)));
  auto bytes = corpus.bytes();
  for (std::int64_t b = 0; b < batch; ++b) {
    CounterRng rng(combine_keys(key, static_cast<std::uint64_t>(b)));
    const auto start = static_cast<std::int64_t>(rng.next_below(starts));
    for (std::int64_t i = 0; i <= seq_len; ++i) out.push_back(bytes[start + i]);
  }
  return out;
}

SplitBatch split_batch(std::span<const std::int32_t> rows, std::int64_t batch, std::int64_t seq_len) {
  if (static_cast<std::int64_t>(rows.size()) != batch * (seq_len + 1))
    throw DimensionError("split_batch: expected " + std::to_string(batch * (seq_len + 1)) + " ids");
  SplitBatch s;
  s.inputs.reserve(static_cast<std::size_t>(batch * seq_len));
  s.targets.reserve(s.inputs.capacity());
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto* row = rows.data() + b * (seq_len + 1);
    s.inputs.insert(s.inputs.end(), row, row + seq_len);
    s.targets.insert(s.targets.end(), row + 1, row + seq_len + 1);
  }
  return s;
}

namespace {

constexpr std::array<std::string_view, 48> kNouns = {
    "river", "city", "engine", "garden", "teacher", "market", "window", "signal", "forest", "letter",
    "machine", "harbor", "student", "bridge", "village", "storm", "kitchen", "painter", "road", "model",
    "library", "winter", "doctor", "circuit", "mountain", "farmer", "story", "planet", "crowd", "tower",
    "lamp", "ocean", "network", "festival", "soldier", "island", "mirror", "council", "train", "valley",
    "merchant", "clock", "desert", "child", "engineer", "song", "wall", "pattern"};
constexpr std::array<std::string_view, 32> kVerbs = {
    "watched", "built", "carried", "found", "opened", "measured", "followed", "painted", "crossed",
    "repaired", "described", "remembered", "moved", "lifted", "studied", "changed", "protected",
    "visited", "counted", "heard", "sent", "covered", "trained", "named", "joined", "shaped",
    "answered", "guided", "checked", "held", "raised", "mapped"};
constexpr std::array<std::string_view, 28> kAdjectives = {
    "old", "quiet", "bright", "small", "heavy", "distant", "green", "careful", "broken", "early",
    "silver", "narrow", "warm", "simple", "hidden", "strong", "busy", "golden", "gentle", "empty",
    "sharp", "ancient", "open", "rapid", "clear", "northern", "patient", "tall"};
constexpr std::array<std::string_view, 12> kPrepositions = {
    "near", "under", "across", "beside", "behind", "through", "over", "along", "inside", "around",
    "toward", "beyond"};
constexpr std::array<std::string_view, 10> kAdverbs = {
    "slowly", "again", "carefully", "often", "never", "quickly", "together", "later", "always", "soon"};
constexpr std::array<std::string_view, 8> kNames = {"Ada", "Boris", "Chen", "Dalia", "Emil", "Farah", "Goran", "Hana"};
constexpr std::array<std::string_view, 6> kConnectives = {"and", "but", "so", "while", "because", "then"};

class TextWriter {
 public:
  explicit TextWriter(std::uint64_t seed) : rng_(combine_keys(seed, hash_name("synthetic-corpus"))) {}

  // Zipf-like preference for early list entries.
  template <std::size_t N>
  std::string_view pick(const std::array<std::string_view, N>& words) {
    const std::uint64_t a = rng_.next_below(N);
    const std::uint64_t b = rng_.next_below(N);
    return words[std::min(a, b)];
  }

  bool chance(std::uint64_t one_in) { return rng_.next_below(one_in) == 0; }

  void noun_phrase(std::string& out) {
    if (chance(6)) {
      out += pick(kNames);
      return;
    }
    const bool plural = chance(5);
    const bool definite = plural || !chance(3);
    std::string words;
    if (chance(2)) {
      words += pick(kAdjectives);
      words += ' ';
    }
    words += pick(kNouns);
    if (plural) words += words.back() == 'y' ? "ies" : "s";
    if (plural && words.ends_with("ies")) words.erase(words.size() - 4, 1);
    if (definite) {
      out += "the ";
    } else {
      out += std::string_view("aeiou").find(words[0]) != std::string_view::npos ? "an " : "a ";
    }
    out += words;
  }

  void clause(std::string& out) {
    noun_phrase(out);
    out += ' ';
    if (chance(4)) {
      out += pick(kAdverbs);
      out += ' ';
    }
    out += pick(kVerbs);
    out += ' ';
    noun_phrase(out);
    if (chance(2)) {
      out += ' ';
      out += pick(kPrepositions);
      out += ' ';
      noun_phrase(out);
    }
    if (chance(9)) {
      out += " in ";
      out += std::to_string(1800 + rng_.next_below(220));
    }
  }

  void sentence(std::string& out) {
    std::string s;
    clause(s);
    if (chance(3)) {
      s += chance(2) ? ", " : " ";
      s += pick(kConnectives);
      s += ' ';
      clause(s);
    }
    if (s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    out += s;
    out += chance(12) ? "? " : ". ";
  }

  std::string text(std::size_t bytes) {
    std::string out;
    out.reserve(bytes + 256);
    while (out.size() < bytes) {
      const auto sentences = 3 + rng_.next_below(5);
      for (std::uint64_t i = 0; i < sentences; ++i) sentence(out);
      out.back() = '\n';
      if (chance(3)) out += '\n';
    }
    out.resize(bytes);
    return out;
  }

 private:
  CounterRng rng_;
};

}  // namespace

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) { return TextWriter(seed).text(bytes); }

void write_synthetic_corpus(const std::string& path, std::size_t bytes, std::uint64_t seed) {
  const std::string text = synthetic_corpus(bytes, seed);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing corpus " + path);
}

}  // namespace rexmoe
