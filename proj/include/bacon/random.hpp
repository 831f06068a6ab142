#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace bacon {

using Rng = std::mt19937_64;

// Builds an independent stream from a base seed and a list of stream tags,
// e.g. make_rng(seed, {kStreamViews, epoch, batch}).
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * tags.size());
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (auto t : tags) {
    words.push_back(static_cast<std::uint32_t>(t));
    words.push_back(static_cast<std::uint32_t>(t >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

// Stream tags. Values are part of the determinism contract; do not renumber.
enum Stream : std::uint64_t {
  kStreamClassMeans = 1,
  kStreamSamples = 2,
  kStreamTestSamples = 3,
  kStreamClassPermutation = 4,
  kStreamLabeledPick = 5,
  kStreamInit = 6,
  kStreamBatches = 7,
  kStreamViews = 8,
  kStreamKMeans = 9,
};

// FNV-1a, used for config hashes stored in checkpoints.
inline std::uint64_t fnv1a(const std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace bacon
