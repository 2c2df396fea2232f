#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace skiprec {

using TrackIndex = std::int32_t;

/// Reserved vocabulary slots. Real tracks start at kFirstTrack.
inline constexpr TrackIndex kPad = 0;
inline constexpr TrackIndex kMsk = 1;
inline constexpr TrackIndex kFirstTrack = 2;

/// Malformed input data. Carries the 1-based line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Invalid configuration or precondition on user-supplied settings.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or other numerical breakdown during training/eval.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a. Used for content fingerprints and stable per-key seeds;
// std::hash gives no cross-platform guarantees.
inline std::uint64_t fnv1a(std::string_view data,
                           std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derive an independent seed from a root seed, a stream name and indices.
/// All randomness in the library flows through named substreams.
template <class... Ints>
std::uint64_t substream_seed(std::uint64_t root, std::string_view name, Ints... idx) {
  std::uint64_t h = splitmix64(root ^ fnv1a(name));
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(idx))), ...);
  return h;
}

using Rng = std::mt19937_64;

template <class... Ints>
Rng make_rng(std::uint64_t root, std::string_view name, Ints... idx) {
  return Rng(substream_seed(root, name, idx...));
}

/// Uniform draw of `count` distinct real tracks from [kFirstTrack, kFirstTrack + num_tracks)
/// excluding `excluded`. Floyd's subset sampling over the index space of the pool,
/// so cost is O(count + |excluded| log |excluded|) independent of num_tracks.
/// Throws ConfigError when the pool is smaller than `count`.
inline std::vector<TrackIndex> sample_excluding(std::size_t num_tracks, std::size_t count,
                                                std::span<const TrackIndex> excluded, Rng& rng) {
  std::vector<TrackIndex> ex;
  ex.reserve(excluded.size());
  for (TrackIndex t : excluded) {
    if (t >= kFirstTrack && static_cast<std::size_t>(t - kFirstTrack) < num_tracks) ex.push_back(t);
  }
  std::sort(ex.begin(), ex.end());
  ex.erase(std::unique(ex.begin(), ex.end()), ex.end());
  const std::size_t pool = num_tracks - ex.size();
  if (pool < count) {
    throw ConfigError("negative pool too small: " + std::to_string(pool) + " candidates for " +
                      std::to_string(count) + " draws");
  }

  std::unordered_set<std::size_t> chosen;
  chosen.reserve(count * 2);
  std::vector<std::size_t> order;
  order.reserve(count);
  for (std::size_t j = pool - count; j < pool; ++j) {
    std::uniform_int_distribution<std::size_t> dist(0, j);
    std::size_t r = dist(rng);
    if (!chosen.insert(r).second) {
      chosen.insert(j);
      r = j;
    }
    order.push_back(r);
  }

  std::vector<TrackIndex> out;
  out.reserve(count);
  for (std::size_t r : order) {
    auto id = static_cast<TrackIndex>(kFirstTrack + r);
    for (TrackIndex e : ex) {
      if (e <= id) ++id;
      else break;
    }
    out.push_back(id);
  }
  return out;
}

}  // namespace skiprec
