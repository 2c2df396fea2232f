#pragma once

// Synthetic session corpora with a planted successor structure and planted skips,
// plus reference scorers (popularity floor, successor oracle) for verification.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "skiprec/corpus.hpp"
#include "skiprec/eval.hpp"

namespace skiprec {

struct SynthConfig {
  std::size_t num_tracks = 200;
  std::size_t num_sessions = 5000;
  std::size_t min_len = 10;
  std::size_t max_len = 20;
  double transition_sharpness = 0.9;
  double skip_rate = 0.15;  // expected fraction of negative-labelled positions
  double disliked_fraction = 0.1;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_tracks < 2) throw ConfigError("synth.num_tracks must be >= 2");
    if (min_len < 3 || min_len > max_len) throw ConfigError("synth session length range must satisfy 3 <= min <= max");
    for (double p : {transition_sharpness, skip_rate, disliked_fraction}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synth probabilities must lie in [0, 1]");
    }
    if (skip_rate > 0.0 && disliked_tracks() == 0) throw ConfigError("synth.skip_rate > 0 needs a non-empty disliked subset");
    if (num_tracks - disliked_tracks() < 2) throw ConfigError("synth needs at least 2 non-disliked tracks");
  }
  std::size_t disliked_tracks() const {
    return static_cast<std::size_t>(std::llround(disliked_fraction * static_cast<double>(num_tracks)));
  }
};

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.num_tracks = j.value("num_tracks", c.num_tracks);
  c.num_sessions = j.value("num_sessions", c.num_sessions);
  c.min_len = j.value("min_len", c.min_len);
  c.max_len = j.value("max_len", c.max_len);
  c.transition_sharpness = j.value("transition_sharpness", c.transition_sharpness);
  c.skip_rate = j.value("skip_rate", c.skip_rate);
  c.disliked_fraction = j.value("disliked_fraction", c.disliked_fraction);
  c.seed = j.value("seed", c.seed);
}

struct PlantedPositive {
  std::size_t session;
  std::size_t position;       // an interrupted position (followed by >= 1 skipped track)
  std::size_t next_positive;  // position where the chain resumes
};

struct SynthCorpus {
  Corpus corpus;
  std::vector<TrackIndex> successor;  // indexed by track index; kPad for disliked/reserved
  std::vector<TrackIndex> disliked;   // sorted
  std::vector<PlantedPositive> planted;
};

inline std::string synth_track_key(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "track_%05zu", k);
  return buf;
}

/// A random cyclic successor map over the liked tracks drives each session: the next
/// positive follows the map with probability `transition_sharpness`, otherwise jumps
/// uniformly. Interior positions are interrupted with a disliked track (skip strength
/// 1 or 2) at a rate chosen so the expected negative fraction equals `skip_rate`; the
/// chain then resumes from the last positive track. Sessions always end on a positive.
inline SynthCorpus generate_markov_corpus(const SynthConfig& cfg) {
  cfg.validate();
  SynthCorpus out;
  for (std::size_t k = 0; k < cfg.num_tracks; ++k) out.corpus.vocab.add(synth_track_key(k));

  Rng rng = make_rng(cfg.seed, "synth");
  std::vector<TrackIndex> all(cfg.num_tracks);
  std::iota(all.begin(), all.end(), kFirstTrack);
  std::shuffle(all.begin(), all.end(), rng);
  out.disliked.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.disliked_tracks()));
  std::vector<TrackIndex> liked(all.begin() + static_cast<std::ptrdiff_t>(cfg.disliked_tracks()), all.end());
  std::sort(out.disliked.begin(), out.disliked.end());
  std::shuffle(liked.begin(), liked.end(), rng);

  out.successor.assign(cfg.num_tracks + kFirstTrack, kPad);
  for (std::size_t i = 0; i < liked.size(); ++i) out.successor[liked[i]] = liked[(i + 1) % liked.size()];

  std::uniform_int_distribution<std::size_t> len_dist(cfg.min_len, cfg.max_len);
  std::uniform_int_distribution<std::size_t> liked_dist(0, liked.size() - 1);
  std::uniform_int_distribution<std::size_t> disliked_dist(0, out.disliked.empty() ? 0 : out.disliked.size() - 1);
  std::uniform_int_distribution<int> strength_dist(1, 2);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  for (std::size_t s = 0; s < cfg.num_sessions; ++s) {
    Session sess;
    sess.id = "synth_" + std::to_string(s);
    const std::size_t len = len_dist(rng);
    const double interrupt_p =
        std::min(1.0, cfg.skip_rate * static_cast<double>(len) / static_cast<double>(len - 2));
    TrackIndex cur = liked[liked_dist(rng)];
    sess.tracks.push_back(cur);
    sess.skips.push_back(0);
    std::size_t last_positive = 0;
    for (std::size_t i = 1; i < len; ++i) {
      const bool interior = i + 1 < len;
      if (interior && u01(rng) < interrupt_p) {
        sess.tracks.push_back(out.disliked[disliked_dist(rng)]);
        sess.skips.push_back(static_cast<SkipStrength>(strength_dist(rng)));
        continue;
      }
      cur = u01(rng) < cfg.transition_sharpness ? out.successor[cur] : liked[liked_dist(rng)];
      sess.tracks.push_back(cur);
      sess.skips.push_back(0);
      if (i > last_positive + 1) out.planted.push_back({s, last_positive, i});
      last_positive = i;
    }
    out.corpus.sessions.push_back(std::move(sess));
  }

  auto& st = out.corpus.stats;
  st.sessions_kept = out.corpus.sessions.size();
  st.unique_tracks = cfg.num_tracks;
  for (const auto& s : out.corpus.sessions) {
    st.rows += s.size();
    st.positions += s.size();
    for (auto k : s.skips) st.negative_positions += is_negative(k) ? 1 : 0;
  }
  return out;
}

/// JSON sidecar describing the ground truth by track key.
inline nlohmann::json synth_ground_truth(const SynthCorpus& sc) {
  nlohmann::json succ = nlohmann::json::object();
  for (std::size_t t = kFirstTrack; t < sc.successor.size(); ++t) {
    if (sc.successor[t] != kPad) {
      succ[sc.corpus.vocab.key(static_cast<TrackIndex>(t))] = sc.corpus.vocab.key(sc.successor[t]);
    }
  }
  nlohmann::json dis = nlohmann::json::array();
  for (auto t : sc.disliked) dis.push_back(sc.corpus.vocab.key(t));
  return {{"successor", succ}, {"disliked", dis}};
}

/// Scores candidates by how often they occur in the given sessions (typically the
/// training prefixes, so holdout targets are not counted).
inline Scorer popularity_baseline(std::span<const Session> sessions, std::size_t table_size) {
  std::vector<double> counts(table_size, 0.0);
  for (const auto& s : sessions) {
    for (auto t : s.tracks) counts[static_cast<std::size_t>(t)] += 1.0;
  }
  return [counts = std::move(counts)](std::span<const TrackIndex>, std::span<const TrackIndex> candidates) {
    std::vector<double> out(candidates.size());
    for (std::size_t j = 0; j < candidates.size(); ++j) out[j] = counts[static_cast<std::size_t>(candidates[j])];
    return out;
  };
}

/// Ground-truth scorer: 1 for the successor of the last non-disliked prefix track, 0 otherwise.
inline Scorer successor_oracle(const SynthCorpus& sc) {
  return [&sc](std::span<const TrackIndex> prefix, std::span<const TrackIndex> candidates) {
    TrackIndex last = kPad;
    for (auto it = prefix.rbegin(); it != prefix.rend(); ++it) {
      if (!std::binary_search(sc.disliked.begin(), sc.disliked.end(), *it)) {
        last = *it;
        break;
      }
    }
    const TrackIndex want = last == kPad ? kPad : sc.successor[static_cast<std::size_t>(last)];
    std::vector<double> out(candidates.size(), 0.0);
    for (std::size_t j = 0; j < candidates.size(); ++j) out[j] = candidates[j] == want ? 1.0 : 0.0;
    return out;
  };
}

}  // namespace skiprec
