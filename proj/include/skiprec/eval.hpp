#pragma once

// Leave-one-out next-item evaluation against uniformly sampled unobserved candidates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "skiprec/corpus.hpp"
#include "skiprec/model.hpp"

namespace skiprec {

enum class Split { validation, test };

inline Split parse_split(const std::string& s) {
  if (s == "validation" || s == "val") return Split::validation;
  if (s == "test") return Split::test;
  throw ConfigError("split must be 'validation' or 'test', got '" + s + "'");
}

inline std::string to_string(Split s) { return s == Split::validation ? "validation" : "test"; }

struct EvalConfig {
  std::size_t num_negatives = 1000;
  std::vector<std::size_t> ks = {1, 5, 10, 20};
  std::uint64_t seed = 0;
  Split split = Split::test;

  void validate() const {
    if (ks.empty()) throw ConfigError("eval.ks must not be empty");
    if (!std::is_sorted(ks.begin(), ks.end()) || ks.front() == 0) {
      throw ConfigError("eval.ks must be positive and sorted ascending");
    }
    if (num_negatives < ks.back()) throw ConfigError("eval.num_negatives must be >= max(eval.ks)");
  }
};

struct EvalReport {
  Split split = Split::test;
  std::vector<std::size_t> ks;
  std::map<std::size_t, double> hr;
  std::size_t num_sessions = 0;
  std::size_t skipped = 0;
  std::size_t num_negatives = 0;
  std::uint64_t seed = 0;
  double mean_target_rank = 0.0;
  // Mean rank (1-based, among num_negatives + 1) of candidates from a tracked track group.
  std::optional<double> group_mean_rank;
  std::size_t group_candidates = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json hr = nlohmann::json::object();
  for (const auto& [k, v] : r.hr) hr[std::to_string(k)] = v;
  j = {{"split", to_string(r.split)},
       {"ks", r.ks},
       {"hr", hr},
       {"num_sessions", r.num_sessions},
       {"skipped_sessions", r.skipped},
       {"num_negatives", r.num_negatives},
       {"seed", r.seed},
       {"mean_target_rank", r.mean_target_rank}};
  if (r.group_mean_rank) {
    j["group_mean_rank"] = *r.group_mean_rank;
    j["group_candidates"] = r.group_candidates;
  }
}

/// `count` tracks drawn uniformly without replacement from real tracks outside
/// `observed` and the target.
inline std::vector<TrackIndex> sample_eval_candidates(std::span<const TrackIndex> observed, TrackIndex target,
                                                      std::size_t num_tracks, std::size_t count, Rng& rng) {
  std::vector<TrackIndex> excluded(observed.begin(), observed.end());
  excluded.push_back(target);
  return sample_excluding(num_tracks, count, excluded, rng);
}

/// 1 + number of negatives scoring at least as high as the target. Ties count against the target.
template <class T>
std::size_t rank_target(T target_logit, std::span<const T> negative_logits) {
  if (!std::isfinite(target_logit)) throw NumericFault("non-finite target logit");
  std::size_t rank = 1;
  for (T x : negative_logits) {
    if (!std::isfinite(x)) throw NumericFault("non-finite candidate logit");
    if (x >= target_logit) ++rank;
  }
  return rank;
}

/// Scores candidates given the evaluation prefix. Logit order matches `candidates`.
using Scorer = std::function<std::vector<double>(std::span<const TrackIndex> prefix,
                                                 std::span<const TrackIndex> candidates)>;

/// Input sequence for reading a prediction: the prefix, plus a trailing MSK for the
/// bidirectional model. The oldest tokens are dropped to fit `max_len`.
inline std::vector<TrackIndex> prediction_input(std::span<const TrackIndex> prefix, bool append_mask,
                                                std::size_t max_len) {
  std::vector<TrackIndex> in(prefix.begin(), prefix.end());
  if (append_mask) in.push_back(kMsk);
  if (in.size() > max_len) in.erase(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(in.size() - max_len));
  return in;
}

/// Scorer backed by model parameters: yhat at the last input position dotted with candidate embeddings.
template <class T>
Scorer make_model_scorer(const ModelParams<T>& params, const ModelConfig& config, bool bidirectional) {
  return [&params, config, bidirectional](std::span<const TrackIndex> prefix, std::span<const TrackIndex> candidates) {
    const auto in = prediction_input(prefix, bidirectional, config.max_len);
    const auto f = forward_sequence<T>(in, params, config);
    const auto logits = score_candidates<T>(f.yhat.row(f.yhat.rows() - 1), candidates, params);
    return std::vector<double>(logits.begin(), logits.end());
  };
}

struct EvalOptions {
  // Sorted track ids whose candidate ranks are averaged into group_mean_rank.
  std::vector<TrackIndex> tracked_group;
};

/// Validation feeds the training prefix and targets the penultimate track; test
/// additionally feeds the penultimate track and targets the final one. Candidates are
/// drawn per session from a substream keyed by (seed, session id), so every model
/// evaluated with the same seed sees the same candidate lists.
inline EvalReport evaluate(std::span<const HoldoutSplit> holdouts, std::size_t num_tracks, const Scorer& scorer,
                           const EvalConfig& cfg, const EvalOptions& opts = {}) {
  cfg.validate();
  EvalReport rep;
  rep.split = cfg.split;
  rep.ks = cfg.ks;
  rep.num_negatives = cfg.num_negatives;
  rep.seed = cfg.seed;
  std::vector<std::size_t> hits(cfg.ks.size(), 0);
  double rank_sum = 0.0;
  double group_rank_sum = 0.0;

  std::vector<TrackIndex> candidates;
  std::vector<TrackIndex> prefix;
  for (const auto& h : holdouts) {
    const TrackIndex target = cfg.split == Split::validation ? h.val_target : h.test_target;
    Rng rng = make_rng(cfg.seed, "eval", fnv1a(h.train_prefix.id));
    std::vector<TrackIndex> negs;
    try {
      negs = sample_eval_candidates(h.observed, target, num_tracks, cfg.num_negatives, rng);
    } catch (const ConfigError&) {
      ++rep.skipped;
      continue;
    }
    prefix = h.train_prefix.tracks;
    if (cfg.split == Split::test) prefix.push_back(h.val_target);
    candidates.clear();
    candidates.push_back(target);
    candidates.insert(candidates.end(), negs.begin(), negs.end());

    const auto logits = scorer(prefix, candidates);
    if (logits.size() != candidates.size()) throw std::logic_error("scorer returned wrong number of logits");
    const std::size_t rank = rank_target<double>(logits[0], std::span<const double>(logits).subspan(1));
    for (std::size_t k = 0; k < cfg.ks.size(); ++k) hits[k] += rank <= cfg.ks[k] ? 1 : 0;
    rank_sum += static_cast<double>(rank);

    if (!opts.tracked_group.empty()) {
      for (std::size_t j = 1; j < candidates.size(); ++j) {
        if (!std::binary_search(opts.tracked_group.begin(), opts.tracked_group.end(), candidates[j])) continue;
        std::size_t r = 1;
        for (std::size_t o = 0; o < candidates.size(); ++o) {
          if (o != j && logits[o] >= logits[j]) ++r;
        }
        group_rank_sum += static_cast<double>(r);
        ++rep.group_candidates;
      }
    }
    ++rep.num_sessions;
  }
  for (std::size_t k = 0; k < cfg.ks.size(); ++k) {
    rep.hr[cfg.ks[k]] = rep.num_sessions ? static_cast<double>(hits[k]) / static_cast<double>(rep.num_sessions) : 0.0;
  }
  rep.mean_target_rank = rep.num_sessions ? rank_sum / static_cast<double>(rep.num_sessions) : 0.0;
  if (!opts.tracked_group.empty() && rep.group_candidates > 0) {
    rep.group_mean_rank = group_rank_sum / static_cast<double>(rep.group_candidates);
  }
  return rep;
}

}  // namespace skiprec
