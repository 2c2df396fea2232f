#pragma once

// Session logs, vocabulary, skip-aware targets, holdout splits and padded batches.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "skiprec/common.hpp"

namespace skiprec {

using SkipStrength = std::uint8_t;

/// Strengths 1 ("played very briefly") and 2 ("played briefly") are negative feedback.
/// 0 (not skipped) and 3 ("played mostly") are positive.
constexpr bool is_negative(SkipStrength s) noexcept { return s == 1 || s == 2; }

class Vocabulary {
 public:
  /// Index for `key`, inserting a fresh one if unseen.
  TrackIndex add(const std::string& key) {
    auto [it, inserted] = id_of_.try_emplace(key, static_cast<TrackIndex>(kFirstTrack + track_of_.size()));
    if (inserted) track_of_.push_back(key);
    return it->second;
  }

  std::optional<TrackIndex> find(const std::string& key) const {
    auto it = id_of_.find(key);
    if (it == id_of_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& key(TrackIndex t) const { return track_of_.at(static_cast<std::size_t>(t - kFirstTrack)); }

  /// Real tracks only; PAD and MSK are not counted.
  std::size_t num_tracks() const noexcept { return track_of_.size(); }
  /// Rows needed in an embedding table covering this vocabulary.
  std::size_t table_size() const noexcept { return track_of_.size() + kFirstTrack; }

  const std::vector<std::string>& keys() const noexcept { return track_of_; }

  static Vocabulary from_keys(const std::vector<std::string>& keys) {
    Vocabulary v;
    for (const auto& k : keys) {
      if (v.find(k)) throw ParseError("duplicate vocabulary key '" + k + "'", 0);
      v.add(k);
    }
    return v;
  }

 private:
  std::unordered_map<std::string, TrackIndex> id_of_;
  std::vector<std::string> track_of_;
};

struct Session {
  std::string id;
  std::vector<TrackIndex> tracks;
  std::vector<SkipStrength> skips;

  std::size_t size() const noexcept { return tracks.size(); }
  bool operator==(const Session&) const = default;
};

/// Column names in the delimited log. Defaults follow the MSSD log schema.
struct ColumnMapping {
  std::string session_id = "session_id";
  std::string position = "session_position";
  std::string track = "track_id_clean";
  std::string skip_1 = "skip_1";
  std::string skip_2 = "skip_2";
  std::string skip_3 = "skip_3";
  char delimiter = ',';
};

inline void from_json(const nlohmann::json& j, ColumnMapping& m) {
  static const std::vector<std::string> known = {"session_id", "position", "track", "skip_1", "skip_2",
                                                 "skip_3", "delimiter"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigError("unknown column mapping key 'data.columns." + k + "'");
    }
  }
  m.session_id = j.value("session_id", m.session_id);
  m.position = j.value("position", m.position);
  m.track = j.value("track", m.track);
  m.skip_1 = j.value("skip_1", m.skip_1);
  m.skip_2 = j.value("skip_2", m.skip_2);
  m.skip_3 = j.value("skip_3", m.skip_3);
  if (j.contains("delimiter")) {
    auto d = j.at("delimiter").get<std::string>();
    if (d == "\\t" || d == "tab") d = "\t";
    if (d.size() != 1) throw ConfigError("data.columns.delimiter must be a single character");
    m.delimiter = d[0];
  }
}

inline void to_json(nlohmann::json& j, const ColumnMapping& m) {
  j = {{"session_id", m.session_id}, {"position", m.position}, {"track", m.track},
       {"skip_1", m.skip_1},         {"skip_2", m.skip_2},     {"skip_3", m.skip_3},
       {"delimiter", std::string(1, m.delimiter)}};
}

struct CorpusStats {
  std::size_t rows = 0;
  std::size_t sessions_kept = 0;
  std::size_t dropped_short = 0;
  std::size_t dropped_long = 0;
  std::size_t positions = 0;
  std::size_t negative_positions = 0;
  std::size_t unique_tracks = 0;

  double skip_fraction() const noexcept {
    return positions ? static_cast<double>(negative_positions) / static_cast<double>(positions) : 0.0;
  }
};

inline void to_json(nlohmann::json& j, const CorpusStats& s) {
  j = {{"rows", s.rows},
       {"sessions_kept", s.sessions_kept},
       {"dropped_short", s.dropped_short},
       {"dropped_long", s.dropped_long},
       {"positions", s.positions},
       {"negative_positions", s.negative_positions},
       {"skip_fraction", s.skip_fraction()},
       {"unique_tracks", s.unique_tracks}};
}

struct Corpus {
  std::vector<Session> sessions;
  Vocabulary vocab;
  CorpusStats stats;
};

struct LengthLimits {
  std::size_t min_len = 3;
  std::size_t max_len = 20;
};

namespace detail {

inline std::vector<std::string> split_fields(std::string_view line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      break;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline bool parse_flag(const std::string& s, std::size_t line) {
  if (s == "true" || s == "True" || s == "TRUE" || s == "1") return true;
  if (s == "false" || s == "False" || s == "FALSE" || s == "0") return false;
  throw ParseError("invalid boolean skip flag '" + s + "'", line);
}

inline std::size_t column_index(const std::vector<std::string>& header, const std::string& name) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ConfigError("column '" + name + "' not present in log header");
  return static_cast<std::size_t>(it - header.begin());
}

}  // namespace detail

/// Parse a delimited session log with a header row. Rows are grouped by session id
/// (first-appearance order) and ordered by position. Sessions outside `limits` are
/// dropped and counted; the vocabulary is built from kept sessions only.
inline Corpus parse_session_log(std::istream& in, const ColumnMapping& cols = {}, LengthLimits limits = {}) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) {
      header = detail::split_fields(line, cols.delimiter);
      break;
    }
  }
  if (header.empty()) throw ParseError("empty session log (no header row)", 0);

  const std::size_t c_sid = detail::column_index(header, cols.session_id);
  const std::size_t c_pos = detail::column_index(header, cols.position);
  const std::size_t c_trk = detail::column_index(header, cols.track);
  const std::size_t c_s1 = detail::column_index(header, cols.skip_1);
  const std::size_t c_s2 = detail::column_index(header, cols.skip_2);
  const std::size_t c_s3 = detail::column_index(header, cols.skip_3);

  struct Row {
    long long position;
    std::string track;
    SkipStrength skip;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<Row>> groups;

  Corpus corpus;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = detail::split_fields(line, cols.delimiter);
    if (f.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()),
                       line_no);
    }
    Row row;
    try {
      std::size_t used = 0;
      row.position = std::stoll(f[c_pos], &used);
      if (used != f[c_pos].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError("invalid position '" + f[c_pos] + "'", line_no);
    }
    if (f[c_trk].empty()) throw ParseError("empty track key", line_no);
    if (f[c_sid].empty()) throw ParseError("empty session id", line_no);
    row.track = f[c_trk];
    const bool s1 = detail::parse_flag(f[c_s1], line_no);
    const bool s2 = detail::parse_flag(f[c_s2], line_no);
    const bool s3 = detail::parse_flag(f[c_s3], line_no);
    row.skip = s1 ? 1 : s2 ? 2 : s3 ? 3 : 0;

    auto [it, inserted] = groups.try_emplace(f[c_sid]);
    if (inserted) order.push_back(f[c_sid]);
    it->second.push_back(std::move(row));
    ++corpus.stats.rows;
  }
  if (corpus.stats.rows == 0) throw ParseError("session log has no data rows", 0);

  for (const auto& sid : order) {
    auto& rows = groups[sid];
    if (rows.size() < limits.min_len) {
      ++corpus.stats.dropped_short;
      continue;
    }
    if (rows.size() > limits.max_len) {
      ++corpus.stats.dropped_long;
      continue;
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.position < b.position; });
    Session s;
    s.id = sid;
    for (const auto& r : rows) {
      s.tracks.push_back(corpus.vocab.add(r.track));
      s.skips.push_back(r.skip);
      corpus.stats.negative_positions += is_negative(r.skip) ? 1 : 0;
    }
    corpus.stats.positions += s.size();
    corpus.sessions.push_back(std::move(s));
  }
  corpus.stats.sessions_kept = corpus.sessions.size();
  corpus.stats.unique_tracks = corpus.vocab.num_tracks();
  return corpus;
}

inline Corpus parse_session_log(const std::string& path, const ColumnMapping& cols = {}, LengthLimits limits = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open session log '" + path + "'");
  return parse_session_log(in, cols, limits);
}

/// Write sessions back out in the delimited log format `parse_session_log` reads.
inline void write_session_log(std::ostream& out, std::span<const Session> sessions, const Vocabulary& vocab,
                              const ColumnMapping& cols = {}) {
  const char d = cols.delimiter;
  out << cols.session_id << d << cols.position << d << cols.track << d << cols.skip_1 << d << cols.skip_2 << d
      << cols.skip_3 << '\n';
  for (const auto& s : sessions) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto k = s.skips[i];
      out << s.id << d << (i + 1) << d << vocab.key(s.tracks[i]) << d << (k == 1 ? "true" : "false") << d
          << (k == 2 ? "true" : "false") << d << (k == 3 ? "true" : "false") << '\n';
    }
  }
}

// Normalized cache: one JSON object per line {"session_id", "tracks", "skips"}.

inline void write_corpus_cache(std::ostream& out, std::span<const Session> sessions) {
  for (const auto& s : sessions) {
    nlohmann::json j = {{"session_id", s.id}, {"tracks", s.tracks}, {"skips", s.skips}};
    out << j.dump() << '\n';
  }
}

inline std::vector<Session> read_corpus_cache(std::istream& in, const Vocabulary& vocab) {
  std::vector<Session> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Session s;
    try {
      auto j = nlohmann::json::parse(line);
      s.id = j.at("session_id").get<std::string>();
      s.tracks = j.at("tracks").get<std::vector<TrackIndex>>();
      s.skips = j.at("skips").get<std::vector<SkipStrength>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad cache record: ") + e.what(), line_no);
    }
    if (s.tracks.size() != s.skips.size()) throw ParseError("tracks/skips length mismatch", line_no);
    for (auto t : s.tracks) {
      if (t < kFirstTrack || static_cast<std::size_t>(t) >= vocab.table_size()) {
        throw ParseError("track index " + std::to_string(t) + " outside vocabulary", line_no);
      }
    }
    for (auto k : s.skips) {
      if (k > 3) throw ParseError("skip strength out of range", line_no);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Targets

/// Per-position supervision derived from skip labels. Steps are 0-based positions.
struct TargetPlan {
  std::vector<std::optional<TrackIndex>> next_item;
  std::vector<std::optional<TrackIndex>> next_positive;
  std::vector<std::optional<std::size_t>> next_positive_step;
  std::vector<TrackIndex> positives;
  std::vector<TrackIndex> negatives;
  std::vector<std::size_t> pos_steps;
  std::vector<std::size_t> neg_steps;
};

inline TargetPlan derive_targets(const Session& s) {
  const std::size_t n = s.size();
  TargetPlan p;
  p.next_item.resize(n);
  p.next_positive.resize(n);
  p.next_positive_step.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (is_negative(s.skips[i])) {
      p.neg_steps.push_back(i);
      p.negatives.push_back(s.tracks[i]);
    } else {
      p.pos_steps.push_back(i);
      p.positives.push_back(s.tracks[i]);
    }
    if (i + 1 < n) p.next_item[i] = s.tracks[i + 1];
  }
  // Backward sweep: nearest positive strictly after i.
  std::optional<std::size_t> next;
  for (std::size_t i = n; i-- > 0;) {
    if (next) {
      p.next_positive_step[i] = *next;
      p.next_positive[i] = s.tracks[*next];
    }
    if (!is_negative(s.skips[i])) next = i;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Holdout

struct HoldoutSplit {
  Session train_prefix;
  TrackIndex val_target = kPad;
  TrackIndex test_target = kPad;
  std::vector<TrackIndex> observed;  // sorted, unique
};

/// Leave-last-two-out split. Returns nullopt for sessions shorter than 3.
inline std::optional<HoldoutSplit> split_holdout(const Session& s) {
  const std::size_t n = s.size();
  if (n < 3) return std::nullopt;
  HoldoutSplit h;
  h.train_prefix.id = s.id;
  h.train_prefix.tracks.assign(s.tracks.begin(), s.tracks.end() - 2);
  h.train_prefix.skips.assign(s.skips.begin(), s.skips.end() - 2);
  h.val_target = s.tracks[n - 2];
  h.test_target = s.tracks[n - 1];
  h.observed = s.tracks;
  std::sort(h.observed.begin(), h.observed.end());
  h.observed.erase(std::unique(h.observed.begin(), h.observed.end()), h.observed.end());
  return h;
}

struct HoldoutSet {
  std::vector<HoldoutSplit> splits;
  std::vector<std::size_t> source;  // index into the input session list
  std::size_t rejected = 0;
};

inline HoldoutSet split_all(std::span<const Session> sessions) {
  HoldoutSet out;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    if (auto h = split_holdout(sessions[i])) {
      out.splits.push_back(std::move(*h));
      out.source.push_back(i);
    } else {
      ++out.rejected;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

struct ContrastiveTarget {
  std::size_t position;
  TrackIndex positive;
  std::vector<TrackIndex> negatives;
};

/// Row-major B x max_len padded batch.
struct Batch {
  std::size_t rows = 0;
  std::size_t max_len = 20;
  std::vector<TrackIndex> tokens;
  std::vector<std::size_t> lengths;
  std::vector<std::uint8_t> pad_mask;     // 1 on real positions
  std::vector<TrackIndex> nll_targets;    // kPad where unsupervised
  std::vector<std::vector<ContrastiveTarget>> contrastive;
  std::vector<std::vector<TrackIndex>> sampled_negatives;
  std::vector<std::size_t> example_index;  // position of the row in the input list

  TrackIndex& token(std::size_t b, std::size_t i) { return tokens[b * max_len + i]; }
  TrackIndex token(std::size_t b, std::size_t i) const { return tokens[b * max_len + i]; }
  TrackIndex& target(std::size_t b, std::size_t i) { return nll_targets[b * max_len + i]; }
  TrackIndex target(std::size_t b, std::size_t i) const { return nll_targets[b * max_len + i]; }
  bool real(std::size_t b, std::size_t i) const { return pad_mask[b * max_len + i] != 0; }

  std::span<const TrackIndex> row_tokens(std::size_t b) const {
    return {tokens.data() + b * max_len, lengths[b]};
  }
};

struct TrainingExample {
  Session session;
  TargetPlan plan;
};

inline TrainingExample make_example(Session s) {
  TrainingExample e{std::move(s), {}};
  e.plan = derive_targets(e.session);
  return e;
}

/// Contrastive supervision for one row: every position with a later positive, when N is non-empty.
inline std::vector<ContrastiveTarget> contrastive_targets(const TargetPlan& plan) {
  std::vector<ContrastiveTarget> out;
  if (plan.negatives.empty()) return out;
  for (std::size_t i = 0; i < plan.next_positive.size(); ++i) {
    if (plan.next_positive[i]) out.push_back({i, *plan.next_positive[i], plan.negatives});
  }
  return out;
}

/// Right-pad examples into batches of `batch_size` rows, in input order. Each row gets
/// `num_negatives` tracks drawn uniformly without replacement from real tracks outside
/// its session. Successive calls with the same rng draw fresh negatives.
inline std::vector<Batch> pad_and_batch(std::span<const TrainingExample> examples, std::size_t batch_size,
                                        std::size_t num_tracks, std::size_t num_negatives, Rng& rng,
                                        std::size_t max_len = 20) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<Batch> out;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t rows = std::min(batch_size, examples.size() - start);
    Batch b;
    b.rows = rows;
    b.max_len = max_len;
    b.tokens.assign(rows * max_len, kPad);
    b.pad_mask.assign(rows * max_len, 0);
    b.nll_targets.assign(rows * max_len, kPad);
    b.lengths.resize(rows);
    b.contrastive.resize(rows);
    b.sampled_negatives.resize(rows);
    b.example_index.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& ex = examples[start + r];
      const auto& s = ex.session;
      if (s.size() > max_len) throw ConfigError("session longer than max_len " + std::to_string(max_len));
      b.lengths[r] = s.size();
      b.example_index[r] = start + r;
      for (std::size_t i = 0; i < s.size(); ++i) {
        b.token(r, i) = s.tracks[i];
        b.pad_mask[r * max_len + i] = 1;
        if (ex.plan.next_item[i]) b.target(r, i) = *ex.plan.next_item[i];
      }
      b.contrastive[r] = contrastive_targets(ex.plan);
      try {
        b.sampled_negatives[r] = sample_excluding(num_tracks, num_negatives, s.tracks, rng);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("vocabulary too small for sampled softmax: ") + e.what());
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace skiprec
