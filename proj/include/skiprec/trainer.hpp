#pragma once

// Unidirectional (next-item) and bidirectional (cloze) training with the combined
// alpha * InfoNCE + beta * NLL objective, Adam, validation-based early stopping.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "skiprec/corpus.hpp"
#include "skiprec/eval.hpp"
#include "skiprec/model.hpp"
#include "skiprec/objectives.hpp"

namespace skiprec {

enum class TrainMode { unidirectional, bidirectional };

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "unidirectional" || s == "uni") return TrainMode::unidirectional;
  if (s == "bidirectional" || s == "bi") return TrainMode::bidirectional;
  throw ConfigError("train.mode must be 'unidirectional' or 'bidirectional', got '" + s + "'");
}

inline std::string to_string(TrainMode m) { return m == TrainMode::unidirectional ? "unidirectional" : "bidirectional"; }

struct TrainConfig {
  TrainMode mode = TrainMode::unidirectional;
  double mask_prob = 0.2;
  double lr = 0.005;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 20;
  std::size_t patience = 3;
  std::size_t num_negatives = 1000;  // sampled-softmax candidates per row
  std::size_t selection_k = 10;      // validation HR@K used for model selection
  double clip_norm = 0.0;            // 0 disables clipping
  std::size_t threads = 1;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("train.mask_prob must be in (0, 1)");
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (num_negatives == 0) throw ConfigError("train.num_negatives must be positive");
    if (threads == 0) throw ConfigError("train.threads must be positive");
  }
};

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct OptimizerState {
  ModelParams<T> m, v;
  std::uint64_t step = 0;
};

template <class T>
OptimizerState<T> make_optimizer_state(const ModelParams<T>& p) {
  return {zeros_like(p), zeros_like(p), 0};
}

/// Bias-corrected Adam. Returns false and leaves everything untouched when any
/// gradient is non-finite. The PAD embedding row is re-zeroed after the update.
template <class T>
bool adam_step(ModelParams<T>& params, const ModelParams<T>& grads, OptimizerState<T>& state, const TrainConfig& cfg) {
  if (!grads.all_finite()) return false;
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const T c1 = static_cast<T>(1.0 - std::pow(b1, static_cast<double>(state.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(b2, static_cast<double>(state.step)));
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.adam_eps);

  std::vector<Mat<T>*> ps, ms, vs;
  std::vector<const Mat<T>*> gs;
  params.visit([&](const std::string&, Mat<T>& x) { ps.push_back(&x); });
  state.m.visit([&](const std::string&, Mat<T>& x) { ms.push_back(&x); });
  state.v.visit([&](const std::string&, Mat<T>& x) { vs.push_back(&x); });
  grads.visit([&](const std::string&, const Mat<T>& x) { gs.push_back(&x); });
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto m = ms[i]->array();
    auto v = vs[i]->array();
    const auto g = gs[i]->array();
    m = static_cast<T>(b1) * m + static_cast<T>(1.0 - b1) * g;
    v = static_cast<T>(b2) * v + static_cast<T>(1.0 - b2) * g.square();
    ps[i]->array() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
  }
  params.embedding.row(kPad).setZero();
  return true;
}

// ---------------------------------------------------------------------------
// Target construction

struct SupervisedPosition {
  std::size_t row;
  std::size_t position;
  TrackIndex target;
};

/// Next-item supervision: every real position except the last predicts the following token.
inline std::vector<SupervisedPosition> make_unidirectional_targets(Batch& batch) {
  std::vector<SupervisedPosition> out;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const std::size_t n = batch.lengths[r];
    for (std::size_t i = 0; i < batch.max_len; ++i) {
      if (i + 1 < n) {
        batch.target(r, i) = batch.token(r, i + 1);
        out.push_back({r, i, batch.target(r, i)});
      } else {
        batch.target(r, i) = kPad;
      }
    }
  }
  return out;
}

struct ClozeStats {
  std::size_t random_masked = 0;  // positions masked by the Bernoulli draw
  std::size_t maskable = 0;       // positions eligible for the Bernoulli draw
  std::size_t supervised = 0;     // random masks plus the trailing MSK per row
};

/// Cloze masking. Each real position except the last is replaced by MSK with
/// probability p and must predict its original track. The last position of every row
/// always becomes MSK and predicts the final prefix track, so that target never
/// appears in the attention map and each row has at least one supervised position.
inline ClozeStats apply_cloze_masking(Batch& batch, double p, Rng& rng) {
  std::bernoulli_distribution mask(p);
  ClozeStats st;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const std::size_t n = batch.lengths[r];
    for (std::size_t i = 0; i < batch.max_len; ++i) batch.target(r, i) = kPad;
    if (n == 0) continue;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      ++st.maskable;
      if (mask(rng)) {
        batch.target(r, i) = batch.token(r, i);
        batch.token(r, i) = kMsk;
        ++st.random_masked;
        ++st.supervised;
      }
    }
    batch.target(r, n - 1) = batch.token(r, n - 1);
    batch.token(r, n - 1) = kMsk;
    ++st.supervised;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Batch objective

struct BatchLoss {
  double total = 0.0;
  double nll = 0.0;
  std::optional<double> nce;
  std::size_t nll_count = 0;
  std::size_t nce_count = 0;
  std::size_t nce_skipped = 0;
};

namespace detail {

template <class T>
struct RowWork {
  SequenceForward<T> fwd;
  // NLL: per supervised position, candidate ids (target first) and dlogits.
  std::vector<std::size_t> nll_pos;
  std::vector<std::vector<T>> nll_dlogits;
  std::vector<ContrastiveInstance<T>> nce_inst;
  std::vector<InfoNceGrad<T>> nce_grad;
  double nll_sum = 0.0;
  double nce_sum = 0.0;
  std::size_t nce_skipped = 0;
};

template <class F>
void run_sharded(std::size_t n, std::size_t shards, F&& body) {
  shards = std::max<std::size_t>(1, std::min(shards, n));
  if (shards == 1) {
    body(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t per = (n + shards - 1) / shards;
  for (std::size_t s = 0; s < shards; ++s) {
    const std::size_t lo = s * per, hi = std::min(n, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([&, s, lo, hi] { body(s, lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Loss of one prepared batch (targets already set in `batch.nll_targets`) and, when
/// `grads` is given, its gradient accumulated into `grads`. NLL is averaged over all
/// supervised positions in the batch and InfoNCE over all contrastive instances.
/// `dropout_seed` enables dropout with per-row substreams.
template <class T>
BatchLoss batch_objective(const ModelParams<T>& p, const ModelConfig& mc, const Batch& batch,
                          std::span<const TrainingExample> examples, const LossWeights& w, ContextMode mode,
                          ModelParams<T>* grads = nullptr, std::optional<std::uint64_t> dropout_seed = std::nullopt,
                          std::size_t threads = 1) {
  std::vector<detail::RowWork<T>> work(batch.rows);
  const bool use_nce = w.alpha > 0.0;

  detail::run_sharded(batch.rows, threads, [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      auto& rw = work[r];
      const auto tokens = batch.row_tokens(r);
      if (tokens.empty()) continue;
      std::optional<Rng> rng;
      if (dropout_seed && mc.dropout > 0.0) rng.emplace(make_rng(*dropout_seed, "dropout", r));
      rw.fwd = forward_sequence<T>(tokens, p, mc, rng ? &*rng : nullptr);

      const auto& negs = batch.sampled_negatives[r];
      std::vector<TrackIndex> cands(negs.size() + 1);
      std::copy(negs.begin(), negs.end(), cands.begin() + 1);
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        const TrackIndex tgt = batch.target(r, i);
        if (tgt == kPad) continue;
        cands[0] = tgt;
        const auto logits = score_candidates<T>(rw.fwd.yhat.row(static_cast<Eigen::Index>(i)), cands, p);
        std::vector<T> dl;
        rw.nll_sum += static_cast<double>(sampled_softmax_nll<T>(logits, 0, grads ? &dl : nullptr));
        rw.nll_pos.push_back(i);
        rw.nll_dlogits.push_back(std::move(dl));
      }

      if (use_nce) {
        const auto& ex = examples[batch.example_index[r]];
        auto inst = build_contrastive_instances<T>(ex.session, ex.plan, rw.fwd.yhat, p, mode);
        for (auto& in : inst) {
          auto g = info_nce_with_grad<T>(in, w.temperature, grads != nullptr);
          if (!g) {
            ++rw.nce_skipped;
            continue;
          }
          rw.nce_sum += static_cast<double>(g->loss);
          rw.nce_grad.push_back(std::move(*g));
          rw.nce_inst.push_back(std::move(in));
        }
      }
    }
  });

  BatchLoss out;
  double nll_sum = 0.0, nce_sum = 0.0;
  for (const auto& rw : work) {
    nll_sum += rw.nll_sum;
    nce_sum += rw.nce_sum;
    out.nll_count += rw.nll_pos.size();
    out.nce_count += rw.nce_inst.size();
    out.nce_skipped += rw.nce_skipped;
  }
  out.nll = out.nll_count ? nll_sum / static_cast<double>(out.nll_count) : 0.0;
  if (out.nce_count) out.nce = nce_sum / static_cast<double>(out.nce_count);
  out.total = aggregate_loss<double>(out.nce, out.nll, w);
  if (!grads) return out;

  const T nll_scale = out.nll_count ? static_cast<T>(w.beta / static_cast<double>(out.nll_count)) : T(0);
  const T nce_scale = out.nce_count ? static_cast<T>(w.alpha / static_cast<double>(out.nce_count)) : T(0);

  auto accumulate = [&](ModelParams<T>& g, std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      auto& rw = work[r];
      const auto tokens = batch.row_tokens(r);
      if (tokens.empty()) continue;
      Mat<T> dy = Mat<T>::Zero(rw.fwd.yhat.rows(), rw.fwd.yhat.cols());
      const auto& negs = batch.sampled_negatives[r];
      for (std::size_t k = 0; k < rw.nll_pos.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(rw.nll_pos[k]);
        const auto& dl = rw.nll_dlogits[k];
        for (std::size_t j = 0; j < dl.size(); ++j) {
          const TrackIndex c = j == 0 ? batch.target(r, rw.nll_pos[k]) : negs[j - 1];
          const T s = nll_scale * dl[j];
          dy.row(i) += s * p.embedding.row(c);
          g.embedding.row(c) += s * rw.fwd.yhat.row(i);
        }
      }
      for (std::size_t k = 0; k < rw.nce_inst.size(); ++k) {
        const auto& in = rw.nce_inst[k];
        const auto& gr = rw.nce_grad[k];
        if (in.mode == ContextMode::predicted) {
          dy.row(static_cast<Eigen::Index>(in.position)) += nce_scale * gr.dcontext;
        } else {
          g.embedding.row(in.context_track) += nce_scale * gr.dcontext;
        }
        g.embedding.row(in.positive_track) += nce_scale * gr.dpositive;
        for (std::size_t j = 0; j < in.negative_tracks.size(); ++j) {
          g.embedding.row(in.negative_tracks[j]) += nce_scale * gr.dnegatives.row(static_cast<Eigen::Index>(j));
        }
      }
      backward_sequence<T>(rw.fwd, dy, p, mc, g);
    }
  };

  const std::size_t shards = std::max<std::size_t>(1, std::min(threads, batch.rows));
  if (shards == 1) {
    accumulate(*grads, 0, batch.rows);
  } else {
    std::vector<ModelParams<T>> partial(shards, zeros_like(*grads));
    detail::run_sharded(batch.rows, shards, [&](std::size_t s, std::size_t lo, std::size_t hi) {
      accumulate(partial[s], lo, hi);
    });
    std::vector<Mat<T>*> dst;
    grads->visit([&](const std::string&, Mat<T>& m) { dst.push_back(&m); });
    for (auto& part : partial) {
      std::size_t i = 0;
      part.visit([&](const std::string&, Mat<T>& m) { *dst[i++] += m; });
    }
  }
  return out;
}

template <class T>
T global_norm(const ModelParams<T>& g) {
  T s = 0;
  g.visit([&](const std::string&, const Mat<T>& m) { s += m.squaredNorm(); });
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainData {
  HoldoutSet holdouts;
  std::vector<TrainingExample> examples;  // one per holdout split, from its training prefix
  std::size_t num_tracks = 0;
  std::size_t table_size = 0;
};

inline TrainData prepare_training_data(std::span<const Session> sessions, const Vocabulary& vocab) {
  TrainData d;
  d.holdouts = split_all(sessions);
  d.examples.reserve(d.holdouts.splits.size());
  for (const auto& h : d.holdouts.splits) d.examples.push_back(make_example(h.train_prefix));
  d.num_tracks = vocab.num_tracks();
  d.table_size = vocab.table_size();
  return d;
}

struct TrainResult {
  ModelParams<float> best;
  ModelParams<float> last;
  OptimizerState<float> optimizer;
  std::vector<nlohmann::json> log;      // one deterministic record per epoch
  std::vector<double> epoch_seconds;    // wall time, kept apart from the log
  std::vector<std::string> warnings;
  std::size_t best_epoch = 0;
  double best_val = -1.0;
  std::size_t epochs_run = 0;
  bool diverged = false;
};

struct TrainSetup {
  ModelConfig model;
  TrainConfig train;
  LossWeights loss;
  ContextMode context_mode = ContextMode::predicted;
  EvalConfig validation;  // split forced to validation
};

/// Full training run. Epoch records are passed to `on_epoch` as they complete.
inline TrainResult train(const TrainData& data, TrainSetup setup,
                         const std::function<void(const nlohmann::json&)>& on_epoch = {}) {
  setup.train.validate();
  setup.loss.validate();
  setup.model.causal = setup.train.mode == TrainMode::unidirectional;
  setup.model.validate();
  setup.validation.split = Split::validation;
  if (std::find(setup.validation.ks.begin(), setup.validation.ks.end(), setup.train.selection_k) ==
      setup.validation.ks.end()) {
    throw ConfigError("train.selection_k must be one of eval.ks");
  }
  const auto& tc = setup.train;
  const bool bidir = tc.mode == TrainMode::bidirectional;

  TrainResult res;
  const bool any_negatives = std::any_of(data.examples.begin(), data.examples.end(),
                                         [](const TrainingExample& e) { return !e.plan.negatives.empty(); });
  if (setup.loss.alpha > 0.0 && !any_negatives) {
    res.warnings.push_back("loss.alpha > 0 but the training corpus has no negative feedback; training with NLL only");
    setup.loss.alpha = 0.0;
  }

  ModelParams<float> params = init_params<float>(setup.model, data.table_size, tc.seed);
  auto opt = make_optimizer_state(params);
  res.best = params;

  std::vector<std::size_t> order(data.examples.size());
  std::vector<TrainingExample> epoch_examples;
  std::size_t bad_epochs = 0;
  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_rng(tc.seed, "shuffle", epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    epoch_examples.clear();
    for (auto i : order) epoch_examples.push_back(data.examples[i]);

    Rng neg_rng = make_rng(tc.seed, "negatives", epoch);
    auto batches = pad_and_batch(epoch_examples, tc.batch_size, data.num_tracks, tc.num_negatives, neg_rng,
                                 setup.model.max_len);

    double loss_sum = 0.0, nll_sum = 0.0, nce_sum = 0.0;
    std::size_t nce_batches = 0, nce_instances = 0, skipped_steps = 0, steps = 0;
    for (std::size_t k = 0; k < batches.size(); ++k) {
      auto& batch = batches[k];
      if (bidir) {
        Rng mask_rng = make_rng(tc.seed, "masking", epoch, k);
        apply_cloze_masking(batch, tc.mask_prob, mask_rng);
      } else {
        make_unidirectional_targets(batch);
      }
      auto grads = zeros_like(params);
      BatchLoss bl;
      try {
        bl = batch_objective<float>(params, setup.model, batch, epoch_examples, setup.loss, setup.context_mode,
                                    &grads, substream_seed(tc.seed, "dropout", epoch, k), tc.threads);
      } catch (const NumericFault& e) {
        res.warnings.push_back(std::string("divergence: ") + e.what());
        res.diverged = true;
      }
      if (res.diverged || !std::isfinite(bl.total)) {
        res.diverged = true;
        break;
      }
      if (tc.clip_norm > 0.0) {
        const float n = global_norm(grads);
        if (n > tc.clip_norm) {
          const float s = static_cast<float>(tc.clip_norm) / n;
          grads.visit([&](const std::string&, Mat<float>& m) { m *= s; });
        }
      }
      if (!adam_step(params, grads, opt, tc)) ++skipped_steps;
      ++steps;
      loss_sum += bl.total;
      nll_sum += bl.nll;
      if (bl.nce) {
        nce_sum += *bl.nce;
        ++nce_batches;
      }
      nce_instances += bl.nce_count;
    }
    if (res.diverged) break;

    const auto rep = evaluate(data.holdouts.splits, data.num_tracks, make_model_scorer(params, setup.model, bidir),
                              setup.validation);
    const double val = rep.hr.at(tc.selection_k);
    ++res.epochs_run;

    nlohmann::json rec;
    rec["epoch"] = epoch;
    rec["steps"] = steps;
    rec["loss"] = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    rec["loss_nll"] = steps ? nll_sum / static_cast<double>(steps) : 0.0;
    rec["loss_nce"] = nce_batches ? nlohmann::json(nce_sum / static_cast<double>(nce_batches)) : nlohmann::json(nullptr);
    rec["nce_instances"] = nce_instances;
    rec["skipped_steps"] = skipped_steps;
    nlohmann::json hr = nlohmann::json::object();
    for (const auto& [kk, v] : rep.hr) hr[std::to_string(kk)] = v;
    rec["val_hr"] = hr;
    rec["val_sessions"] = rep.num_sessions;
    res.log.push_back(rec);
    res.epoch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (on_epoch) on_epoch(rec);

    if (val > res.best_val) {
      res.best_val = val;
      res.best_epoch = epoch;
      res.best = params;
      bad_epochs = 0;
    } else if (++bad_epochs >= tc.patience) {
      break;
    }
  }
  res.last = std::move(params);
  res.optimizer = std::move(opt);
  return res;
}

}  // namespace skiprec
