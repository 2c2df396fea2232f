#pragma once

// Sampled-softmax NLL, skip-informed InfoNCE over cosine scores, and their weighted sum.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "skiprec/corpus.hpp"
#include "skiprec/model.hpp"

namespace skiprec {

enum class ContextMode { predicted, embedding };

inline ContextMode parse_context_mode(const std::string& s) {
  if (s == "predicted") return ContextMode::predicted;
  if (s == "embedding") return ContextMode::embedding;
  throw ConfigError("loss.context_mode must be 'predicted' or 'embedding', got '" + s + "'");
}

inline std::string to_string(ContextMode m) { return m == ContextMode::predicted ? "predicted" : "embedding"; }

struct LossWeights {
  double alpha = 0.5;  // contrastive
  double beta = 0.5;   // sequential NLL
  double temperature = 1.0;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("loss.alpha and loss.beta must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("loss.temperature must be > 0");
  }
};

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

namespace detail {

template <class T>
void check_finite(std::span<const T> xs, const char* what) {
  for (T x : xs) {
    if (!std::isfinite(x)) throw NumericFault(std::string("non-finite ") + what);
  }
}

/// log-sum-exp and softmax in one pass; `probs` receives softmax(xs).
template <class T>
T log_softmax_at(std::span<const T> xs, std::size_t index, std::vector<T>* probs) {
  T mx = xs[0];
  for (T x : xs) mx = std::max(mx, x);
  T sum = 0;
  for (T x : xs) sum += std::exp(x - mx);
  const T lse = mx + std::log(sum);
  if (probs) {
    probs->resize(xs.size());
    for (std::size_t j = 0; j < xs.size(); ++j) (*probs)[j] = std::exp(xs[j] - lse);
  }
  return xs[index] - lse;
}

}  // namespace detail

/// -log softmax(logits)[target_index]. `dlogits`, when given, receives softmax - onehot.
template <class T>
T sampled_softmax_nll(std::span<const T> logits, std::size_t target_index, std::vector<T>* dlogits = nullptr) {
  if (logits.empty() || target_index >= logits.size()) throw std::invalid_argument("target index outside logits");
  detail::check_finite(logits, "logits");
  const T loss = -detail::log_softmax_at(logits, target_index, dlogits);
  if (dlogits) (*dlogits)[target_index] -= T(1);
  return loss;
}

/// Query vector, positive anchor and noise samples for one position, with the track
/// ids they came from so gradients can be routed back to the embedding table.
template <class T>
struct ContrastiveInstance {
  RowVec<T> context;
  RowVec<T> positive;
  Mat<T> negatives;  // one row per negative

  std::size_t position = 0;
  ContextMode mode = ContextMode::predicted;
  TrackIndex context_track = kPad;
  TrackIndex positive_track = kPad;
  std::vector<TrackIndex> negative_tracks;
};

template <class T>
struct InfoNceGrad {
  T loss = 0;
  RowVec<T> dcontext;
  RowVec<T> dpositive;
  Mat<T> dnegatives;
};

/// InfoNCE with scores cos(x, c) / temperature; the positive is class 0.
/// Returns nullopt when any vector has zero norm (cosine undefined).
template <class T>
std::optional<InfoNceGrad<T>> info_nce_with_grad(const ContrastiveInstance<T>& inst, double temperature,
                                                 bool want_grad = true) {
  const Eigen::Index n = inst.negatives.rows();
  const T cn = inst.context.norm();
  if (!(cn > 0)) return std::nullopt;
  std::vector<T> norms(static_cast<std::size_t>(n + 1));
  norms[0] = inst.positive.norm();
  for (Eigen::Index j = 0; j < n; ++j) norms[static_cast<std::size_t>(j + 1)] = inst.negatives.row(j).norm();
  for (T v : norms) {
    if (!(v > 0)) return std::nullopt;
  }
  auto row = [&](Eigen::Index j) -> RowVec<T> { return j == 0 ? inst.positive : RowVec<T>(inst.negatives.row(j - 1)); };

  const T tau = static_cast<T>(temperature);
  std::vector<T> cosines(static_cast<std::size_t>(n + 1)), scores(static_cast<std::size_t>(n + 1));
  for (Eigen::Index j = 0; j <= n; ++j) {
    const auto k = static_cast<std::size_t>(j);
    cosines[k] = row(j).dot(inst.context) / (norms[k] * cn);
    scores[k] = cosines[k] / tau;
  }
  detail::check_finite<T>(scores, "contrastive scores");
  std::vector<T> probs;
  InfoNceGrad<T> out;
  out.loss = -detail::log_softmax_at<T>(scores, 0, want_grad ? &probs : nullptr);
  if (!want_grad) return out;

  out.dcontext = RowVec<T>::Zero(inst.context.size());
  out.dnegatives = Mat<T>::Zero(n, inst.context.size());
  for (Eigen::Index j = 0; j <= n; ++j) {
    const auto k = static_cast<std::size_t>(j);
    const T dscore = (probs[k] - (j == 0 ? T(1) : T(0))) / tau;
    const RowVec<T> x = row(j);
    // d cos / dc = x/(|x||c|) - cos c/|c|^2 ; d cos / dx = c/(|x||c|) - cos x/|x|^2
    out.dcontext += dscore * (x / (norms[k] * cn) - cosines[k] * inst.context / (cn * cn));
    const RowVec<T> dx = dscore * (inst.context / (norms[k] * cn) - cosines[k] * x / (norms[k] * norms[k]));
    if (j == 0) {
      out.dpositive = dx;
    } else {
      out.dnegatives.row(j - 1) = dx;
    }
  }
  return out;
}

template <class T>
std::optional<T> info_nce(const ContrastiveInstance<T>& inst, double temperature) {
  auto r = info_nce_with_grad(inst, temperature, false);
  if (!r) return std::nullopt;
  return r->loss;
}

/// One instance per position with a defined next positive, when the session has any
/// negatives. `yhat` (L x d) is required for ContextMode::predicted and may be empty otherwise.
template <class T>
std::vector<ContrastiveInstance<T>> build_contrastive_instances(const Session& s, const TargetPlan& plan,
                                                                const Mat<T>& yhat, const ModelParams<T>& p,
                                                                ContextMode mode) {
  std::vector<ContrastiveInstance<T>> out;
  if (plan.negatives.empty()) return out;
  Mat<T> negs(static_cast<Eigen::Index>(plan.negatives.size()), p.embedding.cols());
  for (std::size_t j = 0; j < plan.negatives.size(); ++j) {
    negs.row(static_cast<Eigen::Index>(j)) = p.embedding.row(plan.negatives[j]);
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!plan.next_positive[i]) continue;
    ContrastiveInstance<T> inst;
    inst.position = i;
    inst.mode = mode;
    inst.context_track = s.tracks[i];
    if (mode == ContextMode::predicted) {
      if (static_cast<std::size_t>(yhat.rows()) <= i) {
        throw std::invalid_argument("predicted context requires forward output for every position");
      }
      inst.context = yhat.row(static_cast<Eigen::Index>(i));
    } else {
      inst.context = p.embedding.row(s.tracks[i]);
    }
    inst.positive_track = *plan.next_positive[i];
    inst.positive = p.embedding.row(inst.positive_track);
    inst.negative_tracks = plan.negatives;
    inst.negatives = negs;
    out.push_back(std::move(inst));
  }
  return out;
}

/// alpha * l_nce + beta * l_nll; an absent contrastive term contributes nothing.
template <class T>
T aggregate_loss(std::optional<T> l_nce, T l_nll, const LossWeights& w) {
  const T nll_term = static_cast<T>(w.beta) * l_nll;
  if (!l_nce || w.alpha == 0.0) return nll_term;
  return static_cast<T>(w.alpha) * *l_nce + nll_term;
}

}  // namespace skiprec
