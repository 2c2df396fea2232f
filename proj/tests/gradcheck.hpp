#pragma once

// Central finite-difference check of batch_objective gradients on a tiny model.

#include <random>
#include <string>
#include <vector>

#include "skiprec/trainer.hpp"

namespace gradcheck {

using namespace skiprec;

struct Result {
  double max_rel = 0.0;
  std::string worst;
  std::size_t tensors = 0;
  std::size_t entries = 0;
};

struct Setup {
  TrainMode mode = TrainMode::unidirectional;
  ContextMode context = ContextMode::predicted;
  LossWeights weights{0.5, 0.5, 1.0};
  double step = 1e-4;
  double init_scale = 0.3;
  std::uint64_t seed = 1;
};

inline ModelConfig tiny_config(bool causal) {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.blocks = 1;
  c.ffn_dim = 8;
  c.max_len = 6;
  c.dropout = 0.0;
  c.causal = causal;
  return c;
}

/// Randomized double parameters; larger than the training init so every nonlinearity is exercised.
inline ModelParams<double> random_params(const ModelConfig& c, std::size_t table_size, double scale, std::uint64_t seed) {
  auto p = make_params<double>(c, table_size);
  Rng rng = make_rng(seed, "gradcheck-params");
  std::normal_distribution<double> nd(0.0, scale);
  p.visit([&](const std::string& name, Mat<double>& m) {
    const bool ln_scale = name.ends_with(".scale");
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (ln_scale ? 1.0 : 0.0) + nd(rng);
  });
  p.embedding.row(kPad).setZero();
  return p;
}

/// Three sessions over a 50-track vocabulary with mixed skip labels, lengths 4..6.
inline std::vector<TrainingExample> tiny_examples(std::uint64_t seed) {
  Rng rng = make_rng(seed, "gradcheck-data");
  std::uniform_int_distribution<int> trk(kFirstTrack, kFirstTrack + 49);
  std::vector<std::vector<SkipStrength>> skips = {{0, 1, 0, 2, 0, 0}, {0, 0, 2, 1, 0}, {0, 3, 1, 0}};
  std::vector<TrainingExample> out;
  for (std::size_t s = 0; s < skips.size(); ++s) {
    Session x;
    x.id = "g" + std::to_string(s);
    x.skips = skips[s];
    std::vector<TrackIndex> pool(50);
    std::iota(pool.begin(), pool.end(), kFirstTrack);
    std::shuffle(pool.begin(), pool.end(), rng);
    x.tracks.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(skips[s].size()));
    out.push_back(make_example(std::move(x)));
  }
  return out;
}

inline Result run(const Setup& s) {
  const auto cfg = tiny_config(s.mode == TrainMode::unidirectional);
  const std::size_t num_tracks = 50;
  auto params = random_params(cfg, num_tracks + kFirstTrack, s.init_scale, s.seed);
  const auto examples = tiny_examples(s.seed);
  Rng neg_rng = make_rng(s.seed, "gradcheck-negatives");
  auto batch = pad_and_batch(examples, examples.size(), num_tracks, 10, neg_rng, cfg.max_len)[0];
  if (s.mode == TrainMode::unidirectional) {
    make_unidirectional_targets(batch);
  } else {
    Rng mask_rng = make_rng(s.seed, "gradcheck-mask");
    apply_cloze_masking(batch, 0.4, mask_rng);
  }

  auto grads = zeros_like(params);
  batch_objective<double>(params, cfg, batch, examples, s.weights, s.context, &grads);

  std::vector<Mat<double>*> ps, gs;
  std::vector<std::string> names;
  params.visit([&](const std::string& n, Mat<double>& m) {
    ps.push_back(&m);
    names.push_back(n);
  });
  grads.visit([&](const std::string&, Mat<double>& m) { gs.push_back(&m); });

  Result res;
  for (std::size_t t = 0; t < ps.size(); ++t) {
    Mat<double> fd(ps[t]->rows(), ps[t]->cols());
    for (Eigen::Index i = 0; i < ps[t]->size(); ++i) {
      double& x = ps[t]->data()[i];
      const double x0 = x;
      x = x0 + s.step;
      const double up = batch_objective<double>(params, cfg, batch, examples, s.weights, s.context).total;
      x = x0 - s.step;
      const double down = batch_objective<double>(params, cfg, batch, examples, s.weights, s.context).total;
      x = x0;
      fd.data()[i] = (up - down) / (2.0 * s.step);
      ++res.entries;
    }
    const double scale = std::max(gs[t]->cwiseAbs().maxCoeff(), fd.cwiseAbs().maxCoeff());
    if (scale < 1e-12) continue;
    ++res.tensors;
    const double rel = (*gs[t] - fd).cwiseAbs().maxCoeff() / scale;
    if (rel > res.max_rel) {
      res.max_rel = rel;
      res.worst = names[t];
    }
  }
  return res;
}

}  // namespace gradcheck
