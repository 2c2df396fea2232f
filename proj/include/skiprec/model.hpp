#pragma once

// Transformer encoder recommender: track + positional embeddings, post-LN encoder
// blocks (optionally causal), GELU prediction head, and tied-weight candidate scoring.
// Forward and backward passes are written out by hand and templated on the scalar
// type so the same code trains in float and is gradient-checked in double.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "skiprec/common.hpp"

namespace skiprec {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  std::size_t d = 128;
  std::size_t blocks = 2;
  std::size_t heads = 8;
  std::size_t max_len = 20;
  std::size_t ffn_dim = 128;
  double dropout = 0.1;
  double ln_eps = 1e-5;
  bool causal = false;

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) throw ConfigError("model.d must be a positive multiple of model.heads");
    if (blocks == 0) throw ConfigError("model.blocks must be positive");
    if (max_len == 0) throw ConfigError("model.max_len must be positive");
    if (ffn_dim == 0) throw ConfigError("model.ffn_dim must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must be in [0, 1)");
    if (!(ln_eps > 0.0)) throw ConfigError("model.ln_eps must be positive");
  }
  std::size_t head_dim() const noexcept { return d / heads; }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d", c.d},           {"blocks", c.blocks},   {"heads", c.heads},   {"max_len", c.max_len},
       {"ffn_dim", c.ffn_dim}, {"dropout", c.dropout}, {"ln_eps", c.ln_eps}, {"causal", c.causal}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d = j.value("d", c.d);
  c.blocks = j.value("blocks", c.blocks);
  c.heads = j.value("heads", c.heads);
  c.max_len = j.value("max_len", c.max_len);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  c.causal = j.value("causal", c.causal);
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct BlockParams {
  Mat<T> wq, wk, wv, wo;
  Mat<T> bq, bk, bv, bo;
  Mat<T> ln1_scale, ln1_offset;
  Mat<T> w1, b1, w2, b2;
  Mat<T> ln2_scale, ln2_offset;
};

/// All learnable tensors. Biases and layer-norm vectors are stored as 1 x n matrices.
template <class T>
struct ModelParams {
  Mat<T> embedding;  // (num_tracks + 2) x d; row kPad stays zero
  Mat<T> position;   // max_len x d
  std::vector<BlockParams<T>> blocks;
  Mat<T> head_w, head_b;

  /// Visit every tensor in a fixed order with a stable name.
  template <class F>
  void visit(F&& f) {
    f(std::string("embedding"), embedding);
    f(std::string("position"), position);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto& k = blocks[b];
      const std::string p = "block" + std::to_string(b) + ".";
      f(p + "attn.q.weight", k.wq);
      f(p + "attn.q.bias", k.bq);
      f(p + "attn.k.weight", k.wk);
      f(p + "attn.k.bias", k.bk);
      f(p + "attn.v.weight", k.wv);
      f(p + "attn.v.bias", k.bv);
      f(p + "attn.out.weight", k.wo);
      f(p + "attn.out.bias", k.bo);
      f(p + "ln1.scale", k.ln1_scale);
      f(p + "ln1.offset", k.ln1_offset);
      f(p + "ffn.in.weight", k.w1);
      f(p + "ffn.in.bias", k.b1);
      f(p + "ffn.out.weight", k.w2);
      f(p + "ffn.out.bias", k.b2);
      f(p + "ln2.scale", k.ln2_scale);
      f(p + "ln2.offset", k.ln2_offset);
    }
    f(std::string("head.weight"), head_w);
    f(std::string("head.bias"), head_b);
  }

  template <class F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit([&](const std::string& n, Mat<T>& m) { f(n, static_cast<const Mat<T>&>(m)); });
  }

  std::size_t table_size() const noexcept { return static_cast<std::size_t>(embedding.rows()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const Mat<T>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  void set_zero() {
    visit([](const std::string&, Mat<T>& m) { m.setZero(); });
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.blocks.resize(blocks.size());
    std::vector<const Mat<T>*> src;
    visit([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Mat<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }
};

template <class T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  ModelParams<T> z = p;
  z.set_zero();
  return z;
}

/// Allocate correctly-shaped zero parameters.
template <class T>
ModelParams<T> make_params(const ModelConfig& c, std::size_t table_size) {
  c.validate();
  const auto d = static_cast<Eigen::Index>(c.d);
  const auto f = static_cast<Eigen::Index>(c.ffn_dim);
  ModelParams<T> p;
  p.embedding = Mat<T>::Zero(static_cast<Eigen::Index>(table_size), d);
  p.position = Mat<T>::Zero(static_cast<Eigen::Index>(c.max_len), d);
  p.blocks.resize(c.blocks);
  for (auto& b : p.blocks) {
    b.wq = b.wk = b.wv = b.wo = Mat<T>::Zero(d, d);
    b.bq = b.bk = b.bv = b.bo = Mat<T>::Zero(1, d);
    b.ln1_scale = b.ln2_scale = Mat<T>::Ones(1, d);
    b.ln1_offset = b.ln2_offset = Mat<T>::Zero(1, d);
    b.w1 = Mat<T>::Zero(d, f);
    b.b1 = Mat<T>::Zero(1, f);
    b.w2 = Mat<T>::Zero(f, d);
    b.b2 = Mat<T>::Zero(1, d);
  }
  p.head_w = Mat<T>::Zero(d, d);
  p.head_b = Mat<T>::Zero(1, d);
  return p;
}

inline bool is_weight_tensor(const std::string& name) {
  return name == "embedding" || name == "position" || name.ends_with(".weight");
}

/// Draw from N(0, 1) restricted to [lo, hi] by rejection.
template <class G>
double truncated_normal(G& rng, double lo = -0.02, double hi = 0.02) {
  std::normal_distribution<double> nd(0.0, 1.0);
  while (true) {
    const double x = nd(rng);
    if (x >= lo && x <= hi) return x;
  }
}

/// Weights ~ N(0,1) truncated to [-0.02, 0.02]; layer-norm scales 1; biases and
/// offsets 0; PAD embedding row zero. Deterministic in `seed`.
template <class T>
ModelParams<T> init_params(const ModelConfig& c, std::size_t table_size, std::uint64_t seed) {
  auto p = make_params<T>(c, table_size);
  Rng rng = make_rng(seed, "init");
  p.visit([&](const std::string& name, Mat<T>& m) {
    if (!is_weight_tensor(name)) return;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(truncated_normal(rng));
  });
  p.embedding.row(kPad).setZero();
  return p;
}

// ---------------------------------------------------------------------------
// Elementwise helpers

template <class T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::erf(x / static_cast<T>(std::numbers::sqrt2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(x / static_cast<T>(std::numbers::sqrt2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) / static_cast<T>(std::sqrt(2.0 * std::numbers::pi));
  return cdf + x * pdf;
}

template <class T>
Mat<T> gelu(const Mat<T>& z) {
  return z.unaryExpr([](T v) { return gelu(v); });
}

/// Inverted-dropout keep mask (entries 0 or 1/(1-rate)); empty when inactive.
template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return {};
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? scale : T(0);
  return m;
}

template <class T>
void apply_mask(Mat<T>& x, const Mat<T>& mask) {
  if (mask.size() != 0) x = x.cwiseProduct(mask);
}

template <class T>
struct LayerNormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
};

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& scale, const Mat<T>& offset, double eps, LayerNormCache<T>& cache) {
  const auto n = x.cols();
  cache.xhat.resize(x.rows(), n);
  cache.inv_std.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(n);
    const T inv = static_cast<T>(1) / std::sqrt(var + static_cast<T>(eps));
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = centered * inv;
  }
  Mat<T> y = cache.xhat.array().rowwise() * scale.array().row(0);
  y.rowwise() += offset.row(0);
  return y;
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& scale, const LayerNormCache<T>& cache, Mat<T>& dscale,
                           Mat<T>& doffset) {
  dscale += dy.cwiseProduct(cache.xhat).colwise().sum();
  doffset += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * scale.array().row(0);
  Mat<T> dx(dy.rows(), dy.cols());
  const T n = static_cast<T>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_d = dxhat.row(r).sum() / n;
    const T mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) / n;
    dx.row(r) = cache.inv_std(r) * (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
struct BlockCache {
  Mat<T> x_in;
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;       // per head, post-softmax
  std::vector<Mat<T>> probs_mask;  // per head dropout
  Mat<T> concat;                   // per-head attention outputs, L x d
  Mat<T> attn_mask;
  LayerNormCache<T> ln1;
  Mat<T> h1;
  Mat<T> ffn_pre, ffn_act;
  Mat<T> ffn_mask;
  LayerNormCache<T> ln2;
};

/// Everything the backward pass needs for one sequence.
template <class T>
struct SequenceForward {
  std::vector<TrackIndex> tokens;
  std::vector<std::uint8_t> key_valid;
  Mat<T> embed_mask;
  std::vector<BlockCache<T>> blocks;
  Mat<T> hidden;    // encoder output, L x d
  Mat<T> head_pre;  // hidden * W + b
  Mat<T> yhat;      // GELU(head_pre)
};

/// E[tokens[i]] + PE[i], with inverted dropout on the sum when `rng` is set.
template <class T>
Mat<T> embed(std::span<const TrackIndex> tokens, const ModelParams<T>& p, const ModelConfig& c, Rng* rng = nullptr,
             Mat<T>* mask_out = nullptr) {
  if (tokens.size() > static_cast<std::size_t>(p.position.rows())) {
    throw std::out_of_range("sequence longer than positional table");
  }
  Mat<T> x(static_cast<Eigen::Index>(tokens.size()), p.embedding.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = tokens[i];
    if (t < 0 || t >= p.embedding.rows()) throw std::out_of_range("token index " + std::to_string(t) + " out of range");
    x.row(static_cast<Eigen::Index>(i)) = p.embedding.row(t) + p.position.row(static_cast<Eigen::Index>(i));
  }
  Mat<T> mask = dropout_mask<T>(x.rows(), x.cols(), c.dropout, rng);
  apply_mask(x, mask);
  if (mask_out) *mask_out = std::move(mask);
  return x;
}

template <class T>
bool attention_allowed(const ModelConfig& c, std::span<const std::uint8_t> key_valid, Eigen::Index i, Eigen::Index j) {
  return key_valid[static_cast<std::size_t>(j)] != 0 && (!c.causal || j <= i);
}

template <class T>
Mat<T> block_forward(const Mat<T>& x, std::span<const std::uint8_t> key_valid, const BlockParams<T>& w,
                     const ModelConfig& c, Rng* rng, BlockCache<T>& cache) {
  const Eigen::Index L = x.rows();
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  cache.x_in = x;
  cache.q = (x * w.wq).rowwise() + w.bq.row(0);
  cache.k = (x * w.wk).rowwise() + w.bk.row(0);
  cache.v = (x * w.wv).rowwise() + w.bv.row(0);
  cache.concat.resize(L, x.cols());
  cache.probs.resize(c.heads);
  cache.probs_mask.resize(c.heads);
  for (std::size_t h = 0; h < c.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    Mat<T> s = (cache.q.middleCols(off, dh) * cache.k.middleCols(off, dh).transpose()) * scale;
    Mat<T>& pr = cache.probs[h];
    pr.resize(L, L);
    for (Eigen::Index i = 0; i < L; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j < L; ++j) {
        if (attention_allowed<T>(c, key_valid, i, j)) mx = std::max(mx, s(i, j));
      }
      T sum = 0;
      for (Eigen::Index j = 0; j < L; ++j) {
        const T e = attention_allowed<T>(c, key_valid, i, j) ? std::exp(s(i, j) - mx) : T(0);
        pr(i, j) = e;
        sum += e;
      }
      if (sum > 0) pr.row(i) /= sum;
    }
    cache.probs_mask[h] = dropout_mask<T>(L, L, c.dropout, rng);
    if (cache.probs_mask[h].size() != 0) {
      cache.concat.middleCols(off, dh) = pr.cwiseProduct(cache.probs_mask[h]) * cache.v.middleCols(off, dh);
    } else {
      cache.concat.middleCols(off, dh) = pr * cache.v.middleCols(off, dh);
    }
  }
  Mat<T> a = (cache.concat * w.wo).rowwise() + w.bo.row(0);
  cache.attn_mask = dropout_mask<T>(L, a.cols(), c.dropout, rng);
  apply_mask(a, cache.attn_mask);
  cache.h1 = layer_norm<T>(x + a, w.ln1_scale, w.ln1_offset, c.ln_eps, cache.ln1);

  cache.ffn_pre = (cache.h1 * w.w1).rowwise() + w.b1.row(0);
  cache.ffn_act = gelu(cache.ffn_pre);
  Mat<T> f = (cache.ffn_act * w.w2).rowwise() + w.b2.row(0);
  cache.ffn_mask = dropout_mask<T>(L, f.cols(), c.dropout, rng);
  apply_mask(f, cache.ffn_mask);
  return layer_norm<T>(cache.h1 + f, w.ln2_scale, w.ln2_offset, c.ln_eps, cache.ln2);
}

/// Run all encoder blocks. Throws NumericFault naming the first block with non-finite output.
template <class T>
Mat<T> encoder_forward(const Mat<T>& x, std::span<const std::uint8_t> key_valid, const ModelConfig& c,
                       const ModelParams<T>& p, Rng* rng = nullptr, std::vector<BlockCache<T>>* caches = nullptr) {
  std::vector<BlockCache<T>> local;
  auto& cs = caches ? *caches : local;
  cs.resize(p.blocks.size());
  Mat<T> h = x;
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    h = block_forward<T>(h, key_valid, p.blocks[b], c, rng, cs[b]);
    if (!h.allFinite()) throw NumericFault("non-finite activations in encoder block " + std::to_string(b));
  }
  return h;
}

/// yhat = GELU(h W + b)
template <class T>
Mat<T> predict_embeddings(const Mat<T>& h, const ModelParams<T>& p, Mat<T>* pre_out = nullptr) {
  Mat<T> pre = (h * p.head_w).rowwise() + p.head_b.row(0);
  Mat<T> y = gelu(pre);
  if (pre_out) *pre_out = std::move(pre);
  return y;
}

/// Full forward pass for one sequence. `key_valid` marks real (non-PAD) key positions;
/// empty means all positions are real. `rng` enables dropout (training mode).
template <class T>
SequenceForward<T> forward_sequence(std::span<const TrackIndex> tokens, const ModelParams<T>& p, const ModelConfig& c,
                                    Rng* rng = nullptr, std::span<const std::uint8_t> key_valid = {}) {
  SequenceForward<T> f;
  f.tokens.assign(tokens.begin(), tokens.end());
  if (key_valid.empty()) {
    f.key_valid.assign(tokens.size(), 1);
  } else {
    f.key_valid.assign(key_valid.begin(), key_valid.end());
  }
  Mat<T> x = embed<T>(tokens, p, c, rng, &f.embed_mask);
  f.hidden = encoder_forward<T>(x, f.key_valid, c, p, rng, &f.blocks);
  f.yhat = predict_embeddings<T>(f.hidden, p, &f.head_pre);
  return f;
}

/// logit[j] = yhat_row . E[candidates[j]]
template <class T, class Row>
std::vector<T> score_candidates(const Row& yhat_row, std::span<const TrackIndex> candidates, const ModelParams<T>& p) {
  std::vector<T> out(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j) out[j] = yhat_row.dot(p.embedding.row(candidates[j]));
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

template <class T>
Mat<T> block_backward(const Mat<T>& dout, const BlockParams<T>& w, const ModelConfig& c, const BlockCache<T>& cache,
                      BlockParams<T>& g) {
  const Eigen::Index L = dout.rows();
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Feedforward sublayer.
  Mat<T> dr2 = layer_norm_backward<T>(dout, w.ln2_scale, cache.ln2, g.ln2_scale, g.ln2_offset);
  Mat<T> dh1 = dr2;
  Mat<T> df = dr2;
  apply_mask(df, cache.ffn_mask);
  g.w2.noalias() += cache.ffn_act.transpose() * df;
  g.b2 += df.colwise().sum();
  Mat<T> dz = (df * w.w2.transpose()).cwiseProduct(cache.ffn_pre.unaryExpr([](T v) { return gelu_grad(v); }));
  g.w1.noalias() += cache.h1.transpose() * dz;
  g.b1 += dz.colwise().sum();
  dh1.noalias() += dz * w.w1.transpose();

  // Attention sublayer.
  Mat<T> dr1 = layer_norm_backward<T>(dh1, w.ln1_scale, cache.ln1, g.ln1_scale, g.ln1_offset);
  Mat<T> dx = dr1;
  Mat<T> da = dr1;
  apply_mask(da, cache.attn_mask);
  g.wo.noalias() += cache.concat.transpose() * da;
  g.bo += da.colwise().sum();
  const Mat<T> dconcat = da * w.wo.transpose();

  Mat<T> dq(L, dout.cols()), dk(L, dout.cols()), dv(L, dout.cols());
  for (std::size_t h = 0; h < c.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    const Mat<T>& pr = cache.probs[h];
    const Mat<T>& pm = cache.probs_mask[h];
    const auto dO = dconcat.middleCols(off, dh);
    Mat<T> dp = dO * cache.v.middleCols(off, dh).transpose();
    if (pm.size() != 0) {
      dv.middleCols(off, dh) = pr.cwiseProduct(pm).transpose() * dO;
      dp = dp.cwiseProduct(pm);
    } else {
      dv.middleCols(off, dh) = pr.transpose() * dO;
    }
    const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = dp.cwiseProduct(pr).rowwise().sum();
    Mat<T> ds = pr.cwiseProduct(dp.colwise() - rowdot) * scale;
    dq.middleCols(off, dh) = ds * cache.k.middleCols(off, dh);
    dk.middleCols(off, dh) = ds.transpose() * cache.q.middleCols(off, dh);
  }
  const Mat<T>& x = cache.x_in;
  g.wq.noalias() += x.transpose() * dq;
  g.wk.noalias() += x.transpose() * dk;
  g.wv.noalias() += x.transpose() * dv;
  g.bq += dq.colwise().sum();
  g.bk += dk.colwise().sum();
  g.bv += dv.colwise().sum();
  dx.noalias() += dq * w.wq.transpose();
  dx.noalias() += dk * w.wk.transpose();
  dx.noalias() += dv * w.wv.transpose();
  return dx;
}

/// Accumulate parameter gradients for one sequence given dLoss/dyhat (L x d).
/// Gradients that losses send directly to embedding rows (candidate scores,
/// contrastive vectors) are accumulated by the caller.
template <class T>
void backward_sequence(const SequenceForward<T>& f, const Mat<T>& dyhat, const ModelParams<T>& p,
                       const ModelConfig& c, ModelParams<T>& grads) {
  const Mat<T> dpre = dyhat.cwiseProduct(f.head_pre.unaryExpr([](T v) { return gelu_grad(v); }));
  grads.head_w.noalias() += f.hidden.transpose() * dpre;
  grads.head_b += dpre.colwise().sum();
  Mat<T> dh = dpre * p.head_w.transpose();
  for (std::size_t b = p.blocks.size(); b-- > 0;) {
    dh = block_backward<T>(dh, p.blocks[b], c, f.blocks[b], grads.blocks[b]);
  }
  apply_mask(dh, f.embed_mask);
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    grads.embedding.row(f.tokens[i]) += dh.row(static_cast<Eigen::Index>(i));
    grads.position.row(static_cast<Eigen::Index>(i)) += dh.row(static_cast<Eigen::Index>(i));
  }
}

}  // namespace skiprec
