#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "gradcheck.hpp"
#include "skiprec/model.hpp"
#include "test_oracles.hpp"

using namespace skiprec;

namespace {

ModelConfig small_config(bool causal = false) {
  ModelConfig c;
  c.d = 16;
  c.heads = 4;
  c.blocks = 2;
  c.ffn_dim = 24;
  c.max_len = 10;
  c.dropout = 0.0;
  c.causal = causal;
  return c;
}

std::vector<TrackIndex> random_tokens(Rng& rng, std::size_t len, std::size_t num_tracks) {
  std::uniform_int_distribution<int> trk(kFirstTrack, kFirstTrack + static_cast<int>(num_tracks) - 1);
  std::vector<TrackIndex> out(len);
  for (auto& t : out) t = trk(rng);
  return out;
}

double max_abs_diff(const Mat<double>& a, const oracles::Grid& b) {
  double m = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b[i][j]));
  }
  return m;
}

}  // namespace

TEST(InitParams, RangeShapesAndFixedValues) {
  const auto c = small_config();
  const auto p = init_params<float>(c, 52, 9);
  EXPECT_EQ(p.embedding.rows(), 52);
  EXPECT_EQ(p.embedding.cols(), 16);
  EXPECT_EQ(p.position.rows(), 10);
  EXPECT_EQ(p.blocks.size(), 2u);
  EXPECT_EQ(p.blocks[0].w1.cols(), 24);
  EXPECT_TRUE(p.embedding.row(kPad).isZero(0));
  p.visit([](const std::string& name, const Mat<float>& m) {
    if (is_weight_tensor(name)) {
      EXPECT_LE(m.cwiseAbs().maxCoeff(), 0.02f) << name;
    } else if (name.ends_with(".scale")) {
      EXPECT_TRUE(m.isOnes(0)) << name;
    } else {
      EXPECT_TRUE(m.isZero(0)) << name;
    }
  });
}

TEST(InitParams, DeterministicInSeed) {
  const auto c = small_config();
  const auto a = init_params<float>(c, 40, 123);
  const auto b = init_params<float>(c, 40, 123);
  const auto other = init_params<float>(c, 40, 124);
  std::vector<float> va, vb, vo;
  a.visit([&](const std::string&, const Mat<float>& m) { va.insert(va.end(), m.data(), m.data() + m.size()); });
  b.visit([&](const std::string&, const Mat<float>& m) { vb.insert(vb.end(), m.data(), m.data() + m.size()); });
  other.visit([&](const std::string&, const Mat<float>& m) { vo.insert(vo.end(), m.data(), m.data() + m.size()); });
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vo);
}

TEST(InitParams, SamplesLookUniformOnInterval) {
  ModelConfig c;
  c.d = 128;
  const auto p = init_params<double>(c, 1000, 3);
  std::vector<double> xs(p.embedding.data() + 128, p.embedding.data() + 128 + 100000);
  std::sort(xs.begin(), xs.end());
  // Kolmogorov-Smirnov against U(-0.02, 0.02); 1% critical value 1.628/sqrt(n).
  const double n = static_cast<double>(xs.size());
  double D = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double F = (xs[i] + 0.02) / 0.04;
    D = std::max({D, static_cast<double>(i + 1) / n - F, F - static_cast<double>(i) / n});
  }
  EXPECT_LT(D, 1.628 / std::sqrt(n));
}

// ---------------------------------------------------------------------------

TEST(Embed, Definitions) {
  const auto c = small_config();
  const auto p = init_params<double>(c, 30, 1);
  std::vector<TrackIndex> toks = {7, 3, 7, 0, 0, 5};
  const auto x = embed<double>(toks, p, c);
  EXPECT_TRUE(x.row(0).isApprox(p.embedding.row(7) + p.position.row(0)));
  EXPECT_EQ(x.row(4), p.position.row(4));  // PAD row is zero
  EXPECT_TRUE((x.row(0) - x.row(2)).isApprox(p.position.row(0) - p.position.row(2)));
  std::vector<TrackIndex> bad = {30};
  EXPECT_THROW(embed<double>(bad, p, c), std::out_of_range);
  std::vector<TrackIndex> too_long(11, 2);
  EXPECT_THROW(embed<double>(too_long, p, c), std::out_of_range);
}

TEST(Embed, DropoutOnlyInTrainingMode) {
  auto c = small_config();
  c.dropout = 0.5;
  const auto p = init_params<double>(c, 30, 1);
  std::vector<TrackIndex> toks = {2, 3, 4};
  const auto eval = embed<double>(toks, p, c);
  Rng rng(4);
  Mat<double> mask;
  const auto train = embed<double>(toks, p, c, &rng, &mask);
  EXPECT_EQ(mask.size(), eval.size());
  EXPECT_TRUE(train.isApprox(eval.cwiseProduct(mask)));
  EXPECT_FALSE(train.isApprox(eval));
}

// ---------------------------------------------------------------------------

TEST(Forward, MatchesReferenceImplementation) {
  Rng rng(17);
  for (bool causal : {false, true}) {
    const auto c = small_config(causal);
    const auto p = gradcheck::random_params(c, 42, 0.3, causal ? 2 : 3);
    for (int trial = 0; trial < 5; ++trial) {
      const auto toks = random_tokens(rng, 3 + static_cast<std::size_t>(trial), 40);
      const auto f = forward_sequence<double>(toks, p, c);
      EXPECT_LT(max_abs_diff(f.yhat, oracles::forward(toks, p, c)), 1e-10);
    }
  }
}

TEST(Forward, KeyPaddingMatchesReference) {
  const auto c = small_config();
  const auto p = gradcheck::random_params(c, 42, 0.3, 5);
  std::vector<TrackIndex> toks = {4, 9, 11, kPad, kPad};
  std::vector<std::uint8_t> valid = {1, 1, 1, 0, 0};
  const auto f = forward_sequence<double>(toks, p, c, nullptr, valid);
  EXPECT_LT(max_abs_diff(f.yhat, oracles::forward(toks, p, c, {1, 1, 1, 0, 0})), 1e-10);
  // Real positions agree with the unpadded sequence.
  std::vector<TrackIndex> real = {4, 9, 11};
  const auto g = forward_sequence<double>(real, p, c);
  EXPECT_LT((f.yhat.topRows(3) - g.yhat).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, SinglePositionClosedForm) {
  auto c = small_config();
  c.blocks = 1;
  const auto p = gradcheck::random_params(c, 12, 0.3, 8);
  std::vector<TrackIndex> toks = {6};
  const auto f = forward_sequence<double>(toks, p, c);

  const auto& b = p.blocks[0];
  using Row = Eigen::RowVectorXd;
  auto ln = [&](const Row& v, const Mat<double>& g, const Mat<double>& o) {
    const double mu = v.mean();
    const double var = (v.array() - mu).square().mean();
    return Row(((v.array() - mu) / std::sqrt(var + c.ln_eps)).matrix().cwiseProduct(g.row(0)) + o.row(0));
  };
  auto g = [](const Row& v) { return Row(v.unaryExpr([](double z) { return oracles::erf_gelu(z); })); };
  const Row x = p.embedding.row(6) + p.position.row(0);
  const Row v = x * b.wv + b.bv.row(0);  // attention over a single key is that key
  const Row h1 = ln(x + v * b.wo + b.bo.row(0), b.ln1_scale, b.ln1_offset);
  const Row h = ln(h1 + g(h1 * b.w1 + b.b1.row(0)) * b.w2 + b.b2.row(0), b.ln2_scale, b.ln2_offset);
  const Row y = g(h * p.head_w + p.head_b.row(0));
  EXPECT_LT((f.yhat.row(0) - y).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(f.blocks[0].probs[0](0, 0), 1.0, 0.0);
}

TEST(Forward, AttentionRowsSumToOne) {
  Rng rng(2);
  for (bool causal : {false, true}) {
    const auto c = small_config(causal);
    const auto p = init_params<double>(c, 60, 4);
    auto toks = random_tokens(rng, 8, 58);
    toks[6] = toks[7] = kPad;
    std::vector<std::uint8_t> valid = {1, 1, 1, 1, 1, 1, 0, 0};
    const auto f = forward_sequence<double>(toks, p, c, nullptr, valid);
    for (const auto& blk : f.blocks) {
      for (const auto& pr : blk.probs) {
        for (Eigen::Index i = 0; i < pr.rows(); ++i) {
          EXPECT_NEAR(pr.row(i).sum(), 1.0, 1e-6);
          EXPECT_EQ(pr(i, 6), 0.0);
          if (causal) {
            for (Eigen::Index j = i + 1; j < pr.cols(); ++j) EXPECT_EQ(pr(i, j), 0.0);
          }
        }
      }
    }
  }
}

TEST(Forward, CausalPrefixBitIdentical) {
  Rng rng(21);
  const auto c = small_config(true);
  const auto p = gradcheck::random_params(c, 42, 0.3, 6).cast<float>();
  for (int trial = 0; trial < 20; ++trial) {
    auto toks = random_tokens(rng, 10, 40);
    const auto base = forward_sequence<float>(toks, p, c).yhat;
    const std::size_t j = std::uniform_int_distribution<std::size_t>(1, 9)(rng);
    for (std::size_t k = j; k < toks.size(); ++k) toks[k] = random_tokens(rng, 1, 40)[0];
    const auto changed = forward_sequence<float>(toks, p, c).yhat;
    for (std::size_t i = 0; i < j; ++i) {
      EXPECT_EQ(base.row(static_cast<Eigen::Index>(i)), changed.row(static_cast<Eigen::Index>(i)));
    }
  }
}

TEST(Forward, NonFiniteParamsFault) {
  const auto c = small_config();
  auto p = init_params<double>(c, 20, 1);
  p.blocks[1].w1(0, 0) = std::numeric_limits<double>::quiet_NaN();
  std::vector<TrackIndex> toks = {2, 3, 4};
  try {
    forward_sequence<double>(toks, p, c);
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("block 1"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------

TEST(Gelu, ReferenceValuesAndOddPartIdentity) {
  EXPECT_NEAR(gelu(1.0), 0.8413447461, 1e-10);
  EXPECT_EQ(gelu(0.0), 0.0);
  for (double x : {-3.0, -0.7, 0.1, 0.5, 2.2, 7.0}) EXPECT_NEAR(gelu(x) - gelu(-x), x, 1e-14);
  for (double x : {-2.0, -0.3, 0.0, 0.4, 1.7}) {
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(PredictEmbeddings, ZeroInputZeroBias) {
  const auto c = small_config();
  auto p = init_params<double>(c, 20, 1);
  const Mat<double> h = Mat<double>::Zero(3, 16);
  EXPECT_TRUE(predict_embeddings<double>(h, p).isZero(0));
}

TEST(ScoreCandidates, HandComputedDotProducts) {
  ModelConfig c;
  c.d = 2;
  c.heads = 1;
  c.blocks = 1;
  c.max_len = 2;
  c.ffn_dim = 2;
  auto p = make_params<double>(c, 5);
  p.embedding << 0, 0, 0, 0, 1, 2, -3, 0.5, 0.25, -1;
  Eigen::RowVector2d y(2.0, -1.0);
  std::vector<TrackIndex> cand = {2, 3, 4};
  const auto l = score_candidates<double>(y, cand, p);
  EXPECT_DOUBLE_EQ(l[0], 0.0);
  EXPECT_DOUBLE_EQ(l[1], -6.5);
  EXPECT_DOUBLE_EQ(l[2], 1.5);

  // Orthogonal prediction scores zero everywhere.
  Eigen::RowVector2d ortho(0.0, 0.0);
  for (double v : score_candidates<double>(ortho, cand, p)) EXPECT_EQ(v, 0.0);
}

TEST(ScoreCandidates, UnitNormSelfIsArgmaxAndPermutationEquivariant) {
  const auto c = small_config();
  auto p = init_params<double>(c, 40, 7);
  for (Eigen::Index r = kFirstTrack; r < p.embedding.rows(); ++r) p.embedding.row(r).normalize();
  std::vector<TrackIndex> cand(38);
  std::iota(cand.begin(), cand.end(), kFirstTrack);
  const Eigen::RowVectorXd y = p.embedding.row(11);
  const auto l = score_candidates<double>(y, cand, p);
  EXPECT_EQ(std::max_element(l.begin(), l.end()) - l.begin(), 11 - kFirstTrack);

  auto swapped = cand;
  std::swap(swapped[3], swapped[20]);
  const auto ls = score_candidates<double>(y, swapped, p);
  EXPECT_EQ(ls[3], l[20]);
  EXPECT_EQ(ls[20], l[3]);
  for (std::size_t j = 0; j < l.size(); ++j) {
    if (j != 3 && j != 20) {
      EXPECT_EQ(ls[j], l[j]);
    }
  }
}

TEST(ModelConfigTest, Validation) {
  ModelConfig c;
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(ModelConfig{}.validate());
  const nlohmann::json j = small_config(true);
  const auto back = j.get<ModelConfig>();
  EXPECT_EQ(back.d, 16u);
  EXPECT_TRUE(back.causal);
}
