#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "varformer/errors.hpp"
#include "varformer/ops.hpp"
#include "varformer/transformer.hpp"

namespace varformer {
namespace {

Tensor filled(Shape shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = u(gen);
  return Tensor(std::move(shape), std::move(v));
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.d_ff = 16;
  cfg.n_heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.vocab_size = 8;
  cfg.feature_dim = 8;
  cfg.conv_channels = 4;
  cfg.max_len = 64;
  return cfg;
}

TEST(Attention, HandCase) {
  const Tensor q({1, 2}, {1, 0});
  const Tensor k({2, 2}, {1, 0, 0, 1});
  const Tensor v({2, 2}, {1, 0, 0, 1});
  const Tensor out = scaled_dot_attention(q, k, v);
  const double a = std::exp(1.0 / std::sqrt(2.0));
  EXPECT_NEAR(out[0], a / (a + 1.0), 1e-15);
  EXPECT_NEAR(out[1], 1.0 / (a + 1.0), 1e-15);
}

TEST(Attention, IdenticalKeysAverageValues) {
  std::mt19937_64 gen(1);
  const Tensor q = filled({3, 4}, gen);
  const Tensor k = ops::concat_rows(std::vector<Tensor>(5, filled({1, 4}, gen)));
  const Tensor v = filled({5, 3}, gen);
  const Tensor out = scaled_dot_attention(q, k, v);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (std::size_t j = 0; j < 5; ++j) mean += v.at(j, c);
      EXPECT_NEAR(out.at(r, c), mean / 5.0, 1e-14);
    }
  }
}

TEST(Attention, MaskForcesSingleColumn) {
  std::mt19937_64 gen(2);
  const Tensor q = filled({2, 4}, gen), k = filled({4, 4}, gen), v = filled({4, 3}, gen);
  AttentionMask mask{2, 4, std::vector<std::uint8_t>(8, 0)};
  mask.allowed[0 * 4 + 2] = 1;
  mask.allowed[1 * 4 + 2] = 1;
  const Tensor out = scaled_dot_attention(q, k, v, &mask);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.at(r, c), v.at(2, c), 1e-15);
}

TEST(Attention, ShapeMismatch) {
  EXPECT_THROW(scaled_dot_attention(Tensor({1, 2}), Tensor({2, 3}), Tensor({2, 2})), ShapeError);
  EXPECT_THROW(scaled_dot_attention(Tensor({1, 2}), Tensor({2, 2}), Tensor({3, 2})), ShapeError);
}

TEST(MultiHead, SingleHeadIdentityReducesToAttention) {
  std::mt19937_64 gen(3);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  const Tensor id({4, 4}, eye);
  const MultiHeadAttention mha({id}, {id}, {id}, id);
  const Tensor q = filled({3, 4}, gen), m = filled({5, 4}, gen);
  const Tensor a = mha.forward(q, m);
  const Tensor b = scaled_dot_attention(q, m, m);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(MultiHead, MatchesIndependentComposition) {
  std::mt19937_64 gen(4);
  Rng rng(4);
  const MultiHeadAttention mha(8, 4, rng);
  const Tensor q = filled({3, 8}, gen), m = filled({6, 8}, gen);
  const Tensor out = mha.forward(q, m);
  ASSERT_EQ(out.shape(), (Shape{3, 8}));

  // Reference: plain loops over heads, rows and columns, no op library.
  const std::size_t dh = 2;
  std::vector<double> concat(3 * 8, 0.0);
  for (std::size_t h = 0; h < 4; ++h) {
    auto project = [&](const Tensor& x, const Tensor& w) {
      std::vector<double> p(x.rows() * dh, 0.0);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < dh; ++c) {
          double s = 0.0;
          for (std::size_t k = 0; k < 8; ++k) s += x.at(r, k) * w.at(k, c);
          p[r * dh + c] = s;
        }
      return p;
    };
    const auto qh = project(q, mha.wq()[h]);
    const auto kh = project(m, mha.wk()[h]);
    const auto vh = project(m, mha.wv()[h]);
    for (std::size_t r = 0; r < 3; ++r) {
      std::vector<double> s(6);
      double mx = -1e300;
      for (std::size_t j = 0; j < 6; ++j) {
        double d = 0.0;
        for (std::size_t c = 0; c < dh; ++c) d += qh[r * dh + c] * kh[j * dh + c];
        s[j] = d / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& x : s) z += (x = std::exp(x - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < 6; ++j) acc += s[j] / z * vh[j * dh + c];
        concat[r * 8 + h * dh + c] = acc;
      }
    }
  }
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      double y = 0.0;
      for (std::size_t k = 0; k < 8; ++k) y += concat[r * 8 + k] * mha.wo().at(k, c);
      EXPECT_NEAR(out.at(r, c), y, 1e-13);
    }
}

TEST(MultiHead, KeyPermutationInvariance) {
  std::mt19937_64 gen(5);
  Rng rng(5);
  const MultiHeadAttention mha(8, 2, rng);
  const Tensor q = filled({4, 8}, gen), m = filled({6, 8}, gen);
  std::vector<Tensor> rows;
  for (std::size_t j : {3, 0, 5, 1, 4, 2}) rows.push_back(ops::slice_rows(m, j, 1));
  const Tensor a = mha.forward(q, m);
  const Tensor b = mha.forward(q, ops::concat_rows(rows));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-13);
}

TEST(PositionalEncoding, PositionZero) {
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(positional_encoding(0, i, 16), 0.0);
  for (std::size_t i = 8; i < 16; ++i) EXPECT_EQ(positional_encoding(0, i, 16), 1.0);
}

TEST(PositionalEncoding, FirstSineDimensionIsSinPos) {
  for (std::size_t pos = 0; pos < 100; ++pos) EXPECT_EQ(positional_encoding(pos, 0, 64), std::sin(static_cast<double>(pos)));
}

TEST(PositionalEncoding, BoundedAndRangeChecked) {
  const PositionalEncodingTable table(128, 32, PeExponent::kConventional);
  for (std::size_t p = 0; p < 128; ++p)
    for (std::size_t i = 0; i < 32; ++i) EXPECT_LE(std::abs(table.at(p, i)), 1.0);
  EXPECT_THROW(positional_encoding(0, 16, 16), ContractError);
  EXPECT_THROW(table.rows(129), ContractError);
}

TEST(FeedForward, PositionwiseUnderRowPermutation) {
  std::mt19937_64 gen(6);
  Rng rng(6);
  const BayesFeedForward ff(8, 12, rng, -5.0);
  const Tensor x = filled({5, 8}, gen);
  std::vector<Tensor> rows;
  const std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  for (std::size_t j : perm) rows.push_back(ops::slice_rows(x, j, 1));
  ForwardContext ctx;
  const Tensor a = ff.forward(x, ctx);
  const Tensor b = ff.forward(ops::concat_rows(rows), ctx);
  ASSERT_EQ(a.shape(), (Shape{5, 8}));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(b.at(r, c), a.at(perm[r], c));
}

TEST(FeedForward, TinySigmaIsPlainMlp) {
  std::mt19937_64 gen(7);
  Rng rng(7);
  const BayesFeedForward ff(6, 10, rng, -40.0);
  const Tensor x = filled({3, 6}, gen);
  Rng noise(1);
  KlAccumulator acc;
  ForwardContext ctx{ForwardMode::kSampled, &noise, &acc};
  const Tensor sampled = ff.forward(x, ctx);
  const auto& l = ff.bayes();
  const Tensor hidden = ops::relu(ops::add_row_bias(ops::matmul(x, ops::transpose(l.w_mu())), l.b_mu()));
  const Tensor mlp = ff.output().forward(hidden);
  for (std::size_t i = 0; i < mlp.size(); ++i) EXPECT_NEAR(sampled[i], mlp[i], 1e-12);
  EXPECT_EQ(acc.count(), 1u);
}

TEST(ConvFrontend, SubsamplesByFour) {
  Rng rng(8);
  const ConvFrontend fe(80, 32, 16, rng);
  EXPECT_EQ(fe.forward(Tensor({8, 80}, 0.1)).shape(), (Shape{2, 16}));
  EXPECT_EQ(fe.forward(Tensor({11, 80}, 0.1)).rows(), 2u);
  EXPECT_EQ(fe.forward(Tensor({12, 80}, 0.1)).rows(), 3u);
  EXPECT_THROW(fe.forward(Tensor({3, 80}, 0.1)), ContractError);
  EXPECT_THROW(fe.forward(Tensor({8, 79}, 0.1)), ShapeError);
}

TEST(ConvFrontend, ZeroInputGivesConstantFrames) {
  Rng rng(9);
  const ConvFrontend fe(16, 4, 8, rng);
  const Tensor y = fe.forward(Tensor({20, 16}, 0.0));
  for (std::size_t r = 1; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) EXPECT_EQ(y.at(r, c), y.at(0, c));
}

TEST(ConvFrontend, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(10);
  Rng rng(10);
  const ConvFrontend fe(8, 3, 4, rng);
  NamedParams params;
  fe.collect(params, "fe");
  const Tensor x = filled({9, 8}, gen, -2, 2);
  const Tensor w = filled({2, 4}, gen);
  const auto check = oracles::check_gradients([&] { return ops::sum(ops::mul(fe.forward(x), w)); }, params);
  EXPECT_LT(check.max_rel_error, 1e-4) << check.worst_at;
}

TEST(Model, DecoderIsCausal) {
  const Model model(tiny_config(), 11);
  std::mt19937_64 gen(11);
  ForwardContext ctx;
  const EncoderMemory mem = encode(model, filled({16, 8}, gen), ctx);
  const std::vector<int> prefix{kSos, 3, 4, 5, 6, 3};
  const Tensor base = decode_forward(model, mem, prefix, ctx);
  ASSERT_EQ(base.shape(), (Shape{6, 8}));
  for (std::size_t t = 1; t < prefix.size(); ++t) {
    auto changed = prefix;
    changed[t] = changed[t] == 4 ? 5 : 4;
    const Tensor out = decode_forward(model, mem, changed, ctx);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.at(r, c), base.at(r, c)) << "t=" << t << " r=" << r;
    bool differs = false;
    for (std::size_t c = 0; c < 8; ++c) differs |= out.at(t, c) != base.at(t, c);
    EXPECT_TRUE(differs);
  }
}

TEST(Model, CausalForEveryPrefixLength) {
  std::mt19937_64 gen(12);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Model model(tiny_config(), 100 + seed);
    ForwardContext ctx;
    const EncoderMemory mem = encode(model, filled({12, 8}, gen), ctx);
    std::vector<int> full{kSos};
    for (int i = 0; i < 7; ++i) full.push_back(3 + static_cast<int>(gen() % 4));
    const Tensor all = decode_forward(model, mem, full, ctx);
    for (std::size_t len = 1; len <= full.size(); ++len) {
      const std::vector<int> prefix(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(len));
      const Tensor part = decode_forward(model, mem, prefix, ctx);
      for (std::size_t i = 0; i < part.size(); ++i) EXPECT_EQ(part[i], all[i]);
    }
  }
}

TEST(Model, DecoderSeesTheFeatures) {
  const Model model(tiny_config(), 13);
  std::mt19937_64 gen(13);
  ForwardContext ctx;
  Tensor x = filled({16, 8}, gen);
  const std::vector<int> prefix{kSos, 3, 4};
  const Tensor a = decode_forward(model, encode(model, x, ctx), prefix, ctx);
  std::vector<double> v(x.data().begin(), x.data().end());
  v[5] += 0.5;
  const Tensor b = decode_forward(model, encode(model, Tensor({16, 8}, v), ctx), prefix, ctx);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Model, PrefixContract) {
  const Model model(tiny_config(), 14);
  std::mt19937_64 gen(14);
  ForwardContext ctx;
  const EncoderMemory mem = encode(model, filled({8, 8}, gen), ctx);
  EXPECT_THROW(decode_forward(model, mem, {}, ctx), ContractError);
  EXPECT_THROW(decode_forward(model, mem, {3, 4}, ctx), ContractError);
}

TEST(Model, KlIsLayerCountTimesPerLayerKl) {
  ModelConfig cfg = tiny_config();
  cfg.enc_layers = 2;
  cfg.dec_layers = 3;
  Model model(cfg, 15);
  auto layers = model.bayes_layers();
  ASSERT_EQ(layers.size(), 5u);
  // Give every Bayesian layer the parameters of the first one.
  NamedParams first;
  layers[0]->collect(first, "");
  for (std::size_t i = 1; i < layers.size(); ++i) {
    NamedParams p;
    layers[i]->collect(p, "");
    for (std::size_t j = 0; j < p.size(); ++j) {
      auto dst = p[j].second.mutable_data();
      const auto src = first[j].second.data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  const double per_layer = layers[0]->kl().item();
  std::mt19937_64 gen(15);
  Rng noise(1);
  KlAccumulator acc;
  ForwardContext ctx{ForwardMode::kSampled, &noise, &acc};
  const EncoderMemory mem = encode(model, filled({12, 8}, gen), ctx);
  decode_forward(model, mem, {kSos, 3}, ctx);
  EXPECT_EQ(acc.count(), 5u);
  EXPECT_NEAR(acc.total().item(), 5.0 * per_layer, 1e-9 * per_layer);
}

TEST(Model, EndToEndGradientCheck) {
  const auto report = oracles::gradient_model(17, 1);
  EXPECT_TRUE(report.passed) << report.line();
}

TEST(Model, ConfigValidation) {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.vocab_size = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  const ModelConfig full = ModelConfig::full_preset();
  EXPECT_EQ(full.d_model, 512u);
  EXPECT_EQ(full.d_ff, 2148u);
  EXPECT_EQ(full.n_heads, 8u);
  EXPECT_EQ(full.enc_layers, 12u);
  EXPECT_EQ(full.dec_layers, 6u);
  EXPECT_EQ(full.feature_dim, 80u);
  EXPECT_NO_THROW(full.validate());
}

}  // namespace
}  // namespace varformer
