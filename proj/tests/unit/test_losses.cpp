#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "varformer/errors.hpp"
#include "varformer/losses.hpp"
#include "varformer/ops.hpp"
#include "varformer/trainer.hpp"

namespace varformer {
namespace {

Tensor random_log_probs(std::size_t t, std::size_t c, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<double> v(t * c);
  for (double& x : v) x = u(gen);
  return ops::log_softmax(Tensor({t, c}, v));
}

TEST(Ctc, SingleFrame) {
  std::mt19937_64 gen(1);
  const Tensor lp = random_log_probs(1, 3, gen);
  EXPECT_NEAR(ctc_loss(lp, std::vector<int>{1}).item(), -lp.at(0, 1), 1e-14);
}

TEST(Ctc, TwoFramesThreeAlignments) {
  std::mt19937_64 gen(2);
  const Tensor lp = random_log_probs(2, 3, gen);
  auto p = [&](std::size_t t, std::size_t c) { return std::exp(lp.at(t, c)); };
  const double blank = 2;
  const double expected = -std::log(p(0, 0) * p(1, 0) + p(0, 0) * p(1, blank) + p(0, blank) * p(1, 0));
  EXPECT_NEAR(ctc_loss(lp, std::vector<int>{0}).item(), expected, 1e-14);
}

TEST(Ctc, InfeasibleTarget) {
  std::mt19937_64 gen(3);
  const Tensor lp = random_log_probs(3, 3, gen);
  EXPECT_THROW(ctc_loss(lp, std::vector<int>{0, 0, 0}), InfeasibleAlignmentError);
  EXPECT_NO_THROW(ctc_loss(lp, std::vector<int>{0, 0}));
  EXPECT_THROW(ctc_loss(lp, std::vector<int>{0, 1, 0, 1}), InfeasibleAlignmentError);
  EXPECT_NO_THROW(ctc_loss(lp, std::vector<int>{0, 1, 0}));
  EXPECT_EQ(ctc_min_frames(std::vector<int>{0, 0}), 3u);
}

TEST(Ctc, MatchesPathEnumeration) {
  const auto report = oracles::ctc_exhaustive(5, 200);
  EXPECT_TRUE(report.passed) << report.line();
}

TEST(Ctc, TargetOrderMatters) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor lp = random_log_probs(6, 4, gen);
    const double ab = ctc_loss(lp, std::vector<int>{0, 1}).item();
    const double ba = ctc_loss(lp, std::vector<int>{1, 0}).item();
    EXPECT_NE(ab, ba);
  }
}

TEST(Ctc, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(6);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 2 + trial % 5;
    std::vector<double> v(t * 4);
    for (double& x : v) x = u(gen);
    const Tensor logits = Tensor::parameter({t, 4}, v);
    const std::vector<int> target{static_cast<int>(trial % 3), static_cast<int>((trial + 1) % 3)};
    const auto check = oracles::check_gradients([&] { return ctc_loss(ops::log_softmax(logits), target); },
                                                 {{"logits", logits}});
    EXPECT_LT(check.max_rel_error, 1e-4) << check.worst_at;
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  EXPECT_NEAR(cross_entropy(Tensor({3, 7}, 0.4), std::vector<int>{0, 3, 6}).item(), std::log(7.0), 1e-15);
}

TEST(CrossEntropy, SaturatedAndHandCase) {
  EXPECT_LT(cross_entropy(Tensor({1, 2}, {0.0, 60.0}), std::vector<int>{1}).item(), 1e-20);
  EXPECT_NEAR(cross_entropy(Tensor({1, 2}, {0.0, std::log(3.0)}), std::vector<int>{1}).item(), -std::log(0.75), 1e-15);
  EXPECT_NEAR(-std::log(0.75), 0.28768, 1e-5);
}

TEST(CrossEntropy, MaskedRowsAreIgnored) {
  const Tensor logits({3, 2}, {0.0, std::log(3.0), 5.0, -5.0, 1.0, 1.0});
  const std::vector<int> targets{1, 1, 0};
  const std::vector<std::uint8_t> mask{1, 0, 1};
  EXPECT_NEAR(cross_entropy(logits, targets, mask).item(), (-std::log(0.75) + std::log(2.0)) / 2.0, 1e-15);
  EXPECT_THROW(cross_entropy(logits, targets, std::vector<std::uint8_t>{0, 0, 0}), ContractError);
}

TEST(JointLoss, DefaultWeights) {
  EXPECT_DOUBLE_EQ(joint_ctc_ce(Tensor::scalar(2.0), Tensor::scalar(1.0)).item(), 1.3);
  EXPECT_EQ(joint_ctc_ce(Tensor::scalar(0.0), Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_DOUBLE_EQ(joint_ctc_ce(Tensor::scalar(2.0), Tensor::scalar(1.0), {0.5, 0.5}).item(), 1.5);
}

TEST(MinibatchWeight, DirectValues) {
  for (unsigned n = 0; n <= 20; ++n) EXPECT_EQ(minibatch_weight(0, n), 1.0);
  EXPECT_EQ(minibatch_weight(10, 10), 1.0 / 1014.0);
  EXPECT_EQ(minibatch_weight(1, 10), 512.0 / 1023.0);
  EXPECT_NEAR(minibatch_weight(1, 10), 0.50049, 1e-5);
  EXPECT_THROW(minibatch_weight(3, 2), ContractError);
}

TEST(MinibatchWeight, ExhaustiveAgainstDirectFormula) {
  for (unsigned n = 0; n <= 20; ++n) {
    for (unsigned e = 0; e <= n; ++e) {
      const double direct = std::pow(2.0, static_cast<double>(n) - e) / (std::pow(2.0, n) - e);
      EXPECT_EQ(minibatch_weight(e, n), direct) << e << "/" << n;
      EXPECT_GT(minibatch_weight(e, n), 0.0);
      EXPECT_LE(minibatch_weight(e, n), 1.0);
      if (e > 0) {
        EXPECT_LE(minibatch_weight(e, n), minibatch_weight(e - 1, n));
      }
    }
  }
}

TEST(MinibatchWeight, BlundellForm) {
  EXPECT_EQ(minibatch_weight(1, 10, MinibatchForm::kBlundell), 512.0 / 1023.0);
  EXPECT_EQ(minibatch_weight(10, 10, MinibatchForm::kBlundell), 1.0 / 1023.0);
  EXPECT_THROW(minibatch_weight(0, 0, MinibatchForm::kBlundell), ContractError);
}

TEST(Schedule, DividesEpochAndTotal) {
  const TrainSchedule s;
  EXPECT_EQ(s.effective_epoch(0), 0u);
  EXPECT_EQ(s.effective_epoch(9), 0u);
  EXPECT_EQ(s.effective_epoch(10), 1u);
  EXPECT_EQ(s.weight(0, 30), 1.0);
  EXPECT_EQ(s.weight(15, 30), minibatch_weight(1, 3));
  EXPECT_EQ(s.weight(29, 30), minibatch_weight(2, 3));
}

TEST(TotalLoss, Composition) {
  KlAccumulator acc;
  acc.add(Tensor::scalar(4.0));
  const auto l = total_loss(acc, Tensor::scalar(2.0), Tensor::scalar(1.0), 1.0);
  EXPECT_DOUBLE_EQ(l.total_value, 5.3);
  EXPECT_EQ(l.total.item(), l.total_value);
  EXPECT_EQ(l.kl_weighted, 4.0);

  KlAccumulator zero;
  zero.add(Tensor::scalar(0.0));
  EXPECT_EQ(total_loss(zero, Tensor::scalar(2.0), Tensor::scalar(1.0), 0.7).total_value,
            joint_ctc_ce(Tensor::scalar(2.0), Tensor::scalar(1.0)).item());

  const double w = minibatch_weight(10, 10);
  const auto late = total_loss(acc, Tensor::scalar(2.0), Tensor::scalar(1.0), w);
  EXPECT_EQ(late.kl_weighted, w * 4.0);
  EXPECT_NEAR(w, 9.86e-4, 1e-6);
}

TEST(TotalLoss, StaleAccumulator) {
  KlAccumulator acc;
  EXPECT_THROW(total_loss(acc, Tensor::scalar(1.0), Tensor::scalar(1.0), 1.0), ContractError);
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.d_ff = 16;
  cfg.n_heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.feature_dim = 8;
  cfg.conv_channels = 4;
  cfg.rho_init = -2.0;
  return cfg;
}

Dataset small_data(std::size_t n, std::uint64_t seed) {
  SynthConfig s;
  s.feature_dim = 8;
  s.samples = n;
  s.max_tokens = 4;
  return generate_synthetic(s, seed);
}

TEST(TotalLoss, BayesianLayersGetGradientsFromKlAndData) {
  Model model(small_model(), 3);
  const Dataset data = small_data(3, 3);
  const std::vector<std::size_t> ids{0, 1, 2};
  const Batch batch = make_batch(data, ids);
  // Bias means start at the prior mean, where their KL gradient vanishes.
  for (auto* layer : model.bayes_layers()) {
    auto b = layer->b_mu();
    for (double& v : b.mutable_data()) v = 0.05;
  }
  auto grads_for = [&](double kl_weight, LossWeights weights) {
    for (const auto& [name, p] : model.parameters()) p.zero_grad();
    Rng rng(11);
    KlAccumulator acc;
    ForwardContext ctx{ForwardMode::kSampled, &rng, &acc};
    Tape tape;
    LossBreakdown loss;
    {
      TapeScope scope(tape);
      loss = compute_batch_loss(model, batch, ctx, kl_weight, weights);
    }
    tape.backward(loss.total);
  };
  auto check_all_nonzero = [&](const char* what) {
    for (auto* layer : model.bayes_layers()) {
      NamedParams p;
      layer->collect(p, "");
      for (const auto& [name, t] : p) {
        double norm = 0.0;
        for (double g : t.grad()) norm += std::abs(g);
        EXPECT_GT(norm, 0.0) << what << " " << name;
      }
    }
  };
  grads_for(1.0, {0.0, 0.0});
  check_all_nonzero("kl");
  grads_for(0.0, {0.3, 0.7});
  check_all_nonzero("data");
}

TEST(BatchLoss, PaddingDoesNotChangeLoss) {
  const Model model(small_model(), 4);
  const Dataset data = small_data(4, 4);
  const std::vector<std::size_t> ids{0, 1, 2, 3};
  auto loss_of = [&](const Batch& b) {
    KlAccumulator acc;
    acc.add(Tensor::scalar(0.0));
    ForwardContext ctx{ForwardMode::kDeterministic, nullptr, &acc};
    return compute_batch_loss(model, b, ctx, 0.0);
  };
  const auto tight = loss_of(make_batch(data, ids));
  const Batch padded_batch = make_batch(data, ids, 200, 20);
  EXPECT_EQ(padded_batch.max_frames, 200u);
  const auto padded = loss_of(padded_batch);
  EXPECT_NEAR(tight.ctc, padded.ctc, 1e-9);
  EXPECT_NEAR(tight.ce, padded.ce, 1e-9);
}

TEST(BatchLoss, MeanOverUtterances) {
  const Model model(small_model(), 5);
  const Dataset data = small_data(3, 5);
  auto loss_of = [&](std::vector<std::size_t> ids) {
    KlAccumulator acc;
    acc.add(Tensor::scalar(0.0));
    ForwardContext ctx{ForwardMode::kDeterministic, nullptr, &acc};
    return compute_batch_loss(model, make_batch(data, ids), ctx, 0.0);
  };
  double ctc = 0.0, ce = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto l = loss_of({i});
    ctc += l.ctc;
    ce += l.ce;
  }
  const auto all = loss_of({0, 1, 2});
  EXPECT_NEAR(all.ctc, ctc / 3.0, 1e-12);
  EXPECT_NEAR(all.ce, ce / 3.0, 1e-12);
}

}  // namespace
}  // namespace varformer
