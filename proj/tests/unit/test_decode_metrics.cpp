#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "varformer/decode.hpp"
#include "varformer/errors.hpp"
#include "varformer/metrics.hpp"

namespace varformer {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Scorer over ids {pad, sos, eos, 3, 4, 5} with fixed per-step tables.
StepScorer table_scorer(std::vector<std::vector<double>> probs_by_step) {
  return [probs_by_step](const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      const auto& probs = probs_by_step.at(std::min(p.size() - 1, probs_by_step.size() - 1));
      std::vector<double> lp(probs.size());
      for (std::size_t i = 0; i < probs.size(); ++i) lp[i] = probs[i] > 0 ? std::log(probs[i]) : kNegInf;
      out.push_back(lp);
    }
    return out;
  };
}

TEST(Greedy, StopsImmediatelyAtEos) {
  const auto scorer = table_scorer({{0, 0, 0.9, 0.05, 0.05, 0}});
  BeamOptions bo;
  const Hypothesis h = greedy_decode(scorer, bo);
  EXPECT_TRUE(h.finished);
  EXPECT_TRUE(transcript_ids(h).empty());
}

TEST(Greedy, TruncatesAtMaxLen) {
  const auto scorer = table_scorer({{0, 0, 0.1, 0.9, 0, 0}});
  BeamOptions bo;
  bo.max_len = 4;
  const Hypothesis h = greedy_decode(scorer, bo);
  EXPECT_FALSE(h.finished);
  EXPECT_EQ(transcript_ids(h), (std::vector<int>{3, 3, 3, 3}));
}

TEST(Beam, WidthOneIsGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto scorer = oracles::toy_scorer(seed, 3 + seed % 4);
    BeamOptions bo;
    bo.sos = 0;
    bo.eos = 1;
    bo.max_len = 5;
    bo.width = 1;
    const Hypothesis g = greedy_decode(scorer, bo);
    const Hypothesis b = beam_search(scorer, bo);
    EXPECT_EQ(g.tokens, b.tokens);
    EXPECT_EQ(g.log_prob, b.log_prob);
    EXPECT_EQ(greedy_decode(scorer, bo).tokens, g.tokens);
  }
}

TEST(Beam, FindsSequenceGreedyMisses) {
  // Step 1: token 3 (0.6) or 4 (0.4). After 3 everything is spread thin; after 4, eos is certain.
  const StepScorer scorer = [](const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::vector<double> probs(6, 0.0);
      if (p.size() == 1) {
        probs[3] = 0.6;
        probs[4] = 0.4;
      } else if (p.back() == 4) {
        probs[kEos] = 1.0;
      } else {
        probs[kEos] = 0.25;
        probs[3] = 0.25;
        probs[4] = 0.25;
        probs[5] = 0.25;
      }
      std::vector<double> lp;
      for (double q : probs) lp.push_back(q > 0 ? std::log(q) : kNegInf);
      out.push_back(lp);
    }
    return out;
  };
  BeamOptions bo;
  bo.max_len = 6;
  bo.width = 2;
  const Hypothesis b = beam_search(scorer, bo);
  EXPECT_EQ(transcript_ids(b), (std::vector<int>{4}));
  EXPECT_NEAR(b.log_prob, std::log(0.4), 1e-15);
  EXPECT_GE(b.log_prob, greedy_decode(scorer, bo).log_prob);
}

TEST(Beam, MatchesExhaustiveSearch) {
  const auto report = oracles::beam_exhaustive(3, 50);
  EXPECT_TRUE(report.passed) << report.line();
}

TEST(Beam, DominatesNarrowerBeamsAndGreedy) {
  const auto report = oracles::beam_dominance(4, 50, 8);
  EXPECT_TRUE(report.passed) << report.line();
}

TEST(Beam, LogProbNeverIncreasesAlongHypothesis) {
  const auto scorer = oracles::toy_scorer(9, 5);
  BeamOptions bo;
  bo.sos = 0;
  bo.eos = 1;
  bo.max_len = 3;
  for (std::size_t w = 1; w <= 6; ++w) {
    bo.width = w;
    const Hypothesis h = beam_search(scorer, bo);
    double lp = 0.0;
    for (std::size_t i = 1; i < h.tokens.size(); ++i) {
      const std::vector<int> prefix(h.tokens.begin(), h.tokens.begin() + static_cast<std::ptrdiff_t>(i));
      const double step = scorer({prefix})[0][static_cast<std::size_t>(h.tokens[i])];
      EXPECT_LE(step, 0.0);
      lp += step;
    }
    EXPECT_NEAR(lp, h.log_prob, 1e-12);
  }
}

TEST(Beam, NeverEmitsBannedIds) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto scorer = oracles::toy_scorer(seed, 6);
    BeamOptions bo;
    bo.sos = 0;
    bo.eos = 1;
    bo.max_len = 4;
    bo.width = 4;
    const Hypothesis h = beam_search(scorer, bo);
    for (std::size_t i = 1; i < h.tokens.size(); ++i) EXPECT_NE(h.tokens[i], 0);
  }
  EXPECT_THROW(beam_search(oracles::toy_scorer(1, 4), BeamOptions{0, 3, 0, 1, false}), ContractError);
}

TEST(EditDistance, Examples) {
  const std::string a = "kitten", b = "sitting";
  EXPECT_EQ(edit_distance<char>(std::span<const char>(a), std::span<const char>(b)), 3u);
  EXPECT_EQ(edit_distance(std::vector<int>{1, 2, 3}, std::vector<int>{1, 2, 3}), 0u);
  EXPECT_EQ(edit_distance(std::vector<int>{}, std::vector<int>{4, 5, 6, 7}), 4u);
}

TEST(EditDistance, IsAMetric) {
  std::mt19937_64 gen(21);
  auto random_seq = [&] {
    std::vector<int> s(gen() % 8);
    for (int& x : s) x = static_cast<int>(gen() % 4);
    return s;
  };
  for (int trial = 0; trial < 500; ++trial) {
    const auto a = random_seq(), b = random_seq(), c = random_seq();
    EXPECT_EQ(edit_distance(a, b), edit_distance(b, a));
    EXPECT_EQ(edit_distance(a, b) == 0, a == b);
    EXPECT_LE(edit_distance(a, c), edit_distance(a, b) + edit_distance(b, c));
  }
}

TEST(ErrorRates, Examples) {
  EXPECT_EQ(wer({"a b c d"}, {"a b c d"}), 0.0);
  EXPECT_EQ(wer({"a b c d"}, {"a x c d"}), 0.25);
  EXPECT_EQ(wer({"a b c", "d e f g h"}, {"a b x", "d x f g"}), 3.0 / 8.0);
  EXPECT_EQ(cer({"abc"}, {"abd"}), 1.0 / 3.0);
  EXPECT_THROW(wer({""}, {"a"}), ContractError);
  EXPECT_THROW(cer({"a"}, {"a", "b"}), ContractError);
}

}  // namespace
}  // namespace varformer
