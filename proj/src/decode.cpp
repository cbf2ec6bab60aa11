#include "varformer/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "varformer/errors.hpp"
#include "varformer/ops.hpp"

namespace varformer {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double rank_score(const Hypothesis& h, const BeamOptions& options) {
  if (!options.length_normalize) return h.log_prob;
  const std::size_t emitted = h.tokens.size() > 1 ? h.tokens.size() - 1 : 1;
  return h.log_prob / static_cast<double>(emitted);
}

bool better(const Hypothesis& a, const Hypothesis& b, const BeamOptions& options) {
  const double sa = rank_score(a, options), sb = rank_score(b, options);
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;
}

}  // namespace

Hypothesis greedy_decode(const StepScorer& scorer, const BeamOptions& options) {
  Hypothesis hyp{{options.sos}, 0.0, false};
  for (std::size_t step = 0; step < options.max_len; ++step) {
    const auto scores = scorer({hyp.tokens});
    const auto& lp = scores.at(0);
    int best = -1;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (lp[v] == kNegInf) continue;
      if (best < 0 || lp[v] > lp[static_cast<std::size_t>(best)]) best = static_cast<int>(v);
    }
    if (best < 0) break;
    hyp.tokens.push_back(best);
    hyp.log_prob += lp[static_cast<std::size_t>(best)];
    if (best == options.eos) {
      hyp.finished = true;
      break;
    }
  }
  return hyp;
}

Hypothesis beam_search(const StepScorer& scorer, const BeamOptions& options) {
  if (options.width == 0) throw ContractError("beam_search: width must be at least 1");
  std::vector<Hypothesis> beam{Hypothesis{{options.sos}, 0.0, false}};
  auto order = [&](const Hypothesis& a, const Hypothesis& b) { return better(a, b, options); };

  for (std::size_t step = 0; step < options.max_len; ++step) {
    std::vector<std::vector<int>> prefixes;
    std::vector<Hypothesis> pool;
    for (const auto& h : beam) {
      if (h.finished) {
        pool.push_back(h);
      } else {
        prefixes.push_back(h.tokens);
      }
    }
    if (prefixes.empty()) break;
    const auto scores = scorer(prefixes);
    std::size_t next = 0;
    for (const auto& h : beam) {
      if (h.finished) continue;
      const auto& lp = scores.at(next++);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (lp[v] == kNegInf) continue;
        Hypothesis ext = h;
        ext.tokens.push_back(static_cast<int>(v));
        ext.log_prob += lp[v];
        ext.finished = static_cast<int>(v) == options.eos;
        pool.push_back(std::move(ext));
      }
    }
    const std::size_t keep = std::min(options.width, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), order);
    pool.resize(keep);
    beam = std::move(pool);
  }

  const Hypothesis* best = nullptr;
  for (const auto& h : beam)
    if (h.finished && (best == nullptr || order(h, *best))) best = &h;
  if (best == nullptr) {
    for (const auto& h : beam)
      if (best == nullptr || order(h, *best)) best = &h;
  }
  return *best;
}

std::vector<int> transcript_ids(const Hypothesis& hyp, int sos, int eos) {
  std::vector<int> out;
  for (int t : hyp.tokens)
    if (t != sos && t != eos) out.push_back(t);
  return out;
}

StepScorer model_scorer(const Model& model, const EncoderMemory& memory, ForwardContext& ctx) {
  const int blank = static_cast<int>(model.config().vocab_size) - 1;
  return [&model, memory, &ctx, blank](const std::vector<std::vector<int>>& prefixes) {
    EncoderMemory repeated;
    if (prefixes.size() == 1) {
      repeated = memory;
    } else {
      std::vector<Tensor> copies(prefixes.size(), memory.memory);
      repeated.memory = ops::concat_rows(copies);
      repeated.lengths.assign(prefixes.size(), memory.lengths.at(0));
    }
    const Tensor logits = model.decode(repeated, prefixes, ctx);
    const std::size_t vocab = logits.cols();
    const auto offs = segment_offsets([&] {
      std::vector<std::size_t> lens;
      for (const auto& p : prefixes) lens.push_back(p.size());
      return lens;
    }());
    std::vector<std::vector<double>> out;
    out.reserve(prefixes.size());
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      const std::size_t row = offs[i] + prefixes[i].size() - 1;
      std::vector<double> lp(vocab);
      double mx = kNegInf;
      for (std::size_t v = 0; v < vocab; ++v) {
        const int id = static_cast<int>(v);
        const bool banned = id == kPad || id == kSos || id == blank;
        lp[v] = banned ? kNegInf : logits.at(row, v);
        mx = std::max(mx, lp[v]);
      }
      double s = 0.0;
      for (double x : lp)
        if (x != kNegInf) s += std::exp(x - mx);
      const double lse = mx + std::log(s);
      for (double& x : lp)
        if (x != kNegInf) x -= lse;
      out.push_back(std::move(lp));
    }
    return out;
  };
}

}  // namespace varformer
