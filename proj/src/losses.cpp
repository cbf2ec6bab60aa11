#include "varformer/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "varformer/errors.hpp"
#include "varformer/ops.hpp"

namespace varformer {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::size_t ctc_min_frames(std::span<const int> targets) {
  std::size_t n = targets.size();
  for (std::size_t i = 1; i < targets.size(); ++i)
    if (targets[i] == targets[i - 1]) ++n;
  return n;
}

Tensor ctc_loss(const Tensor& log_probs, std::span<const int> targets, bool check_normalized) {
  if (log_probs.rank() != 2 || log_probs.cols() < 2) {
    throw ShapeError("ctc_loss: log-probabilities must be [T x C] with C >= 2, got " + shape_str(log_probs.shape()));
  }
  const std::size_t frames = log_probs.rows(), classes = log_probs.cols();
  const int blank = static_cast<int>(classes) - 1;
  for (int t : targets) {
    if (t < 0 || t >= blank) {
      throw ContractError("ctc_loss: target id " + std::to_string(t) + " outside [0, " + std::to_string(blank) + ")");
    }
  }
  if (ctc_min_frames(targets) > frames) {
    throw InfeasibleAlignmentError("ctc_loss: target of length " + std::to_string(targets.size()) + " needs " +
                                   std::to_string(ctc_min_frames(targets)) + " frames, only " +
                                   std::to_string(frames) + " available");
  }
  auto lp = log_probs.data();
  if (check_normalized) {
    for (std::size_t t = 0; t < frames; ++t) {
      double lse = kNegInf;
      for (std::size_t c = 0; c < classes; ++c) lse = log_add(lse, lp[t * classes + c]);
      if (std::abs(lse) > 1e-9) {
        throw ContractError("ctc_loss: row " + std::to_string(t) + " is not a normalized log-distribution");
      }
    }
  }

  // Blank-extended label sequence: blank, l1, blank, l2, ..., blank.
  const std::size_t states = 2 * targets.size() + 1;
  std::vector<int> ext(states, blank);
  for (std::size_t i = 0; i < targets.size(); ++i) ext[2 * i + 1] = targets[i];
  auto skip_allowed = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };
  auto emit = [&](std::size_t t, std::size_t s) { return lp[t * classes + static_cast<std::size_t>(ext[s])]; };

  std::vector<double> alpha(frames * states, kNegInf);
  alpha[0] = emit(0, 0);
  if (states > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      double a = alpha[(t - 1) * states + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * states + s - 1]);
      if (skip_allowed(s)) a = log_add(a, alpha[(t - 1) * states + s - 2]);
      alpha[t * states + s] = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  double log_p = alpha[(frames - 1) * states + states - 1];
  if (states > 1) log_p = log_add(log_p, alpha[(frames - 1) * states + states - 2]);
  // NaN inputs propagate so the caller can name the tensor that produced them.
  if (std::isnan(log_p)) return Tensor::scalar(log_p);
  if (!std::isfinite(log_p)) throw InfeasibleAlignmentError("ctc_loss: target has zero probability");

  Tensor out = Tensor::scalar(-log_p);
  if (active_tape() != nullptr && log_probs.requires_grad()) {
    // beta[t, s]: log-probability of finishing from state s at frame t, excluding frame t's emission.
    std::vector<double> beta(frames * states, kNegInf);
    beta[(frames - 1) * states + states - 1] = 0.0;
    if (states > 1) beta[(frames - 1) * states + states - 2] = 0.0;
    for (std::size_t t = frames - 1; t-- > 0;) {
      for (std::size_t s = 0; s < states; ++s) {
        double b = beta[(t + 1) * states + s] + emit(t + 1, s);
        if (s + 1 < states) b = log_add(b, beta[(t + 1) * states + s + 1] + emit(t + 1, s + 1));
        if (s + 2 < states && skip_allowed(s + 2)) b = log_add(b, beta[(t + 1) * states + s + 2] + emit(t + 1, s + 2));
        beta[t * states + s] = b;
      }
    }
    out.set_requires_grad(true);
    Tensor input = log_probs;
    active_tape()->record("ctc_loss", {log_probs}, out,
                          [input, out, frames, classes, states, ext, log_p, alpha = std::move(alpha),
                           beta = std::move(beta)]() mutable {
                            const double g = out.grad()[0];
                            auto gx = input.grad_mut();
                            for (std::size_t t = 0; t < frames; ++t)
                              for (std::size_t s = 0; s < states; ++s) {
                                const double occ = alpha[t * states + s] + beta[t * states + s];
                                if (occ == kNegInf) continue;
                                gx[t * classes + static_cast<std::size_t>(ext[s])] -= g * std::exp(occ - log_p);
                              }
                          });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be a matrix, got " + shape_str(logits.shape()));
  const std::size_t rows = logits.rows();
  if (targets.size() != rows || (!mask.empty() && mask.size() != rows)) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for logits " + shape_str(logits.shape()));
  }
  std::vector<double> weights(rows, 1.0);
  std::size_t count = rows;
  if (!mask.empty()) {
    count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      weights[r] = mask[r] ? 1.0 : 0.0;
      count += mask[r] ? 1 : 0;
    }
  }
  if (count == 0) throw ContractError("cross_entropy: every position is masked");
  const Tensor picked = ops::pick(ops::log_softmax(logits), targets);
  const Tensor kept = ops::mul(picked, Tensor({rows}, std::move(weights)));
  return ops::scale(ops::sum(kept), -1.0 / static_cast<double>(count));
}

Tensor joint_ctc_ce(const Tensor& ctc, const Tensor& ce, LossWeights weights) {
  return ops::add(ops::scale(ctc, weights.ctc), ops::scale(ce, weights.ce));
}

double minibatch_weight(unsigned e, unsigned n_e, MinibatchForm form) {
  if (e > n_e) {
    throw ContractError("minibatch_weight: epoch " + std::to_string(e) + " exceeds total " + std::to_string(n_e));
  }
  if (n_e > 1000) throw ContractError("minibatch_weight: total epochs too large for 2^n_e");
  const double numerator = std::ldexp(1.0, static_cast<int>(n_e - e));
  const double full = std::ldexp(1.0, static_cast<int>(n_e));
  const double denominator = form == MinibatchForm::kEpochShift ? full - static_cast<double>(e) : full - 1.0;
  if (denominator == 0.0) throw ContractError("minibatch_weight: zero denominator for n_e = 0");
  return numerator / denominator;
}

unsigned TrainSchedule::effective_epoch(unsigned raw_epoch) const {
  if (divisor == 0) throw ContractError("schedule divisor must be at least 1");
  return raw_epoch / divisor;
}

double TrainSchedule::weight(unsigned raw_epoch, unsigned raw_total_epochs) const {
  return minibatch_weight(effective_epoch(raw_epoch), effective_epoch(raw_total_epochs), form);
}

LossBreakdown total_loss(const KlAccumulator& kl, const Tensor& ctc, const Tensor& ce, double kl_weight,
                         LossWeights weights) {
  const Tensor kl_sum = kl.total();
  LossBreakdown out;
  const Tensor weighted = ops::scale(kl_sum, kl_weight);
  out.total = ops::add(ops::add(weighted, ops::scale(ctc, weights.ctc)), ops::scale(ce, weights.ce));
  out.kl_raw = kl_sum.item();
  out.kl_weight = kl_weight;
  out.kl_weighted = weighted.item();
  out.ctc = ctc.item();
  out.ce = ce.item();
  out.total_value = out.total.item();
  return out;
}

}  // namespace varformer
