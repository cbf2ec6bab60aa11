#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "varformer/bayes_linear.hpp"
#include "varformer/tensor.hpp"

namespace varformer {

/// CTC negative log-likelihood of `targets` under per-frame log-probabilities
/// log_probs[T x C], blank = C - 1. Sums over all blank-extended alignments in
/// log space; the gradient comes from the forward-backward recursions.
///
/// Throws InfeasibleAlignmentError when the target (plus one blank between
/// each repeated pair) needs more than T frames. With `check_normalized`, each
/// row must satisfy logsumexp = 0 within 1e-9.
Tensor ctc_loss(const Tensor& log_probs, std::span<const int> targets, bool check_normalized = true);

/// Minimum number of frames a CTC alignment of `targets` needs.
std::size_t ctc_min_frames(std::span<const int> targets);

/// Mean over unmasked rows of -log softmax(logits)[target]. An empty `mask`
/// means every row counts; otherwise mask[r] != 0 marks a real row.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask = {});

struct LossWeights {
  double ctc = 0.3;
  double ce = 0.7;
};

/// weights.ctc * ctc + weights.ce * ce.
Tensor joint_ctc_ce(const Tensor& ctc, const Tensor& ce, LossWeights weights = {});

enum class MinibatchForm {
  /// 2^(n_e - e) / (2^n_e - e).
  kEpochShift,
  /// 2^(n_e - e) / (2^n_e - 1).
  kBlundell,
};

/// KL weight for (effective) epoch e of n_e. Throws ContractError if e > n_e,
/// or if the kBlundell denominator is zero.
double minibatch_weight(unsigned e, unsigned n_e, MinibatchForm form = MinibatchForm::kEpochShift);

/// Maps raw epoch counters to the KL schedule: both the epoch index and the
/// epoch total are integer-divided by `divisor`.
struct TrainSchedule {
  unsigned divisor = 10;
  MinibatchForm form = MinibatchForm::kEpochShift;

  unsigned effective_epoch(unsigned raw_epoch) const;
  double weight(unsigned raw_epoch, unsigned raw_total_epochs) const;
};

struct LossBreakdown {
  Tensor total;
  double kl_raw = 0.0;
  double kl_weight = 0.0;
  double kl_weighted = 0.0;
  double ctc = 0.0;
  double ce = 0.0;
  double total_value = 0.0;
};

/// kl_weight * KL + weights.ctc * ctc + weights.ce * ce, summed left to right.
/// Throws ContractError if `kl` has not seen a forward pass since its reset.
LossBreakdown total_loss(const KlAccumulator& kl, const Tensor& ctc, const Tensor& ce, double kl_weight,
                         LossWeights weights = {});

}  // namespace varformer
