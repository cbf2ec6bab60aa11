#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "varformer/tokens.hpp"
#include "varformer/transformer.hpp"

namespace varformer {

struct Hypothesis {
  std::vector<int> tokens;  // starts with the start-of-sequence id
  double log_prob = 0.0;
  bool finished = false;  // end-of-sequence emitted
};

/// Next-token log-probabilities for each prefix. Ids with -inf are never emitted.
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>& prefixes)>;

struct BeamOptions {
  std::size_t width = 10;
  std::size_t max_len = 64;
  int sos = kSos;
  int eos = kEos;
  /// Rank by log-probability per emitted token instead of the raw sum.
  bool length_normalize = false;
};

/// Appends the arg-max token (lowest id on ties) until end-of-sequence or
/// `max_len` emitted tokens.
Hypothesis greedy_decode(const StepScorer& scorer, const BeamOptions& options);

/// Length-synchronous beam search. Every step expands each unfinished
/// hypothesis by every token and keeps the best `width` of the pool, which also
/// holds the finished hypotheses. Ties go to the lexicographically smaller
/// sequence. Returns the best finished hypothesis, or the best unfinished one
/// when nothing finished within `max_len` steps.
Hypothesis beam_search(const StepScorer& scorer, const BeamOptions& options);

/// Tokens of a hypothesis without its start/end markers.
std::vector<int> transcript_ids(const Hypothesis& hyp, int sos = kSos, int eos = kEos);

/// Scorer backed by the decoder over one encoded utterance. Padding, start and
/// blank ids are excluded from the output distribution.
StepScorer model_scorer(const Model& model, const EncoderMemory& memory, ForwardContext& ctx);

}  // namespace varformer
