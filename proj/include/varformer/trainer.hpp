#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "varformer/config.hpp"
#include "varformer/data.hpp"
#include "varformer/losses.hpp"
#include "varformer/transformer.hpp"

namespace varformer {

/// Teacher-forced loss of one batch: CTC and decoder cross-entropy (on
/// [sos] + y predicting y + [eos]) each averaged over utterances, combined with
/// the KL that ctx.kl gathers during this forward pass.
LossBreakdown compute_batch_loss(const Model& model, const Batch& batch, ForwardContext& ctx, double kl_weight,
                                 LossWeights weights = {});

/// Adam or plain SGD over a fixed parameter list.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, NamedParams params);

  void zero_grad();
  void step();

  OptimizerKind kind() const { return kind_; }
  std::uint64_t steps() const { return t_; }
  const NamedParams& params() const { return params_; }
  std::vector<std::vector<double>>& first_moment() { return m_; }
  std::vector<std::vector<double>>& second_moment() { return v_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  NamedParams params_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

struct StepRecord {
  std::uint64_t step = 0;
  unsigned epoch = 0;
  double kl_raw = 0.0;
  double kl_weight = 0.0;
  double kl_weighted = 0.0;
  double ctc = 0.0;
  double ce = 0.0;
  double total = 0.0;

  nlohmann::ordered_json to_json() const;
  static StepRecord from_json(const nlohmann::json& j);
};

struct EpochRecord {
  unsigned epoch = 0;
  double kl_weight = 0.0;
  std::size_t steps = 0;
  double mean_kl_raw = 0.0;
  double mean_ctc = 0.0;
  double mean_ce = 0.0;
  double mean_total = 0.0;

  nlohmann::ordered_json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

/// Owns the model, optimizer and sampling stream of one training run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, Vocab vocab);

  const TrainConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  Optimizer& optimizer() { return optimizer_; }
  const Optimizer& optimizer() const { return optimizer_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }

  /// Epochs completed so far; the next call to train_epoch trains this epoch index.
  unsigned epoch() const { return epoch_; }
  std::uint64_t step() const { return step_; }

  /// One optimizer update. Throws NumericalError naming the first non-finite
  /// tensor when the forward pass produces NaN or Inf.
  StepRecord train_step(const Batch& batch);
  /// Trains the next epoch on `data` in an order derived from (seed, epoch).
  EpochRecord train_epoch(const Dataset& data, const std::function<void(const StepRecord&)>& on_step = {});

  /// "BSCK", u32 version, u32 block count, named float64 blocks for every
  /// parameter and optimizer moment, then a length-prefixed JSON trailer with
  /// counters, rng state, config and vocabulary.
  void save_checkpoint(const std::filesystem::path& path) const;
  std::string checkpoint_bytes() const;
  static Trainer load_checkpoint(const std::filesystem::path& path);

 private:
  TrainConfig cfg_;
  Vocab vocab_;
  Model model_;
  Optimizer optimizer_;
  Rng rng_;
  unsigned epoch_ = 0;
  std::uint64_t step_ = 0;
};

struct EvalOptions {
  std::size_t beam_width = 10;
  std::size_t max_len = 32;
  bool length_normalize = false;
  /// Sample the Bayesian layers instead of using posterior means.
  bool sampled = false;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
};

struct EvalResult {
  std::size_t samples = 0;
  /// Mean joint CTC + CE loss (no KL term).
  double loss = 0.0;
  double wer = 0.0;
  double cer = 0.0;
  /// Mean log-probability of the returned hypotheses.
  double mean_log_prob = 0.0;
  std::vector<std::string> references;
  std::vector<std::string> hypotheses;

  nlohmann::ordered_json to_json(bool with_transcripts = false) const;
};

/// Decodes every utterance with beam search. Throws ContractError when the
/// vocabulary or feature dimension does not match the model.
EvalResult evaluate(const Model& model, const Vocab& vocab, const Dataset& data, const EvalOptions& options);
EvalOptions eval_options(const TrainConfig& cfg);

/// Training and held-out sets for a config: read from files when given,
/// otherwise synthesized from independent seeds.
Dataset training_data(const TrainConfig& cfg);
Dataset eval_data(const TrainConfig& cfg);
Vocab run_vocab(const TrainConfig& cfg);

struct RunSummary {
  std::vector<EpochRecord> epochs;
  std::optional<EvalResult> eval;
  double seconds = 0.0;
};

struct RunOptions {
  /// Resume from this checkpoint instead of starting fresh.
  std::optional<std::filesystem::path> resume;
  /// Stop after this many total epochs (simulates an interruption).
  std::optional<unsigned> stop_after;
  bool evaluate_at_end = true;
  /// Progress lines on stdout.
  bool verbose = false;
};

/// Writes config.json, vocab.txt, steps.jsonl, steps.csv, epochs.jsonl,
/// checkpoint.bsck and (optionally) eval.json into cfg.out_dir.
RunSummary run_training(const TrainConfig& cfg, const RunOptions& options = {});

}  // namespace varformer
