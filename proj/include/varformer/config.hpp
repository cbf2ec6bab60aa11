#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "varformer/bayes_linear.hpp"
#include "varformer/data.hpp"
#include "varformer/losses.hpp"
#include "varformer/transformer.hpp"

namespace varformer {

enum class OptimizerKind { kAdam, kSgd };

/// Everything a training run needs. Serialized as JSON; missing keys keep
/// their defaults and unknown keys are rejected.
struct TrainConfig {
  ModelConfig model;
  SynthConfig synth;             // used when no data files are given
  std::size_t eval_samples = 100;

  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;

  unsigned epochs = 30;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;

  LossWeights loss_weights;
  KlMode kl_mode = KlMode::kStandard;
  TrainSchedule schedule;

  std::size_t beam_width = 10;
  std::size_t max_decode_len = 32;
  bool sampled_eval = false;
  bool length_normalize = false;

  std::string train_data;  // feature files; empty = synthesize
  std::string eval_data;
  std::string vocab;       // vocabulary file; empty = character vocabulary
  std::string out_dir = "run";

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
/// Overlays `j` onto `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json load_config_json(const std::filesystem::path& path);
TrainConfig load_train_config(const std::filesystem::path& path);

}  // namespace varformer
