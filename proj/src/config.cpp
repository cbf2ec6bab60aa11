#include "varformer/config.hpp"

#include <fstream>
#include <set>

#include "varformer/errors.hpp"

namespace varformer {

using nlohmann::json;

namespace {

template <class E>
struct EnumNames;

template <>
struct EnumNames<KlMode> {
  static constexpr std::pair<KlMode, const char*> values[] = {{KlMode::kStandard, "standard"},
                                                              {KlMode::kVerbatim, "verbatim"}};
};
template <>
struct EnumNames<PeExponent> {
  static constexpr std::pair<PeExponent, const char*> values[] = {{PeExponent::kConventional, "conventional"},
                                                                  {PeExponent::kVerbatim, "verbatim"}};
};
template <>
struct EnumNames<MinibatchForm> {
  static constexpr std::pair<MinibatchForm, const char*> values[] = {{MinibatchForm::kEpochShift, "epoch-shift"},
                                                                     {MinibatchForm::kBlundell, "blundell"}};
};
template <>
struct EnumNames<OptimizerKind> {
  static constexpr std::pair<OptimizerKind, const char*> values[] = {{OptimizerKind::kAdam, "adam"},
                                                                     {OptimizerKind::kSgd, "sgd"}};
};

template <class E>
std::string enum_name(E v) {
  for (auto [e, name] : EnumNames<E>::values)
    if (e == v) return name;
  throw ConfigError("unknown enum value");
}

template <class E>
E enum_value(const json& j, const char* key) {
  const std::string s = j.get<std::string>();
  for (auto [e, name] : EnumNames<E>::values)
    if (s == name) return e;
  throw ConfigError(std::string("invalid value '") + s + "' for " + key);
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  std::set<std::string> names(known.begin(), known.end());
  for (const auto& [k, _] : j.items()) {
    if (!names.contains(k)) throw ConfigError(std::string("unknown key '") + k + "' in " + where);
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

template <class E>
void read_enum(const json& j, const char* key, E& out) {
  if (j.contains(key)) out = enum_value<E>(j.at(key), key);
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},       {"d_ff", c.d_ff},
              {"n_heads", c.n_heads},       {"enc_layers", c.enc_layers},
              {"dec_layers", c.dec_layers}, {"vocab_size", c.vocab_size},
              {"feature_dim", c.feature_dim}, {"max_len", c.max_len},
              {"conv_channels", c.conv_channels}, {"rho_init", c.rho_init},
              {"pe_exponent", enum_name(c.pe_exponent)}};
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"preset", "d_model", "d_ff", "n_heads", "enc_layers", "dec_layers", "vocab_size", "feature_dim",
                  "max_len", "conv_channels", "rho_init", "pe_exponent"},
                 "model");
  ModelConfig c;
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "full") {
      c = ModelConfig::full_preset();
    } else if (p != "desk") {
      throw ConfigError("unknown model preset '" + p + "' (expected desk or full)");
    }
  }
  read(j, "d_model", c.d_model);
  read(j, "d_ff", c.d_ff);
  read(j, "n_heads", c.n_heads);
  read(j, "enc_layers", c.enc_layers);
  read(j, "dec_layers", c.dec_layers);
  read(j, "vocab_size", c.vocab_size);
  read(j, "feature_dim", c.feature_dim);
  read(j, "max_len", c.max_len);
  read(j, "conv_channels", c.conv_channels);
  read(j, "rho_init", c.rho_init);
  read_enum(j, "pe_exponent", c.pe_exponent);
  return c;
}

json to_json(const TrainConfig& c) {
  return json{
      {"model", to_json(c.model)},
      {"synth",
       {{"feature_dim", c.synth.feature_dim},
        {"content_tokens", c.synth.content_tokens},
        {"min_tokens", c.synth.min_tokens},
        {"max_tokens", c.synth.max_tokens},
        {"min_span", c.synth.min_span},
        {"max_span", c.synth.max_span},
        {"noise", c.synth.noise},
        {"samples", c.synth.samples}}},
      {"eval_samples", c.eval_samples},
      {"learning_rate", c.learning_rate},
      {"optimizer", enum_name(c.optimizer)},
      {"adam_beta1", c.adam_beta1},
      {"adam_beta2", c.adam_beta2},
      {"adam_eps", c.adam_eps},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"ctc_weight", c.loss_weights.ctc},
      {"ce_weight", c.loss_weights.ce},
      {"kl_mode", enum_name(c.kl_mode)},
      {"schedule_divisor", c.schedule.divisor},
      {"minibatch_form", enum_name(c.schedule.form)},
      {"beam_width", c.beam_width},
      {"max_decode_len", c.max_decode_len},
      {"sampled_eval", c.sampled_eval},
      {"length_normalize", c.length_normalize},
      {"train_data", c.train_data},
      {"eval_data", c.eval_data},
      {"vocab", c.vocab},
      {"out_dir", c.out_dir},
  };
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  reject_unknown(j,
                 {"model", "synth", "eval_samples", "learning_rate", "optimizer", "adam_beta1", "adam_beta2",
                  "adam_eps", "epochs", "batch_size", "seed", "ctc_weight", "ce_weight", "kl_mode",
                  "schedule_divisor", "minibatch_form", "beam_width", "max_decode_len", "sampled_eval",
                  "length_normalize", "train_data", "eval_data", "vocab", "out_dir"},
                 "training config");
  if (j.contains("model")) {
    // Overlay onto the current model settings rather than the defaults.
    json merged = to_json(c.model);
    for (const auto& [k, v] : j.at("model").items()) merged[k] = v;
    if (j.at("model").contains("preset")) merged = j.at("model");
    c.model = model_config_from_json(merged);
  }
  if (j.contains("synth")) {
    const json& s = j.at("synth");
    reject_unknown(s, {"feature_dim", "content_tokens", "min_tokens", "max_tokens", "min_span", "max_span", "noise",
                       "samples"},
                   "synth");
    read(s, "feature_dim", c.synth.feature_dim);
    read(s, "content_tokens", c.synth.content_tokens);
    read(s, "min_tokens", c.synth.min_tokens);
    read(s, "max_tokens", c.synth.max_tokens);
    read(s, "min_span", c.synth.min_span);
    read(s, "max_span", c.synth.max_span);
    read(s, "noise", c.synth.noise);
    read(s, "samples", c.synth.samples);
  }
  read(j, "eval_samples", c.eval_samples);
  read(j, "learning_rate", c.learning_rate);
  read_enum(j, "optimizer", c.optimizer);
  read(j, "adam_beta1", c.adam_beta1);
  read(j, "adam_beta2", c.adam_beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "seed", c.seed);
  read(j, "ctc_weight", c.loss_weights.ctc);
  read(j, "ce_weight", c.loss_weights.ce);
  read_enum(j, "kl_mode", c.kl_mode);
  read(j, "schedule_divisor", c.schedule.divisor);
  read_enum(j, "minibatch_form", c.schedule.form);
  read(j, "beam_width", c.beam_width);
  read(j, "max_decode_len", c.max_decode_len);
  read(j, "sampled_eval", c.sampled_eval);
  read(j, "length_normalize", c.length_normalize);
  read(j, "train_data", c.train_data);
  read(j, "eval_data", c.eval_data);
  read(j, "vocab", c.vocab);
  read(j, "out_dir", c.out_dir);
  return c;
}

json load_config_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return j;
}

TrainConfig load_train_config(const std::filesystem::path& path) { return train_config_from_json(load_config_json(path)); }

void TrainConfig::validate() const {
  model.validate();
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (schedule.divisor == 0) throw ConfigError("schedule_divisor must be at least 1");
  if (beam_width == 0) throw ConfigError("beam_width must be at least 1");
  if (max_decode_len == 0) throw ConfigError("max_decode_len must be at least 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0)) {
    throw ConfigError("Adam hyperparameters out of range");
  }
}

}  // namespace varformer
