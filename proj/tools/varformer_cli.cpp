#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "varformer/config.hpp"
#include "varformer/data.hpp"
#include "varformer/decode.hpp"
#include "varformer/errors.hpp"
#include "varformer/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace varformer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitSelftest = 2;
constexpr int kExitNumerical = 3;

// Flags that override config-file values. Only flags given on the command line
// are applied, so unset flags never clobber the file.
struct Overrides {
  json j = json::object();
  json model = json::object();
  json synth = json::object();
};

template <class T>
void flag(CLI::App* app, Overrides& o, const std::string& name, const std::string& key, const std::string& help,
          json Overrides::*section = &Overrides::j) {
  app->add_option_function<T>(name, [&o, key, section](const T& v) { (o.*section)[key] = v; }, help);
}

void add_model_flags(CLI::App* app, Overrides& o) {
  flag<std::string>(app, o, "--preset", "preset", "Model preset: desk or full", &Overrides::model);
  flag<std::size_t>(app, o, "--d-model", "d_model", "Model width", &Overrides::model);
  flag<std::size_t>(app, o, "--d-ff", "d_ff", "Feed-forward width", &Overrides::model);
  flag<std::size_t>(app, o, "--heads", "n_heads", "Attention heads", &Overrides::model);
  flag<std::size_t>(app, o, "--enc-layers", "enc_layers", "Encoder layers", &Overrides::model);
  flag<std::size_t>(app, o, "--dec-layers", "dec_layers", "Decoder layers", &Overrides::model);
  flag<std::size_t>(app, o, "--conv-channels", "conv_channels", "Frontend channels", &Overrides::model);
  flag<double>(app, o, "--rho-init", "rho_init", "Initial rho of the Bayesian layers", &Overrides::model);
  flag<std::string>(app, o, "--pe-exponent", "pe_exponent", "conventional or verbatim", &Overrides::model);
}

void add_synth_flags(CLI::App* app, Overrides& o) {
  flag<std::size_t>(app, o, "--feature-dim", "feature_dim", "Feature channels per frame", &Overrides::synth);
  flag<std::size_t>(app, o, "--content-tokens", "content_tokens", "Content tokens", &Overrides::synth);
  flag<std::size_t>(app, o, "--samples", "samples", "Training samples to synthesize", &Overrides::synth);
  flag<double>(app, o, "--noise", "noise", "Gaussian noise amplitude", &Overrides::synth);
}

void add_train_flags(CLI::App* app, Overrides& o) {
  flag<unsigned>(app, o, "--epochs", "epochs", "Number of epochs");
  flag<std::size_t>(app, o, "--batch-size", "batch_size", "Utterances per step");
  flag<double>(app, o, "--lr", "learning_rate", "Learning rate");
  flag<std::string>(app, o, "--optimizer", "optimizer", "adam or sgd");
  flag<std::uint64_t>(app, o, "--seed", "seed", "Run seed");
  flag<double>(app, o, "--ctc-weight", "ctc_weight", "Weight of the CTC loss");
  flag<double>(app, o, "--ce-weight", "ce_weight", "Weight of the cross-entropy loss");
  flag<std::string>(app, o, "--kl-mode", "kl_mode", "standard or verbatim");
  flag<unsigned>(app, o, "--schedule-divisor", "schedule_divisor", "Epoch divisor of the KL schedule");
  flag<std::string>(app, o, "--minibatch-form", "minibatch_form", "epoch-shift or blundell");
  flag<std::size_t>(app, o, "--eval-samples", "eval_samples", "Held-out samples to synthesize");
  flag<std::string>(app, o, "--train-data", "train_data", "Training feature file");
  flag<std::string>(app, o, "--eval-data", "eval_data", "Evaluation feature file");
  flag<std::string>(app, o, "--vocab", "vocab", "Vocabulary file");
  flag<std::string>(app, o, "--out-dir", "out_dir", "Output directory");
}

void add_decode_flags(CLI::App* app, Overrides& o) {
  flag<std::size_t>(app, o, "--beam-width", "beam_width", "Beam width");
  flag<std::size_t>(app, o, "--max-decode-len", "max_decode_len", "Maximum emitted tokens");
  flag<bool>(app, o, "--sampled-eval", "sampled_eval", "Sample the Bayesian layers while decoding");
  flag<bool>(app, o, "--length-normalize", "length_normalize", "Rank hypotheses by per-token log-probability");
}

TrainConfig resolve(const std::string& config_path, const Overrides& o, TrainConfig base = {}) {
  TrainConfig cfg = config_path.empty() ? base : train_config_from_json(load_config_json(config_path), base);
  json j = o.j;
  if (!o.model.empty()) j["model"] = o.model;
  if (!o.synth.empty()) j["synth"] = o.synth;
  cfg = train_config_from_json(j, cfg);
  cfg.validate();
  return cfg;
}

void print_dataset_summary(const Dataset& data, const SynthConfig* synth) {
  std::size_t frames = 0, tokens = 0, min_t = SIZE_MAX, max_t = 0;
  for (const auto& s : data.samples) {
    frames += s.frames;
    tokens += s.targets.size();
    min_t = std::min(min_t, s.frames);
    max_t = std::max(max_t, s.frames);
  }
  const double n = static_cast<double>(data.samples.size());
  std::printf("samples        %zu\n", data.samples.size());
  std::printf("feature dim    %zu\n", data.feature_dim);
  std::printf("frames         mean %.2f  min %zu  max %zu\n", static_cast<double>(frames) / n, min_t, max_t);
  std::printf("tokens/sample  mean %.2f\n", static_cast<double>(tokens) / n);
  if (synth != nullptr) {
    const double d = min_template_distance(*synth);
    std::printf("templates      min pairwise distance %.4f (%s)\n", d, d > 0.0 ? "injective" : "NOT injective");
  }
}

int cmd_gen_data(const TrainConfig& cfg, const std::string& out, const std::string& vocab_out, std::size_t samples,
                 std::uint64_t seed) {
  SynthConfig s = cfg.synth;
  if (samples > 0) s.samples = samples;
  const Dataset data = generate_synthetic(s, seed);
  write_features(out, data);
  if (!vocab_out.empty()) Vocab::characters(s.content_tokens).write(vocab_out);
  std::printf("wrote %s\n", out.c_str());
  print_dataset_summary(data, &s);
  return kExitOk;
}

int cmd_train(const TrainConfig& cfg, const std::string& resume, std::optional<unsigned> stop_after, bool no_eval) {
  RunOptions opts;
  if (!resume.empty()) opts.resume = resume;
  opts.stop_after = stop_after;
  opts.evaluate_at_end = !no_eval;
  opts.verbose = true;
  const RunSummary s = run_training(cfg, opts);
  std::printf("trained %zu epoch(s) in %.1fs; artifacts in %s\n", s.epochs.size(), s.seconds, cfg.out_dir.c_str());
  if (s.eval) {
    std::printf("held-out: loss %.4f  WER %.4f  CER %.4f  mean log-prob %.4f\n", s.eval->loss, s.eval->wer,
                s.eval->cer, s.eval->mean_log_prob);
  }
  return kExitOk;
}

struct Loaded {
  Trainer trainer;
  Dataset data;
  TrainConfig cfg;
};

Loaded load_for_eval(const std::string& checkpoint, const std::string& data_path, const std::string& vocab_path,
                     const std::string& config_path, const Overrides& o) {
  Trainer t = Trainer::load_checkpoint(checkpoint);
  TrainConfig cfg = resolve(config_path, o, t.config());
  if (!vocab_path.empty() && !(Vocab::read(vocab_path) == t.vocab())) {
    throw ContractError("vocabulary file " + vocab_path + " does not match the checkpoint's vocabulary");
  }
  Dataset data = data_path.empty() ? eval_data(cfg) : read_features(data_path);
  return {std::move(t), std::move(data), cfg};
}

int cmd_eval(const Loaded& l, const std::string& json_out, bool transcripts) {
  const EvalResult r = evaluate(l.trainer.model(), l.trainer.vocab(), l.data, eval_options(l.cfg));
  const auto j = r.to_json(transcripts);
  std::cout << j.dump(2) << '\n';
  if (!json_out.empty()) std::ofstream(json_out) << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_decode(const Loaded& l, bool greedy) {
  const Model& model = l.trainer.model();
  const Vocab& vocab = l.trainer.vocab();
  const EvalOptions eo = eval_options(l.cfg);
  if (l.data.feature_dim != model.config().feature_dim) {
    throw ContractError("dataset feature dimension does not match the model");
  }
  for (std::size_t i = 0; i < l.data.samples.size(); ++i) {
    Rng rng = Rng::derived(eo.seed, 1000 + i);
    KlAccumulator kl;
    ForwardContext ctx{eo.sampled ? ForwardMode::kSampled : ForwardMode::kDeterministic, &rng, &kl};
    const EncoderMemory memory = encode(model, l.data.samples[i].feature_tensor(), ctx);
    BeamOptions bo;
    bo.width = eo.beam_width;
    bo.max_len = eo.max_len;
    bo.length_normalize = eo.length_normalize;
    const auto scorer = model_scorer(model, memory, ctx);
    const Hypothesis h = greedy ? greedy_decode(scorer, bo) : beam_search(scorer, bo);
    std::cout << vocab.render(transcript_ids(h)) << '\n';
  }
  return kExitOk;
}

int cmd_selftest(std::uint64_t seed, bool quick) {
  const auto reports = oracles::run_all(seed, quick);
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << r.line() << '\n';
    ok = ok && r.passed;
  }
  std::cout << (ok ? "selftest: all oracles passed" : "selftest: FAILED") << '\n';
  return ok ? kExitOk : kExitSelftest;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational transformer toolkit: synthetic data, training, evaluation, decoding, self-tests"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "varformer 0.1.0");

  Overrides o;
  std::string config_path;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic feature file");
  std::string gen_out = "data.bspf", gen_vocab;
  std::size_t gen_samples = 0;
  std::uint64_t gen_seed = 1;
  gen->add_option("--config", config_path, "JSON config file");
  gen->add_option("-o,--out", gen_out, "Output feature file")->capture_default_str();
  gen->add_option("--vocab-out", gen_vocab, "Also write the matching vocabulary file");
  gen->add_option("-n,--count", gen_samples, "Samples to write (default: synth.samples)");
  gen->add_option("--seed", gen_seed, "Dataset seed")->capture_default_str();
  add_synth_flags(gen, o);

  auto* train = app.add_subcommand("train", "Train a model");
  std::string resume;
  std::optional<unsigned> stop_after;
  bool no_eval = false;
  train->add_option("--config", config_path, "JSON config file (flags override it)");
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_option("--stop-after", stop_after, "Stop once this many epochs are done");
  train->add_flag("--no-eval", no_eval, "Skip the held-out evaluation at the end");
  add_model_flags(train, o);
  add_synth_flags(train, o);
  add_train_flags(train, o);
  add_decode_flags(train, o);

  std::string checkpoint, data_path, vocab_path, json_out;
  bool transcripts = false, greedy = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (loss, WER, CER)");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_path, "Feature file (default: the run's held-out set)");
  eval->add_option("--vocab", vocab_path, "Vocabulary file to check against the checkpoint");
  eval->add_option("--config", config_path, "JSON config overriding decoding settings");
  eval->add_option("--json", json_out, "Also write the metrics record here");
  eval->add_flag("--transcripts", transcripts, "Include transcripts in the record");
  flag<std::size_t>(eval, o, "--eval-samples", "eval_samples", "Held-out samples to synthesize");
  add_decode_flags(eval, o);

  auto* dec = app.add_subcommand("decode", "Print one transcript per utterance");
  dec->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  dec->add_option("--data", data_path, "Feature file (default: the run's held-out set)");
  dec->add_option("--vocab", vocab_path, "Vocabulary file to check against the checkpoint");
  dec->add_option("--config", config_path, "JSON config overriding decoding settings");
  dec->add_flag("--greedy", greedy, "Greedy decoding instead of beam search");
  flag<std::size_t>(dec, o, "--eval-samples", "eval_samples", "Held-out samples to synthesize");
  add_decode_flags(dec, o);

  auto* self = app.add_subcommand("selftest", "Run the oracle suite");
  std::uint64_t self_seed = 7;
  bool quick = false;
  self->add_option("--seed", self_seed, "Seed for the random trials")->capture_default_str();
  self->add_flag("--quick", quick, "Fewer trials and samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(resolve(config_path, o), gen_out, gen_vocab, gen_samples, gen_seed);
    if (*train) {
      const TrainConfig cfg = resolve(config_path, o);
      return cmd_train(cfg, resume, stop_after, no_eval);
    }
    if (*eval) return cmd_eval(load_for_eval(checkpoint, data_path, vocab_path, config_path, o), json_out, transcripts);
    if (*dec) return cmd_decode(load_for_eval(checkpoint, data_path, vocab_path, config_path, o), greedy);
    if (*self) return cmd_selftest(self_seed, quick);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
