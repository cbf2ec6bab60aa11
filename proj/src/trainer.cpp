#include "varformer/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "varformer/decode.hpp"
#include "varformer/errors.hpp"
#include "varformer/metrics.hpp"
#include "varformer/ops.hpp"

namespace varformer {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[4] = {'B', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

constexpr std::uint64_t kStreamSampling = 1;
constexpr std::uint64_t kStreamShuffle = 2;
constexpr std::uint64_t kStreamTrainData = 3;
constexpr std::uint64_t kStreamEvalData = 4;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void block(const std::string& name, const Shape& shape, std::span<const double> values) {
    str(name);
    u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) u64(d);
    bytes(values.data(), values.size() * sizeof(double));
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string where) : data_(std::move(data)), where_(std::move(where)) {}

  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw ParseError(ParseErrorKind::kTruncated, where_ + ": checkpoint is truncated");
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string& where() const { return where_; }

 private:
  std::string data_;
  std::size_t pos_ = 0;
  std::string where_;
};

struct Block {
  Shape shape;
  std::vector<double> values;
};

double mean_of(double sum, std::size_t n) { return n == 0 ? 0.0 : sum / static_cast<double>(n); }

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_model_matches(const Model& model, const Vocab& vocab, const Dataset& data) {
  const auto& mc = model.config();
  if (mc.vocab_size != vocab.size()) {
    throw ContractError("vocabulary has " + std::to_string(vocab.size()) + " ids but the model expects " +
                        std::to_string(mc.vocab_size));
  }
  if (data.feature_dim != mc.feature_dim) {
    throw ContractError("dataset has " + std::to_string(data.feature_dim) + " feature channels but the model expects " +
                        std::to_string(mc.feature_dim));
  }
  for (const auto& s : data.samples) {
    for (int id : s.targets) {
      if (id < vocab.first_content() || id >= vocab.blank()) {
        throw ContractError("dataset target id " + std::to_string(id) + " is outside the vocabulary's content range");
      }
    }
  }
}

}  // namespace

LossBreakdown compute_batch_loss(const Model& model, const Batch& batch, ForwardContext& ctx, double kl_weight,
                                 LossWeights weights) {
  if (batch.size() == 0) throw ContractError("compute_batch_loss: empty batch");
  if (ctx.kl == nullptr) throw ContractError("compute_batch_loss: forward context has no KL accumulator");
  std::vector<Tensor> features;
  std::vector<std::vector<int>> prefixes;
  std::vector<std::vector<int>> next_tokens;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    features.push_back(batch.features_of(b));
    const auto y = batch.targets_of(b);
    std::vector<int> prefix{kSos};
    prefix.insert(prefix.end(), y.begin(), y.end());
    prefixes.push_back(std::move(prefix));
    std::vector<int> next(y.begin(), y.end());
    next.push_back(kEos);
    next_tokens.push_back(std::move(next));
  }

  const EncoderMemory memory = model.encode(features, ctx);
  const Tensor ctc_lp = model.ctc_log_probs(memory);
  const auto offs = segment_offsets(memory.lengths);
  Tensor ctc_sum;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor lp = batch.size() == 1 ? ctc_lp : ops::slice_rows(ctc_lp, offs[b], memory.lengths[b]);
    const Tensor l = ctc_loss(lp, batch.targets_of(b), false);
    ctc_sum = ctc_sum.defined() ? ops::add(ctc_sum, l) : l;
  }
  const Tensor ctc = ops::div_scalar(ctc_sum, static_cast<double>(batch.size()));

  const Tensor logits = model.decode(memory, prefixes, ctx);
  Tensor ce_sum;
  std::size_t row = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t len = next_tokens[b].size();
    const Tensor lg = batch.size() == 1 ? logits : ops::slice_rows(logits, row, len);
    const Tensor l = cross_entropy(lg, next_tokens[b]);
    ce_sum = ce_sum.defined() ? ops::add(ce_sum, l) : l;
    row += len;
  }
  const Tensor ce = ops::div_scalar(ce_sum, static_cast<double>(batch.size()));
  return total_loss(*ctx.kl, ctc, ce, kl_weight, weights);
}

Optimizer::Optimizer(const TrainConfig& cfg, NamedParams params)
    : kind_(cfg.optimizer),
      lr_(cfg.learning_rate),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps),
      params_(std::move(params)) {
  if (kind_ == OptimizerKind::kAdam) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Optimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k].second;
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
      continue;
    }
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

nlohmann::ordered_json StepRecord::to_json() const {
  return nlohmann::ordered_json{{"step", step}, {"epoch", epoch},  {"kl_raw", kl_raw},
              {"kl_weight", kl_weight}, {"kl_weighted", kl_weighted}, {"ctc", ctc},
              {"ce", ce},     {"total", total}};
}

StepRecord StepRecord::from_json(const json& j) {
  StepRecord r;
  r.step = j.at("step").get<std::uint64_t>();
  r.epoch = j.at("epoch").get<unsigned>();
  r.kl_raw = j.at("kl_raw").get<double>();
  r.kl_weight = j.at("kl_weight").get<double>();
  r.kl_weighted = j.at("kl_weighted").get<double>();
  r.ctc = j.at("ctc").get<double>();
  r.ce = j.at("ce").get<double>();
  r.total = j.at("total").get<double>();
  return r;
}

nlohmann::ordered_json EpochRecord::to_json() const {
  return nlohmann::ordered_json{{"epoch", epoch},       {"kl_weight", kl_weight}, {"steps", steps},
              {"mean_kl_raw", mean_kl_raw}, {"mean_ctc", mean_ctc},   {"mean_ce", mean_ce},
              {"mean_total", mean_total}};
}

EpochRecord EpochRecord::from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<unsigned>();
  r.kl_weight = j.at("kl_weight").get<double>();
  r.steps = j.at("steps").get<std::size_t>();
  r.mean_kl_raw = j.at("mean_kl_raw").get<double>();
  r.mean_ctc = j.at("mean_ctc").get<double>();
  r.mean_ce = j.at("mean_ce").get<double>();
  r.mean_total = j.at("mean_total").get<double>();
  return r;
}

Trainer::Trainer(TrainConfig cfg, Vocab vocab)
    : cfg_(std::move(cfg)),
      vocab_(std::move(vocab)),
      model_((cfg_.validate(), cfg_.model), cfg_.seed),
      optimizer_(cfg_, model_.parameters()),
      rng_(Rng::derived(cfg_.seed, kStreamSampling)) {
  if (cfg_.model.vocab_size != vocab_.size()) {
    throw ConfigError("model vocab_size " + std::to_string(cfg_.model.vocab_size) + " does not match the " +
                      std::to_string(vocab_.size()) + "-id vocabulary");
  }
  model_.set_kl_mode(cfg_.kl_mode);
}

StepRecord Trainer::train_step(const Batch& batch) {
  const double weight = cfg_.schedule.weight(epoch_, cfg_.epochs);
  KlAccumulator kl;
  Tape tape;
  LossBreakdown loss;
  {
    TapeScope scope(tape);
    ForwardContext ctx{ForwardMode::kSampled, &rng_, &kl};
    loss = compute_batch_loss(model_, batch, ctx, weight, cfg_.loss_weights);
  }
  if (!std::isfinite(loss.total_value)) {
    const auto where = tape.first_nonfinite();
    throw NumericalError("non-finite loss at step " + std::to_string(step_) + " (epoch " + std::to_string(epoch_) +
                         "): first non-finite tensor is " + where.value_or("the loss itself"));
  }
  optimizer_.zero_grad();
  tape.backward(loss.total);
  optimizer_.step();
  tape.clear();

  StepRecord r;
  r.step = step_++;
  r.epoch = epoch_;
  r.kl_raw = loss.kl_raw;
  r.kl_weight = loss.kl_weight;
  r.kl_weighted = loss.kl_weighted;
  r.ctc = loss.ctc;
  r.ce = loss.ce;
  r.total = loss.total_value;
  return r;
}

EpochRecord Trainer::train_epoch(const Dataset& data, const std::function<void(const StepRecord&)>& on_step) {
  if (epoch_ >= cfg_.epochs) throw ContractError("train_epoch: all configured epochs are done");
  const std::uint64_t shuffle_seed = Rng::derived(cfg_.seed, kStreamShuffle + (std::uint64_t{epoch_} << 8)).engine()();
  const auto batches = make_batches(data, cfg_.batch_size, shuffle_seed);
  EpochRecord rec;
  rec.epoch = epoch_;
  rec.kl_weight = cfg_.schedule.weight(epoch_, cfg_.epochs);
  double kl = 0.0, ctc = 0.0, ce = 0.0, total = 0.0;
  for (const auto& batch : batches) {
    const StepRecord s = train_step(batch);
    kl += s.kl_raw;
    ctc += s.ctc;
    ce += s.ce;
    total += s.total;
    ++rec.steps;
    if (on_step) on_step(s);
  }
  rec.mean_kl_raw = mean_of(kl, rec.steps);
  rec.mean_ctc = mean_of(ctc, rec.steps);
  rec.mean_ce = mean_of(ce, rec.steps);
  rec.mean_total = mean_of(total, rec.steps);
  ++epoch_;
  return rec;
}

std::string Trainer::checkpoint_bytes() const {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const auto& params = optimizer_.params();
  const bool adam = optimizer_.kind() == OptimizerKind::kAdam;
  w.u32(static_cast<std::uint32_t>(params.size() * (adam ? 3 : 1)));
  for (const auto& [name, p] : params) w.block("param/" + name, p.shape(), p.data());
  if (adam) {
    const Optimizer& opt = optimizer_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      w.block("adam_m/" + params[k].first, params[k].second.shape(), opt.first_moment()[k]);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      w.block("adam_v/" + params[k].first, params[k].second.shape(), opt.second_moment()[k]);
    }
  }
  const json meta{{"epoch", epoch_},
                  {"step", step_},
                  {"optimizer_steps", optimizer_.steps()},
                  {"rng", rng_.save()},
                  {"config", to_json(cfg_)},
                  {"vocab", vocab_.tokens()}};
  const std::string trailer = meta.dump();
  w.u64(trailer.size());
  w.bytes(trailer.data(), trailer.size());
  return w.take();
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  const std::string bytes = checkpoint_bytes();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError(ParseErrorKind::kIo, "cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ParseError(ParseErrorKind::kIo, "failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Trainer Trainer::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(ParseErrorKind::kIo, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str(), path.string());

  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw ParseError(ParseErrorKind::kMalformedHeader, path.string() + ": not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw ParseError(ParseErrorKind::kMalformedHeader,
                     path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::map<std::string, Block> blocks;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    Block b;
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) {
      throw ParseError(ParseErrorKind::kMalformedHeader, path.string() + ": block '" + name + "' has bad rank");
    }
    for (std::uint32_t d = 0; d < rank; ++d) b.shape.push_back(r.u64());
    const std::size_t n = shape_size(b.shape);
    if (n > r.remaining() / sizeof(double)) {
      throw ParseError(ParseErrorKind::kTruncated, path.string() + ": block '" + name + "' is truncated");
    }
    b.values.resize(n);
    r.bytes(b.values.data(), n * sizeof(double));
    blocks.emplace(std::move(name), std::move(b));
  }
  const std::uint64_t trailer_len = r.u64();
  r.need(trailer_len);
  std::string trailer(trailer_len, '\0');
  r.bytes(trailer.data(), trailer_len);
  if (r.remaining() != 0) {
    throw ParseError(ParseErrorKind::kDimensionMismatch, path.string() + ": trailing bytes after checkpoint");
  }
  json meta;
  try {
    meta = json::parse(trailer);
  } catch (const json::parse_error& e) {
    throw ParseError(ParseErrorKind::kMalformedHeader, path.string() + ": bad metadata: " + e.what());
  }

  const TrainConfig cfg = train_config_from_json(meta.at("config"));
  const Vocab vocab = Vocab::with_content([&] {
    auto toks = meta.at("vocab").get<std::vector<std::string>>();
    if (toks.size() < kNumReserved + 2) {
      throw ParseError(ParseErrorKind::kMalformedHeader, path.string() + ": vocabulary too small");
    }
    return std::vector<std::string>(toks.begin() + kNumReserved, toks.end() - 1);
  }());
  Trainer t(cfg, vocab);

  auto load_into = [&](const std::string& name, const Shape& shape, std::span<double> dst) {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw ParseError(ParseErrorKind::kTruncated, path.string() + ": missing block " + name);
    if (it->second.shape != shape) {
      throw ParseError(ParseErrorKind::kDimensionMismatch, path.string() + ": block " + name + " has shape " +
                                                               shape_str(it->second.shape) + ", expected " +
                                                               shape_str(shape));
    }
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
  };
  auto params = t.optimizer_.params();
  const bool adam = t.optimizer_.kind() == OptimizerKind::kAdam;
  if (blocks.size() != params.size() * (adam ? 3 : 1)) {
    throw ParseError(ParseErrorKind::kDimensionMismatch, path.string() + ": unexpected number of blocks");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, p] = params[k];
    load_into("param/" + name, p.shape(), p.mutable_data());
    if (adam) {
      load_into("adam_m/" + name, p.shape(), t.optimizer_.first_moment()[k]);
      load_into("adam_v/" + name, p.shape(), t.optimizer_.second_moment()[k]);
    }
  }
  t.epoch_ = meta.at("epoch").get<unsigned>();
  t.step_ = meta.at("step").get<std::uint64_t>();
  t.optimizer_.set_steps(meta.at("optimizer_steps").get<std::uint64_t>());
  t.rng_.load(meta.at("rng").get<std::string>());
  return t;
}

nlohmann::ordered_json EvalResult::to_json(bool with_transcripts) const {
  nlohmann::ordered_json j{{"samples", samples}, {"loss", loss}, {"wer", wer}, {"cer", cer}, {"mean_log_prob", mean_log_prob}};
  if (with_transcripts) {
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < references.size(); ++i) {
      rows.push_back({{"reference", references[i]}, {"hypothesis", hypotheses[i]}});
    }
    j["transcripts"] = std::move(rows);
  }
  return j;
}

EvalOptions eval_options(const TrainConfig& cfg) {
  EvalOptions o;
  o.beam_width = cfg.beam_width;
  o.max_len = cfg.max_decode_len;
  o.length_normalize = cfg.length_normalize;
  o.sampled = cfg.sampled_eval;
  o.seed = cfg.seed;
  o.loss_weights = cfg.loss_weights;
  return o;
}

EvalResult evaluate(const Model& model, const Vocab& vocab, const Dataset& data, const EvalOptions& options) {
  check_model_matches(model, vocab, data);
  if (data.samples.empty()) throw ContractError("evaluate: empty dataset");
  EvalResult res;
  res.samples = data.samples.size();
  double loss_sum = 0.0, lp_sum = 0.0;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    Rng rng = Rng::derived(options.seed, 1000 + i);
    KlAccumulator kl;
    ForwardContext ctx{options.sampled ? ForwardMode::kSampled : ForwardMode::kDeterministic, &rng, &kl};
    const EncoderMemory memory = encode(model, s.feature_tensor(), ctx);

    std::vector<int> prefix{kSos};
    prefix.insert(prefix.end(), s.targets.begin(), s.targets.end());
    std::vector<int> next(s.targets.begin(), s.targets.end());
    next.push_back(kEos);
    const double ctc = ctc_loss(model.ctc_log_probs(memory), s.targets, false).item();
    const double ce = cross_entropy(decode_forward(model, memory, prefix, ctx), next).item();
    loss_sum += options.loss_weights.ctc * ctc + options.loss_weights.ce * ce;

    BeamOptions bo;
    bo.width = options.beam_width;
    bo.max_len = options.max_len;
    bo.length_normalize = options.length_normalize;
    const Hypothesis best = beam_search(model_scorer(model, memory, ctx), bo);
    lp_sum += best.log_prob;
    res.references.push_back(vocab.render(s.targets));
    res.hypotheses.push_back(vocab.render(transcript_ids(best)));
  }
  const double n = static_cast<double>(data.samples.size());
  res.loss = loss_sum / n;
  res.mean_log_prob = lp_sum / n;
  res.cer = cer(res.references, res.hypotheses);
  const ErrorCounts words = word_errors(res.references, res.hypotheses);
  res.wer = words.reference_length == 0 ? 0.0 : words.rate();
  return res;
}

Vocab run_vocab(const TrainConfig& cfg) {
  if (!cfg.vocab.empty()) return Vocab::read(cfg.vocab);
  return Vocab::characters(cfg.synth.content_tokens);
}

Dataset training_data(const TrainConfig& cfg) {
  if (!cfg.train_data.empty()) return read_features(cfg.train_data, cfg.model.feature_dim);
  return generate_synthetic(cfg.synth, Rng::derived(cfg.seed, kStreamTrainData).engine()());
}

Dataset eval_data(const TrainConfig& cfg) {
  if (!cfg.eval_data.empty()) return read_features(cfg.eval_data, cfg.model.feature_dim);
  SynthConfig s = cfg.synth;
  s.samples = cfg.eval_samples;
  return generate_synthetic(s, Rng::derived(cfg.seed, kStreamEvalData).engine()());
}

RunSummary run_training(const TrainConfig& cfg_in, const RunOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<Trainer> trainer;
  if (options.resume) {
    trainer.emplace(Trainer::load_checkpoint(*options.resume));
  } else {
    TrainConfig cfg = cfg_in;
    const Vocab vocab = run_vocab(cfg);
    cfg.model.vocab_size = vocab.size();
    if (cfg.train_data.empty()) cfg.model.feature_dim = cfg.synth.feature_dim;
    trainer.emplace(cfg, vocab);
  }
  const TrainConfig& cfg = trainer->config();
  const Dataset train = training_data(cfg);
  check_model_matches(trainer->model(), trainer->vocab(), train);

  const std::filesystem::path out(options.resume ? cfg_in.out_dir : cfg.out_dir);
  std::filesystem::create_directories(out);
  {
    std::ofstream c(out / "config.json");
    c << to_json(cfg).dump(2) << '\n';
  }
  trainer->vocab().write(out / "vocab.txt");

  const auto mode = options.resume ? std::ios::app : std::ios::trunc;
  std::ofstream steps(out / "steps.jsonl", mode);
  std::ofstream csv(out / "steps.csv", mode);
  std::ofstream epochs(out / "epochs.jsonl", mode);
  if (!steps || !csv || !epochs) throw ParseError(ParseErrorKind::kIo, "cannot write metrics in " + out.string());
  if (!options.resume) csv << "step,epoch,kl_raw,kl_weight,kl_weighted,ctc,ce,total\n";

  RunSummary summary;
  const unsigned last = options.stop_after ? std::min(*options.stop_after, cfg.epochs) : cfg.epochs;
  while (trainer->epoch() < last) {
    const EpochRecord rec = trainer->train_epoch(train, [&](const StepRecord& s) {
      steps << s.to_json().dump() << '\n';
      csv << s.step << ',' << s.epoch << ',' << format_double(s.kl_raw) << ',' << format_double(s.kl_weight) << ','
          << format_double(s.kl_weighted) << ',' << format_double(s.ctc) << ',' << format_double(s.ce) << ','
          << format_double(s.total) << '\n';
    });
    epochs << rec.to_json().dump() << '\n';
    steps.flush();
    csv.flush();
    epochs.flush();
    summary.epochs.push_back(rec);
    if (options.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("epoch %u/%u  total %.4f  ctc %.4f  ce %.4f  kl %.1f  weight %.4g  (%.1fs)\n", rec.epoch + 1,
                  cfg.epochs, rec.mean_total, rec.mean_ctc, rec.mean_ce, rec.mean_kl_raw, rec.kl_weight, secs);
      std::fflush(stdout);
    }
  }
  trainer->save_checkpoint(out / "checkpoint.bsck");

  if (options.evaluate_at_end && trainer->epoch() == cfg.epochs && cfg.eval_samples > 0) {
    summary.eval = evaluate(trainer->model(), trainer->vocab(), eval_data(cfg), eval_options(cfg));
    std::ofstream e(out / "eval.json");
    e << summary.eval->to_json(true).dump(2) << '\n';
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summary;
}

}  // namespace varformer
