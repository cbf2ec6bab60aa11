#include "varformer/transformer.hpp"

#include <cmath>

#include "varformer/errors.hpp"
#include "varformer/ops.hpp"

namespace varformer {

namespace {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor zero_param(Shape shape) { return Tensor::parameter(shape, std::vector<double>(shape_size(shape), 0.0)); }

// Applies `fn` to each stacked segment of `x` (and of `memory`, in step) and restacks.
template <class Fn>
Tensor per_segment(const Tensor& x, std::span<const std::size_t> lengths, Fn&& fn) {
  if (lengths.size() == 1) return fn(x, 0);
  const auto offs = segment_offsets(lengths);
  std::vector<Tensor> parts;
  parts.reserve(lengths.size());
  for (std::size_t s = 0; s < lengths.size(); ++s) parts.push_back(fn(ops::slice_rows(x, offs[s], lengths[s]), s));
  return ops::concat_rows(parts);
}

Tensor segment(const Tensor& x, std::span<const std::size_t> lengths, const std::vector<std::size_t>& offs,
               std::size_t s) {
  if (lengths.size() == 1) return x;
  return ops::slice_rows(x, offs[s], lengths[s]);
}

}  // namespace

ModelConfig ModelConfig::full_preset() {
  ModelConfig c;
  c.d_model = 512;
  c.d_ff = 2148;
  c.n_heads = 8;
  c.enc_layers = 12;
  c.dec_layers = 6;
  c.feature_dim = 80;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(n_heads, "n_heads");
  positive(enc_layers, "enc_layers");
  positive(dec_layers, "dec_layers");
  positive(max_len, "max_len");
  positive(conv_channels, "conv_channels");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (d_model % 2 != 0) throw ConfigError("d_model must be even for the sine/cosine halves");
  if (vocab_size < static_cast<std::size_t>(kNumReserved) + 2) {
    throw ConfigError("vocab_size must cover the reserved ids, one content token and the blank");
  }
  if (feature_dim < 4) throw ConfigError("feature_dim must be at least 4 (two stride-2 stages)");
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c <= r; ++c) m.allowed[r * n + c] = 1;
  return m;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ShapeError("attention: incompatible Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                     shape_str(v.shape()));
  }
  Tensor scores = ops::div_scalar(ops::matmul(q, ops::transpose(k)), std::sqrt(static_cast<double>(k.cols())));
  if (mask != nullptr) {
    if (mask->rows != q.rows() || mask->cols != k.rows()) {
      throw ShapeError("attention: mask [" + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                       "] does not match scores " + shape_str(scores.shape()));
    }
    std::vector<double> bias(mask->allowed.size());
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = mask->allowed[i] ? 0.0 : -1e9;
    scores = ops::add(scores, Tensor(scores.shape(), std::move(bias)));
  }
  return ops::matmul(ops::softmax(scores, 1), v);
}

double positional_encoding(std::size_t pos, std::size_t i, std::size_t d_model, PeExponent exponent) {
  if (d_model == 0 || i >= d_model) {
    throw ContractError("positional_encoding: dimension " + std::to_string(i) + " outside d_model " +
                        std::to_string(d_model));
  }
  const std::size_t half = d_model / 2;
  const bool sine = i < half;
  const double d = static_cast<double>(d_model);
  double power;
  if (exponent == PeExponent::kConventional) {
    const double within = static_cast<double>(sine ? i : i - half);
    power = 2.0 * within / d;
  } else {
    power = std::pow(2.0, static_cast<double>(i)) / d;
  }
  const double angle = static_cast<double>(pos) / std::pow(10000.0, power);
  return sine ? std::sin(angle) : std::cos(angle);
}

PositionalEncodingTable::PositionalEncodingTable(std::size_t max_len, std::size_t d_model, PeExponent exponent)
    : max_len_(max_len), d_model_(d_model), table_(max_len * d_model) {
  for (std::size_t p = 0; p < max_len; ++p)
    for (std::size_t i = 0; i < d_model; ++i) table_[p * d_model + i] = positional_encoding(p, i, d_model, exponent);
}

Tensor PositionalEncodingTable::rows(std::size_t n) const {
  if (n == 0 || n > max_len_) {
    throw ContractError("sequence length " + std::to_string(n) + " exceeds max_len " + std::to_string(max_len_));
  }
  return Tensor({n, d_model_}, std::vector<double>(table_.begin(), table_.begin() + n * d_model_));
}

Linear::Linear(std::size_t d_in, std::size_t d_out, Rng& rng)
    : weight_(uniform_param({d_out, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng)),
      bias_(zero_param({d_out})) {}

Linear::Linear(Tensor weight, Tensor bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_.rank() != 2 || bias_.shape() != Shape{weight_.rows()}) {
    throw ShapeError("Linear: weight " + shape_str(weight_.shape()) + " and bias " + shape_str(bias_.shape()) +
                     " disagree");
  }
}

Tensor Linear::forward(const Tensor& x) const {
  return ops::add_row_bias(ops::matmul(x, ops::transpose(weight_)), bias_);
}

void Linear::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + "weight", weight_);
  out.emplace_back(prefix + "bias", bias_);
}

LayerNormParams::LayerNormParams(std::size_t d)
    : gain(Tensor::parameter({d}, std::vector<double>(d, 1.0))), bias(zero_param({d})) {}

Tensor LayerNormParams::forward(const Tensor& x) const { return ops::layer_norm(x, gain, bias, 1e-5); }

void LayerNormParams::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + "gain", gain);
  out.emplace_back(prefix + "bias", bias);
}

MultiHeadAttention::MultiHeadAttention(std::size_t d_model, std::size_t n_heads, Rng& rng) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a multiple of the head count (" +
                      std::to_string(n_heads) + ")");
  }
  const std::size_t d_head = d_model / n_heads;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  for (std::size_t h = 0; h < n_heads; ++h) {
    wq_.push_back(uniform_param({d_model, d_head}, bound, rng));
    wk_.push_back(uniform_param({d_model, d_head}, bound, rng));
    wv_.push_back(uniform_param({d_model, d_head}, bound, rng));
  }
  wo_ = uniform_param({d_model, d_model}, bound, rng);
}

MultiHeadAttention::MultiHeadAttention(std::vector<Tensor> wq, std::vector<Tensor> wk, std::vector<Tensor> wv,
                                       Tensor wo)
    : wq_(std::move(wq)), wk_(std::move(wk)), wv_(std::move(wv)), wo_(std::move(wo)) {
  if (wq_.empty() || wq_.size() != wk_.size() || wq_.size() != wv_.size()) {
    throw ShapeError("MultiHeadAttention: need the same non-zero number of Q/K/V projections");
  }
  const Shape head_shape = wq_[0].shape();
  for (std::size_t h = 0; h < wq_.size(); ++h) {
    if (wq_[h].shape() != head_shape || wk_[h].shape() != head_shape || wv_[h].shape() != head_shape) {
      throw ShapeError("MultiHeadAttention: head " + std::to_string(h) + " projections differ from " +
                       shape_str(head_shape));
    }
  }
  if (wo_.rank() != 2 || wo_.rows() != wq_.size() * head_shape[1] || wo_.cols() != head_shape[0]) {
    throw ShapeError("MultiHeadAttention: output projection " + shape_str(wo_.shape()) + " does not fit heads");
  }
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& memory, const AttentionMask* mask) const {
  const std::size_t d_model = wq_[0].rows();
  if (query.rank() != 2 || memory.rank() != 2 || query.cols() != d_model || memory.cols() != d_model) {
    throw ShapeError("multi_head_attention: inputs " + shape_str(query.shape()) + ", " + shape_str(memory.shape()) +
                     " must have " + std::to_string(d_model) + " features");
  }
  std::vector<Tensor> heads;
  heads.reserve(wq_.size());
  for (std::size_t h = 0; h < wq_.size(); ++h) {
    heads.push_back(scaled_dot_attention(ops::matmul(query, wq_[h]), ops::matmul(memory, wk_[h]),
                                         ops::matmul(memory, wv_[h]), mask));
  }
  const Tensor joined = heads.size() == 1 ? heads[0] : ops::concat_cols(heads);
  return ops::matmul(joined, wo_);
}

void MultiHeadAttention::collect(NamedParams& out, const std::string& prefix) const {
  for (std::size_t h = 0; h < wq_.size(); ++h) {
    const std::string p = prefix + "head" + std::to_string(h) + ".";
    out.emplace_back(p + "wq", wq_[h]);
    out.emplace_back(p + "wk", wk_[h]);
    out.emplace_back(p + "wv", wv_[h]);
  }
  out.emplace_back(prefix + "wo", wo_);
}

BayesFeedForward::BayesFeedForward(std::size_t d_model, std::size_t d_ff, Rng& rng, double rho_init)
    : bayes_(d_model, d_ff, rng, rho_init), output_(d_ff, d_model, rng) {}

Tensor BayesFeedForward::forward(const Tensor& x, ForwardContext& ctx) const {
  Tensor hidden;
  if (ctx.mode == ForwardMode::kSampled) {
    if (ctx.rng == nullptr) throw ContractError("sampled forward pass needs an rng");
    hidden = bayes_.forward_lrt(x, *ctx.rng, ctx.kl);
  } else {
    hidden = bayes_.forward_deterministic(x);
  }
  return output_.forward(ops::relu(hidden));
}

void BayesFeedForward::collect(NamedParams& out, const std::string& prefix) const {
  bayes_.collect(out, prefix + "bayes.");
  output_.collect(out, prefix + "out.");
}

ConvFrontend::ConvFrontend(std::size_t feature_dim, std::size_t channels, std::size_t d_model, Rng& rng)
    : feature_dim_(feature_dim),
      w1_(uniform_param({channels, 1, 3, 3}, 1.0 / 3.0, rng)),
      b1_(zero_param({channels})),
      w2_(uniform_param({channels, channels, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(channels)), rng)),
      b2_(zero_param({channels})),
      proj_(channels * (feature_dim / 4), d_model, rng) {}

Tensor ConvFrontend::forward(const Tensor& features) const {
  if (features.rank() != 2 || features.cols() != feature_dim_) {
    throw ShapeError("conv frontend: features " + shape_str(features.shape()) + " must be [T x " +
                     std::to_string(feature_dim_) + "]");
  }
  if (features.rows() < 4) {
    throw ContractError("conv frontend: need at least 4 frames, got " + std::to_string(features.rows()));
  }
  Tensor x = ops::reshape(features, {1, features.rows(), feature_dim_});
  x = ops::relu(ops::conv3x3_s2(x, w1_, b1_));
  x = ops::relu(ops::conv3x3_s2(x, w2_, b2_));
  return proj_.forward(ops::channels_to_frames(x));
}

void ConvFrontend::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + "conv1.weight", w1_);
  out.emplace_back(prefix + "conv1.bias", b1_);
  out.emplace_back(prefix + "conv2.weight", w2_);
  out.emplace_back(prefix + "conv2.bias", b2_);
  proj_.collect(out, prefix + "proj.");
}

std::vector<std::size_t> segment_offsets(std::span<const std::size_t> lengths) {
  std::vector<std::size_t> offs(lengths.size());
  std::size_t acc = 0;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    offs[s] = acc;
    acc += lengths[s];
  }
  return offs;
}

EncoderLayer::EncoderLayer(const ModelConfig& cfg, Rng& rng)
    : self_attn_(cfg.d_model, cfg.n_heads, rng),
      ln1_(cfg.d_model),
      ln2_(cfg.d_model),
      ff_(cfg.d_model, cfg.d_ff, rng, cfg.rho_init) {}

Tensor EncoderLayer::forward(const Tensor& x, std::span<const std::size_t> lengths, ForwardContext& ctx) const {
  const Tensor attn = per_segment(x, lengths, [&](const Tensor& seg, std::size_t) {
    return self_attn_.forward(seg, seg);
  });
  const Tensor h = ln1_.forward(ops::add(x, attn));
  return ln2_.forward(ops::add(h, ff_.forward(h, ctx)));
}

void EncoderLayer::collect(NamedParams& out, const std::string& prefix) const {
  self_attn_.collect(out, prefix + "self_attn.");
  ln1_.collect(out, prefix + "ln1.");
  ff_.collect(out, prefix + "ff.");
  ln2_.collect(out, prefix + "ln2.");
}

DecoderLayer::DecoderLayer(const ModelConfig& cfg, Rng& rng)
    : self_attn_(cfg.d_model, cfg.n_heads, rng),
      cross_attn_(cfg.d_model, cfg.n_heads, rng),
      ln1_(cfg.d_model),
      ln2_(cfg.d_model),
      ln3_(cfg.d_model),
      ff_(cfg.d_model, cfg.d_ff, rng, cfg.rho_init) {}

Tensor DecoderLayer::forward(const Tensor& x, std::span<const std::size_t> lengths, const Tensor& memory,
                             std::span<const std::size_t> memory_lengths, ForwardContext& ctx) const {
  if (lengths.size() != memory_lengths.size()) {
    throw ContractError("decoder: " + std::to_string(lengths.size()) + " prefixes for " +
                        std::to_string(memory_lengths.size()) + " encoded utterances");
  }
  const Tensor self = per_segment(x, lengths, [&](const Tensor& seg, std::size_t) {
    const AttentionMask causal = AttentionMask::causal(seg.rows());
    return self_attn_.forward(seg, seg, &causal);
  });
  const Tensor h1 = ln1_.forward(ops::add(x, self));
  const auto mem_offs = segment_offsets(memory_lengths);
  const Tensor cross = per_segment(h1, lengths, [&](const Tensor& seg, std::size_t s) {
    return cross_attn_.forward(seg, segment(memory, memory_lengths, mem_offs, s));
  });
  const Tensor h2 = ln2_.forward(ops::add(h1, cross));
  return ln3_.forward(ops::add(h2, ff_.forward(h2, ctx)));
}

void DecoderLayer::collect(NamedParams& out, const std::string& prefix) const {
  self_attn_.collect(out, prefix + "self_attn.");
  ln1_.collect(out, prefix + "ln1.");
  cross_attn_.collect(out, prefix + "cross_attn.");
  ln2_.collect(out, prefix + "ln2.");
  ff_.collect(out, prefix + "ff.");
  ln3_.collect(out, prefix + "ln3.");
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  frontend_ = ConvFrontend(cfg_.feature_dim, cfg_.conv_channels, cfg_.d_model, rng);
  pe_ = PositionalEncodingTable(cfg_.max_len, cfg_.d_model, cfg_.pe_exponent);
  for (std::size_t i = 0; i < cfg_.enc_layers; ++i) encoder_.emplace_back(cfg_, rng);
  {
    std::vector<double> v(cfg_.vocab_size * cfg_.d_model);
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    for (double& x : v) x = sd * rng.normal();
    embedding_ = Tensor::parameter({cfg_.vocab_size, cfg_.d_model}, std::move(v));
  }
  for (std::size_t i = 0; i < cfg_.dec_layers; ++i) decoder_.emplace_back(cfg_, rng);
  output_ = Linear(cfg_.d_model, cfg_.vocab_size, rng);
  ctc_head_ = Linear(cfg_.d_model, cfg_.vocab_size, rng);
}

EncoderMemory Model::encode(std::span<const Tensor> features, ForwardContext& ctx) const {
  if (features.empty()) throw ContractError("encode: empty batch");
  EncoderMemory out;
  std::vector<Tensor> frames;
  frames.reserve(features.size());
  for (const auto& f : features) {
    Tensor h = frontend_.forward(f);
    out.lengths.push_back(h.rows());
    frames.push_back(ops::add(h, pe_.rows(h.rows())));
  }
  Tensor x = frames.size() == 1 ? frames[0] : ops::concat_rows(frames);
  for (const auto& layer : encoder_) x = layer.forward(x, out.lengths, ctx);
  out.memory = x;
  return out;
}

Tensor Model::decode(const EncoderMemory& memory, std::span<const std::vector<int>> prefixes,
                     ForwardContext& ctx) const {
  if (prefixes.size() != memory.lengths.size()) {
    throw ContractError("decode: " + std::to_string(prefixes.size()) + " prefixes for " +
                        std::to_string(memory.lengths.size()) + " encoded utterances");
  }
  const double emb_scale = std::sqrt(static_cast<double>(cfg_.d_model));
  std::vector<std::size_t> lengths;
  std::vector<Tensor> parts;
  for (const auto& p : prefixes) {
    if (p.empty()) throw ContractError("decode: empty target prefix");
    if (p.front() != kSos) throw ContractError("decode: target prefix must start with the start-of-sequence id");
    lengths.push_back(p.size());
    parts.push_back(ops::add(ops::scale(ops::gather_rows(embedding_, p), emb_scale), pe_.rows(p.size())));
  }
  Tensor x = parts.size() == 1 ? parts[0] : ops::concat_rows(parts);
  for (const auto& layer : decoder_) x = layer.forward(x, lengths, memory.memory, memory.lengths, ctx);
  return output_.forward(x);
}

Tensor Model::ctc_log_probs(const EncoderMemory& memory) const {
  return ops::log_softmax(ctc_head_.forward(memory.memory));
}

NamedParams Model::parameters() const {
  NamedParams out;
  frontend_.collect(out, "frontend.");
  for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect(out, "encoder." + std::to_string(i) + ".");
  out.emplace_back("embedding", embedding_);
  for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].collect(out, "decoder." + std::to_string(i) + ".");
  output_.collect(out, "output.");
  ctc_head_.collect(out, "ctc_head.");
  return out;
}

std::vector<GaussianVariationalLayer*> Model::bayes_layers() {
  std::vector<GaussianVariationalLayer*> out;
  for (auto& l : encoder_) out.push_back(&l.ff().bayes());
  for (auto& l : decoder_) out.push_back(&l.ff().bayes());
  return out;
}

void Model::set_kl_mode(KlMode mode) {
  for (auto* layer : bayes_layers()) layer->kl_mode = mode;
}

EncoderMemory encode(const Model& model, const Tensor& features, ForwardContext& ctx) {
  return model.encode(std::span<const Tensor>(&features, 1), ctx);
}

Tensor decode_forward(const Model& model, const EncoderMemory& memory, const std::vector<int>& prefix,
                      ForwardContext& ctx) {
  return model.decode(memory, std::span<const std::vector<int>>(&prefix, 1), ctx);
}

}  // namespace varformer
