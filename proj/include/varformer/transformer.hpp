#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "varformer/bayes_linear.hpp"
#include "varformer/rng.hpp"
#include "varformer/tensor.hpp"
#include "varformer/tokens.hpp"

namespace varformer {

enum class PeExponent {
  /// pos / 10000^(2 i' / d_model).
  kConventional,
  /// pos / 10000^(2^i / d_model), with i the raw dimension index.
  kVerbatim,
};

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t n_heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  /// Total ids including pad/sos/eos and the trailing CTC blank.
  std::size_t vocab_size = 16;
  std::size_t feature_dim = 16;
  /// Longest encoder (post-subsampling) or decoder sequence.
  std::size_t max_len = 512;
  std::size_t conv_channels = 32;
  double rho_init = -5.0;
  PeExponent pe_exponent = PeExponent::kConventional;

  /// 512 / 2148 / 8 heads / 12 encoder / 6 decoder layers on 80 feature channels.
  static ModelConfig full_preset();

  /// Throws ConfigError when a value is out of range.
  void validate() const;
};

enum class ForwardMode { kSampled, kDeterministic };

/// Per-pass state. Sampled passes need an rng and (for training) a KL sink.
struct ForwardContext {
  ForwardMode mode = ForwardMode::kDeterministic;
  Rng* rng = nullptr;
  KlAccumulator* kl = nullptr;
};

/// Row r may attend to column c iff allowed(r, c).
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask causal(std::size_t n);
  bool at(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
};

/// softmax(Q K^T / sqrt(d_k) + mask) V, with -1e9 added at masked positions.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask = nullptr);

/// Sinusoid for position `pos`, dimension `i`: sine on the first half of the
/// dimensions, cosine on the second half.
double positional_encoding(std::size_t pos, std::size_t i, std::size_t d_model,
                           PeExponent exponent = PeExponent::kConventional);

class PositionalEncodingTable {
 public:
  PositionalEncodingTable() = default;
  PositionalEncodingTable(std::size_t max_len, std::size_t d_model, PeExponent exponent);

  std::size_t max_len() const { return max_len_; }
  double at(std::size_t pos, std::size_t i) const { return table_[pos * d_model_ + i]; }
  /// Constant [n x d_model] block of rows 0..n-1.
  Tensor rows(std::size_t n) const;

 private:
  std::size_t max_len_ = 0;
  std::size_t d_model_ = 0;
  std::vector<double> table_;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t d_in, std::size_t d_out, Rng& rng);
  Linear(Tensor weight, Tensor bias);

  Tensor forward(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  Tensor weight_;  // [d_out x d_in]
  Tensor bias_;    // [d_out]
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  explicit LayerNormParams(std::size_t d = 1);
  Tensor forward(const Tensor& x) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_model, std::size_t n_heads, Rng& rng);
  /// Explicit per-head projections [d_model x d_head] and output projection [h*d_head x d_model].
  MultiHeadAttention(std::vector<Tensor> wq, std::vector<Tensor> wk, std::vector<Tensor> wv, Tensor wo);

  std::size_t heads() const { return wq_.size(); }
  const std::vector<Tensor>& wq() const { return wq_; }
  const std::vector<Tensor>& wk() const { return wk_; }
  const std::vector<Tensor>& wv() const { return wv_; }
  const Tensor& wo() const { return wo_; }

  /// Concat_i(Attention(Q Wq_i, K Wk_i, V Wv_i)) Wo, queries from `query` [m x d_model],
  /// keys and values from `memory` [n x d_model].
  Tensor forward(const Tensor& query, const Tensor& memory, const AttentionMask* mask = nullptr) const;
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  std::vector<Tensor> wq_, wk_, wv_;
  Tensor wo_;
};

/// Bayesian positionwise feed-forward block: Linear(relu(BayesLinearLRT(x))).
/// No dropout.
class BayesFeedForward {
 public:
  BayesFeedForward() = default;
  BayesFeedForward(std::size_t d_model, std::size_t d_ff, Rng& rng, double rho_init);

  Tensor forward(const Tensor& x, ForwardContext& ctx) const;
  GaussianVariationalLayer& bayes() { return bayes_; }
  const GaussianVariationalLayer& bayes() const { return bayes_; }
  const Linear& output() const { return output_; }
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  GaussianVariationalLayer bayes_;
  Linear output_;
};

/// Two 3x3 stride-2 conv + relu blocks then a projection to d_model.
/// [T x F] -> [floor(T/4) x d_model].
class ConvFrontend {
 public:
  ConvFrontend() = default;
  ConvFrontend(std::size_t feature_dim, std::size_t channels, std::size_t d_model, Rng& rng);

  Tensor forward(const Tensor& features) const;
  void collect(NamedParams& out, const std::string& prefix) const;

  static std::size_t output_length(std::size_t frames) { return frames / 4; }

 private:
  std::size_t feature_dim_ = 0;
  Tensor w1_, b1_, w2_, b2_;
  Linear proj_;
};

/// Row ranges of a stacked batch: segment s covers rows [offset(s), offset(s) + lengths[s]).
std::vector<std::size_t> segment_offsets(std::span<const std::size_t> lengths);

class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(const ModelConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, std::span<const std::size_t> lengths, ForwardContext& ctx) const;
  BayesFeedForward& ff() { return ff_; }
  const BayesFeedForward& ff() const { return ff_; }
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  MultiHeadAttention self_attn_;
  LayerNormParams ln1_, ln2_;
  BayesFeedForward ff_;
};

class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(const ModelConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, std::span<const std::size_t> lengths, const Tensor& memory,
                 std::span<const std::size_t> memory_lengths, ForwardContext& ctx) const;
  BayesFeedForward& ff() { return ff_; }
  const BayesFeedForward& ff() const { return ff_; }
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  MultiHeadAttention self_attn_, cross_attn_;
  LayerNormParams ln1_, ln2_, ln3_;
  BayesFeedForward ff_;
};

/// Encoder output for a batch, rows of all utterances stacked.
struct EncoderMemory {
  Tensor memory;
  std::vector<std::size_t> lengths;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Each feature block is [T x feature_dim] with T >= 4.
  EncoderMemory encode(std::span<const Tensor> features, ForwardContext& ctx) const;
  /// Decoder logits for every prefix position, stacked: [sum(L) x vocab].
  /// Every prefix must be non-empty and start with kSos.
  Tensor decode(const EncoderMemory& memory, std::span<const std::vector<int>> prefixes, ForwardContext& ctx) const;
  /// Row-wise log-softmax of the encoder-side CTC head, [sum(T') x vocab], blank last.
  Tensor ctc_log_probs(const EncoderMemory& memory) const;

  NamedParams parameters() const;
  std::vector<GaussianVariationalLayer*> bayes_layers();
  void set_kl_mode(KlMode mode);

 private:
  ModelConfig cfg_;
  ConvFrontend frontend_;
  PositionalEncodingTable pe_;
  std::vector<EncoderLayer> encoder_;
  Tensor embedding_;  // [vocab x d_model]
  std::vector<DecoderLayer> decoder_;
  Linear output_;
  Linear ctc_head_;
};

/// Single-utterance conveniences.
EncoderMemory encode(const Model& model, const Tensor& features, ForwardContext& ctx);
Tensor decode_forward(const Model& model, const EncoderMemory& memory, const std::vector<int>& prefix,
                      ForwardContext& ctx);

}  // namespace varformer
