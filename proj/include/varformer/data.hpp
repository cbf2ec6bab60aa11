#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "varformer/tensor.hpp"
#include "varformer/tokens.hpp"

namespace varformer {

/// Token inventory: <pad>, <sos>, <eos>, content tokens, then the CTC blank.
class Vocab {
 public:
  static Vocab with_content(std::vector<std::string> content);
  /// "a", "b", ... followed by "|" as the word separator; `n_content` tokens total.
  static Vocab characters(std::size_t n_content = 12);

  /// One token per line; the first three lines must be <pad>, <sos>, <eos>.
  /// The blank is implicit and not stored in the file.
  static Vocab read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kNumReserved - 1; }
  int blank() const { return static_cast<int>(tokens_.size()) - 1; }
  int first_content() const { return kNumReserved; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  /// Content tokens concatenated, "|" rendered as a space; reserved ids and blank skipped.
  std::string render(std::span<const int> ids) const;

  bool operator==(const Vocab&) const = default;

 private:
  std::vector<std::string> tokens_;
};

struct Sample {
  std::size_t frames = 0;
  std::size_t feature_dim = 0;
  std::vector<double> features;  // frames x feature_dim, row-major
  std::vector<int> targets;      // content ids only

  Tensor feature_tensor() const;
  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::size_t feature_dim = 0;
  std::vector<Sample> samples;

  bool operator==(const Dataset&) const = default;
};

struct SynthConfig {
  std::size_t feature_dim = 16;
  std::size_t content_tokens = 12;
  std::size_t min_tokens = 2;
  std::size_t max_tokens = 8;
  std::size_t min_span = 8;
  std::size_t max_span = 12;
  double noise = 0.3;
  std::size_t samples = 500;

  /// Throws ConfigError when a sample could violate frontend or CTC feasibility.
  void validate() const;
};

/// Fixed F-dim pattern for a content token; independent of the dataset seed.
std::vector<double> token_template(int token_id, std::size_t feature_dim);
/// Smallest pairwise L2 distance between the templates of all content tokens.
double min_template_distance(const SynthConfig& cfg);

/// Each sample is a random token sequence without immediate repeats; every
/// token contributes its template for 8-12 frames (per config), plus Gaussian
/// noise of amplitude `noise`.
Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed);

/// Binary little-endian format: "BSPF", u32 version = 1, u32 count, u32 F,
/// then per sample u32 T, u32 U, T*F float64 frames, U u32 token ids.
void write_features(const std::filesystem::path& path, const Dataset& data);
/// Throws ParseError (header / truncation / dimension kinds). When
/// `expected_feature_dim` is set, a different F is a dimension mismatch.
Dataset read_features(const std::filesystem::path& path, std::optional<std::size_t> expected_feature_dim = {});

/// Zero-padded batch. Masks hold 1 on real positions.
struct Batch {
  std::size_t feature_dim = 0;
  std::size_t max_frames = 0;
  std::size_t max_targets = 0;
  std::vector<std::size_t> sample_ids;
  std::vector<double> features;  // B x max_frames x F
  std::vector<std::size_t> frame_lengths;
  std::vector<std::uint8_t> frame_mask;  // B x max_frames
  std::vector<int> targets;              // B x max_targets, kPad beyond the length
  std::vector<std::size_t> target_lengths;
  std::vector<std::uint8_t> target_mask;  // B x max_targets

  std::size_t size() const { return sample_ids.size(); }
  /// Unpadded [T x F] features of batch entry b.
  Tensor features_of(std::size_t b) const;
  std::vector<int> targets_of(std::size_t b) const;
};

/// Pads the given samples; `pad_frames_to` / `pad_targets_to` force extra padding.
Batch make_batch(const Dataset& data, std::span<const std::size_t> ids, std::size_t pad_frames_to = 0,
                 std::size_t pad_targets_to = 0);
/// Seeded shuffle, then consecutive batches of `batch_size` (the last may be short).
std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed);

}  // namespace varformer
