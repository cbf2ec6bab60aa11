#include "varformer/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

#include "varformer/errors.hpp"
#include "varformer/losses.hpp"
#include "varformer/rng.hpp"
#include "varformer/transformer.hpp"

namespace varformer {

namespace {

const char* const kReserved[] = {"<pad>", "<sos>", "<eos>"};
constexpr char kMagic[4] = {'B', 'S', 'P', 'F'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kTemplateSeed = 0x7e3a9c15d2b84f61ULL;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  bool has(std::size_t n) const { return pos_ <= bytes_.size() && bytes_.size() - pos_ >= n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  double f64() {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(bits);
  }

  void need(std::size_t n, const std::string& what) const {
    if (!has(n)) {
      throw ParseError(ParseErrorKind::kTruncated, "feature file truncated while reading " + what);
    }
  }

  const std::uint8_t* peek() const { return bytes_.data() + pos_; }
  void skip(std::size_t n) { pos_ += n; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Vocab Vocab::with_content(std::vector<std::string> content) {
  if (content.empty()) throw ConfigError("vocabulary needs at least one content token");
  Vocab v;
  v.tokens_.assign(std::begin(kReserved), std::end(kReserved));
  for (auto& t : content) {
    if (t.empty() || t == "<blank>" || std::find(v.tokens_.begin(), v.tokens_.end(), t) != v.tokens_.end()) {
      throw ConfigError("vocabulary token '" + t + "' is empty, reserved or duplicated");
    }
    v.tokens_.push_back(std::move(t));
  }
  v.tokens_.push_back("<blank>");
  return v;
}

Vocab Vocab::characters(std::size_t n_content) {
  if (n_content < 2 || n_content > 27) throw ConfigError("character vocabulary supports 2..27 content tokens");
  std::vector<std::string> content;
  for (std::size_t i = 0; i + 1 < n_content; ++i) content.emplace_back(1, static_cast<char>('a' + i));
  content.emplace_back("|");
  return with_content(std::move(content));
}

Vocab Vocab::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(ParseErrorKind::kIo, "cannot open vocabulary file " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.size() < 4) throw ParseError(ParseErrorKind::kTruncated, "vocabulary file has no content tokens");
  for (int i = 0; i < kNumReserved; ++i) {
    if (lines[static_cast<std::size_t>(i)] != kReserved[i]) {
      throw ParseError(ParseErrorKind::kMalformedHeader,
                       std::string("vocabulary line ") + std::to_string(i + 1) + " must be " + kReserved[i]);
    }
  }
  return with_content(std::vector<std::string>(lines.begin() + kNumReserved, lines.end()));
}

void Vocab::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ParseError(ParseErrorKind::kIo, "cannot write vocabulary file " + path.string());
  for (std::size_t i = 0; i + 1 < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

std::string Vocab::render(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < first_content() || id >= blank()) continue;
    const std::string& t = token(id);
    out += t == "|" ? std::string(" ") : t;
  }
  const auto b = out.find_first_not_of(' ');
  if (b == std::string::npos) return "";
  const auto e = out.find_last_not_of(' ');
  return out.substr(b, e - b + 1);
}

Tensor Sample::feature_tensor() const { return Tensor({frames, feature_dim}, features); }

void SynthConfig::validate() const {
  if (feature_dim < 4) throw ConfigError("feature_dim must be at least 4");
  if (content_tokens < 2) throw ConfigError("need at least 2 content tokens");
  if (min_tokens < 1 || min_tokens > max_tokens) throw ConfigError("token count range is empty");
  if (min_span < 1 || min_span > max_span) throw ConfigError("frame span range is empty");
  if (noise < 0.0) throw ConfigError("noise amplitude must be non-negative");
  // Sequences have no immediate repeats, so a CTC path needs one encoder frame per token.
  for (std::size_t u = min_tokens; u <= max_tokens; ++u) {
    const std::size_t shortest = u * min_span;
    if (shortest < 4 || ConvFrontend::output_length(shortest) < u) {
      throw ConfigError("frame spans of " + std::to_string(min_span) + " cannot fit " + std::to_string(u) +
                        " tokens after 4x subsampling");
    }
  }
}

std::vector<double> token_template(int token_id, std::size_t feature_dim) {
  Rng rng = Rng::derived(kTemplateSeed, static_cast<std::uint64_t>(token_id));
  std::vector<double> t(feature_dim);
  rng.fill_normal(t);
  return t;
}

double min_template_distance(const SynthConfig& cfg) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < cfg.content_tokens; ++a) {
    const auto ta = token_template(kNumReserved + static_cast<int>(a), cfg.feature_dim);
    for (std::size_t b = a + 1; b < cfg.content_tokens; ++b) {
      const auto tb = token_template(kNumReserved + static_cast<int>(b), cfg.feature_dim);
      double d = 0.0;
      for (std::size_t i = 0; i < ta.size(); ++i) d += (ta[i] - tb[i]) * (ta[i] - tb[i]);
      best = std::min(best, std::sqrt(d));
    }
  }
  return best;
}

Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (!(min_template_distance(cfg) > 0.0)) throw ConfigError("token templates are not distinct");
  std::vector<std::vector<double>> templates;
  for (std::size_t k = 0; k < cfg.content_tokens; ++k) {
    templates.push_back(token_template(kNumReserved + static_cast<int>(k), cfg.feature_dim));
  }
  Rng rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(0, hi - lo)(rng.engine()));
  };
  Dataset data;
  data.feature_dim = cfg.feature_dim;
  data.samples.reserve(cfg.samples);
  for (std::size_t n = 0; n < cfg.samples; ++n) {
    Sample s;
    s.feature_dim = cfg.feature_dim;
    const std::size_t u = pick(cfg.min_tokens, cfg.max_tokens);
    int prev = -1;
    for (std::size_t i = 0; i < u; ++i) {
      int tok;
      do {
        tok = kNumReserved + static_cast<int>(pick(0, cfg.content_tokens - 1));
      } while (tok == prev);
      s.targets.push_back(tok);
      prev = tok;
      const std::size_t span = pick(cfg.min_span, cfg.max_span);
      const auto& tmpl = templates[static_cast<std::size_t>(tok - kNumReserved)];
      for (std::size_t f = 0; f < span; ++f) {
        for (double v : tmpl) s.features.push_back(cfg.noise > 0.0 ? v + cfg.noise * rng.normal() : v);
      }
      s.frames += span;
    }
    if (ConvFrontend::output_length(s.frames) < ctc_min_frames(s.targets)) {
      throw ConfigError("generated sample violates CTC feasibility");
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

void write_features(const std::filesystem::path& path, const Dataset& data) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(data.samples.size()));
  put_u32(out, static_cast<std::uint32_t>(data.feature_dim));
  for (const auto& s : data.samples) {
    if (s.feature_dim != data.feature_dim || s.features.size() != s.frames * s.feature_dim) {
      throw ContractError("write_features: sample shape does not match the dataset feature dimension");
    }
    put_u32(out, static_cast<std::uint32_t>(s.frames));
    put_u32(out, static_cast<std::uint32_t>(s.targets.size()));
    for (double v : s.features) put_f64(out, v);
    for (int t : s.targets) put_u32(out, static_cast<std::uint32_t>(t));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError(ParseErrorKind::kIo, "cannot write feature file " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw ParseError(ParseErrorKind::kIo, "failed writing feature file " + path.string());
}

Dataset read_features(const std::filesystem::path& path, std::optional<std::size_t> expected_feature_dim) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError(ParseErrorKind::kIo, "cannot open feature file " + path.string());
  Reader in(std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));

  in.need(4, "magic");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), in.peek())) {
    throw ParseError(ParseErrorKind::kMalformedHeader, "not a feature file (bad magic)");
  }
  in.skip(4);
  const std::uint32_t version = in.u32("version");
  if (version != kVersion) {
    throw ParseError(ParseErrorKind::kMalformedHeader, "unsupported feature file version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32("sample count");
  const std::uint32_t dim = in.u32("feature dimension");
  if (dim == 0) throw ParseError(ParseErrorKind::kDimensionMismatch, "feature dimension is zero");
  if (expected_feature_dim && *expected_feature_dim != dim) {
    throw ParseError(ParseErrorKind::kDimensionMismatch, "feature dimension " + std::to_string(dim) +
                                                             " does not match expected " +
                                                             std::to_string(*expected_feature_dim));
  }
  Dataset data;
  data.feature_dim = dim;
  data.samples.reserve(std::min<std::size_t>(count, 1u << 20));
  for (std::uint32_t n = 0; n < count; ++n) {
    const std::string where = "sample " + std::to_string(n);
    Sample s;
    s.feature_dim = dim;
    s.frames = in.u32((where + " frame count").c_str());
    const std::uint32_t u = in.u32((where + " target count").c_str());
    if (s.frames == 0) throw ParseError(ParseErrorKind::kDimensionMismatch, where + " has zero frames");
    const std::uint64_t values = static_cast<std::uint64_t>(s.frames) * dim;
    if (values > in.remaining() / 8) throw ParseError(ParseErrorKind::kTruncated, where + " frames are truncated");
    s.features.resize(values);
    for (double& v : s.features) v = in.f64();
    in.need(static_cast<std::size_t>(u) * 4, where + " targets");
    s.targets.resize(u);
    for (int& t : s.targets) {
      const std::uint32_t raw = in.u32("target id");
      if (raw > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
        throw ParseError(ParseErrorKind::kDimensionMismatch, where + " has an out-of-range token id");
      }
      t = static_cast<int>(raw);
    }
    data.samples.push_back(std::move(s));
  }
  if (in.remaining() != 0) {
    throw ParseError(ParseErrorKind::kDimensionMismatch,
                     std::to_string(in.remaining()) + " trailing bytes after " + std::to_string(count) + " samples");
  }
  return data;
}

Tensor Batch::features_of(std::size_t b) const {
  const std::size_t t = frame_lengths.at(b);
  const auto begin = features.begin() + static_cast<std::ptrdiff_t>(b * max_frames * feature_dim);
  return Tensor({t, feature_dim}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(t * feature_dim)));
}

std::vector<int> Batch::targets_of(std::size_t b) const {
  const auto begin = targets.begin() + static_cast<std::ptrdiff_t>(b * max_targets);
  return std::vector<int>(begin, begin + static_cast<std::ptrdiff_t>(target_lengths.at(b)));
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> ids, std::size_t pad_frames_to,
                 std::size_t pad_targets_to) {
  Batch b;
  b.feature_dim = data.feature_dim;
  b.max_frames = pad_frames_to;
  b.max_targets = pad_targets_to;
  for (auto id : ids) {
    const Sample& s = data.samples.at(id);
    b.max_frames = std::max(b.max_frames, s.frames);
    b.max_targets = std::max(b.max_targets, s.targets.size());
  }
  const std::size_t n = ids.size();
  b.sample_ids.assign(ids.begin(), ids.end());
  b.features.assign(n * b.max_frames * b.feature_dim, 0.0);
  b.frame_mask.assign(n * b.max_frames, 0);
  b.targets.assign(n * b.max_targets, kPad);
  b.target_mask.assign(n * b.max_targets, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = data.samples[ids[i]];
    std::copy(s.features.begin(), s.features.end(),
              b.features.begin() + static_cast<std::ptrdiff_t>(i * b.max_frames * b.feature_dim));
    std::fill_n(b.frame_mask.begin() + static_cast<std::ptrdiff_t>(i * b.max_frames), s.frames, 1);
    std::copy(s.targets.begin(), s.targets.end(), b.targets.begin() + static_cast<std::ptrdiff_t>(i * b.max_targets));
    std::fill_n(b.target_mask.begin() + static_cast<std::ptrdiff_t>(i * b.max_targets), s.targets.size(), 1);
    b.frame_lengths.push_back(s.frames);
    b.target_lengths.push_back(s.targets.size());
  }
  return b;
}

std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ContractError("batch size must be at least 1");
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<Batch> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - i);
    out.push_back(make_batch(data, std::span<const std::size_t>(order.data() + i, n)));
  }
  return out;
}

}  // namespace varformer
