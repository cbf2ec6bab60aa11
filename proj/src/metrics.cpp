#include "varformer/metrics.hpp"

#include <sstream>

#include "varformer/errors.hpp"

namespace varformer {

std::vector<std::string> split_words(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  return words;
}

double ErrorCounts::rate() const {
  if (reference_length == 0) throw ContractError("error rate undefined: total reference length is zero");
  return static_cast<double>(edits) / static_cast<double>(reference_length);
}

ErrorCounts word_errors(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  if (refs.size() != hyps.size()) {
    throw ContractError("word_errors: " + std::to_string(refs.size()) + " references vs " +
                        std::to_string(hyps.size()) + " hypotheses");
  }
  ErrorCounts c;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto r = split_words(refs[i]);
    const auto h = split_words(hyps[i]);
    c.edits += edit_distance<std::string>(r, h);
    c.reference_length += r.size();
  }
  return c;
}

ErrorCounts char_errors(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  if (refs.size() != hyps.size()) {
    throw ContractError("char_errors: " + std::to_string(refs.size()) + " references vs " +
                        std::to_string(hyps.size()) + " hypotheses");
  }
  ErrorCounts c;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    c.edits += edit_distance<char>(std::span<const char>(refs[i]), std::span<const char>(hyps[i]));
    c.reference_length += refs[i].size();
  }
  return c;
}

double wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  return word_errors(refs, hyps).rate();
}

double cer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  return char_errors(refs, hyps).rate();
}

}  // namespace varformer
