#include "varformer/rng.hpp"

#include <sstream>

#include "varformer/errors.hpp"

namespace varformer {

Rng Rng::derived(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  Rng rng;
  rng.engine_.seed(seq);
  return rng;
}

void Rng::fill_normal(std::span<double> out) {
  for (double& v : out) v = normal_(engine_);
}

std::string Rng::save() const {
  std::ostringstream os;
  os << engine_ << ' ' << normal_;
  return os.str();
}

void Rng::load(const std::string& state) {
  std::istringstream is(state);
  is >> engine_ >> normal_;
  if (!is) throw ContractError("rng state string is malformed");
}

}  // namespace varformer
