#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "varformer/rng.hpp"
#include "varformer/tensor.hpp"

namespace varformer {

struct GaussianPrior {
  double mu = 0.0;
  double sigma = 1.0;
};

enum class KlMode {
  /// Closed-form KL(q || p) between diagonal Gaussians.
  kStandard,
  /// 1/2 * sum(2 log(sp/sq) - (1 + (sp/sq)^2) + ((mp - mq)/sp)^2), kept for
  /// comparison only: it is -1 per element when q == p.
  kVerbatim,
};

/// Sums the KL terms of every Bayesian layer run during one forward pass.
class KlAccumulator {
 public:
  void reset();
  void add(const Tensor& kl);
  /// Number of add() calls since the last reset.
  std::size_t count() const { return count_; }
  /// Throws ContractError when nothing was added since reset (stale accumulator).
  Tensor total() const;

 private:
  Tensor total_;
  std::size_t count_ = 0;
};

/// sigma = log(1 + exp(rho)), strictly positive for every finite rho.
Tensor sigma_from_rho(const Tensor& rho);

/// KL between the elementwise Gaussian posterior N(mu_q, sigma_q^2) and the scalar
/// prior N(mu_p, sigma_p^2), summed over all elements. Returns a scalar tensor
/// differentiable in mu_q and sigma_q. Throws DomainError for non-positive sigmas.
Tensor kl_gaussian(const Tensor& mu_q, const Tensor& sigma_q, double mu_p, double sigma_p,
                   KlMode mode = KlMode::kStandard);

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// Linear layer with a factorized Gaussian posterior over weights and biases,
/// sampled through the local reparameterization trick.
class GaussianVariationalLayer {
 public:
  GaussianVariationalLayer() = default;
  /// W_mu ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), b_mu = 0, every rho = rho_init.
  GaussianVariationalLayer(std::size_t d_in, std::size_t d_out, Rng& rng, double rho_init = -5.0);
  GaussianVariationalLayer(Tensor w_mu, Tensor w_rho, Tensor b_mu, Tensor b_rho);

  std::size_t d_in() const { return w_mu_.cols(); }
  std::size_t d_out() const { return w_mu_.rows(); }

  const Tensor& w_mu() const { return w_mu_; }
  const Tensor& w_rho() const { return w_rho_; }
  const Tensor& b_mu() const { return b_mu_; }
  const Tensor& b_rho() const { return b_rho_; }

  GaussianPrior weight_prior{0.0, 1.0};
  GaussianPrior bias_prior{0.0, 0.1};
  KlMode kl_mode = KlMode::kStandard;

  /// KL of the weight and bias posteriors against their priors.
  Tensor kl() const;

  /// Output for x[B x d_in] with a caller-supplied noise eps[B x d_out]:
  /// x W_mu^T + b_mu + sqrt((x*x)(W_sigma*W_sigma)^T + b_sigma*b_sigma) * eps.
  /// Adds this layer's KL to `kl` when given.
  Tensor forward_lrt(const Tensor& x, const Tensor& eps, KlAccumulator* kl) const;
  /// Same, drawing one standard normal per output activation from `rng`.
  Tensor forward_lrt(const Tensor& x, Rng& rng, KlAccumulator* kl) const;
  /// Posterior-mean pass x W_mu^T + b_mu. No noise, no KL.
  Tensor forward_deterministic(const Tensor& x) const;

  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  void check_input(const Tensor& x) const;

  Tensor w_mu_, w_rho_, b_mu_, b_rho_;
};

}  // namespace varformer
