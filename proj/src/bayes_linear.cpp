#include "varformer/bayes_linear.hpp"

#include <cmath>

#include "varformer/errors.hpp"
#include "varformer/ops.hpp"

namespace varformer {

void KlAccumulator::reset() {
  total_ = Tensor();
  count_ = 0;
}

void KlAccumulator::add(const Tensor& kl) {
  if (kl.size() != 1) throw ContractError("KlAccumulator::add expects a scalar, got " + shape_str(kl.shape()));
  total_ = total_.defined() ? ops::add(total_, kl) : kl;
  ++count_;
}

Tensor KlAccumulator::total() const {
  if (count_ == 0) throw ContractError("KL accumulator is stale: no Bayesian forward pass since reset");
  return total_;
}

Tensor sigma_from_rho(const Tensor& rho) { return ops::softplus(rho); }

Tensor kl_gaussian(const Tensor& mu_q, const Tensor& sigma_q, double mu_p, double sigma_p, KlMode mode) {
  if (mu_q.shape() != sigma_q.shape()) {
    throw ShapeError("kl_gaussian: mu " + shape_str(mu_q.shape()) + " vs sigma " + shape_str(sigma_q.shape()));
  }
  if (!(sigma_p > 0.0)) throw DomainError("kl_gaussian: prior sigma must be positive");
  for (double s : sigma_q.data())
    if (!(s > 0.0)) throw DomainError("kl_gaussian: posterior sigma must be positive, got " + std::to_string(s));

  const Tensor ratio = ops::div_scalar(sigma_q, sigma_p);                   // sq / sp
  const Tensor dmu = ops::div_scalar(ops::add_scalar(mu_q, -mu_p), sigma_p);  // (mq - mp) / sp
  const Tensor dmu2 = ops::mul(dmu, dmu);

  if (mode == KlMode::kStandard) {
    // log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2
    Tensor quad = ops::scale(ops::add(ops::mul(ratio, ratio), dmu2), 0.5);
    Tensor per_elem = ops::sub(ops::add_scalar(quad, -0.5), ops::log(ratio));
    return ops::sum(per_elem);
  }
  const Tensor inv = ops::reciprocal(ratio);  // sp / sq
  Tensor inner = ops::add(ops::sub(ops::scale(ops::log(inv), 2.0), ops::add_scalar(ops::mul(inv, inv), 1.0)), dmu2);
  return ops::scale(ops::sum(inner), 0.5);
}

GaussianVariationalLayer::GaussianVariationalLayer(std::size_t d_in, std::size_t d_out, Rng& rng, double rho_init) {
  if (d_in == 0 || d_out == 0) throw ShapeError("GaussianVariationalLayer: dimensions must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  std::vector<double> w(d_out * d_in);
  for (double& v : w) v = rng.uniform(-bound, bound);
  w_mu_ = Tensor::parameter({d_out, d_in}, std::move(w));
  w_rho_ = Tensor::parameter({d_out, d_in}, std::vector<double>(d_out * d_in, rho_init));
  b_mu_ = Tensor::parameter({d_out}, std::vector<double>(d_out, 0.0));
  b_rho_ = Tensor::parameter({d_out}, std::vector<double>(d_out, rho_init));
}

GaussianVariationalLayer::GaussianVariationalLayer(Tensor w_mu, Tensor w_rho, Tensor b_mu, Tensor b_rho)
    : w_mu_(std::move(w_mu)), w_rho_(std::move(w_rho)), b_mu_(std::move(b_mu)), b_rho_(std::move(b_rho)) {
  if (w_mu_.rank() != 2 || w_mu_.shape() != w_rho_.shape()) {
    throw ShapeError("GaussianVariationalLayer: weight mean " + shape_str(w_mu_.shape()) + " and rho " +
                     shape_str(w_rho_.shape()) + " must be equal-shaped matrices");
  }
  if (b_mu_.shape() != Shape{w_mu_.rows()} || b_rho_.shape() != b_mu_.shape()) {
    throw ShapeError("GaussianVariationalLayer: bias shapes " + shape_str(b_mu_.shape()) + "/" +
                     shape_str(b_rho_.shape()) + " do not fit " + std::to_string(w_mu_.rows()) + " outputs");
  }
}

Tensor GaussianVariationalLayer::kl() const {
  Tensor w_kl = kl_gaussian(w_mu_, sigma_from_rho(w_rho_), weight_prior.mu, weight_prior.sigma, kl_mode);
  Tensor b_kl = kl_gaussian(b_mu_, sigma_from_rho(b_rho_), bias_prior.mu, bias_prior.sigma, kl_mode);
  return ops::add(w_kl, b_kl);
}

void GaussianVariationalLayer::check_input(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != d_in()) {
    throw ShapeError("GaussianVariationalLayer: input " + shape_str(x.shape()) + " does not match d_in " +
                     std::to_string(d_in()));
  }
}

Tensor GaussianVariationalLayer::forward_lrt(const Tensor& x, const Tensor& eps, KlAccumulator* kl) const {
  check_input(x);
  if (eps.shape() != Shape{x.rows(), d_out()}) {
    throw ShapeError("forward_lrt: noise " + shape_str(eps.shape()) + " does not match output [" +
                     std::to_string(x.rows()) + "x" + std::to_string(d_out()) + "]");
  }
  const Tensor w_sigma = sigma_from_rho(w_rho_);
  const Tensor b_sigma = sigma_from_rho(b_rho_);
  const Tensor gamma = ops::add_row_bias(ops::matmul(x, ops::transpose(w_mu_)), b_mu_);
  const Tensor delta = ops::add_row_bias(ops::matmul(ops::mul(x, x), ops::transpose(ops::mul(w_sigma, w_sigma))),
                                         ops::mul(b_sigma, b_sigma));
  Tensor out = ops::add(gamma, ops::mul(ops::sqrt(delta), eps));
  if (kl != nullptr) {
    kl->add(ops::add(kl_gaussian(w_mu_, w_sigma, weight_prior.mu, weight_prior.sigma, kl_mode),
                     kl_gaussian(b_mu_, b_sigma, bias_prior.mu, bias_prior.sigma, kl_mode)));
  }
  return out;
}

Tensor GaussianVariationalLayer::forward_lrt(const Tensor& x, Rng& rng, KlAccumulator* kl) const {
  check_input(x);
  Tensor eps({x.rows(), d_out()});
  rng.fill_normal(eps.mutable_data());
  return forward_lrt(x, eps, kl);
}

Tensor GaussianVariationalLayer::forward_deterministic(const Tensor& x) const {
  check_input(x);
  return ops::add_row_bias(ops::matmul(x, ops::transpose(w_mu_)), b_mu_);
}

void GaussianVariationalLayer::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + "w_mu", w_mu_);
  out.emplace_back(prefix + "w_rho", w_rho_);
  out.emplace_back(prefix + "b_mu", b_mu_);
  out.emplace_back(prefix + "b_rho", b_rho_);
}

}  // namespace varformer
