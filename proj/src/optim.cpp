#include "udaliver/optim.hpp"

#include <cmath>

#include "udaliver/errors.hpp"

namespace udaliver {

namespace {

std::vector<torch::Tensor> zeros_like_all(const std::vector<torch::Tensor>& ps) {
  std::vector<torch::Tensor> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(torch::zeros_like(p).detach());
  return out;
}

void restore(std::vector<torch::Tensor>& dst, const TensorArchive& ar, const std::string& key) {
  for (size_t i = 0; i < dst.size(); ++i) {
    const auto& src = ar.get(key + "." + std::to_string(i));
    if (!src.sizes().equals(dst[i].sizes())) throw ConfigError("optimizer state shape mismatch at " + key);
    dst[i].copy_(src);
  }
}

}  // namespace

void Optimizer::zero_grad() {
  for (auto& p : params_) {
    auto& g = p.mutable_grad();
    if (g.defined()) g = torch::Tensor();
  }
}

RmsProp::RmsProp(std::vector<torch::Tensor> params, double lr, double alpha, double eps)
    : Optimizer(std::move(params), lr), alpha_(alpha), eps_(eps), square_avg_(zeros_like_all(params_)) {}

void RmsProp::step() {
  torch::NoGradGuard guard;
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].grad();
    if (!g.defined()) continue;
    square_avg_[i].mul_(alpha_).addcmul_(g, g, 1.0 - alpha_);
    params_[i].addcdiv_(g, square_avg_[i].sqrt().add_(eps_), -lr_);
  }
}

void RmsProp::save_state(TensorArchive& ar, const std::string& prefix) const {
  for (size_t i = 0; i < square_avg_.size(); ++i) ar.add(prefix + "square_avg." + std::to_string(i), square_avg_[i]);
}

void RmsProp::load_state(const TensorArchive& ar, const std::string& prefix) {
  torch::NoGradGuard guard;
  restore(square_avg_, ar, prefix + "square_avg");
}

Adam::Adam(std::vector<torch::Tensor> params, double lr, double beta1, double beta2, double eps)
    : Optimizer(std::move(params), lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      m_(zeros_like_all(params_)),
      v_(zeros_like_all(params_)) {}

void Adam::step() {
  torch::NoGradGuard guard;
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, double(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, double(steps_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].grad();
    if (!g.defined()) continue;
    m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
    v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    auto denom = (v_[i] / bc2).sqrt_().add_(eps_);
    params_[i].addcdiv_(m_[i], denom, -lr_ / bc1);
  }
}

void Adam::save_state(TensorArchive& ar, const std::string& prefix) const {
  ar.add(prefix + "steps", torch::tensor({steps_}, torch::kInt64));
  for (size_t i = 0; i < m_.size(); ++i) {
    ar.add(prefix + "m." + std::to_string(i), m_[i]);
    ar.add(prefix + "v." + std::to_string(i), v_[i]);
  }
}

void Adam::load_state(const TensorArchive& ar, const std::string& prefix) {
  torch::NoGradGuard guard;
  steps_ = ar.get(prefix + "steps").item<int64_t>();
  restore(m_, ar, prefix + "m");
  restore(v_, ar, prefix + "v");
}

}  // namespace udaliver
