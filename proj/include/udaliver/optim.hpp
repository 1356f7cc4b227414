#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "udaliver/archive.hpp"

namespace udaliver {

/// Plain optimizers over an explicit parameter list. State lives in named
/// tensors so it can be written into a TensorArchive and restored exactly.
class Optimizer {
 public:
  Optimizer(std::vector<torch::Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {}
  virtual ~Optimizer() = default;

  virtual void step() = 0;
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  const std::vector<torch::Tensor>& params() const { return params_; }

  virtual void save_state(TensorArchive& ar, const std::string& prefix) const = 0;
  virtual void load_state(const TensorArchive& ar, const std::string& prefix) = 0;

 protected:
  std::vector<torch::Tensor> params_;
  double lr_;
};

/// v <- alpha v + (1-alpha) g^2;  p <- p - lr g / (sqrt(v) + eps)
class RmsProp : public Optimizer {
 public:
  RmsProp(std::vector<torch::Tensor> params, double lr, double alpha = 0.9, double eps = 1e-8);
  void step() override;
  void save_state(TensorArchive& ar, const std::string& prefix) const override;
  void load_state(const TensorArchive& ar, const std::string& prefix) override;

 private:
  double alpha_, eps_;
  std::vector<torch::Tensor> square_avg_;
};

class Adam : public Optimizer {
 public:
  Adam(std::vector<torch::Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step() override;
  void save_state(TensorArchive& ar, const std::string& prefix) const override;
  void load_state(const TensorArchive& ar, const std::string& prefix) override;

 private:
  double beta1_, beta2_, eps_;
  int64_t steps_ = 0;
  std::vector<torch::Tensor> m_, v_;
};

}  // namespace udaliver
