#include "udaliver/signals.hpp"

#include <sstream>

#include "udaliver/errors.hpp"
#include "udaliver/log.hpp"

namespace udaliver {

namespace {

void check_unit(const torch::Tensor& t, const char* who) {
  if (t.numel() == 0) return;
  auto d = t.detach();
  const double lo = d.min().item<double>();
  const double hi = d.max().item<double>();
  if (!(lo >= 0.0 && hi <= 1.0)) {
    std::ostringstream os;
    os << who << ": values must lie in [0,1], got [" << lo << ", " << hi << "]";
    throw ValidationError(os.str());
  }
}

}  // namespace

torch::Tensor weighted_self_information(const torch::Tensor& probs, bool validate) {
  if (validate) check_unit(probs, "weighted_self_information");
  return -probs * torch::log(probs.clamp_min(1e-30));
}

AugmentedImage low_signal_augment(const torch::Tensor& image, double beta) {
  if (!(beta > 0.0)) throw ValidationError("low_signal_augment: beta must be positive");
  if (image.numel() == 0) throw DimensionError("low_signal_augment: empty image");
  check_unit(image, "low_signal_augment");

  auto x = image.detach().to(torch::kFloat64);
  auto z = torch::log(x.clamp_min(kLogFloor)) + beta * x;
  const double lo = z.min().item<double>();
  const double hi = z.max().item<double>();
  AugmentedImage out;
  out.beta = beta;
  if (!(hi > lo)) {
    warn("degenerate_normalization", "low_signal_augment: constant image, returning zeros");
    out.degenerate = true;
    out.image = torch::zeros_like(image);
    return out;
  }
  auto u = (z - lo) / (hi - lo);
  out.image = (u * u).clamp(0.0, 1.0).to(image.scalar_type());
  return out;
}

torch::Tensor low_signal_augment_batch(const torch::Tensor& batch, double beta) {
  if (batch.dim() != 4) throw DimensionError("low_signal_augment_batch: expected N x C x H x W");
  auto out = torch::empty_like(batch);
  for (int64_t n = 0; n < batch.size(0); ++n)
    for (int64_t c = 0; c < batch.size(1); ++c)
      out[n][c].copy_(low_signal_augment(batch[n][c], beta).image);
  return out;
}

}  // namespace udaliver
