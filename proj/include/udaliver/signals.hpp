#pragma once

#include <torch/torch.h>

namespace udaliver {

inline constexpr double kLogFloor = 1e-6;

/// q = -p ln p elementwise with q(0) = 0. Differentiable; range [0, 1/e].
torch::Tensor weighted_self_information(const torch::Tensor& probs, bool validate = true);

struct AugmentedImage {
  torch::Tensor image;  // same shape as the input, values in [0,1]
  double beta = 3.0;
  bool degenerate = false;  // constant input; image is all zeros
};

/// Low-signal augmentation of one H x W image in [0,1]:
///   z = ln(max(x, 1e-6)) + beta x,  x' = ((z - min z) / (max z - min z))^2
/// min/max are taken over this image only. A constant image yields zeros and
/// a "degenerate_normalization" warning.
AugmentedImage low_signal_augment(const torch::Tensor& image, double beta);

/// Applies low_signal_augment to every N x 1 x H x W slice independently.
torch::Tensor low_signal_augment_batch(const torch::Tensor& batch, double beta);

}  // namespace udaliver
