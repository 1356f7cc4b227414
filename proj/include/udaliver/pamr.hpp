#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace udaliver {

enum class AffinityKernel {
  Squared,  // k = -(x_ij - x_ln)^2 / sigma_ij^2
  Literal,  // k = -(x_ij - x_ln) / sigma_ij^2, kept for audit only
};

struct PamrConfig {
  int iterations = 10;
  int kernel_size = 3;
  std::vector<int> dilations{1, 2, 4, 8};
  AffinityKernel kernel = AffinityKernel::Squared;
  double sigma_floor = 1e-6;

  void validate() const;
};

/// Neighbourhood offsets (dy, dx): the centre once, then every non-centre
/// position of the kernel at each dilation.
std::vector<std::pair<int, int>> pamr_offsets(int kernel_size, const std::vector<int>& dilations);

/// Reflect-mode index (no edge repeat) for an offset that may leave [0, n).
int64_t reflect_index(int64_t i, int64_t n);

struct AffinityField {
  std::vector<std::pair<int, int>> offsets;
  torch::Tensor alpha;  // N x K x H x W, softmax over K
  torch::Tensor sigma;  // N x C x H x W, local 3x3 standard deviation (floored)
};

/// image: H x W, C x H x W (treated as one sample) or N x C x H x W.
AffinityField compute_affinity(const torch::Tensor& image, const PamrConfig& cfg = {});

struct RefinedMask {
  torch::Tensor probs;   // refined foreground probability, shape of the input probs
  torch::Tensor pseudo;  // probs > 0.5
};

/// Iterates p <- sum_k alpha_k p_k with the affinity fixed from `image`.
/// Single-channel probabilities are refined as the stack [p, 1-p]. No
/// gradient flows through the result.
RefinedMask refine(const torch::Tensor& probs, const torch::Tensor& image, const PamrConfig& cfg = {});

/// Dice loss of U3's probabilities against the refined pseudo-label.
torch::Tensor pamr_loss(const torch::Tensor& probs_u3, const torch::Tensor& refined_pseudo);

}  // namespace udaliver
