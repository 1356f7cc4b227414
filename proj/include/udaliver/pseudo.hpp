#pragma once

#include <vector>

#include <torch/torch.h>

namespace udaliver {

struct PseudoLabelBatch {
  torch::Tensor masks;              // N x ... in {0,1}, dtype of the logits
  std::vector<bool> hard_flags;     // per sample: normal-manner mask was all zero
  torch::Tensor recombined_logits;  // hard samples replaced by the batch mean
  bool all_hard_unresolved = false; // every hard sample still has an empty mask

  int hard_count() const;
};

/// 1 where sigmoid(logit) > 0.5, i.e. logit > 0; ties go to background.
/// Output is detached from the autograd graph.
torch::Tensor normal_pseudolabel(const torch::Tensor& logits);

/// One flag per sample (dim 0): true iff the mask has no foreground pixel.
std::vector<bool> detect_hard(const torch::Tensor& masks);

/// Mean completer: hard samples get the elementwise mean logit map of the
/// whole batch (hard samples included) before thresholding again.
PseudoLabelBatch mean_completer(const torch::Tensor& logits);

}  // namespace udaliver
