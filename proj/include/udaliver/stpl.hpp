#pragma once

#include <string_view>

#include <torch/torch.h>

namespace udaliver {

enum class StplPhase { TeacherStudent, Partners };

struct StplStage {
  StplPhase phase = StplPhase::TeacherStudent;
  int T = 70;
};

std::string_view phase_name(StplPhase p);

/// TeacherStudent while epoch < T, Partners from epoch T on.
StplStage stpl_stage(int epoch, int T);

struct StplLosses {
  torch::Tensor loss_u3;
  torch::Tensor loss_u4;
};

/// Teacher U3 (transformed input) and student U4 (raw input).
/// TeacherStudent: U3 <- y2, U4 <- y3. Partners: U3 <- y4, U4 <- y3; y2 unused.
/// All pseudo-labels are detached before use.
StplLosses stpl_losses(const StplStage& stage, const torch::Tensor& probs_u3,
                       const torch::Tensor& probs_u4, const torch::Tensor& pseudo_from_u2,
                       const torch::Tensor& pseudo_from_u3, const torch::Tensor& pseudo_from_u4);

}  // namespace udaliver
