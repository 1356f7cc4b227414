#include "udaliver/stpl.hpp"

#include "udaliver/errors.hpp"
#include "udaliver/losses.hpp"

namespace udaliver {

std::string_view phase_name(StplPhase p) {
  return p == StplPhase::TeacherStudent ? "teacher_student" : "partners";
}

StplStage stpl_stage(int epoch, int T) {
  if (epoch < 0) throw ValidationError("stpl_stage: negative epoch");
  if (T < 1) throw ValidationError("stpl_stage: T must be >= 1");
  return {epoch < T ? StplPhase::TeacherStudent : StplPhase::Partners, T};
}

StplLosses stpl_losses(const StplStage& stage, const torch::Tensor& probs_u3,
                       const torch::Tensor& probs_u4, const torch::Tensor& pseudo_from_u2,
                       const torch::Tensor& pseudo_from_u3, const torch::Tensor& pseudo_from_u4) {
  const auto& u3_target =
      stage.phase == StplPhase::TeacherStudent ? pseudo_from_u2 : pseudo_from_u4;
  return {dice_loss(probs_u3, u3_target.detach()), dice_loss(probs_u4, pseudo_from_u3.detach())};
}

}  // namespace udaliver
