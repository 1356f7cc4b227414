#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace udaliver {

inline constexpr double kDiceSmooth = 1e-6;

/// Soft Dice loss over the whole batch:
///   1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps)
/// pred must lie in [0,1] and target in {0,1}; both share one shape.
/// Differentiable in pred. Pass validate=false on hot paths where the
/// inputs are known to satisfy the contract.
torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, bool validate = true);

/// Wasserstein generator loss: -mean(scores).
torch::Tensor gen_adv_loss(const torch::Tensor& critic_scores);

/// Wasserstein critic loss: mean(target scores) - mean(source scores).
/// The Lipschitz constraint is applied by weight clipping elsewhere.
torch::Tensor critic_loss(const torch::Tensor& scores_target, const torch::Tensor& scores_source);

/// Entropy minimisation: sum over every pixel of -p ln p - (1-p) ln(1-p),
/// divided by the number of maps N only (dim 0), with 0 ln 0 = 0.
torch::Tensor entropy_loss(const torch::Tensor& probs, bool validate = true);

// Every scalar that can appear in the composite objective. The first eleven
// follow the composite's lambda_1..lambda_11 ordering; the rest only appear in
// ablation variants and borrow the weight of their closest canonical term.
enum class LossTerm : int {
  SegSource = 0,  // lambda_1: source segmentation by U2
  SegU3,          // lambda_2: U3 vs y2 (stage 1) or y4 (stage 2)
  SegU4,          // lambda_3: U4 vs y3
  Pamr,           // lambda_4
  CriticD1O2,     // lambda_5
  AdvGenU2,       // lambda_6
  CriticD1O3,     // lambda_7
  AdvGenU3,       // lambda_8
  CriticD2Q2,     // lambda_9
  AdvGenQ2,       // lambda_10
  Entropy,        // lambda_11
  CriticD1F2,     // in-situ variant: D1 on stem features (weight of lambda_5)
  AdvGenF2,       // in-situ generator term (weight of lambda_6)
  SegU3Mutual,    // mutual-learning variant: U3 vs y4 (weight of stage-1 lambda_2)
  SegU4Label,     // mutual-learning variant: U4 vs y2 (weight of lambda_3)
};
inline constexpr int kLossTermCount = 15;

std::string_view term_name(LossTerm t);
std::optional<LossTerm> term_from_name(std::string_view name);
bool is_critic_term(LossTerm t);

struct LossWeights {
  // lambda[0] is lambda_1.
  std::array<double, 11> lambda{1, 1, 1, 1, 0.5, 1, 0.5, 1, 0.5, 1, 5};
  double lambda2_stage2 = 5.0;
  int T = 70;
  double beta = 3.0;
  double clip_bound = 0.01;

  double weight(LossTerm t, int epoch, bool stage_switch = true) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Component values for one iteration; absent terms are disabled by the
/// active variant.
struct LossParts {
  std::array<std::optional<double>, kLossTermCount> value{};

  void set(LossTerm t, double v) { value[static_cast<int>(t)] = v; }
  const std::optional<double>& get(LossTerm t) const { return value[static_cast<int>(t)]; }
  bool has(LossTerm t) const { return get(t).has_value(); }
};

/// Per-term values with the weights that were active when they were combined.
struct LossBreakdown {
  int epoch = 0;
  int iteration = 0;
  LossParts parts;
  std::array<double, kLossTermCount> weights{};
  double total = 0.0;
  // Which pseudo-label supervised U3 ("y2", "y4" or "" when U3 is absent).
  std::string u3_source;
  int hard_samples = 0;

  /// Recomputes sum(weight * value) over present terms.
  double reconstruct_total() const;
  nlohmann::json to_json() const;
  static LossBreakdown from_json(const nlohmann::json& j);
};

/// Weights every present component for the stage implied by epoch and sums
/// them. With stage_switch=false (no partner network) lambda_2 keeps its
/// stage-1 value and U3 stays on y2. Throws ValidationError on a negative epoch.
LossBreakdown compose_total(const LossParts& parts, const LossWeights& weights, int epoch,
                            bool stage_switch = true);

}  // namespace udaliver
