#include "udaliver/losses.hpp"

#include <cmath>
#include <sstream>

#include "udaliver/errors.hpp"

namespace udaliver {

namespace {

constexpr std::array<std::string_view, kLossTermCount> kNames = {
    "seg_source",   "seg_u3",       "seg_u4",       "pamr",         "critic_d1_o2",
    "adv_gen_u2",   "critic_d1_o3", "adv_gen_u3",   "critic_d2_q2", "adv_gen_q2",
    "entropy",      "critic_d1_f2", "adv_gen_f2",   "seg_u3_mutual", "seg_u4_label"};

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* who) {
  if (!a.sizes().equals(b.sizes())) {
    std::ostringstream os;
    os << who << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw DimensionError(os.str());
  }
}

void check_unit_range(const torch::Tensor& t, const char* who) {
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

void check_nonempty_finite(const torch::Tensor& t, const char* who) {
  if (t.numel() == 0) throw ValidationError(std::string(who) + ": empty batch");
  if (!torch::isfinite(t.detach()).all().item<bool>())
    throw ValidationError(std::string(who) + ": non-finite critic score");
}

}  // namespace

torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, bool validate) {
  check_same_shape(pred, target, "dice_loss");
  if (validate) {
    check_unit_range(pred, "dice_loss pred");
    auto t = target.detach();
    if (t.numel() > 0 && !((t == 0) | (t == 1)).all().item<bool>())
      throw ValidationError("dice_loss: target must be binary");
  }
  auto y = target.to(pred.scalar_type());
  auto inter = (y * pred).sum();
  auto denom = (y * y).sum() + (pred * pred).sum();
  return 1.0 - (2.0 * inter + kDiceSmooth) / (denom + kDiceSmooth);
}

torch::Tensor gen_adv_loss(const torch::Tensor& critic_scores) {
  check_nonempty_finite(critic_scores, "gen_adv_loss");
  return -critic_scores.mean();
}

torch::Tensor critic_loss(const torch::Tensor& scores_target, const torch::Tensor& scores_source) {
  check_nonempty_finite(scores_target, "critic_loss target");
  check_nonempty_finite(scores_source, "critic_loss source");
  return scores_target.mean() - scores_source.mean();
}

torch::Tensor entropy_loss(const torch::Tensor& probs, bool validate) {
  if (probs.dim() < 1 || probs.size(0) == 0) throw DimensionError("entropy_loss: empty batch");
  if (validate) check_unit_range(probs, "entropy_loss");
  // Entropy of the Bernoulli prediction {p, 1-p} per pixel; the clamp keeps
  // 0 * log(0) at 0 and the gradient finite.
  auto q = 1.0 - probs;
  auto h = probs * torch::log(probs.clamp_min(1e-30)) + q * torch::log(q.clamp_min(1e-30));
  return -h.sum() / static_cast<double>(probs.size(0));
}

// ---------------------------------------------------------------------------

std::string_view term_name(LossTerm t) { return kNames[static_cast<int>(t)]; }

std::optional<LossTerm> term_from_name(std::string_view name) {
  for (int i = 0; i < kLossTermCount; ++i)
    if (kNames[i] == name) return static_cast<LossTerm>(i);
  return std::nullopt;
}

bool is_critic_term(LossTerm t) {
  return t == LossTerm::CriticD1O2 || t == LossTerm::CriticD1O3 || t == LossTerm::CriticD2Q2 ||
         t == LossTerm::CriticD1F2;
}

double LossWeights::weight(LossTerm t, int epoch, bool stage_switch) const {
  switch (t) {
    case LossTerm::SegU3:
      return (stage_switch && epoch >= T) ? lambda2_stage2 : lambda[1];
    case LossTerm::CriticD1F2:
      return lambda[4];
    case LossTerm::AdvGenF2:
      return lambda[5];
    case LossTerm::SegU3Mutual:
      return lambda[1];
    case LossTerm::SegU4Label:
      return lambda[2];
    default:
      return lambda[static_cast<int>(t)];
  }
}

void LossWeights::validate() const {
  for (double l : lambda)
    if (!(l >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (!(lambda2_stage2 >= 0.0)) throw ConfigError("lambda2_stage2 must be non-negative");
  if (T < 1) throw ConfigError("T must be >= 1");
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  if (!(clip_bound > 0.0)) throw ConfigError("clip_bound must be positive");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda", w.lambda}, {"lambda2_stage2", w.lambda2_stage2}, {"T", w.T},
       {"beta", w.beta},     {"clip_bound", w.clip_bound}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  j.at("lambda").get_to(w.lambda);
  j.at("lambda2_stage2").get_to(w.lambda2_stage2);
  j.at("T").get_to(w.T);
  j.at("beta").get_to(w.beta);
  j.at("clip_bound").get_to(w.clip_bound);
}

double LossBreakdown::reconstruct_total() const {
  double sum = 0.0;
  for (int i = 0; i < kLossTermCount; ++i)
    if (parts.value[i]) sum += weights[i] * *parts.value[i];
  return sum;
}

nlohmann::json LossBreakdown::to_json() const {
  nlohmann::json terms = nlohmann::json::object();
  nlohmann::json w = nlohmann::json::object();
  for (int i = 0; i < kLossTermCount; ++i) {
    if (!parts.value[i]) continue;
    terms[std::string(kNames[i])] = *parts.value[i];
    w[std::string(kNames[i])] = weights[i];
  }
  return {{"epoch", epoch},       {"iteration", iteration},  {"terms", terms},
          {"weights", w},         {"total", total},          {"u3_source", u3_source},
          {"hard_samples", hard_samples}};
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.epoch = j.at("epoch").get<int>();
  b.iteration = j.at("iteration").get<int>();
  b.total = j.at("total").get<double>();
  b.u3_source = j.value("u3_source", "");
  b.hard_samples = j.value("hard_samples", 0);
  for (auto& [name, value] : j.at("terms").items()) {
    auto t = term_from_name(name);
    if (!t) throw ValidationError("unknown loss term in log: " + name);
    b.parts.set(*t, value.get<double>());
    b.weights[static_cast<int>(*t)] = j.at("weights").at(name).get<double>();
  }
  return b;
}

LossBreakdown compose_total(const LossParts& parts, const LossWeights& weights, int epoch,
                            bool stage_switch) {
  if (epoch < 0) throw ValidationError("compose_total: negative epoch");
  LossBreakdown out;
  out.epoch = epoch;
  out.parts = parts;
  for (int i = 0; i < kLossTermCount; ++i) {
    out.weights[i] = weights.weight(static_cast<LossTerm>(i), epoch, stage_switch);
    if (parts.value[i] && !std::isfinite(*parts.value[i]))
      throw NumericError(std::string(kNames[i]), "non-finite loss value");
  }
  out.total = out.reconstruct_total();
  if (parts.has(LossTerm::SegU3)) out.u3_source = (stage_switch && epoch >= weights.T) ? "y4" : "y2";
  return out;
}

}  // namespace udaliver
