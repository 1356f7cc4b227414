#include "udaliver/pamr.hpp"

#include <sstream>

#include "udaliver/errors.hpp"
#include "udaliver/losses.hpp"

namespace udaliver {

namespace {

// Lifts H x W and C x H x W inputs to N x C x H x W.
torch::Tensor as_batch(const torch::Tensor& t, const char* who) {
  switch (t.dim()) {
    case 2:
      return t.unsqueeze(0).unsqueeze(0);
    case 3:
      return t.unsqueeze(0);
    case 4:
      return t;
    default: {
      std::ostringstream os;
      os << who << ": expected 2-4 dims, got " << t.sizes();
      throw DimensionError(os.str());
    }
  }
}

torch::Tensor reflect_indices(int64_t n, int offset) {
  auto idx = torch::empty({n}, torch::kLong);
  auto a = idx.accessor<int64_t, 1>();
  for (int64_t i = 0; i < n; ++i) a[i] = reflect_index(i + offset, n);
  return idx;
}

torch::Tensor shifted(const torch::Tensor& t, int dy, int dx) {
  return t.index_select(2, reflect_indices(t.size(2), dy)).index_select(3, reflect_indices(t.size(3), dx));
}

}  // namespace

void PamrConfig::validate() const {
  if (iterations < 1) throw ConfigError("pamr: iterations must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("pamr: kernel_size must be odd");
  if (dilations.empty()) throw ConfigError("pamr: dilations must be non-empty");
  for (int d : dilations)
    if (d < 1) throw ConfigError("pamr: dilations must be >= 1");
  if (!(sigma_floor > 0.0)) throw ConfigError("pamr: sigma_floor must be positive");
}

std::vector<std::pair<int, int>> pamr_offsets(int kernel_size, const std::vector<int>& dilations) {
  std::vector<std::pair<int, int>> out{{0, 0}};
  const int r = kernel_size / 2;
  for (int d : dilations)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dy != 0 || dx != 0) out.emplace_back(dy * d, dx * d);
  return out;
}

int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

AffinityField compute_affinity(const torch::Tensor& image, const PamrConfig& cfg) {
  cfg.validate();
  auto x = as_batch(image, "compute_affinity").detach().to(torch::kFloat64);

  std::vector<torch::Tensor> window;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) window.push_back(shifted(x, dy, dx));
  auto w = torch::stack(window, 0);
  auto mean = w.mean(0);
  auto sigma = ((w - mean) * (w - mean)).mean(0).sqrt().clamp_min(cfg.sigma_floor);
  auto inv_var = 1.0 / (sigma * sigma);

  AffinityField field;
  field.offsets = pamr_offsets(cfg.kernel_size, cfg.dilations);
  std::vector<torch::Tensor> k;
  k.reserve(field.offsets.size());
  for (auto [dy, dx] : field.offsets) {
    auto diff = x - shifted(x, dy, dx);
    auto kv = cfg.kernel == AffinityKernel::Squared ? -(diff * diff) * inv_var : -diff * inv_var;
    k.push_back(kv.mean(1));  // average over image channels
  }
  field.alpha = torch::softmax(torch::stack(k, 1), 1);
  field.sigma = sigma;
  return field;
}

RefinedMask refine(const torch::Tensor& probs, const torch::Tensor& image, const PamrConfig& cfg) {
  cfg.validate();
  auto p = as_batch(probs, "refine").detach();
  auto img = as_batch(image, "refine");
  if (p.size(0) != img.size(0) || p.size(2) != img.size(2) || p.size(3) != img.size(3)) {
    std::ostringstream os;
    os << "refine: probs " << probs.sizes() << " and image " << image.sizes() << " disagree";
    throw DimensionError(os.str());
  }
  if (p.numel() > 0) {
    const double lo = p.min().item<double>();
    const double hi = p.max().item<double>();
    if (!(lo >= 0.0 && hi <= 1.0)) throw ValidationError("refine: probabilities must lie in [0,1]");
  }

  const auto field = compute_affinity(img, cfg);
  auto state = p.to(torch::kFloat64);
  const bool binary = state.size(1) == 1;
  if (binary) state = torch::cat({state, 1.0 - state}, 1);

  for (int it = 0; it < cfg.iterations; ++it) {
    auto next = torch::zeros_like(state);
    for (size_t k = 0; k < field.offsets.size(); ++k) {
      auto [dy, dx] = field.offsets[k];
      auto a = field.alpha.narrow(1, static_cast<int64_t>(k), 1);
      next += a * shifted(state, dy, dx);
    }
    state = next / next.sum(1, true);
  }

  RefinedMask out;
  auto fg = binary ? state.narrow(1, 0, 1) : state;
  out.probs = fg.to(probs.scalar_type()).reshape(probs.sizes());
  out.pseudo = (out.probs > 0.5).to(probs.scalar_type());
  return out;
}

torch::Tensor pamr_loss(const torch::Tensor& probs_u3, const torch::Tensor& refined_pseudo) {
  return dice_loss(probs_u3, refined_pseudo.detach());
}

}  // namespace udaliver
