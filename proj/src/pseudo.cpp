#include "udaliver/pseudo.hpp"

#include "udaliver/errors.hpp"

namespace udaliver {

int PseudoLabelBatch::hard_count() const {
  int n = 0;
  for (bool h : hard_flags) n += h ? 1 : 0;
  return n;
}

torch::Tensor normal_pseudolabel(const torch::Tensor& logits) {
  auto l = logits.detach();
  return (l > 0).to(l.scalar_type());
}

std::vector<bool> detect_hard(const torch::Tensor& masks) {
  if (masks.dim() < 1) throw DimensionError("detect_hard: expected a batch");
  const int64_t n = masks.size(0);
  std::vector<bool> flags(static_cast<size_t>(n));
  if (n == 0) return flags;
  auto sums = masks.detach().reshape({n, -1}).sum(1).to(torch::kFloat64);
  auto acc = sums.accessor<double, 1>();
  for (int64_t i = 0; i < n; ++i) flags[static_cast<size_t>(i)] = acc[i] == 0.0;
  return flags;
}

PseudoLabelBatch mean_completer(const torch::Tensor& logits) {
  if (logits.dim() < 1 || logits.size(0) < 1) throw DimensionError("mean_completer: empty batch");
  auto l = logits.detach();
  PseudoLabelBatch out;
  out.masks = normal_pseudolabel(l);
  out.hard_flags = detect_hard(out.masks);
  if (out.hard_count() == 0) {
    out.recombined_logits = l.clone();
    return out;
  }
  auto mean = l.mean(0);
  out.recombined_logits = l.clone();
  for (size_t i = 0; i < out.hard_flags.size(); ++i)
    if (out.hard_flags[i]) out.recombined_logits[static_cast<int64_t>(i)].copy_(mean);
  out.masks = normal_pseudolabel(out.recombined_logits);

  bool any_resolved = false;
  for (size_t i = 0; i < out.hard_flags.size(); ++i)
    if (out.hard_flags[i] && out.masks[static_cast<int64_t>(i)].sum().item<double>() > 0.0)
      any_resolved = true;
  out.all_hard_unresolved = !any_resolved;
  return out;
}

}  // namespace udaliver
