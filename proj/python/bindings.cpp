#include <torch/extension.h>

#include "udaliver/config.hpp"
#include "udaliver/data_io.hpp"
#include "udaliver/errors.hpp"
#include "udaliver/evaluation.hpp"
#include "udaliver/losses.hpp"
#include "udaliver/orchestration.hpp"
#include "udaliver/pamr.hpp"
#include "udaliver/pseudo.hpp"
#include "udaliver/signals.hpp"

namespace py = pybind11;
using namespace udaliver;

namespace {

py::dict metrics_dict(const MetricsRecord& r) {
  py::dict d;
  d["subject"] = r.subject_id;
  const auto v = metric_values(r);
  for (size_t i = 0; i < kMetricNames.size(); ++i) d[kMetricNames[i]] = v[i];
  d["assd_sentinel"] = r.assd_sentinel;
  return d;
}

py::dict subject_dict(const Subject& s) {
  py::dict d;
  d["id"] = s.id;
  d["modality"] = modality_name(s.modality);
  d["slices"] = s.slices;
  d["labels"] = s.labels ? py::cast(*s.labels) : py::none();
  d["hard"] = s.hard;
  d["provenance"] = s.provenance;
  return d;
}

}  // namespace

PYBIND11_MODULE(_udaliver, m) {
  m.doc() = "Core routines of the udaliver C++ library";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("low_signal_augment", [](const torch::Tensor& x, double beta) { return low_signal_augment(x, beta).image; },
        py::arg("image"), py::arg("beta") = 3.0);
  m.def("weighted_self_information", [](const torch::Tensor& p) { return weighted_self_information(p); });
  m.def("dice_loss", [](const torch::Tensor& p, const torch::Tensor& y) { return dice_loss(p, y); });
  m.def("entropy_loss", [](const torch::Tensor& p) { return entropy_loss(p); });
  m.def("mean_completer", [](const torch::Tensor& logits) {
    auto r = mean_completer(logits);
    return py::make_tuple(r.masks, r.hard_flags);
  });
  m.def(
      "pamr_refine",
      [](const torch::Tensor& probs, const torch::Tensor& image, int iterations) {
        PamrConfig cfg;
        cfg.iterations = iterations;
        return refine(probs, image, cfg).probs;
      },
      py::arg("probs"), py::arg("image"), py::arg("iterations") = 10);
  m.def(
      "compute_metrics",
      [](const torch::Tensor& pred, const torch::Tensor& gt, std::array<double, 3> spacing) {
        return metrics_dict(compute_metrics(mask_from_tensor(pred), mask_from_tensor(gt),
                                            Spacing{spacing[0], spacing[1], spacing[2]}));
      },
      py::arg("pred"), py::arg("gt"), py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0});
  m.def(
      "generate_synthetic",
      [](uint64_t seed, int64_t image_size, int n_source, int n_target, int slices) {
        SynthConfig cfg;
        cfg.seed = seed;
        cfg.image_size = image_size;
        cfg.n_source = n_source;
        cfg.n_target = n_target;
        cfg.slices_per_subject = slices;
        cfg.validate();
        const auto ds = generate_synthetic(cfg);
        py::dict out;
        py::list src, tgt;
        for (const auto& s : ds.source) src.append(subject_dict(s));
        for (const auto& s : ds.target) tgt.append(subject_dict(s));
        out["source"] = src;
        out["target"] = tgt;
        return out;
      },
      py::arg("seed") = 0, py::arg("image_size") = 64, py::arg("n_source") = 8, py::arg("n_target") = 8,
      py::arg("slices_per_subject") = 12);
  m.def("variant_names", &variant_names);
  m.def("default_config", [] { return Settings{}.dump(); });
  m.def("parse_config", [](const std::string& text) {
    py::dict d;
    for (const auto& [k, v] : parse_settings(text).flat()) d[py::str(k)] = py::module_::import("json").attr("loads")(v.dump());
    return d;
  });
}
