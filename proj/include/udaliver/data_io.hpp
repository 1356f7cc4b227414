#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "udaliver/evaluation.hpp"

namespace udaliver {

enum class Modality { CT, MR };
std::string modality_name(Modality m);
Modality modality_from(const std::string& s);

/// Raw scanner volume, slice-major (slice, H, W), as stored on disk.
struct Volume {
  int64_t depth = 0, height = 0, width = 0;
  std::vector<float> data;
  Spacing spacing;

  float at(int64_t z, int64_t y, int64_t x) const { return data[size_t((z * height + y) * width + x)]; }
  torch::Tensor tensor() const;  // D x H x W float32 copy
};

/// NIfTI-1 single-file reader (.nii or .nii.gz). NIfTI x runs along W, y
/// along H and z along slices. scl_slope/scl_inter are applied when set.
Volume load_volume(const std::filesystem::path& path);
/// Writes float32 NIfTI-1; gzip-compressed when the name ends in .gz.
void save_volume(const std::filesystem::path& path, const Volume& v);

struct Subject {
  std::string id;
  Modality modality = Modality::MR;
  torch::Tensor slices;                 // D x H x W float32 in [0,1]
  std::optional<torch::Tensor> labels;  // D x H x W float32 in {0,1}
  std::string provenance;
  Spacing spacing;
  bool hard = false;  // synthetic only: rendered with the low-signal liver

  int64_t num_slices() const { return slices.defined() ? slices.size(0) : 0; }
  MaskVolume label_volume() const;
};

/// Binary mask volume from a D x H x W tensor (nonzero = foreground).
MaskVolume mask_from_tensor(const torch::Tensor& t);

/// Clamp to [-1000, 400], resize slices to size x size (bilinear image,
/// nearest label), map to [0,1] by (x + 1000) / 1400, keep liver slices only.
/// Any nonzero label (liver or tumour) counts as liver.
Subject preprocess_ct(const Volume& image, const Volume& labels, const std::string& id, int64_t size = 256);

/// Per-volume min-max to [0,1] and resize. With labels, keeps liver slices
/// only. liver_value selects one label value as liver (CHAOS-style
/// multi-organ masks); 0 means any nonzero label.
Subject preprocess_mr(const Volume& image, const Volume* labels, const std::string& id, int64_t size = 256,
                      int liver_value = 0);

/// Deterministic subject-wise k-fold partition. Throws ValidationError when
/// the count is not a positive multiple of k.
std::vector<std::vector<std::string>> make_cv_splits(const std::vector<std::string>& subject_ids, int k,
                                                     uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic two-domain data

/// Grey levels of the tissue classes in one domain.
struct TissueLevels {
  double air = 0.0, body = 0.0, liver = 0.0, spleen = 0.0, bone = 0.0;
  bool operator==(const TissueLevels&) const = default;
};

struct SynthConfig {
  int version = 1;
  int64_t image_size = 64;
  int n_source = 8;
  int n_target = 8;
  int slices_per_subject = 12;
  double hard_sample_fraction = 0.25;
  double source_noise = 0.02;
  double target_noise = 0.03;
  double texture = 0.03;        // amplitude of the smooth background texture
  double bias_field = 0.15;     // target multiplicative inhomogeneity
  double hard_gain = 0.2;       // global signal gain of hard target subjects
  double hard_contrast = 0.25;  // liver-minus-body contrast kept on hard subjects
  TissueLevels source_levels{0.0, 0.55, 0.72, 0.63, 0.95};
  TissueLevels target_levels{0.02, 0.30, 0.50, 0.42, 0.12};
  uint64_t seed = 0;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct SynthDataset {
  std::vector<Subject> source;
  std::vector<Subject> target;
};

/// Each slice holds a smooth random "liver" blob, two distractor organs and a
/// body outline on a textured background. The target domain uses different
/// grey levels, a multiplicative bias field and Rician noise;
/// round(hard_sample_fraction * n_target) target subjects get a globally
/// weak signal and a liver close to the surrounding tissue.
SynthDataset generate_synthetic(const SynthConfig& cfg);

// ---------------------------------------------------------------------------
// Slice archives

/// Stores subjects in a TensorArchive (manifest lists id, modality,
/// provenance, spacing and flags). `extra` lands in the manifest verbatim.
void save_subjects(const std::filesystem::path& path, const std::vector<Subject>& subjects,
                   const nlohmann::json& extra = nlohmann::json::object());
std::vector<Subject> load_subjects(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

void save_synthetic(const std::filesystem::path& path, const SynthDataset& ds, const SynthConfig& cfg);
SynthDataset load_synthetic(const std::filesystem::path& path, SynthConfig* cfg = nullptr);

/// Concatenates the slices of the given subjects into an N x 1 x H x W batch
/// (labels likewise when `labels` is true; throws if any subject lacks them).
torch::Tensor stack_slices(const std::vector<const Subject*>& subjects, bool labels = false);

}  // namespace udaliver
