#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "udaliver/data_io.hpp"
#include "udaliver/evaluation.hpp"
#include "udaliver/losses.hpp"
#include "udaliver/netdefs.hpp"
#include "udaliver/optim.hpp"
#include "udaliver/pamr.hpp"

namespace udaliver {

// ---------------------------------------------------------------------------
// Variants

enum class Variant {
  Proposed,
  ISIM,     // in-situ: D1 on U2's stem features, U2 only
  PSIM_SA,  // post-situ semantic-aware: D1 on U2's logits, U2 only
  SEA,      // shape-entropy-aware: D2 on U2's self-information maps, U2 only
  SA_SEA,   // both post-situ critics, U2 only
  WoMCPLG,  // plain thresholding instead of the mean completer
  WoLSAF,   // raw target images into U3 and the refinement
  WithPP,   // proposed training, refinement applied at test time
  WoPAMR,   // no refinement loss
  WoSTPL,   // no U4
  WithDML,  // U4 also sees transformed images; both learn from y2 and each other
  WoSSL,    // neither refinement nor U4
};

std::string variant_name(Variant v);
/// Throws ConfigError listing every valid name.
Variant parse_variant(const std::string& name);
std::vector<std::string> variant_names();

struct VariantSpec {
  bool use_u3 = true;
  bool use_u4 = true;
  bool align_logits = true;    // D1: o2 vs o1
  bool align_features = false; // D1: f2 vs f1
  bool align_entropy = true;   // D2: q2 vs q1
  bool align_u3 = true;        // D1: o3 vs o1
  bool mean_completer = true;
  bool lsaf = true;
  bool pamr_loss = true;
  bool entropy = true;
  bool dml = false;
  bool post_process = false;
  std::string report_network = "U3";

  bool stage_switch() const { return use_u3 && use_u4 && !dml; }
};

VariantSpec variant_spec(Variant v);

// ---------------------------------------------------------------------------
// Configuration

struct PretrainConfig {
  SegNetConfig net{8, 1, 1, 4};
  int epochs = 20;
  double lr = 1e-3;
  double lr_decay = 0.9;
  int batch_size = 8;
  uint64_t seed = 0;

  double lr_at(int epoch) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct TrainConfig {
  LossWeights weights;
  double lr_u2 = 1e-4;
  double lr_u3 = 1.2e-4;
  double lr_u4 = 1.5e-4;
  double lr_d1 = 2e-4;
  double lr_d2 = 2e-4;
  double rms_alpha = 0.9;
  double rms_eps = 1e-8;
  int batch_size = 8;
  int epochs = 100;
  uint64_t seed = 0;
  int critic_update_ratio = 1;
  int64_t u3_base = 32;
  int64_t u4_base = 8;
  int64_t critic_base = 64;
  int64_t critic_max = 512;
  PamrConfig pamr;
  Variant variant = Variant::Proposed;
  int checkpoint_every = 1;
  // Verify the clipping bound after every critic update (test mode).
  bool check_invariants = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---------------------------------------------------------------------------
// Networks

/// U1..U4 and the critics. U2 shares U1's weights and trains its stem only;
/// U1 is frozen. Absent networks (per variant) are null.
struct ModelBundle {
  SegNet u1{nullptr}, u2{nullptr}, u3{nullptr}, u4{nullptr};
  Critic d1{nullptr}, d2{nullptr};

  /// "U2.enc0.conv1.weight" -> requires_grad, for every network present.
  std::map<std::string, bool> trainable();
  /// U1 eval; U2 eval except its stem; the rest train.
  void train_mode();
  void eval_mode();
  void save(TensorArchive& ar) const;
  void load(const TensorArchive& ar);
};

/// Copies U1 into U2 and applies the freezing scheme. Throws ConfigError when
/// the two architectures differ.
void share_and_freeze(SegNet& u1, SegNet& u2);

/// Builds the networks a variant needs around a pretrained U1. image_size is
/// the critic input extent.
ModelBundle make_bundle(SegNet u1, const TrainConfig& cfg, int64_t image_size);

struct UdaOptimizers {
  std::unique_ptr<Optimizer> u2, u3, u4, d1, d2;
};

/// Everything that changes during UDA training.
struct UdaState {
  ModelBundle bundle;
  TrainConfig cfg;
  VariantSpec spec;
  UdaOptimizers opt;
  int next_epoch = 0;
  std::vector<ValidationPoint> history;

  UdaState(ModelBundle b, TrainConfig c);
  void save(const std::filesystem::path& path, int epoch) const;
  /// Restores networks, optimizer state and history; returns the epoch stored.
  int load(const std::filesystem::path& path);
};

/// One iteration: forward passes, pseudo-labels, critic update with clipping,
/// then the generator update of U2's stem, U3 and U4. Throws NumericError
/// naming the first non-finite term.
LossBreakdown uda_step(UdaState& state, const torch::Tensor& xs, const torch::Tensor& ys,
                       const torch::Tensor& xt, int epoch, int iteration = 0);

// ---------------------------------------------------------------------------
// Inference helpers

/// Eval-mode logits in chunks, without gradients. x: N x 1 x H x W.
torch::Tensor predict_logits(SegNet& net, const torch::Tensor& x, int64_t chunk = 16);

/// Binary D x H x W prediction for one subject. lsaf_beta > 0 transforms the
/// input first; post-processing refines the probabilities on that same input.
torch::Tensor predict_subject(SegNet& net, const Subject& s, double lsaf_beta = 0.0,
                              const std::optional<PamrConfig>& post = std::nullopt);

/// Mean 3-D Dice over labelled subjects.
double mean_subject_dice(SegNet& net, const std::vector<const Subject*>& subjects, double lsaf_beta = 0.0);

std::vector<MetricsRecord> evaluate_subjects(SegNet& net, const std::vector<const Subject*>& subjects,
                                             double lsaf_beta = 0.0,
                                             const std::optional<PamrConfig>& post = std::nullopt);

// ---------------------------------------------------------------------------
// Training drivers

struct PretrainResult {
  SegNet model{nullptr};
  std::vector<double> val_dice;  // per epoch, on held-out source subjects
  std::vector<double> lrs;
};

/// Supervised Dice training of U1 with Adam, lr multiplied by lr_decay after
/// every epoch. Throws ValidationError on an empty training set.
PretrainResult pretrain_source(const PretrainConfig& cfg, const std::vector<const Subject*>& train,
                               const std::vector<const Subject*>& val);

void save_segnet(const std::filesystem::path& path, SegNet& net, uint64_t seed,
                 const nlohmann::json& extra = nlohmann::json::object());
/// Loads a single-network checkpoint, or one network ("U1".."U4") out of a
/// UDA training checkpoint. expected, when given, must match the stored config.
SegNet load_segnet(const std::filesystem::path& path, const std::string& network = "",
                   const std::optional<SegNetConfig>& expected = std::nullopt);

struct UdaData {
  std::vector<const Subject*> source;      // labelled
  std::vector<const Subject*> target;      // labels never read
  std::vector<const Subject*> validation;  // labelled, measurement only
};

struct RunOptions {
  std::filesystem::path run_dir;  // empty: nothing written
  bool resume = true;
  std::function<void(const LossBreakdown&)> on_step;
  std::function<void(int epoch, const std::vector<ValidationPoint>&)> on_epoch;
};

/// Epoch = one pass over the target training slices in a seed-determined
/// order; source batches are drawn with replacement. After each epoch U2, U3
/// and U4 are validated. The run directory receives config.json,
/// loss_log.jsonl, validation.csv and epoch_{k}.ckpt; an existing run resumes
/// from its last checkpoint.
std::vector<ValidationPoint> train_uda(UdaState& state, const UdaData& data, const RunOptions& opt = {});

struct AblationReport {
  std::string variant;
  std::string network;  // network the metrics refer to
  std::vector<ValidationPoint> history;
  std::vector<MetricsRecord> records;  // per test subject
  MetricSummary summary;
};

/// Configures the framework for `variant`, trains it from the pretrained U1
/// and evaluates the reported network on `test`.
AblationReport run_ablation(Variant variant, SegNet& u1, TrainConfig cfg, const UdaData& data,
                            const std::vector<const Subject*>& test, const RunOptions& opt = {});

}  // namespace udaliver
