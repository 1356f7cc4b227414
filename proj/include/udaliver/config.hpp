#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "udaliver/data_io.hpp"
#include "udaliver/orchestration.hpp"

namespace udaliver {

/// Where subjects come from and how they are split.
struct DataSettings {
  bool synth = false;        // use synthetic data instead of NIfTI folders
  std::string archive;       // synthetic dataset archive; empty generates from [synth]
  std::string source_dir;    // CT: <dir>/images/*.nii[.gz] + <dir>/labels/<same name>
  std::string target_dir;    // MR: same layout, labels optional (evaluation only)
  int64_t image_size = 256;  // real data only
  int mr_liver_value = 0;    // 0: any nonzero label is liver
  int folds = 4;
  int fold = 0;
  uint64_t split_seed = 0;
  int source_val_subjects = 1;  // held out of source pretraining for validation Dice

  bool operator==(const DataSettings&) const = default;
};

struct RunSettings {
  std::string output_root;  // empty: $UDALIVER_OUTPUT_ROOT, else ./runs
  std::string run_id;       // empty: derived from the command

  bool operator==(const RunSettings&) const = default;
};

/// Effective configuration of one command. Serialized as a flat key-value
/// text with sections [run] [data] [synth] [pretrain] [train] [loss] [pamr].
struct Settings {
  RunSettings run;
  DataSettings data;
  SynthConfig synth;
  PretrainConfig pretrain;
  TrainConfig train;

  /// Every key as "section.key" -> value, in a stable order.
  std::map<std::string, nlohmann::json> flat() const;
  /// Sets one dotted key from its text form. Throws ConfigError on unknown
  /// keys and on values of the wrong type.
  void set(const std::string& key, const std::string& value);
  /// "section.key=value".
  void apply_override(const std::string& assignment);
  std::string dump() const;
  void validate() const;
};

/// Defaults overlaid by the file's assignments. Throws ConfigError with the
/// line number on syntax errors.
Settings parse_settings(const std::string& text, const std::string& origin = "<string>");
Settings load_settings(const std::filesystem::path& path);

/// $UDALIVER_OUTPUT_ROOT when set, else "runs".
std::filesystem::path default_output_root();
std::filesystem::path output_root(const Settings& s);

struct Datasets {
  std::vector<Subject> source;
  std::vector<Subject> target;
};

/// Loads or generates the subjects named by the data section.
Datasets load_datasets(const Settings& s, bool need_target_labels = false);

struct FoldSplit {
  std::vector<const Subject*> train;  // target subjects used unlabelled
  std::vector<const Subject*> test;   // labelled target subjects of the fold
};

/// Subject-wise k-fold partition of the target domain.
FoldSplit target_fold(const Datasets& d, const DataSettings& s);

/// Source subjects split into training and held-out validation.
std::pair<std::vector<const Subject*>, std::vector<const Subject*>> source_split(const Datasets& d,
                                                                                 const DataSettings& s);

}  // namespace udaliver
