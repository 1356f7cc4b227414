#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace udaliver {

/// Binary 3-D volume, slice-major (d, h, w).
struct MaskVolume {
  int64_t depth = 0, height = 0, width = 0;
  std::vector<uint8_t> data;

  MaskVolume() = default;
  MaskVolume(int64_t d, int64_t h, int64_t w) : depth(d), height(h), width(w), data(size_t(d * h * w), 0) {}

  int64_t size() const { return depth * height * width; }
  uint8_t& at(int64_t z, int64_t y, int64_t x) { return data[size_t((z * height + y) * width + x)]; }
  uint8_t at(int64_t z, int64_t y, int64_t x) const { return data[size_t((z * height + y) * width + x)]; }
  bool same_shape(const MaskVolume& o) const {
    return depth == o.depth && height == o.height && width == o.width;
  }
};

/// Physical voxel size along (slice, row, column).
struct Spacing {
  double z = 1.0, y = 1.0, x = 1.0;
};

struct ConfusionCounts {
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion_counts(const MaskVolume& pred, const MaskVolume& gt);

struct MetricsRecord {
  std::string subject_id;
  double DS = 0, JA = 0, AC = 0, PR = 0, SE = 0, SP = 0, ASSD = 0;
  bool assd_sentinel = false;  // ASSD replaced by the volume diagonal
};

inline constexpr std::array<const char*, 7> kMetricNames{"DS", "JA", "AC", "PR", "SE", "SP", "ASSD"};
std::array<double, 7> metric_values(const MetricsRecord& r);

/// Ratio metrics from counts. A 0/0 ratio is 1 when prediction and ground
/// truth agree on the empty set it measures, 0 otherwise.
MetricsRecord ratio_metrics(const ConfusionCounts& c);

/// Foreground voxels with at least one background 6-neighbour; voxels
/// outside the volume count as background.
MaskVolume surface(const MaskVolume& m);

/// Average symmetric surface distance in physical units. Returns the volume
/// diagonal (and sets *sentinel) when exactly one surface is empty; 0 when
/// both are empty.
double assd(const MaskVolume& pred, const MaskVolume& gt, const Spacing& spacing = {},
            bool* sentinel = nullptr);

MetricsRecord compute_metrics(const MaskVolume& pred, const MaskVolume& gt, const Spacing& spacing = {},
                              const std::string& subject_id = "");

struct MetricSummary {
  std::array<double, 7> mean{};
  std::array<double, 7> stddev{};  // sample (n-1) deviation; 0 for a single record
  size_t count = 0;
};

MetricSummary aggregate(const std::vector<MetricsRecord>& records);

// ---------------------------------------------------------------------------
// Reports

struct ValidationPoint {
  int epoch = 0;
  std::string network;  // "U2", "U3", "U4"
  double dice = 0.0;
};

struct SettingRecords {
  std::string setting;
  std::vector<MetricsRecord> records;
};

/// Delimited results table: setting,subject,DS,...,ASSD. Fixed formatting so
/// identical inputs give identical bytes.
std::string results_table(const std::vector<SettingRecords>& settings);
std::string curves_table(const std::vector<ValidationPoint>& history);

/// Inverses of the two tables above. Throw ValidationError on malformed rows.
std::vector<ValidationPoint> parse_curves_table(const std::string& text);
std::vector<SettingRecords> parse_results_table(const std::string& text);

/// PNG with one polyline per series on a [0,1] y axis.
void write_line_plot(const std::filesystem::path& path,
                     const std::vector<std::vector<std::pair<double, double>>>& series);

struct ReportFiles {
  std::filesystem::path table, curves_csv, curves_png, bars_png;
};

/// Writes results.csv, curves.csv, curves.png (per-network Dice per epoch)
/// and subjects.png (grouped Dice bars per subject and setting). Files for
/// empty inputs are skipped. Throws IoError when out_dir is not writable.
ReportFiles emit_reports(const std::vector<ValidationPoint>& history,
                         const std::vector<SettingRecords>& settings,
                         const std::filesystem::path& out_dir);

}  // namespace udaliver
