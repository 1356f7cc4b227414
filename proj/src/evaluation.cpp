#include "udaliver/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "raster.hpp"
#include "udaliver/errors.hpp"
#include "udaliver/log.hpp"

namespace udaliver {

namespace {

constexpr double kInf = 1e30;

double ratio(int64_t num, int64_t den, bool empty_agrees) {
  if (den == 0) return empty_agrees ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

// Squared distance transform along one line (Felzenszwalb & Huttenlocher),
// sample positions scaled by `step`.
void edt_1d(const std::vector<double>& f, double step, std::vector<int64_t>& v, std::vector<double>& z,
            std::vector<double>& out) {
  const int64_t n = static_cast<int64_t>(f.size());
  const double w2 = step * step;
  int64_t first = 0;
  while (first < n && f[size_t(first)] >= kInf) ++first;
  if (first == n) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  auto meet = [&](int64_t q, int64_t r) {
    return ((f[size_t(q)] + w2 * double(q) * double(q)) - (f[size_t(r)] + w2 * double(r) * double(r))) /
           (2.0 * w2 * double(q - r));
  };
  size_t k = 0;
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (int64_t q = first + 1; q < n; ++q) {
    if (f[size_t(q)] >= kInf) continue;
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[k + 1] < double(q)) ++k;
    const double d = step * double(q - v[k]);
    out[size_t(q)] = d * d + f[size_t(v[k])];
  }
}

// Squared Euclidean distance from every voxel to the nearest set voxel of `m`.
std::vector<double> squared_distance_to(const MaskVolume& m, const Spacing& sp) {
  const int64_t D = m.depth, H = m.height, W = m.width;
  std::vector<double> dt(size_t(m.size()));
  for (size_t i = 0; i < dt.size(); ++i) dt[i] = m.data[i] ? 0.0 : kInf;

  auto pass = [&](int64_t len, double step, auto index_of, int64_t lines) {
    std::vector<double> f(static_cast<size_t>(len)), out(static_cast<size_t>(len)), z(static_cast<size_t>(len) + 1);
    std::vector<int64_t> v(static_cast<size_t>(len));
    for (int64_t line = 0; line < lines; ++line) {
      for (int64_t i = 0; i < len; ++i) f[size_t(i)] = dt[size_t(index_of(line, i))];
      edt_1d(f, step, v, z, out);
      for (int64_t i = 0; i < len; ++i) dt[size_t(index_of(line, i))] = out[size_t(i)];
    }
  };
  pass(W, sp.x, [&](int64_t line, int64_t i) { return line * W + i; }, D * H);
  pass(H, sp.y, [&](int64_t line, int64_t i) { return (line / W) * H * W + i * W + line % W; }, D * W);
  pass(D, sp.z, [&](int64_t line, int64_t i) { return i * H * W + line; }, H * W);
  return dt;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

ConfusionCounts confusion_counts(const MaskVolume& pred, const MaskVolume& gt) {
  if (!pred.same_shape(gt)) throw DimensionError("confusion_counts: shape mismatch");
  ConfusionCounts c;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    if (p && g)
      ++c.tp;
    else if (!p && !g)
      ++c.tn;
    else if (p)
      ++c.fp;
    else
      ++c.fn;
  }
  return c;
}

std::array<double, 7> metric_values(const MetricsRecord& r) {
  return {r.DS, r.JA, r.AC, r.PR, r.SE, r.SP, r.ASSD};
}

MetricsRecord ratio_metrics(const ConfusionCounts& c) {
  MetricsRecord r;
  const bool pred_empty = c.tp + c.fp == 0;
  const bool gt_empty = c.tp + c.fn == 0;
  const bool pred_full = c.tn + c.fn == 0;
  const bool gt_full = c.tn + c.fp == 0;
  r.DS = ratio(2 * c.tp, 2 * c.tp + c.fn + c.fp, true);
  r.JA = ratio(c.tp, c.tp + c.fn + c.fp, true);
  r.AC = ratio(c.tp + c.tn, c.tp + c.fn + c.fp + c.tn, true);
  r.PR = ratio(c.tp, c.tp + c.fp, gt_empty);
  r.SE = ratio(c.tp, c.tp + c.fn, pred_empty);
  r.SP = ratio(c.tn, c.tn + c.fp, pred_full && gt_full);
  return r;
}

MaskVolume surface(const MaskVolume& m) {
  MaskVolume s(m.depth, m.height, m.width);
  auto bg = [&](int64_t z, int64_t y, int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= m.depth || y >= m.height || x >= m.width) return true;
    return m.at(z, y, x) == 0;
  };
  for (int64_t z = 0; z < m.depth; ++z)
    for (int64_t y = 0; y < m.height; ++y)
      for (int64_t x = 0; x < m.width; ++x)
        if (m.at(z, y, x) && (bg(z - 1, y, x) || bg(z + 1, y, x) || bg(z, y - 1, x) ||
                              bg(z, y + 1, x) || bg(z, y, x - 1) || bg(z, y, x + 1)))
          s.at(z, y, x) = 1;
  return s;
}

double assd(const MaskVolume& pred, const MaskVolume& gt, const Spacing& spacing, bool* sentinel) {
  if (!pred.same_shape(gt)) throw DimensionError("assd: shape mismatch");
  if (sentinel) *sentinel = false;
  const auto sp = surface(pred);
  const auto sg = surface(gt);
  const auto np = std::count_if(sp.data.begin(), sp.data.end(), [](uint8_t v) { return v != 0; });
  const auto ng = std::count_if(sg.data.begin(), sg.data.end(), [](uint8_t v) { return v != 0; });
  if (np == 0 && ng == 0) return 0.0;
  if (np == 0 || ng == 0) {
    const double diag = std::sqrt(std::pow(pred.depth * spacing.z, 2) + std::pow(pred.height * spacing.y, 2) +
                                  std::pow(pred.width * spacing.x, 2));
    warn("assd_sentinel", "assd: empty surface, reporting volume diagonal " + std::to_string(diag));
    if (sentinel) *sentinel = true;
    return diag;
  }
  const auto to_gt = squared_distance_to(sg, spacing);
  const auto to_pred = squared_distance_to(sp, spacing);
  double sum = 0.0;
  for (size_t i = 0; i < sp.data.size(); ++i) {
    if (sp.data[i]) sum += std::sqrt(to_gt[i]);
    if (sg.data[i]) sum += std::sqrt(to_pred[i]);
  }
  return sum / static_cast<double>(np + ng);
}

MetricsRecord compute_metrics(const MaskVolume& pred, const MaskVolume& gt, const Spacing& spacing,
                              const std::string& subject_id) {
  auto r = ratio_metrics(confusion_counts(pred, gt));
  r.subject_id = subject_id;
  r.ASSD = assd(pred, gt, spacing, &r.assd_sentinel);
  return r;
}

MetricSummary aggregate(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw ValidationError("aggregate: no records");
  MetricSummary s;
  s.count = records.size();
  const double n = static_cast<double>(records.size());
  for (const auto& r : records) {
    const auto v = metric_values(r);
    for (size_t k = 0; k < 7; ++k) s.mean[k] += v[k];
  }
  for (auto& m : s.mean) m /= n;
  if (records.size() > 1) {
    for (const auto& r : records) {
      const auto v = metric_values(r);
      for (size_t k = 0; k < 7; ++k) s.stddev[k] += (v[k] - s.mean[k]) * (v[k] - s.mean[k]);
    }
    for (auto& sd : s.stddev) sd = std::sqrt(sd / (n - 1.0));
  }
  return s;
}

// ---------------------------------------------------------------------------

std::string results_table(const std::vector<SettingRecords>& settings) {
  std::ostringstream os;
  os << "setting,subject";
  for (auto* name : kMetricNames) os << ',' << name;
  os << '\n';
  for (const auto& s : settings)
    for (const auto& r : s.records) {
      os << s.setting << ',' << r.subject_id;
      for (double v : metric_values(r)) os << ',' << fmt_double(v);
      os << '\n';
    }
  return os.str();
}

std::string curves_table(const std::vector<ValidationPoint>& history) {
  std::ostringstream os;
  os << "epoch,network,dice\n";
  for (const auto& p : history) os << p.epoch << ',' << p.network << ',' << fmt_double(p.dice) << '\n';
  return os.str();
}

namespace {

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

double parse_cell(const std::string& cell, size_t row) {
  try {
    size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used == cell.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError("row " + std::to_string(row) + ": not a number: \"" + cell + "\"");
}

}  // namespace

std::vector<ValidationPoint> parse_curves_table(const std::string& text) {
  std::vector<ValidationPoint> out;
  std::stringstream ss(text);
  std::string line;
  size_t row = 0;
  while (std::getline(ss, line)) {
    if (row++ == 0 || line.empty()) continue;
    const auto cells = split_row(line);
    if (cells.size() != 3) throw ValidationError("row " + std::to_string(row) + ": expected epoch,network,dice");
    out.push_back({int(parse_cell(cells[0], row)), cells[1], parse_cell(cells[2], row)});
  }
  return out;
}

std::vector<SettingRecords> parse_results_table(const std::string& text) {
  std::vector<SettingRecords> out;
  std::stringstream ss(text);
  std::string line;
  size_t row = 0;
  while (std::getline(ss, line)) {
    if (row++ == 0 || line.empty()) continue;
    const auto cells = split_row(line);
    if (cells.size() != 2 + kMetricNames.size())
      throw ValidationError("row " + std::to_string(row) + ": expected setting,subject and seven metrics");
    if (out.empty() || out.back().setting != cells[0]) out.push_back({cells[0], {}});
    MetricsRecord r;
    r.subject_id = cells[1];
    double* fields[] = {&r.DS, &r.JA, &r.AC, &r.PR, &r.SE, &r.SP, &r.ASSD};
    for (size_t i = 0; i < kMetricNames.size(); ++i) *fields[i] = parse_cell(cells[2 + i], row);
    out.back().records.push_back(r);
  }
  return out;
}

void write_line_plot(const std::filesystem::path& path,
                     const std::vector<std::vector<std::pair<double, double>>>& series) {
  detail::write_png(path, detail::plot_lines(series));
}

ReportFiles emit_reports(const std::vector<ValidationPoint>& history,
                         const std::vector<SettingRecords>& settings,
                         const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir.string(), "cannot create directory: " + ec.message());

  ReportFiles files;
  if (!settings.empty()) {
    files.table = out_dir / "results.csv";
    detail::write_text(files.table, results_table(settings));

    std::vector<std::string> subjects;
    for (const auto& s : settings)
      for (const auto& r : s.records)
        if (std::find(subjects.begin(), subjects.end(), r.subject_id) == subjects.end())
          subjects.push_back(r.subject_id);
    std::vector<std::vector<double>> groups(subjects.size(), std::vector<double>(settings.size(), 0.0));
    for (size_t si = 0; si < settings.size(); ++si)
      for (const auto& r : settings[si].records) {
        auto at = std::find(subjects.begin(), subjects.end(), r.subject_id) - subjects.begin();
        groups[size_t(at)][si] = r.DS;
      }
    files.bars_png = out_dir / "subjects.png";
    detail::write_png(files.bars_png, detail::plot_grouped_bars(groups));
  }

  if (!history.empty()) {
    files.curves_csv = out_dir / "curves.csv";
    detail::write_text(files.curves_csv, curves_table(history));
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    for (const auto& p : history) series[p.network].emplace_back(p.epoch, p.dice);
    std::vector<std::vector<std::pair<double, double>>> lines;
    for (auto& [name, pts] : series) lines.push_back(pts);
    files.curves_png = out_dir / "curves.png";
    detail::write_png(files.curves_png, detail::plot_lines(lines));
  }
  return files;
}

}  // namespace udaliver
