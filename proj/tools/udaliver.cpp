// udaliver: pretrain, train, eval, synth, ablate, plot.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "udaliver/archive.hpp"
#include "udaliver/config.hpp"
#include "udaliver/errors.hpp"
#include "udaliver/evaluation.hpp"
#include "udaliver/orchestration.hpp"

namespace fs = std::filesystem;
using namespace udaliver;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string run_id;
  std::optional<uint64_t> seed;
};

struct DataFlags {
  bool synth = false;
  std::string archive, source_dir, target_dir;
  std::optional<int> fold;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "Config file (key = value lines in [sections])");
  sub->add_option("--set", c.sets, "Override a config key, e.g. --set train.lr_u3=1e-4 (repeatable)");
  sub->add_option("-o,--out", c.out, "Output root (default $UDALIVER_OUTPUT_ROOT or ./runs)");
  sub->add_option("--run-id", c.run_id, "Run directory name under the output root");
  sub->add_option("--seed", c.seed, "Seed for data generation, initialisation and ordering");
}

void add_data(CLI::App* sub, DataFlags& d, bool fold) {
  sub->add_flag("--synth", d.synth, "Use the synthetic two-domain dataset");
  sub->add_option("--archive", d.archive, "Synthetic dataset archive written by 'synth'");
  sub->add_option("--source-dir", d.source_dir, "CT folder with images/ and labels/");
  sub->add_option("--target-dir", d.target_dir, "MR folder with images/ and optional labels/");
  if (fold) sub->add_option("--fold", d.fold, "Target cross-validation fold");
}

// File defaults, then flags, then --set overrides.
Settings resolve(const Common& c, const DataFlags* d, const std::vector<std::pair<std::string, std::string>>& flags) {
  Settings s = c.config.empty() ? Settings{} : load_settings(c.config);
  if (!c.out.empty()) s.run.output_root = c.out;
  if (!c.run_id.empty()) s.run.run_id = c.run_id;
  if (c.seed) {
    s.synth.seed = s.pretrain.seed = s.train.seed = *c.seed;
  }
  if (d) {
    if (d->synth) s.data.synth = true;
    if (!d->archive.empty()) {
      s.data.synth = true;
      s.data.archive = d->archive;
    }
    if (!d->source_dir.empty()) s.data.source_dir = d->source_dir;
    if (!d->target_dir.empty()) s.data.target_dir = d->target_dir;
    if (d->fold) s.data.fold = *d->fold;
  }
  for (const auto& [k, v] : flags) s.set(k, v);
  for (const auto& a : c.sets) s.apply_override(a);
  s.validate();
  return s;
}

std::string slug(const std::string& name) {
  std::string out;
  for (unsigned char ch : name) {
    if (std::isalnum(ch)) out += char(std::tolower(ch));
    else if (!out.empty() && out.back() != '_') out += '_';
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError(path.string(), "write failed");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Creates the run directory and stores the resolved configuration in it.
fs::path prepare_run(const Settings& s, const std::string& default_id) {
  const auto dir = output_root(s) / (s.run.run_id.empty() ? default_id : s.run.run_id);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create run directory: " + ec.message());
  write_text(dir / "config.ini", s.dump());
  return dir;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string summary_table(const std::vector<SettingRecords>& settings) {
  std::ostringstream os;
  os << "setting,metric,mean,std,count\n";
  for (const auto& s : settings) {
    if (s.records.empty()) continue;
    const auto sum = aggregate(s.records);
    for (size_t i = 0; i < kMetricNames.size(); ++i) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%.6f,%.6f,%zu", sum.mean[i], sum.stddev[i], sum.count);
      os << s.setting << ',' << kMetricNames[i] << ',' << buf << '\n';
    }
  }
  return os.str();
}

void print_summary(const std::vector<SettingRecords>& settings) {
  for (const auto& s : settings) {
    if (s.records.empty()) continue;
    const auto sum = aggregate(s.records);
    std::cout << s.setting << ":";
    for (size_t i = 0; i < kMetricNames.size(); ++i)
      std::cout << ' ' << kMetricNames[i] << '=' << fmt(sum.mean[i]) << "+-" << fmt(sum.stddev[i]);
    std::cout << '\n';
  }
}

UdaData uda_data(const Datasets& d, const Settings& s, FoldSplit& fold) {
  fold = target_fold(d, s.data);
  UdaData data;
  for (const auto& src : d.source) data.source.push_back(&src);
  data.target = fold.train;
  for (const auto* t : fold.test)
    if (t->labels) data.validation.push_back(t);
  return data;
}

void print_epoch(int epoch, const std::vector<ValidationPoint>& pts) {
  std::cout << "epoch " << epoch;
  for (const auto& p : pts) std::cout << ' ' << p.network << '=' << fmt(p.dice);
  std::cout << std::endl;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const Settings& s) {
  if (!s.data.synth && s.data.source_dir.empty())
    throw ConfigError("missing source data: pass --source-dir DIR (or data.source_dir) or --synth");
  const auto dir = prepare_run(s, "pretrain-s" + std::to_string(s.pretrain.seed));
  const auto data = load_datasets(s);
  const auto [train, val] = source_split(data, s.data);
  const auto res = pretrain_source(s.pretrain, train, val);
  std::string log;
  for (size_t e = 0; e < res.lrs.size(); ++e) {
    nlohmann::json rec = {{"epoch", e}, {"lr", res.lrs[e]}};
    rec["val_dice"] = std::isfinite(res.val_dice[e]) ? nlohmann::json(res.val_dice[e]) : nlohmann::json(nullptr);
    log += rec.dump() + "\n";
    std::cout << "epoch " << e << " lr=" << res.lrs[e] << " val_dice=" << fmt(res.val_dice[e]) << '\n';
  }
  write_text(dir / "pretrain_log.jsonl", log);
  auto model = res.model;
  save_segnet(dir / "u1.ckpt", model, s.pretrain.seed, {{"epochs", s.pretrain.epochs}});
  std::cout << "checkpoint " << (dir / "u1.ckpt").string() << '\n';
  return 0;
}

int cmd_train(const Settings& s, const std::string& u1_ckpt, bool resume) {
  auto u1 = load_segnet(u1_ckpt, "U1", s.pretrain.net);
  const auto data = load_datasets(s);
  FoldSplit fold;
  const auto uda = uda_data(data, s, fold);
  const auto dir = prepare_run(s, "train-" + slug(variant_name(s.train.variant)) + "-f" + std::to_string(s.data.fold) +
                                      "-s" + std::to_string(s.train.seed));
  const int64_t size = uda.target.front()->slices.size(-1);
  UdaState st(make_bundle(u1, s.train, size), s.train);
  RunOptions opt;
  opt.run_dir = dir;
  opt.resume = resume;
  opt.on_epoch = print_epoch;
  train_uda(st, uda, opt);
  std::cout << "run " << dir.string() << '\n';
  return 0;
}

int cmd_eval(const Settings& s, const std::string& ckpt, std::string network, const std::string& post,
             const std::string& lsaf) {
  if (post != "none" && post != "pamr") throw ConfigError("--post-process must be none or pamr");
  if (lsaf != "auto" && lsaf != "on" && lsaf != "off") throw ConfigError("--lsaf must be auto, on or off");
  const auto ar = TensorArchive::load(ckpt);
  const bool uda = ar.meta.value("kind", "") == "uda";
  TrainConfig tc = s.train;
  if (uda) tc = ar.meta.at("config").get<TrainConfig>();
  if (!uda) network = "U1";
  auto net = load_segnet(ckpt, network);
  const auto spec = variant_spec(tc.variant);
  bool use_lsaf = false;
  if (lsaf == "on") use_lsaf = true;
  else if (lsaf == "auto") use_lsaf = uda && spec.lsaf && (network == "U3" || (network == "U4" && spec.dml));
  const double beta = use_lsaf ? tc.weights.beta : 0.0;

  const auto data = load_datasets(s, true);
  const auto fold = target_fold(data, s.data);
  for (const auto* t : fold.test)
    if (!t->labels) throw ValidationError("subject " + t->id + " has no labels; evaluation needs labelled targets");
  std::vector<SettingRecords> settings{{network, evaluate_subjects(net, fold.test, beta)}};
  if (post == "pamr") settings.push_back({network + "+PAMR", evaluate_subjects(net, fold.test, beta, tc.pamr)});

  const auto dir = prepare_run(s, "eval-" + slug(fs::path(ckpt).stem().string()) + "-" + slug(network) + "-f" +
                                      std::to_string(s.data.fold));
  emit_reports({}, settings, dir);
  write_text(dir / "summary.csv", summary_table(settings));
  print_summary(settings);
  std::cout << "results " << (dir / "results.csv").string() << '\n';
  return 0;
}

int cmd_synth(const Settings& s, std::string output) {
  fs::path path = output;
  if (path.empty()) path = prepare_run(s, "synth-s" + std::to_string(s.synth.seed)) / "synthetic.udl";
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_synthetic(path, generate_synthetic(s.synth), s.synth);
  std::cout << "dataset " << path.string() << '\n';
  return 0;
}

int cmd_ablate(const Settings& s, const std::string& u1_ckpt, const std::vector<std::string>& names) {
  auto u1 = load_segnet(u1_ckpt, "U1", s.pretrain.net);
  std::vector<Variant> variants;
  for (const auto& n : names.empty() ? variant_names() : names) variants.push_back(parse_variant(n));
  const auto data = load_datasets(s, true);
  FoldSplit fold;
  const auto uda = uda_data(data, s, fold);
  const auto dir = prepare_run(s, "ablate-f" + std::to_string(s.data.fold) + "-s" + std::to_string(s.train.seed));

  std::vector<SettingRecords> settings{{"source only", evaluate_subjects(u1, fold.test)}};
  std::vector<ValidationPoint> curves;
  for (auto v : variants) {
    std::cout << "variant " << variant_name(v) << std::endl;
    RunOptions opt;
    opt.run_dir = dir / slug(variant_name(v));
    opt.on_epoch = print_epoch;
    const auto rep = run_ablation(v, u1, s.train, uda, fold.test, opt);
    settings.push_back({rep.variant, rep.records});
    for (auto p : rep.history)
      if (p.network == rep.network) {
        p.network = rep.variant;
        curves.push_back(p);
      }
  }
  emit_reports(curves, settings, dir);
  write_text(dir / "summary.csv", summary_table(settings));
  print_summary(settings);
  return 0;
}

int cmd_plot(const fs::path& run, const std::string& log_arg, std::string out_dir) {
  const fs::path log_path = log_arg.empty() ? run / "loss_log.jsonl" : fs::path(log_arg);
  if (out_dir.empty()) out_dir = run.empty() ? log_path.parent_path().string() : run.string();
  bool any = false;

  if (fs::exists(log_path)) {
    // Per-epoch mean of every term, each scaled by its largest magnitude.
    std::map<std::string, std::map<int, std::pair<double, int>>> acc;
    std::ifstream in(log_path);
    std::string line;
    size_t records = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) throw ValidationError(log_path.string() + ": malformed line");
      if (j.contains("event")) continue;
      const auto lb = LossBreakdown::from_json(j);
      ++records;
      auto add = [&](const std::string& k, double v) {
        auto& slot = acc[k][lb.epoch];
        slot.first += v;
        slot.second += 1;
      };
      add("total", lb.total);
      for (int t = 0; t < kLossTermCount; ++t)
        if (const auto& v = lb.parts.value[size_t(t)]) add(std::string(term_name(LossTerm(t))), *v);
    }
    if (records == 0) throw ValidationError(log_path.string() + ": loss log is empty");
    std::vector<std::vector<std::pair<double, double>>> series;
    std::string legend = "series\n";
    for (const auto& [name, epochs] : acc) {
      double peak = 0.0;
      for (const auto& [e, sv] : epochs) peak = std::max(peak, std::abs(sv.first / sv.second));
      std::vector<std::pair<double, double>> pts;
      for (const auto& [e, sv] : epochs) pts.emplace_back(e, peak > 0 ? std::abs(sv.first / sv.second) / peak : 0.0);
      series.push_back(pts);
      legend += name + "\n";
    }
    fs::create_directories(out_dir);
    write_line_plot(fs::path(out_dir) / "losses.png", series);
    write_text(fs::path(out_dir) / "losses_legend.txt", legend);
    any = true;
  } else if (!log_arg.empty()) {
    throw IoError(log_path.string(), "loss log not found");
  }

  std::vector<ValidationPoint> history;
  std::vector<SettingRecords> settings;
  if (!run.empty()) {
    for (const char* name : {"validation.csv", "curves.csv"})
      if (history.empty() && fs::exists(run / name)) history = parse_curves_table(read_text(run / name));
    if (fs::exists(run / "results.csv")) settings = parse_results_table(read_text(run / "results.csv"));
  }
  if (!history.empty() || !settings.empty()) {
    const auto files = emit_reports(history, settings, out_dir);
    (void)files;
    any = true;
  }
  if (!any) throw ValidationError("nothing to plot: no loss log, validation history or results table found");
  std::cout << "plots " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised CT-to-MR liver segmentation: training, evaluation and reports"};
  app.require_subcommand(1);

  Common common;
  DataFlags data;

  auto* pre = app.add_subcommand("pretrain", "Train the source model U1 on labelled CT slices");
  std::optional<int> pre_epochs;
  add_common(pre, common);
  add_data(pre, data, false);
  pre->add_option("--epochs", pre_epochs, "Pretraining epochs");

  auto* train = app.add_subcommand("train", "Adapt to the target domain from a pretrained U1");
  std::string u1_ckpt, variant;
  std::optional<int> tr_epochs, tr_T;
  bool no_resume = false;
  add_common(train, common);
  add_data(train, data, true);
  train->add_option("--u1-ckpt", u1_ckpt, "Pretrained U1 checkpoint")->required();
  train->add_option("--epochs", tr_epochs, "Adaptation epochs");
  train->add_option("--T", tr_T, "Epoch at which U3 and U4 become partners");
  train->add_option("--variant", variant, "Framework variant (see 'udaliver variants')");
  train->add_flag("--no-resume", no_resume, "Start over even if the run directory holds checkpoints");

  auto* ev = app.add_subcommand("eval", "Evaluate a network on the labelled target fold");
  std::string ckpt, network = "U3", post = "none", lsaf = "auto";
  add_common(ev, common);
  add_data(ev, data, true);
  ev->add_option("--ckpt", ckpt, "UDA training checkpoint or single-network checkpoint")->required();
  ev->add_option("--network", network, "Network inside a UDA checkpoint (U1..U4)");
  ev->add_option("--post-process", post, "none or pamr (also report refined-mask metrics)");
  ev->add_option("--lsaf", lsaf, "Low-signal transform of the input: auto, on or off");

  auto* syn = app.add_subcommand("synth", "Write a synthetic two-domain dataset archive");
  std::string syn_out;
  add_common(syn, common);
  syn->add_option("--output", syn_out, "Archive path (default <run dir>/synthetic.udl)");

  auto* abl = app.add_subcommand("ablate", "Train and evaluate several variants on one fold");
  std::vector<std::string> variants;
  std::optional<int> ab_epochs, ab_T;
  add_common(abl, common);
  add_data(abl, data, true);
  abl->add_option("--u1-ckpt", u1_ckpt, "Pretrained U1 checkpoint")->required();
  abl->add_option("--variant", variants, "Variant to run (repeatable; default all)");
  abl->add_option("--epochs", ab_epochs, "Adaptation epochs");
  abl->add_option("--T", ab_T, "Epoch at which U3 and U4 become partners");

  auto* plot = app.add_subcommand("plot", "Render loss and Dice curves and per-subject bars from a run");
  std::string plot_run, plot_log, plot_out;
  plot->add_option("--run", plot_run, "Run directory");
  plot->add_option("--log", plot_log, "Loss log (default <run>/loss_log.jsonl)");
  plot->add_option("--out-dir", plot_out, "Where to write images (default: the run directory)");

  auto* cfg = app.add_subcommand("config", "Print the effective configuration");
  add_common(cfg, common);

  app.add_subcommand("variants", "List framework variants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;  // usage errors share the configuration-error code
  }

  try {
    auto num = [](auto v) { return std::to_string(v); };
    if (pre->parsed()) {
      std::vector<std::pair<std::string, std::string>> f;
      if (pre_epochs) f.emplace_back("pretrain.epochs", num(*pre_epochs));
      return cmd_pretrain(resolve(common, &data, f));
    }
    if (train->parsed() || abl->parsed()) {
      std::vector<std::pair<std::string, std::string>> f;
      const auto& epochs = train->parsed() ? tr_epochs : ab_epochs;
      const auto& T = train->parsed() ? tr_T : ab_T;
      if (epochs) f.emplace_back("train.epochs", num(*epochs));
      if (T) f.emplace_back("loss.T", num(*T));
      if (!variant.empty()) f.emplace_back("train.variant", variant);
      const auto s = resolve(common, &data, f);
      return train->parsed() ? cmd_train(s, u1_ckpt, !no_resume) : cmd_ablate(s, u1_ckpt, variants);
    }
    if (ev->parsed()) return cmd_eval(resolve(common, &data, {}), ckpt, network, post, lsaf);
    if (syn->parsed()) return cmd_synth(resolve(common, nullptr, {}), syn_out);
    if (plot->parsed()) {
      if (plot_run.empty() && plot_log.empty()) throw ConfigError("plot needs --run DIR or --log FILE");
      return cmd_plot(plot_run, plot_log, plot_out);
    }
    if (cfg->parsed()) {
      std::cout << resolve(common, nullptr, {}).dump();
      return 0;
    }
    for (const auto& n : variant_names()) std::cout << n << '\n';
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
