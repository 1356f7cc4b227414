#include "udaliver/config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "udaliver/errors.hpp"

namespace udaliver {

namespace {

const std::vector<std::string> kSections{"run", "data", "synth", "pretrain", "train", "loss", "pamr"};

void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, nlohmann::json>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j;
  }
}

nlohmann::json unflatten(const std::map<std::string, nlohmann::json>& flat) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : flat) j[nlohmann::json::json_pointer("/" + [&] {
    std::string p = k;
    std::replace(p.begin(), p.end(), '.', '/');
    return p;
  }())] = v;
  return j;
}

nlohmann::json to_tree(const Settings& s) {
  nlohmann::json t;
  t["run"] = {{"output_root", s.run.output_root}, {"run_id", s.run.run_id}};
  const auto& d = s.data;
  t["data"] = {{"synth", d.synth},
               {"archive", d.archive},
               {"source_dir", d.source_dir},
               {"target_dir", d.target_dir},
               {"image_size", d.image_size},
               {"mr_liver_value", d.mr_liver_value},
               {"folds", d.folds},
               {"fold", d.fold},
               {"split_seed", d.split_seed},
               {"source_val_subjects", d.source_val_subjects}};
  t["synth"] = s.synth;
  const auto& p = s.pretrain;
  t["pretrain"] = {{"base_filters", p.net.base_filters},
                   {"depth", p.net.depth},
                   {"epochs", p.epochs},
                   {"lr", p.lr},
                   {"lr_decay", p.lr_decay},
                   {"batch_size", p.batch_size},
                   {"seed", p.seed}};
  nlohmann::json train = s.train;
  t["pamr"] = train.at("pamr");
  const auto& w = s.train.weights;
  nlohmann::json loss;
  for (size_t i = 0; i < w.lambda.size(); ++i) loss["lambda" + std::to_string(i + 1)] = w.lambda[i];
  loss["lambda2_stage2"] = w.lambda2_stage2;
  loss["T"] = w.T;
  loss["beta"] = w.beta;
  loss["clip_bound"] = w.clip_bound;
  t["loss"] = loss;
  train.erase("pamr");
  train.erase("weights");
  t["train"] = train;
  return t;
}

Settings from_tree(const nlohmann::json& t) {
  Settings s;
  s.run.output_root = t.at("run").at("output_root").get<std::string>();
  s.run.run_id = t.at("run").at("run_id").get<std::string>();
  const auto& d = t.at("data");
  d.at("synth").get_to(s.data.synth);
  d.at("archive").get_to(s.data.archive);
  d.at("source_dir").get_to(s.data.source_dir);
  d.at("target_dir").get_to(s.data.target_dir);
  d.at("image_size").get_to(s.data.image_size);
  d.at("mr_liver_value").get_to(s.data.mr_liver_value);
  d.at("folds").get_to(s.data.folds);
  d.at("fold").get_to(s.data.fold);
  d.at("split_seed").get_to(s.data.split_seed);
  d.at("source_val_subjects").get_to(s.data.source_val_subjects);
  t.at("synth").get_to(s.synth);
  const auto& p = t.at("pretrain");
  p.at("base_filters").get_to(s.pretrain.net.base_filters);
  p.at("depth").get_to(s.pretrain.net.depth);
  p.at("epochs").get_to(s.pretrain.epochs);
  p.at("lr").get_to(s.pretrain.lr);
  p.at("lr_decay").get_to(s.pretrain.lr_decay);
  p.at("batch_size").get_to(s.pretrain.batch_size);
  p.at("seed").get_to(s.pretrain.seed);
  auto train = t.at("train");
  train["pamr"] = t.at("pamr");
  const auto& l = t.at("loss");
  LossWeights w;
  for (size_t i = 0; i < w.lambda.size(); ++i) l.at("lambda" + std::to_string(i + 1)).get_to(w.lambda[i]);
  l.at("lambda2_stage2").get_to(w.lambda2_stage2);
  l.at("T").get_to(w.T);
  l.at("beta").get_to(w.beta);
  l.at("clip_bound").get_to(w.clip_bound);
  train["weights"] = w;
  train.get_to(s.train);
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_int(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected an integer, got \"" + text + "\"");
  return v;
}

double parse_float(const std::string& key, const std::string& text) {
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || *end != '\0' || errno == ERANGE || !std::isfinite(v))
    throw ConfigError(key + ": expected a finite number, got \"" + text + "\"");
  return v;
}

nlohmann::json parse_like(const std::string& key, const nlohmann::json& like, const std::string& raw) {
  const auto text = trim(raw);
  switch (like.type()) {
    case nlohmann::json::value_t::boolean: {
      std::string t = text;
      std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return char(std::tolower(c)); });
      if (t == "true" || t == "yes" || t == "on" || t == "1") return true;
      if (t == "false" || t == "no" || t == "off" || t == "0") return false;
      throw ConfigError(key + ": expected true or false, got \"" + text + "\"");
    }
    case nlohmann::json::value_t::number_unsigned: return parse_int<uint64_t>(key, text);
    case nlohmann::json::value_t::number_integer: return parse_int<int64_t>(key, text);
    case nlohmann::json::value_t::number_float: return parse_float(key, text);
    case nlohmann::json::value_t::string: {
      if (text.size() >= 2 && text.front() == '"' && text.back() == '"') return text.substr(1, text.size() - 2);
      return text;
    }
    case nlohmann::json::value_t::array: {
      auto arr = nlohmann::json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) arr.push_back(parse_int<int64_t>(key, trim(item)));
      return arr;
    }
    default: throw ConfigError(key + ": unsupported value type");
  }
}

std::string format_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& e : v) out += (out.empty() ? "" : ",") + e.dump();
    return out;
  }
  return v.dump();
}

}  // namespace

std::map<std::string, nlohmann::json> Settings::flat() const {
  std::map<std::string, nlohmann::json> out;
  flatten(to_tree(*this), "", out);
  return out;
}

void Settings::set(const std::string& key, const std::string& value) {
  auto f = flat();
  const auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key \"" + key + "\"");
  it->second = parse_like(key, it->second, value);
  try {
    *this = from_tree(unflatten(f));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

void Settings::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override \"" + assignment + "\" is not of the form section.key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string Settings::dump() const {
  const auto f = flat();
  std::ostringstream os;
  os << "# udaliver configuration\n";
  for (const auto& section : kSections) {
    os << "\n[" << section << "]\n";
    const auto prefix = section + ".";
    for (const auto& [k, v] : f)
      if (k.rfind(prefix, 0) == 0) os << k.substr(prefix.size()) << " = " << format_value(v) << "\n";
  }
  return os.str();
}

void Settings::validate() const {
  synth.validate();
  pretrain.validate();
  train.validate();
  if (data.folds < 1) throw ConfigError("data.folds must be >= 1");
  if (data.fold < 0 || data.fold >= data.folds) throw ConfigError("data.fold must lie in [0, data.folds)");
  if (data.source_val_subjects < 0) throw ConfigError("data.source_val_subjects must be >= 0");
  if (data.image_size < 16) throw ConfigError("data.image_size must be >= 16");
}

Settings parse_settings(const std::string& text, const std::string& origin) {
  Settings s;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto where = origin + ":" + std::to_string(lineno);
    auto t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      if (std::find(kSections.begin(), kSections.end(), section) == kSections.end())
        throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": assignment outside a section");
    auto value = trim(t.substr(eq + 1));
    if (const auto hash = value.find(" #"); hash != std::string::npos) value = trim(value.substr(0, hash));
    try {
      s.set(section + "." + trim(t.substr(0, eq)), value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return s;
}

Settings load_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_settings(ss.str(), path.string());
}

std::filesystem::path default_output_root() {
  if (const char* env = std::getenv("UDALIVER_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

std::filesystem::path output_root(const Settings& s) {
  return s.run.output_root.empty() ? default_output_root() : std::filesystem::path(s.run.output_root);
}

namespace {

std::string volume_id(const std::filesystem::path& p) {
  auto name = p.filename().string();
  for (const std::string ext : {".nii.gz", ".nii"})
    if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0)
      return name.substr(0, name.size() - ext.size());
  return "";
}

std::vector<std::filesystem::path> list_volumes(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError(dir.string(), "not a directory");
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && !volume_id(e.path()).empty()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError(dir.string(), "no .nii or .nii.gz volumes");
  return out;
}

std::vector<Subject> load_domain(const std::filesystem::path& root, Modality m, const DataSettings& d,
                                 bool need_labels) {
  std::vector<Subject> out;
  for (const auto& img_path : list_volumes(root / "images")) {
    const auto id = volume_id(img_path);
    const auto label_path = root / "labels" / img_path.filename();
    const bool has_labels = std::filesystem::exists(label_path);
    if (!has_labels && (need_labels || m == Modality::CT))
      throw IoError(label_path.string(), "label volume missing for subject " + id);
    const auto image = load_volume(img_path);
    if (m == Modality::CT) {
      out.push_back(preprocess_ct(image, load_volume(label_path), id, d.image_size));
    } else if (has_labels) {
      const auto labels = load_volume(label_path);
      out.push_back(preprocess_mr(image, &labels, id, d.image_size, d.mr_liver_value));
    } else {
      out.push_back(preprocess_mr(image, nullptr, id, d.image_size, d.mr_liver_value));
    }
  }
  return out;
}

}  // namespace

Datasets load_datasets(const Settings& s, bool need_target_labels) {
  Datasets d;
  if (s.data.synth) {
    auto ds = s.data.archive.empty() ? generate_synthetic(s.synth) : load_synthetic(s.data.archive);
    d.source = std::move(ds.source);
    d.target = std::move(ds.target);
    return d;
  }
  if (s.data.source_dir.empty()) throw ConfigError("no source data: set data.source_dir or use synthetic data");
  d.source = load_domain(s.data.source_dir, Modality::CT, s.data, true);
  if (!s.data.target_dir.empty()) d.target = load_domain(s.data.target_dir, Modality::MR, s.data, need_target_labels);
  return d;
}

FoldSplit target_fold(const Datasets& d, const DataSettings& s) {
  if (d.target.empty()) throw ConfigError("no target data: set data.target_dir or use synthetic data");
  FoldSplit f;
  if (s.folds == 1) {
    for (const auto& t : d.target) {
      f.train.push_back(&t);
      f.test.push_back(&t);
    }
    return f;
  }
  std::vector<std::string> ids;
  for (const auto& t : d.target) ids.push_back(t.id);
  const auto folds = make_cv_splits(ids, s.folds, s.split_seed);
  if (s.fold < 0 || s.fold >= s.folds) throw ConfigError("fold index out of range");
  const std::set<std::string> test(folds[size_t(s.fold)].begin(), folds[size_t(s.fold)].end());
  for (const auto& t : d.target) (test.count(t.id) ? f.test : f.train).push_back(&t);
  return f;
}

std::pair<std::vector<const Subject*>, std::vector<const Subject*>> source_split(const Datasets& d,
                                                                                 const DataSettings& s) {
  const auto n = d.source.size();
  if (n == 0) throw ConfigError("no source subjects");
  if (size_t(s.source_val_subjects) >= n)
    throw ConfigError("data.source_val_subjects leaves no source subjects for training");
  std::vector<const Subject*> train, val;
  for (size_t i = 0; i < n; ++i) (i + size_t(s.source_val_subjects) < n ? train : val).push_back(&d.source[i]);
  return {train, val};
}

}  // namespace udaliver
