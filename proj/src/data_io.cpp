#include "udaliver/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "udaliver/archive.hpp"
#include "udaliver/errors.hpp"
#include "udaliver/rng.hpp"

namespace udaliver {

namespace F = torch::nn::functional;

std::string modality_name(Modality m) { return m == Modality::CT ? "CT" : "MR"; }

Modality modality_from(const std::string& s) {
  if (s == "CT") return Modality::CT;
  if (s == "MR") return Modality::MR;
  throw ValidationError("unknown modality " + s);
}

torch::Tensor Volume::tensor() const {
  return torch::from_blob(const_cast<float*>(data.data()), {depth, height, width}, torch::kFloat32).clone();
}

// ---------------------------------------------------------------------------
// NIfTI-1

namespace {

constexpr int kNiftiHeader = 348;
constexpr int kNiftiVoxOffset = 352;

template <typename T>
T read_field(const std::vector<char>& buf, size_t off, bool swap) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  if (swap) {
    char* p = reinterpret_cast<char*>(&v);
    std::reverse(p, p + sizeof(T));
  }
  return v;
}

template <typename T>
void write_field(std::vector<char>& buf, size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

std::vector<char> slurp(const std::filesystem::path& path) {
  // gzread passes uncompressed files through unchanged.
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError(path.string(), "cannot open");
  std::vector<char> out;
  char chunk[1 << 16];
  while (true) {
    const int n = gzread(f, chunk, sizeof chunk);
    if (n < 0) {
      gzclose(f);
      throw IoError(path.string(), "corrupt or unreadable stream");
    }
    if (n == 0) break;
    out.insert(out.end(), chunk, chunk + n);
  }
  gzclose(f);
  return out;
}

template <typename T>
void convert(const std::vector<char>& buf, size_t off, size_t n, bool swap, std::vector<float>& dst) {
  for (size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(read_field<T>(buf, off + i * sizeof(T), swap));
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Volume load_volume(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError(path.string(), "no such file");
  const auto buf = slurp(path);
  if (buf.size() < kNiftiHeader) throw IoError(path.string(), "file shorter than a NIfTI header");

  bool swap = false;
  const auto hdr_size = read_field<int32_t>(buf, 0, false);
  if (hdr_size != kNiftiHeader) {
    if (read_field<int32_t>(buf, 0, true) != kNiftiHeader) throw IoError(path.string(), "not a NIfTI-1 file");
    swap = true;
  }
  if (std::memcmp(buf.data() + 344, "n+1", 3) != 0 && std::memcmp(buf.data() + 344, "ni1", 3) != 0)
    throw IoError(path.string(), "bad NIfTI magic");
  if (std::memcmp(buf.data() + 344, "ni1", 3) == 0)
    throw IoError(path.string(), "two-file NIfTI (.hdr/.img) is not supported");

  std::array<int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = read_field<int16_t>(buf, 40 + 2 * i, swap);
  if (dim[0] < 2 || dim[0] > 7) throw IoError(path.string(), "invalid dim[0]");
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw IoError(path.string(), "only single 3-D volumes are supported");
  const int64_t W = dim[1], H = dim[2], D = dim[0] >= 3 ? dim[3] : 1;
  if (W <= 0 || H <= 0 || D <= 0) throw IoError(path.string(), "non-positive dimension");

  const auto datatype = read_field<int16_t>(buf, 70, swap);
  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = read_field<float>(buf, 76 + 4 * i, swap);
  const auto vox_offset = static_cast<size_t>(read_field<float>(buf, 108, swap));
  const auto slope = read_field<float>(buf, 112, swap);
  const auto inter = read_field<float>(buf, 116, swap);

  Volume v;
  v.depth = D;
  v.height = H;
  v.width = W;
  auto sp = [](float s) { return s > 0.0f && std::isfinite(s) ? double(s) : 1.0; };
  v.spacing = {sp(pixdim[3]), sp(pixdim[2]), sp(pixdim[1])};
  const size_t n = size_t(D * H * W);
  v.data.resize(n);

  size_t elem = 0;
  switch (datatype) {
    case 2: elem = 1; break;
    case 4: case 512: elem = 2; break;
    case 8: case 16: case 768: elem = 4; break;
    case 64: elem = 8; break;
    case 256: elem = 1; break;
    default: throw IoError(path.string(), "unsupported NIfTI datatype " + std::to_string(datatype));
  }
  if (vox_offset + n * elem > buf.size()) throw IoError(path.string(), "truncated voxel data");
  switch (datatype) {
    case 2: convert<uint8_t>(buf, vox_offset, n, swap, v.data); break;
    case 4: convert<int16_t>(buf, vox_offset, n, swap, v.data); break;
    case 8: convert<int32_t>(buf, vox_offset, n, swap, v.data); break;
    case 16: convert<float>(buf, vox_offset, n, swap, v.data); break;
    case 64: convert<double>(buf, vox_offset, n, swap, v.data); break;
    case 256: convert<int8_t>(buf, vox_offset, n, swap, v.data); break;
    case 512: convert<uint16_t>(buf, vox_offset, n, swap, v.data); break;
    case 768: convert<uint32_t>(buf, vox_offset, n, swap, v.data); break;
  }
  if (slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f))
    for (auto& x : v.data) x = x * slope + inter;
  return v;
}

void save_volume(const std::filesystem::path& path, const Volume& v) {
  if (int64_t(v.data.size()) != v.depth * v.height * v.width) throw DimensionError("save_volume: data size mismatch");
  if (v.width > 32767 || v.height > 32767 || v.depth > 32767) throw DimensionError("save_volume: dimension too large");
  std::vector<char> hdr(kNiftiVoxOffset, 0);
  write_field<int32_t>(hdr, 0, kNiftiHeader);
  const std::array<int16_t, 8> dim{3, int16_t(v.width), int16_t(v.height), int16_t(v.depth), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) write_field<int16_t>(hdr, 40 + 2 * i, dim[i]);
  write_field<int16_t>(hdr, 70, 16);
  write_field<int16_t>(hdr, 72, 32);
  const std::array<float, 8> pixdim{1.0f, float(v.spacing.x), float(v.spacing.y), float(v.spacing.z), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) write_field<float>(hdr, 76 + 4 * i, pixdim[i]);
  write_field<float>(hdr, 108, float(kNiftiVoxOffset));
  write_field<float>(hdr, 112, 1.0f);
  write_field<float>(hdr, 116, 0.0f);
  hdr[123] = 2;  // millimetres
  write_field<int16_t>(hdr, 254, 1);
  write_field<float>(hdr, 280, float(v.spacing.x));
  write_field<float>(hdr, 296 + 4, float(v.spacing.y));
  write_field<float>(hdr, 312 + 8, float(v.spacing.z));
  std::memcpy(hdr.data() + 344, "n+1\0", 4);

  const auto name = path.string();
  const auto* payload = reinterpret_cast<const char*>(v.data.data());
  const size_t nbytes = v.data.size() * sizeof(float);
  if (ends_with(name, ".gz")) {
    gzFile f = gzopen(name.c_str(), "wb");
    if (!f) throw IoError(name, "cannot open for writing");
    bool ok = gzwrite(f, hdr.data(), unsigned(hdr.size())) == int(hdr.size());
    for (size_t off = 0; ok && off < nbytes; off += (1u << 30)) {
      const unsigned len = unsigned(std::min<size_t>(nbytes - off, 1u << 30));
      ok = gzwrite(f, payload + off, len) == int(len);
    }
    if (gzclose(f) != Z_OK || !ok) throw IoError(name, "write failed");
  } else {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(name, "cannot open for writing");
    out.write(hdr.data(), std::streamsize(hdr.size()));
    out.write(payload, std::streamsize(nbytes));
    if (!out) throw IoError(name, "write failed");
  }
}

// ---------------------------------------------------------------------------
// Preprocessing

MaskVolume mask_from_tensor(const torch::Tensor& t) {
  if (t.dim() != 3) throw DimensionError("mask_from_tensor: expected D x H x W");
  auto u = (t.detach().cpu() != 0).to(torch::kUInt8).contiguous();
  MaskVolume m(u.size(0), u.size(1), u.size(2));
  std::memcpy(m.data.data(), u.data_ptr<uint8_t>(), m.data.size());
  return m;
}

MaskVolume Subject::label_volume() const {
  if (!labels) throw ValidationError("subject " + id + " has no labels");
  return mask_from_tensor(*labels);
}

namespace {

torch::Tensor resize_stack(const torch::Tensor& dhw, int64_t size, bool nearest) {
  if (dhw.size(1) == size && dhw.size(2) == size) return dhw.clone();
  auto x = dhw.unsqueeze(1);
  auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{size, size});
  if (nearest)
    opts.mode(torch::kNearest);
  else
    opts.mode(torch::kBilinear).align_corners(false);
  return F::interpolate(x, opts).squeeze(1);
}

Subject finish(torch::Tensor img, std::optional<torch::Tensor> lab, const std::string& id, Modality mod,
               Spacing sp, int64_t H, int64_t W, int64_t size, const std::string& provenance) {
  Subject s;
  s.id = id;
  s.modality = mod;
  s.provenance = provenance;
  s.spacing = {sp.z, sp.y * double(H) / double(size), sp.x * double(W) / double(size)};
  if (lab) {
    auto keep = lab->flatten(1).amax(1) > 0;
    auto idx = keep.nonzero().flatten();
    img = img.index_select(0, idx);
    *lab = lab->index_select(0, idx);
  }
  s.slices = img.contiguous();
  s.labels = lab;
  return s;
}

void check_pair(const Volume& image, const Volume& labels) {
  if (image.depth != labels.depth || image.height != labels.height || image.width != labels.width)
    throw DimensionError("label volume shape does not match image volume");
}

}  // namespace

Subject preprocess_ct(const Volume& image, const Volume& labels, const std::string& id, int64_t size) {
  check_pair(image, labels);
  if (size < 1) throw ValidationError("preprocess_ct: size must be positive");
  auto img = image.tensor().clamp(-1000.0, 400.0);
  img = resize_stack(img, size, false);
  img = ((img + 1000.0) / 1400.0).clamp(0.0, 1.0);
  auto lab = resize_stack((labels.tensor() > 0).to(torch::kFloat32), size, true);
  return finish(img, lab, id, Modality::CT, image.spacing, image.height, image.width, size, "ct");
}

Subject preprocess_mr(const Volume& image, const Volume* labels, const std::string& id, int64_t size,
                      int liver_value) {
  if (labels) check_pair(image, *labels);
  if (size < 1) throw ValidationError("preprocess_mr: size must be positive");
  auto raw = image.tensor().to(torch::kFloat64);
  const double lo = raw.min().item<double>(), hi = raw.max().item<double>();
  if (!(hi > lo)) throw ValidationError("preprocess_mr: constant volume cannot be normalised");
  auto img = ((raw - lo) / (hi - lo)).to(torch::kFloat32);
  img = resize_stack(img, size, false).clamp(0.0, 1.0);
  std::optional<torch::Tensor> lab;
  if (labels) {
    auto l = labels->tensor();
    auto bin = liver_value == 0 ? (l > 0) : (l == float(liver_value));
    lab = resize_stack(bin.to(torch::kFloat32), size, true);
  }
  return finish(img, lab, id, Modality::MR, image.spacing, image.height, image.width, size, "mr");
}

std::vector<std::vector<std::string>> make_cv_splits(const std::vector<std::string>& subject_ids, int k,
                                                     uint64_t seed) {
  if (k < 1) throw ValidationError("make_cv_splits: k must be >= 1");
  if (subject_ids.empty() || subject_ids.size() % size_t(k) != 0)
    throw ValidationError("make_cv_splits: " + std::to_string(subject_ids.size()) +
                          " subjects cannot be split into " + std::to_string(k) + " equal folds");
  auto ids = subject_ids;
  Rng rng(derive_seed(seed, 0x5b1175ULL));
  rng.shuffle(ids);
  const size_t m = ids.size() / size_t(k);
  std::vector<std::vector<std::string>> folds(static_cast<size_t>(k));
  for (size_t i = 0; i < ids.size(); ++i) folds[i / m].push_back(ids[i]);
  return folds;
}

// ---------------------------------------------------------------------------
// Synthetic data

void SynthConfig::validate() const {
  if (version != 1) throw ConfigError("synth: unsupported generator version " + std::to_string(version));
  if (image_size < 16) throw ConfigError("synth: image_size must be >= 16");
  if (n_source < 1 || n_target < 1 || slices_per_subject < 1) throw ConfigError("synth: counts must be positive");
  if (!(hard_sample_fraction >= 0.0 && hard_sample_fraction <= 1.0))
    throw ConfigError("synth: hard_sample_fraction must lie in [0,1]");
  if (source_noise < 0 || target_noise < 0 || texture < 0 || bias_field < 0 || hard_gain <= 0 || hard_contrast < 0)
    throw ConfigError("synth: noise, texture and gain parameters must be non-negative");
}

namespace {

void levels_to_json(nlohmann::json& j, const TissueLevels& l) {
  j = {{"air", l.air}, {"body", l.body}, {"liver", l.liver}, {"spleen", l.spleen}, {"bone", l.bone}};
}

TissueLevels levels_from_json(const nlohmann::json& j) {
  return {j.at("air").get<double>(), j.at("body").get<double>(), j.at("liver").get<double>(),
          j.at("spleen").get<double>(), j.at("bone").get<double>()};
}

}  // namespace

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"version", c.version},
       {"image_size", c.image_size},
       {"n_source", c.n_source},
       {"n_target", c.n_target},
       {"slices_per_subject", c.slices_per_subject},
       {"hard_sample_fraction", c.hard_sample_fraction},
       {"source_noise", c.source_noise},
       {"target_noise", c.target_noise},
       {"texture", c.texture},
       {"bias_field", c.bias_field},
       {"hard_gain", c.hard_gain},
       {"hard_contrast", c.hard_contrast},
       {"seed", c.seed}};
  levels_to_json(j["source_levels"], c.source_levels);
  levels_to_json(j["target_levels"], c.target_levels);
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.version = j.at("version").get<int>();
  c.image_size = j.at("image_size").get<int64_t>();
  c.n_source = j.at("n_source").get<int>();
  c.n_target = j.at("n_target").get<int>();
  c.slices_per_subject = j.at("slices_per_subject").get<int>();
  c.hard_sample_fraction = j.at("hard_sample_fraction").get<double>();
  c.source_noise = j.at("source_noise").get<double>();
  c.target_noise = j.at("target_noise").get<double>();
  c.texture = j.at("texture").get<double>();
  c.bias_field = j.at("bias_field").get<double>();
  c.hard_gain = j.at("hard_gain").get<double>();
  c.hard_contrast = j.at("hard_contrast").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.source_levels = levels_from_json(j.at("source_levels"));
  c.target_levels = levels_from_json(j.at("target_levels"));
}

namespace {

// Star-shaped blob: radius r0 * scale * (1 + sum_k a_k cos(k(theta - rot) + phi_k)).
struct Blob {
  double cx = 0, cy = 0, rx = 1, ry = 1, rot = 0;
  std::array<double, 3> a{}, phi{};

  // Positive inside, in pixels (approximately), for a given size scale.
  double inside(double x, double y, double scale, double phase_drift) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(rot), s = std::sin(rot);
    const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
    const double rho = std::sqrt(u * u + v * v);
    const double theta = std::atan2(v, u);
    double shape = 1.0;
    for (int k = 0; k < 3; ++k) shape += a[size_t(k)] * std::cos(double(k + 2) * theta + phi[size_t(k)] + phase_drift);
    const double mean_r = 0.5 * (rx + ry);
    return (scale * shape - rho) * mean_r;
  }
};

Blob random_blob(Rng& rng, double size, double cx, double cy, double rlo, double rhi, double jitter,
                 double harmonic) {
  Blob b;
  b.cx = size * (cx + rng.uniform(-jitter, jitter));
  b.cy = size * (cy + rng.uniform(-jitter, jitter));
  b.rx = size * rng.uniform(rlo, rhi);
  b.ry = size * rng.uniform(rlo, rhi) * 0.85;
  b.rot = rng.uniform(-0.4, 0.4);
  for (int k = 0; k < 3; ++k) {
    b.a[size_t(k)] = rng.uniform(-harmonic, harmonic) / double(k + 1);
    b.phi[size_t(k)] = rng.uniform(0.0, 2.0 * M_PI);
  }
  return b;
}

double coverage(double inside) { return std::clamp(0.5 + inside, 0.0, 1.0); }

struct Wave {
  double fx, fy, phase, amp;
};

Subject render_subject(const SynthConfig& cfg, bool target, int index, bool hard) {
  Rng rng(derive_seed(cfg.seed, target ? 2 : 1, uint64_t(index)));
  const double n = double(cfg.image_size);
  const int64_t S = cfg.slices_per_subject, N = cfg.image_size;

  const Blob liver = random_blob(rng, n, 0.37, 0.46, 0.19, 0.25, 0.04, 0.12);
  const Blob spleen = random_blob(rng, n, 0.70, 0.40, 0.08, 0.11, 0.03, 0.10);
  const Blob bone = random_blob(rng, n, 0.50, 0.76, 0.055, 0.07, 0.015, 0.03);
  Blob body;
  body.cx = n * 0.5;
  body.cy = n * 0.5;
  body.rx = n * rng.uniform(0.44, 0.47);
  body.ry = n * rng.uniform(0.37, 0.41);

  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k)
    waves.push_back({rng.uniform(0.5, 3.0) * 2.0 * M_PI / n, rng.uniform(0.5, 3.0) * 2.0 * M_PI / n,
                     rng.uniform(0.0, 2.0 * M_PI), cfg.texture * rng.uniform(0.5, 1.0)});
  const double bias_gx = rng.uniform(-1.0, 1.0), bias_gy = rng.uniform(-1.0, 1.0);
  const double bias_ph = rng.uniform(0.0, 2.0 * M_PI);

  TissueLevels lv = target ? cfg.target_levels : cfg.source_levels;
  if (hard) lv.liver = lv.body + cfg.hard_contrast * (lv.liver - lv.body);
  const double gain = hard ? cfg.hard_gain : 1.0;
  const double sigma = target ? cfg.target_noise : cfg.source_noise;

  auto img = torch::empty({S, N, N}, torch::kFloat32);
  auto lab = torch::zeros({S, N, N}, torch::kFloat32);
  auto* ip = img.data_ptr<float>();
  auto* lp = lab.data_ptr<float>();
  for (int64_t s = 0; s < S; ++s) {
    const double t = (double(s) + 0.5) / double(S);
    const double liver_scale = 0.62 + 0.38 * std::sin(M_PI * t);
    const double spleen_scale = 0.55 + 0.45 * std::sin(M_PI * (0.15 + 0.7 * t));
    const double drift = 0.8 * t;
    Blob lvb = liver;
    lvb.cy += (t - 0.5) * 0.06 * n;
    for (int64_t y = 0; y < N; ++y)
      for (int64_t x = 0; x < N; ++x) {
        const double px = double(x) + 0.5, py = double(y) + 0.5;
        const double in_body = body.inside(px, py, 1.0, 0.0);
        const double in_liver = lvb.inside(px, py, liver_scale, drift);
        const double in_spleen = spleen.inside(px, py, spleen_scale, drift);
        const double in_bone = bone.inside(px, py, 1.0, 0.0);

        double tex = 0.0;
        for (const auto& w : waves) tex += w.amp * std::sin(w.fx * px + w.fy * py + w.phase + 0.3 * t);
        double v = lv.air;
        v += coverage(in_body) * (lv.body + tex - v);
        v += coverage(in_liver) * coverage(in_body) * (lv.liver + 0.5 * tex - v);
        v += coverage(in_spleen) * (lv.spleen + 0.5 * tex - v);
        v += coverage(in_bone) * (lv.bone - v);
        v *= gain;

        if (target) {
          const double field = 1.0 + cfg.bias_field * (0.5 * bias_gx * (px / n - 0.5) + 0.5 * bias_gy * (py / n - 0.5) +
                                                        0.25 * std::sin(2.0 * M_PI * px / n + bias_ph));
          v *= field;
          const double a = v + sigma * rng.normal(), b = sigma * rng.normal();
          v = std::sqrt(a * a + b * b);
        } else {
          v += sigma * rng.normal();
        }
        const size_t idx = size_t((s * N + y) * N + x);
        ip[idx] = float(std::clamp(v, 0.0, 1.0));
        lp[idx] = (in_liver > 0.0 && in_body > 0.0 && in_spleen <= 0.0 && in_bone <= 0.0) ? 1.0f : 0.0f;
      }
  }

  Subject subj;
  char id[32];
  std::snprintf(id, sizeof id, "%s%02d", target ? "tgt" : "src", index);
  subj.id = id;
  subj.modality = target ? Modality::MR : Modality::CT;
  subj.slices = img;
  subj.labels = lab;
  subj.hard = hard;
  subj.provenance = "synthetic:v" + std::to_string(cfg.version) + ":seed=" + std::to_string(cfg.seed) + ":" +
                    (target ? "target" : "source") + ":" + std::to_string(index);
  return subj;
}

}  // namespace

SynthDataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<int> order(size_t(cfg.n_target));
  for (int i = 0; i < cfg.n_target; ++i) order[size_t(i)] = i;
  Rng pick(derive_seed(cfg.seed, 3));
  pick.shuffle(order);
  const auto n_hard = size_t(std::lround(cfg.hard_sample_fraction * double(cfg.n_target)));
  std::vector<bool> hard(size_t(cfg.n_target), false);
  for (size_t i = 0; i < n_hard; ++i) hard[size_t(order[i])] = true;

  SynthDataset ds;
  for (int i = 0; i < cfg.n_source; ++i) ds.source.push_back(render_subject(cfg, false, i, false));
  for (int i = 0; i < cfg.n_target; ++i) ds.target.push_back(render_subject(cfg, true, i, hard[size_t(i)]));
  return ds;
}

// ---------------------------------------------------------------------------
// Archives

void save_subjects(const std::filesystem::path& path, const std::vector<Subject>& subjects,
                   const nlohmann::json& extra) {
  TensorArchive ar;
  ar.meta["kind"] = "subjects";
  ar.meta["extra"] = extra;
  auto& list = ar.meta["subjects"] = nlohmann::json::array();
  for (const auto& s : subjects) {
    list.push_back({{"id", s.id},
                    {"modality", modality_name(s.modality)},
                    {"provenance", s.provenance},
                    {"spacing", {s.spacing.z, s.spacing.y, s.spacing.x}},
                    {"hard", s.hard},
                    {"has_labels", s.labels.has_value()}});
    ar.add(s.id + "/slices", s.slices.to(torch::kFloat32));
    if (s.labels) ar.add(s.id + "/labels", (*s.labels != 0).to(torch::kUInt8));
  }
  ar.save(path);
}

std::vector<Subject> load_subjects(const std::filesystem::path& path, nlohmann::json* extra) {
  const auto ar = TensorArchive::load(path);
  if (ar.meta.value("kind", "") != "subjects") throw IoError(path.string(), "archive does not hold subjects");
  std::vector<Subject> out;
  try {
    for (const auto& e : ar.meta.at("subjects")) {
      Subject s;
      s.id = e.at("id").get<std::string>();
      s.modality = modality_from(e.at("modality").get<std::string>());
      s.provenance = e.at("provenance").get<std::string>();
      const auto sp = e.at("spacing").get<std::vector<double>>();
      s.spacing = {sp.at(0), sp.at(1), sp.at(2)};
      s.hard = e.at("hard").get<bool>();
      s.slices = ar.get(s.id + "/slices");
      if (e.at("has_labels").get<bool>()) s.labels = ar.get(s.id + "/labels").to(torch::kFloat32);
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw IoError(path.string(), std::string("bad subject manifest: ") + ex.what());
  }
  if (extra) *extra = ar.meta.value("extra", nlohmann::json::object());
  return out;
}

void save_synthetic(const std::filesystem::path& path, const SynthDataset& ds, const SynthConfig& cfg) {
  std::vector<Subject> all = ds.source;
  all.insert(all.end(), ds.target.begin(), ds.target.end());
  save_subjects(path, all, {{"synth", cfg}});
}

SynthDataset load_synthetic(const std::filesystem::path& path, SynthConfig* cfg) {
  nlohmann::json extra;
  auto all = load_subjects(path, &extra);
  if (!extra.contains("synth")) throw IoError(path.string(), "not a synthetic dataset archive");
  if (cfg) *cfg = extra.at("synth").get<SynthConfig>();
  SynthDataset ds;
  for (auto& s : all) (s.modality == Modality::CT ? ds.source : ds.target).push_back(std::move(s));
  return ds;
}

torch::Tensor stack_slices(const std::vector<const Subject*>& subjects, bool labels) {
  std::vector<torch::Tensor> parts;
  for (const auto* s : subjects) {
    if (labels) {
      if (!s->labels) throw ValidationError("subject " + s->id + " has no labels");
      parts.push_back(*s->labels);
    } else {
      parts.push_back(s->slices);
    }
  }
  if (parts.empty()) throw ValidationError("stack_slices: no subjects");
  return torch::cat(parts, 0).unsqueeze(1).contiguous();
}

}  // namespace udaliver
