#include "udaliver/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "udaliver/errors.hpp"

namespace udaliver {

namespace {

constexpr char kMagic[8] = {'U', 'D', 'L', 'A', 'R', 'C', 'H', '\0'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32:
      return "f32";
    case torch::kFloat64:
      return "f64";
    case torch::kInt64:
      return "i64";
    case torch::kUInt8:
      return "u8";
    default:
      throw ValidationError(std::string("archive: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  if (s == "u8") return torch::kUInt8;
  throw ValidationError("archive: unknown dtype " + s);
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& pos, const std::string& origin) {
  if (pos + sizeof(T) > in.size()) throw IoError(origin, "truncated archive header");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void TensorArchive::add(const std::string& name, const torch::Tensor& t) {
  if (has(name)) throw ValidationError("archive: duplicate tensor " + name);
  dtype_name(t.scalar_type());
  tensors_.emplace_back(name, t.detach().cpu().contiguous().clone());
}

bool TensorArchive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

const torch::Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw ConfigError("archive: missing tensor " + name);
}

void TensorArchive::add_module(const std::string& prefix, torch::nn::Module& m) {
  for (const auto& p : m.named_parameters()) add(prefix + p.key(), p.value());
  for (const auto& b : m.named_buffers()) add(prefix + b.key(), b.value());
}

void TensorArchive::load_module(const std::string& prefix, torch::nn::Module& m) const {
  torch::NoGradGuard guard;
  auto copy_into = [&](const std::string& key, torch::Tensor& dst) {
    const auto& src = get(prefix + key);
    if (!src.sizes().equals(dst.sizes()) || src.scalar_type() != dst.scalar_type()) {
      std::ostringstream os;
      os << "archive: tensor " << prefix << key << " has shape " << src.sizes() << ", model expects "
         << dst.sizes();
      throw ConfigError(os.str());
    }
    dst.copy_(src);
  };
  for (auto& p : m.named_parameters()) copy_into(p.key(), p.value());
  for (auto& b : m.named_buffers()) copy_into(b.key(), b.value());
}

std::string TensorArchive::serialize() const {
  nlohmann::json manifest;
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * t.element_size();
    manifest["tensors"].push_back(
        {{"name", name}, {"dtype", dtype_name(t.scalar_type())}, {"shape", t.sizes().vec()},
         {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string header = manifest.dump();
  std::string out(kMagic, sizeof kMagic);
  put<uint32_t>(out, kArchiveVersion);
  put<uint64_t>(out, header.size());
  out += header;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : tensors_)
    out.append(static_cast<const char*>(t.data_ptr()), static_cast<size_t>(t.numel()) * t.element_size());
  return out;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  // Write-then-rename so an interrupted save never leaves a torn file behind.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string(), "cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(tmp.string(), "write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path.string(), "rename failed: " + ec.message());
}

TensorArchive TensorArchive::deserialize(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw IoError(origin, "not a udaliver archive");
  size_t pos = sizeof kMagic;
  const auto version = take<uint32_t>(bytes, pos, origin);
  if (version != kArchiveVersion)
    throw IoError(origin, "unsupported archive version " + std::to_string(version));
  const auto hlen = take<uint64_t>(bytes, pos, origin);
  if (pos + hlen > bytes.size()) throw IoError(origin, "truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(origin, std::string("corrupt manifest: ") + e.what());
  }
  pos += hlen;

  TensorArchive ar;
  ar.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const auto offset = entry.at("offset").get<uint64_t>();
    const auto nbytes = entry.at("nbytes").get<uint64_t>();
    if (pos + offset + nbytes > bytes.size()) throw IoError(origin, "truncated tensor payload");
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype"))));
    if (static_cast<uint64_t>(t.numel()) * t.element_size() != nbytes)
      throw IoError(origin, "tensor size disagrees with shape");
    std::memcpy(t.data_ptr(), bytes.data() + pos + offset, nbytes);
    ar.tensors_.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ar;
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str(), path.string());
}

}  // namespace udaliver
