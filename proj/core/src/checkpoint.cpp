#include "p2det/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "p2det/errors.hpp"

namespace p2det {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as native doubles and specified little-endian");

namespace {
constexpr char kMagic[4] = {'P', '2', 'D', 'T'};

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  if (!ckpt.meta_json.empty()) manifest["meta"] = nlohmann::json::parse(ckpt.meta_json);
  auto& entries = manifest["tensors"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const uint64_t bytes = static_cast<uint64_t>(t.size()) * sizeof(double);
    entries.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", "f64"},
                       {"offset", offset},
                       {"length", bytes}});
    offset += bytes;
  }
  const std::string manifest_str = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_u32(os, kCheckpointVersion);
  write_u64(os, manifest_str.size());
  os.write(manifest_str.data(), static_cast<std::streamsize>(manifest_str.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    auto span = t.data();
    os.write(reinterpret_cast<const char*>(span.data()),
             static_cast<std::streamsize>(span.size() * sizeof(double)));
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  uint64_t manifest_len = 0;
  is.read(reinterpret_cast<char*>(&manifest_len), sizeof(manifest_len));
  std::string manifest_str(manifest_len, '\0');
  is.read(manifest_str.data(), static_cast<std::streamsize>(manifest_len));
  if (!is) throw IoError("checkpoint: truncated manifest in " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: manifest parse error: ") + e.what());
  }

  Checkpoint ckpt;
  if (manifest.contains("meta")) ckpt.meta_json = manifest["meta"].dump();
  const std::streampos blob_start = is.tellg();
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    if (entry.at("dtype").get<std::string>() != "f64")
      throw IoError("checkpoint: unsupported dtype for " + name);
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const uint64_t length = entry.at("length").get<uint64_t>();
    std::vector<double> data(length / sizeof(double));
    is.seekg(blob_start + static_cast<std::streamoff>(offset));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(length));
    if (!is) throw IoError("checkpoint: truncated blob for " + name);
    ckpt.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
  }
  return ckpt;
}

}  // namespace p2det
