#pragma once

#include <string>
#include <utility>
#include <vector>

#include "p2det/tensor.hpp"

namespace p2det {

/// Named tensors in a fixed order plus an optional JSON metadata string
/// (model config, format notes). Order is preserved through save/load so
/// that save -> load -> save is byte-identical.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string meta_json;  // "" for none

  const Tensor* find(const std::string& name) const;
};

/// File layout: magic "P2DT", u32 version (little-endian), u64 manifest
/// length, manifest JSON, then concatenated raw little-endian f64 blobs.
/// Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace p2det
