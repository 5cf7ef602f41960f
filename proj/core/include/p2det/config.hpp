#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2det/detector.hpp"
#include "p2det/synthgen.hpp"

namespace p2det {

struct EvalConfig {
  double score_thresh = 0.3;
  double nms_iou = 0.1;
  std::vector<double> iou_thresholds = {0.5, 0.75};
  int max_dets = 100;
};

/// Everything a run needs, JSON-backed. `{}` loads to pure defaults;
/// unknown keys and constraint violations fail before any compute, naming
/// the offending key path.
struct RunConfig {
  uint64_t data_seed = 42;
  uint64_t init_seed = 7;
  SceneConfig scene;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);

/// Full serialization with every field explicit; parse(serialize(c)) == c.
std::string serialize_config(const RunConfig& cfg);

/// Checkpoint metadata: the model architecture plus its init seed, so a
/// checkpoint reloads without the original run config.
std::string detector_meta_json(const ModelConfig& cfg, uint64_t init_seed);
ModelConfig detector_meta_parse(const std::string& meta, uint64_t& init_seed);

}  // namespace p2det
