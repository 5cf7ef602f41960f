#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2det/geometry.hpp"
#include "p2det/prompt_encoder.hpp"
#include "p2det/rng.hpp"
#include "p2det/tensor.hpp"

namespace p2det {

struct SceneConfig {
  int size = 512;
  int min_towers = 1;
  int max_towers = 4;
  double incidence_min_deg = 25.0;
  double incidence_max_deg = 50.0;
  // Expected clutter blobs per 512x512; scaled by scene area. Roughly a
  // third of them are tower look-alikes without ground truth.
  double clutter_density = 30.0;
  double speckle_looks = 4.0;
  double jitter_radius = 6.0;
  double norm_mean = 45.52;
  double norm_std = 28.36;
};

struct Scene {
  Tensor image;  // [1,S,S], nonnegative intensities (pre-normalization)
  std::vector<OrientedBox> gts;
  std::vector<PointPrompt> prompts;
  uint64_t seed = 0;
};

/// Midpoint of the near-range short edge (smaller image x): where an OSM
/// marker for the tower base would sit.
Vec2 tower_base_point(const OrientedBox& gt);

/// Deterministic SAR-like scene: dim background, clutter (rectangles, ridge
/// lines, tower look-alike decoys), bright scatterer rows for the towers,
/// multiplicative speckle last. Aspect ratio of the tower boxes grows as the
/// simulated incidence angle shrinks.
Scene gen_scene(const SceneConfig& cfg, uint64_t seed);

/// Pixelwise multiply by unit-mean Gamma(L, 1/L) draws.
Tensor add_speckle(const Tensor& clean, double looks, SplitMix64& rng);

/// One prompt per box: base point plus a uniform-disc offset, clamped into
/// the image.
std::vector<PointPrompt> jitter_prompts(const std::vector<OrientedBox>& gts,
                                        double radius, int image_size,
                                        SplitMix64& rng);

/// (x - mean) / std, as plain data (no autodiff record).
Tensor normalize_image(const Tensor& img, double mean, double stddev);

// --- dataset directory ------------------------------------------------------
// scenes/{id}.f32 raw little-endian float32, row-major; annotations.jsonl and
// prompts.jsonl keyed by id; dataset.json records config + seed + PRNG name.

struct SceneRecord {
  int id = 0;
  std::string image_file;  // relative to the dataset dir
  std::vector<OrientedBox> boxes;
  std::vector<PointPrompt> prompts;
};

struct Dataset {
  SceneConfig cfg;
  uint64_t seed = 0;
  std::vector<SceneRecord> records;
  std::string root;

  Tensor load_image(const SceneRecord& rec) const;
};

void write_dataset(const std::string& dir, const SceneConfig& cfg,
                   uint64_t seed, int count);
Dataset load_dataset(const std::string& dir);

}  // namespace p2det
