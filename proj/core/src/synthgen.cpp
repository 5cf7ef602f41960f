#include "p2det/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "p2det/errors.hpp"

namespace p2det {

namespace {

constexpr double kPi = 3.14159265358979323846;

void validate(const SceneConfig& cfg) {
  if (cfg.size < 32) throw ConfigError("scene size must be >= 32");
  if (cfg.min_towers < 0 || cfg.min_towers > cfg.max_towers) {
    throw ConfigError("bad towers_per_scene range");
  }
  if (cfg.incidence_min_deg > cfg.incidence_max_deg) {
    throw ConfigError("bad incidence range");
  }
  if (cfg.clutter_density < 0.0) throw ConfigError("clutter density must be >= 0");
  if (cfg.speckle_looks < 1.0) throw ConfigError("speckle looks must be >= 1");
  if (cfg.jitter_radius < 0.0) throw ConfigError("jitter radius must be >= 0");
  if (!(cfg.norm_std > 0.0)) throw ConfigError("norm std must be > 0");
}

void splat(std::vector<double>& buf, int S, double x, double y, double amp,
           double sigma) {
  const double reach = 3.0 * sigma;
  const int x0 = std::max(0, static_cast<int>(std::floor(x - reach)));
  const int x1 = std::min(S - 1, static_cast<int>(std::ceil(x + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(y - reach)));
  const int y1 = std::min(S - 1, static_cast<int>(std::ceil(y + reach)));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int yy = y0; yy <= y1; ++yy) {
    for (int xx = x0; xx <= x1; ++xx) {
      const double dx = xx - x;
      const double dy = yy - y;
      buf[static_cast<size_t>(yy) * S + xx] += amp * std::exp(-(dx * dx + dy * dy) * inv);
    }
  }
}

void fill_box(std::vector<double>& buf, int S, const OrientedBox& b, double amp) {
  const double reach = 0.5 * b.diagonal() + 1.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(b.cx - reach)));
  const int x1 = std::min(S - 1, static_cast<int>(std::ceil(b.cx + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.cy - reach)));
  const int y1 = std::min(S - 1, static_cast<int>(std::ceil(b.cy + reach)));
  for (int yy = y0; yy <= y1; ++yy) {
    for (int xx = x0; xx <= x1; ++xx) {
      if (point_in_obb({static_cast<double>(xx), static_cast<double>(yy)}, b)) {
        buf[static_cast<size_t>(yy) * S + xx] += amp;
      }
    }
  }
}

// Row of bright scatterers along the long axis plus a hot base cluster;
// shared by real towers and (base-less, dimmer) decoys.
void render_tower(std::vector<double>& buf, int S, const OrientedBox& b,
                  SplitMix64& rng, double amp_scale, bool with_base) {
  const double c = std::cos(b.theta);
  const double s = std::sin(b.theta);
  const int k = 3 + static_cast<int>(rng.below(5));  // 3..7 scatterers
  const double half = 0.5 * b.w - 2.0;
  for (int i = 0; i < k; ++i) {
    const double t = k == 1 ? 0.0 : -half + 2.0 * half * i / (k - 1);
    const double jx = rng.gaussian() * 0.6;
    const double jy = rng.gaussian() * 0.6;
    const double px = b.cx + t * c + jx;
    const double py = b.cy + t * s + jy;
    splat(buf, S, px, py, amp_scale * rng.uniform(130.0, 210.0),
          rng.uniform(0.9, 1.6));
  }
  if (with_base) {
    const Vec2 base = tower_base_point(b);
    for (int i = 0; i < 4; ++i) {
      splat(buf, S, base.x + rng.gaussian(), base.y + rng.gaussian(),
            amp_scale * rng.uniform(190.0, 255.0), 0.9);
    }
  }
}

bool box_fits(const OrientedBox& b, int S) {
  const Quad q = obb_to_corners(b);
  for (const Vec2& p : q.corners) {
    if (p.x < 1.0 || p.y < 1.0 || p.x > S - 2.0 || p.y > S - 2.0) return false;
  }
  return true;
}

}  // namespace

Vec2 tower_base_point(const OrientedBox& gt) {
  const double c = std::cos(gt.theta);
  const double s = std::sin(gt.theta);
  const Vec2 a{gt.cx + 0.5 * gt.w * c, gt.cy + 0.5 * gt.w * s};
  const Vec2 b{gt.cx - 0.5 * gt.w * c, gt.cy - 0.5 * gt.w * s};
  if (a.x != b.x) return a.x < b.x ? a : b;
  return a.y <= b.y ? a : b;
}

Scene gen_scene(const SceneConfig& cfg, uint64_t seed) {
  validate(cfg);
  const int S = cfg.size;
  SplitMix64 place_rng(SplitMix64::derive(seed, 1));
  SplitMix64 clutter_rng(SplitMix64::derive(seed, 2));
  SplitMix64 speckle_rng(SplitMix64::derive(seed, 3));
  SplitMix64 prompt_rng(SplitMix64::derive(seed, 4));
  SplitMix64 tower_rng(SplitMix64::derive(seed, 5));

  Scene scene;
  scene.seed = seed;

  // Place towers first so clutter can't mask the placement determinism.
  const int span = cfg.max_towers - cfg.min_towers;
  const int n_towers =
      cfg.min_towers + (span > 0 ? static_cast<int>(place_rng.below(span + 1)) : 0);
  for (int t = 0; t < n_towers; ++t) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const double theta = place_rng.uniform(-kPi / 2.0, kPi / 2.0);
      const double incidence = place_rng.uniform(cfg.incidence_min_deg, cfg.incidence_max_deg);
      // Low incidence angle -> long layover shadow -> large aspect ratio.
      // Anchored to the 25..50 degree span the imagery covers, so the
      // relation holds in absolute terms whatever window is configured.
      const double frac = std::clamp((50.0 - incidence) / 25.0, 0.0, 1.0);
      const double alpha = 1.2 + (4.0 - 1.2) * frac;
      const double len = std::min(place_rng.uniform(16.0, 30.0), 0.55 * S);
      const double cx = place_rng.uniform(2.0, S - 3.0);
      const double cy = place_rng.uniform(2.0, S - 3.0);
      const OrientedBox box = OrientedBox::make(cx, cy, len, len / alpha, theta);
      if (!box_fits(box, S)) continue;
      bool clear = true;
      for (const OrientedBox& other : scene.gts) {
        if (obb_iou(box, other) > 0.05) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      scene.gts.push_back(box);
      placed = true;
    }
    if (!placed) throw ConfigError("tower placement failed after 100 attempts");
  }

  std::vector<double> buf(static_cast<size_t>(S) * S, 28.0);

  const double area_ratio = (static_cast<double>(S) / 512.0) * (static_cast<double>(S) / 512.0);
  const long n_clutter = std::lround(cfg.clutter_density * area_ratio);
  for (long i = 0; i < n_clutter; ++i) {
    const double kind = clutter_rng.uniform();
    if (kind < 0.34) {
      // Tower look-alike: same scatterer row, dimmer, no base, no GT.
      for (int attempt = 0; attempt < 50; ++attempt) {
        const double theta = clutter_rng.uniform(-kPi / 2.0, kPi / 2.0);
        const double len = std::min(clutter_rng.uniform(12.0, 24.0), 0.5 * S);
        const double alpha = clutter_rng.uniform(1.5, 3.5);
        const double cx = clutter_rng.uniform(2.0, S - 3.0);
        const double cy = clutter_rng.uniform(2.0, S - 3.0);
        const OrientedBox b = OrientedBox::make(cx, cy, len, len / alpha, theta);
        if (!box_fits(b, S)) continue;
        bool clear = true;
        for (const OrientedBox& gt : scene.gts) {
          if (obb_iou(b, gt) > 0.02) {
            clear = false;
            break;
          }
        }
        if (!clear) continue;
        render_tower(buf, S, b, clutter_rng, 0.8, /*with_base=*/false);
        break;
      }
    } else if (kind < 0.67) {
      // Building-like bright rectangle.
      const double w = clutter_rng.uniform(6.0, 20.0);
      const double h = clutter_rng.uniform(4.0, 12.0);
      const double theta = clutter_rng.uniform(-kPi / 2.0, kPi / 2.0);
      const double cx = clutter_rng.uniform(0.0, S - 1.0);
      const double cy = clutter_rng.uniform(0.0, S - 1.0);
      fill_box(buf, S, OrientedBox::make(cx, cy, w, h, theta),
               clutter_rng.uniform(40.0, 110.0));
    } else {
      // Thin bright ridge line.
      const double len = clutter_rng.uniform(10.0, 40.0);
      const double theta = clutter_rng.uniform(-kPi, kPi);
      const double x0 = clutter_rng.uniform(0.0, S - 1.0);
      const double y0 = clutter_rng.uniform(0.0, S - 1.0);
      const double amp = clutter_rng.uniform(30.0, 80.0);
      const double c = std::cos(theta), sn = std::sin(theta);
      for (double t = 0.0; t <= len; t += 0.7) {
        splat(buf, S, x0 + t * c, y0 + t * sn, amp, 0.8);
      }
    }
  }

  for (const OrientedBox& gt : scene.gts) {
    render_tower(buf, S, gt, tower_rng, 1.0, /*with_base=*/true);
  }

  Tensor clean = Tensor::from_data({1, S, S}, std::move(buf));
  scene.image = add_speckle(clean, cfg.speckle_looks, speckle_rng);
  // Quantization ceiling of an 8-bit detected product: keeps the speckle
  // tail bounded (unclipped Gamma tails reach tens of sigma after
  // normalization and swamp everything else).
  {
    std::vector<double> clipped(scene.image.data().begin(), scene.image.data().end());
    for (double& v : clipped) v = std::min(v, 255.0);
    scene.image = Tensor::from_data(scene.image.shape(), std::move(clipped));
  }
  scene.prompts = jitter_prompts(scene.gts, cfg.jitter_radius, S, prompt_rng);
  return scene;
}

Tensor add_speckle(const Tensor& clean, double looks, SplitMix64& rng) {
  if (looks < 1.0) throw ConfigError("speckle looks must be >= 1");
  std::vector<double> out(clean.data().begin(), clean.data().end());
  for (double& v : out) {
    if (v < 0.0) throw std::invalid_argument("speckle input must be nonnegative");
    v *= rng.gamma(looks) / looks;
  }
  return Tensor::from_data(clean.shape(), std::move(out));
}

std::vector<PointPrompt> jitter_prompts(const std::vector<OrientedBox>& gts,
                                        double radius, int image_size,
                                        SplitMix64& rng) {
  if (radius < 0.0) throw std::invalid_argument("jitter radius must be >= 0");
  std::vector<PointPrompt> prompts;
  prompts.reserve(gts.size());
  for (const OrientedBox& gt : gts) {
    const Vec2 base = tower_base_point(gt);
    const double r = radius * std::sqrt(rng.uniform());
    const double ang = rng.uniform(0.0, 2.0 * kPi);
    PointPrompt p;
    p.x = std::clamp(base.x + r * std::cos(ang), 0.0, image_size - 1.0);
    p.y = std::clamp(base.y + r * std::sin(ang), 0.0, image_size - 1.0);
    p.label = PromptLabel::TowerBase;
    prompts.push_back(p);
  }
  return prompts;
}

Tensor normalize_image(const Tensor& img, double mean, double stddev) {
  if (!(stddev > 0.0)) throw std::invalid_argument("normalize std must be > 0");
  std::vector<double> out(img.data().begin(), img.data().end());
  for (double& v : out) v = (v - mean) / stddev;
  return Tensor::from_data(img.shape(), std::move(out));
}

// --- dataset directory ------------------------------------------------------

namespace {

using nlohmann::json;

json config_to_json(const SceneConfig& cfg) {
  return json{{"size", cfg.size},
              {"min_towers", cfg.min_towers},
              {"max_towers", cfg.max_towers},
              {"incidence_min_deg", cfg.incidence_min_deg},
              {"incidence_max_deg", cfg.incidence_max_deg},
              {"clutter_density", cfg.clutter_density},
              {"speckle_looks", cfg.speckle_looks},
              {"jitter_radius", cfg.jitter_radius},
              {"norm_mean", cfg.norm_mean},
              {"norm_std", cfg.norm_std}};
}

SceneConfig config_from_json(const json& j) {
  SceneConfig cfg;
  cfg.size = j.at("size").get<int>();
  cfg.min_towers = j.at("min_towers").get<int>();
  cfg.max_towers = j.at("max_towers").get<int>();
  cfg.incidence_min_deg = j.at("incidence_min_deg").get<double>();
  cfg.incidence_max_deg = j.at("incidence_max_deg").get<double>();
  cfg.clutter_density = j.at("clutter_density").get<double>();
  cfg.speckle_looks = j.at("speckle_looks").get<double>();
  cfg.jitter_radius = j.at("jitter_radius").get<double>();
  cfg.norm_mean = j.at("norm_mean").get<double>();
  cfg.norm_std = j.at("norm_std").get<double>();
  return cfg;
}

void write_f32(const std::filesystem::path& path, const Tensor& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  std::vector<float> f(img.data().begin(), img.data().end());
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

void write_dataset(const std::string& dir, const SceneConfig& cfg,
                   uint64_t seed, int count) {
  validate(cfg);
  if (count < 0) throw ConfigError("dataset count must be >= 0");
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root / "scenes", ec);
  if (ec) throw IoError("cannot create dataset dir: " + ec.message());

  std::ofstream ann(root / "annotations.jsonl");
  std::ofstream prm(root / "prompts.jsonl");
  if (!ann || !prm) throw IoError("cannot open dataset metadata files");

  for (int i = 0; i < count; ++i) {
    const Scene scene = gen_scene(cfg, SplitMix64::derive(seed, static_cast<uint64_t>(i)));
    const std::string name = "scenes/" + std::to_string(i) + ".f32";
    write_f32(root / name, scene.image);

    json boxes = json::array();
    for (const OrientedBox& b : scene.gts) {
      boxes.push_back({b.cx, b.cy, b.w, b.h, b.theta});
    }
    ann << json{{"id", i}, {"image", name}, {"boxes", boxes}} << "\n";

    json points = json::array();
    for (const PointPrompt& p : scene.prompts) points.push_back({p.x, p.y});
    prm << json{{"id", i}, {"points", points}} << "\n";
  }
  if (!ann || !prm) throw IoError("short write to dataset metadata");

  std::ofstream meta(root / "dataset.json");
  if (!meta) throw IoError("cannot open dataset.json");
  meta << json{{"format_version", 1},
               {"prng", SplitMix64::kAlgorithmName},
               {"seed", seed},
               {"count", count},
               {"config", config_to_json(cfg)}}
              .dump(2)
       << "\n";
  if (!meta) throw IoError("short write to dataset.json");
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream meta(root / "dataset.json");
  if (!meta) throw IoError("cannot open " + (root / "dataset.json").string());
  json mj;
  try {
    meta >> mj;
  } catch (const json::exception& e) {
    throw IoError(std::string("bad dataset.json: ") + e.what());
  }

  Dataset ds;
  ds.root = dir;
  try {
    if (mj.at("format_version").get<int>() != 1) {
      throw IoError("unsupported dataset format version");
    }
    ds.seed = mj.at("seed").get<uint64_t>();
    ds.cfg = config_from_json(mj.at("config"));
  } catch (const json::exception& e) {
    throw IoError(std::string("bad dataset.json: ") + e.what());
  }

  std::ifstream ann(root / "annotations.jsonl");
  if (!ann) throw IoError("cannot open annotations.jsonl");
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      SceneRecord rec;
      rec.id = j.at("id").get<int>();
      rec.image_file = j.at("image").get<std::string>();
      for (const auto& b : j.at("boxes")) {
        rec.boxes.push_back(OrientedBox::make(b.at(0).get<double>(), b.at(1).get<double>(),
                                              b.at(2).get<double>(), b.at(3).get<double>(),
                                              b.at(4).get<double>()));
      }
      ds.records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw IoError(std::string("bad annotations.jsonl: ") + e.what());
    }
  }

  std::ifstream prm(root / "prompts.jsonl");
  if (!prm) throw IoError("cannot open prompts.jsonl");
  size_t idx = 0;
  while (std::getline(prm, line)) {
    if (line.empty()) continue;
    if (idx >= ds.records.size()) throw IoError("prompts.jsonl has extra rows");
    json j;
    try {
      j = json::parse(line);
      if (j.at("id").get<int>() != ds.records[idx].id) {
        throw IoError("prompts.jsonl id order mismatch");
      }
      for (const auto& p : j.at("points")) {
        ds.records[idx].prompts.push_back(
            {p.at(0).get<double>(), p.at(1).get<double>(), PromptLabel::TowerBase});
      }
    } catch (const json::exception& e) {
      throw IoError(std::string("bad prompts.jsonl: ") + e.what());
    }
    ++idx;
  }
  if (idx != ds.records.size()) throw IoError("prompts.jsonl is missing rows");
  return ds;
}

Tensor Dataset::load_image(const SceneRecord& rec) const {
  namespace fs = std::filesystem;
  const fs::path path = fs::path(root) / rec.image_file;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const size_t n = static_cast<size_t>(cfg.size) * static_cast<size_t>(cfg.size);
  std::vector<float> f(n);
  in.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<size_t>(in.gcount()) != n * sizeof(float)) {
    throw IoError("truncated image file " + path.string());
  }
  std::vector<double> d(f.begin(), f.end());
  return Tensor::from_data({1, cfg.size, cfg.size}, std::move(d));
}

}  // namespace p2det
