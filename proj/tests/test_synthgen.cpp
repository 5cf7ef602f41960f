#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "p2det/errors.hpp"
#include "p2det/geometry.hpp"
#include "p2det/rng.hpp"
#include "p2det/synthgen.hpp"

using namespace p2det;

namespace {

SceneConfig small_cfg() {
  SceneConfig cfg;
  cfg.size = 96;
  cfg.min_towers = 1;
  cfg.max_towers = 3;
  cfg.clutter_density = 20.0;
  cfg.speckle_looks = 4.0;
  cfg.jitter_radius = 4.0;
  return cfg;
}

bool same_scene(const Scene& a, const Scene& b) {
  if (a.gts.size() != b.gts.size() || a.prompts.size() != b.prompts.size())
    return false;
  for (size_t i = 0; i < a.gts.size(); ++i) {
    const auto& ga = a.gts[i];
    const auto& gb = b.gts[i];
    if (ga.cx != gb.cx || ga.cy != gb.cy || ga.w != gb.w || ga.h != gb.h ||
        ga.theta != gb.theta)
      return false;
  }
  for (size_t i = 0; i < a.prompts.size(); ++i) {
    if (a.prompts[i].x != b.prompts[i].x || a.prompts[i].y != b.prompts[i].y)
      return false;
  }
  const auto da = a.image.data();
  const auto db = b.image.data();
  return std::equal(da.begin(), da.end(), db.begin(), db.end());
}

std::filesystem::path fresh_dir(const char* tag) {
  const auto dir = std::filesystem::temp_directory_path() /
                   (std::string("p2det_test_") + tag);
  std::filesystem::remove_all(dir);
  return dir;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("gen_scene is deterministic in the seed") {
  const SceneConfig cfg = small_cfg();
  const Scene a = gen_scene(cfg, 7);
  const Scene b = gen_scene(cfg, 7);
  CHECK(same_scene(a, b));
  const Scene c = gen_scene(cfg, 8);
  CHECK_FALSE(same_scene(a, c));
}

TEST_CASE("scene basics: shapes, bounds, one prompt per tower") {
  const SceneConfig cfg = small_cfg();
  for (uint64_t seed = 0; seed < 8; ++seed) {
    const Scene s = gen_scene(cfg, seed);
    REQUIRE(s.image.shape() == std::vector<int>{1, cfg.size, cfg.size});
    CHECK(s.gts.size() >= static_cast<size_t>(cfg.min_towers));
    CHECK(s.gts.size() <= static_cast<size_t>(cfg.max_towers));
    CHECK(s.prompts.size() == s.gts.size());
    for (double v : s.image.data()) CHECK(v >= 0.0);
    for (const auto& p : s.prompts) {
      CHECK(p.label == PromptLabel::TowerBase);
      CHECK(p.x >= 0.0);
      CHECK(p.x <= cfg.size - 1.0);
      CHECK(p.y >= 0.0);
      CHECK(p.y <= cfg.size - 1.0);
    }
    for (const auto& g : s.gts) {
      CHECK(g.cx >= 0.0);
      CHECK(g.cx <= cfg.size);
      CHECK(aspect_ratio(g) >= 1.0);
    }
  }
}

TEST_CASE("zero towers yields no ground truth and no prompts") {
  SceneConfig cfg = small_cfg();
  cfg.min_towers = 0;
  cfg.max_towers = 0;
  const Scene s = gen_scene(cfg, 3);
  CHECK(s.gts.empty());
  CHECK(s.prompts.empty());
  // Background + clutter still present.
  double total = 0.0;
  for (double v : s.image.data()) total += v;
  CHECK(total > 0.0);
}

TEST_CASE("lower incidence produces higher aspect ratios") {
  SceneConfig low = small_cfg();
  low.incidence_min_deg = 25.0;
  low.incidence_max_deg = 25.0;
  SceneConfig high = low;
  high.incidence_min_deg = 50.0;
  high.incidence_max_deg = 50.0;

  auto mean_aspect = [](const SceneConfig& cfg) {
    double sum = 0.0;
    int n = 0;
    for (uint64_t seed = 0; seed < 100; ++seed) {
      for (const auto& g : gen_scene(cfg, seed).gts) {
        sum += aspect_ratio(g);
        ++n;
      }
    }
    REQUIRE(n > 0);
    return sum / n;
  };
  CHECK(mean_aspect(low) > mean_aspect(high));
}

TEST_CASE("add_speckle keeps the mean and shrinks with looks") {
  const size_t n = 40000;
  Tensor clean = Tensor::from_data({1, 200, 200}, std::vector<double>(n, 2.0));

  SplitMix64 rng(11);
  const Tensor noisy = add_speckle(clean, 4.0, rng);
  double sum = 0.0, sq = 0.0;
  for (double v : noisy.data()) {
    CHECK(v >= 0.0);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  CHECK(mean == doctest::Approx(2.0).epsilon(0.02));
  // Gamma(L,1/L) has variance 1/L, so intensity variance is 4/L = 1 here.
  const double var = sq / n - mean * mean;
  CHECK(var == doctest::Approx(1.0).epsilon(0.10));

  SplitMix64 rng2(11);
  const Tensor calm = add_speckle(clean, 4000.0, rng2);
  double dev = 0.0;
  for (double v : calm.data()) dev = std::max(dev, std::abs(v - 2.0));
  CHECK(dev < 0.5);

  SplitMix64 rng3(11);
  CHECK_THROWS_AS(add_speckle(clean, 0.5, rng3), ConfigError);
}

TEST_CASE("jitter_prompts stays within the radius and the image") {
  std::vector<OrientedBox> gts;
  gts.push_back(OrientedBox::make(30.0, 40.0, 20.0, 6.0, 0.3));
  gts.push_back(OrientedBox::make(1.0, 1.0, 10.0, 4.0, -0.7));  // near corner

  SplitMix64 rng(5);
  const auto zero = jitter_prompts(gts, 0.0, 96, rng);
  REQUIRE(zero.size() == 2);
  for (size_t i = 0; i < gts.size(); ++i) {
    const Vec2 base = tower_base_point(gts[i]);
    CHECK(zero[i].x == std::clamp(base.x, 0.0, 95.0));
    CHECK(zero[i].y == std::clamp(base.y, 0.0, 95.0));
  }

  for (uint64_t seed = 0; seed < 20; ++seed) {
    SplitMix64 r(seed);
    const auto ps = jitter_prompts(gts, 3.0, 96, r);
    REQUIRE(ps.size() == 2);
    for (size_t i = 0; i < ps.size(); ++i) {
      CHECK(ps[i].x >= 0.0);
      CHECK(ps[i].x <= 95.0);
      CHECK(ps[i].y >= 0.0);
      CHECK(ps[i].y <= 95.0);
      const Vec2 base = tower_base_point(gts[i]);
      // Clamping only moves points inward, never further from the base.
      const double d = std::hypot(ps[i].x - base.x, ps[i].y - base.y);
      CHECK(d <= 3.0 + 1e-9);
    }
  }

  SplitMix64 r2(0);
  CHECK_THROWS(jitter_prompts(gts, -1.0, 96, r2));
}

TEST_CASE("tower_base_point picks the near-range short edge midpoint") {
  // Axis-aligned: long edge horizontal, base at the smaller-x end.
  const OrientedBox b = OrientedBox::make(50.0, 20.0, 30.0, 10.0, 0.0);
  const Vec2 p = tower_base_point(b);
  CHECK(p.x == doctest::Approx(35.0));
  CHECK(p.y == doctest::Approx(20.0));
}

TEST_CASE("normalize_image applies (x - mean) / std elementwise") {
  Tensor img = Tensor::from_data({1, 1, 3}, {45.52, 73.88, 17.16});
  const Tensor out = normalize_image(img, 45.52, 28.36);
  const auto d = out.data();
  CHECK(d[0] == doctest::Approx(0.0));
  CHECK(d[1] == doctest::Approx(1.0));
  CHECK(d[2] == doctest::Approx(-1.0));
}

TEST_CASE("dataset writes are reproducible and round-trip") {
  SceneConfig cfg = small_cfg();
  cfg.size = 64;
  const auto d1 = fresh_dir("ds1");
  const auto d2 = fresh_dir("ds2");
  write_dataset(d1.string(), cfg, 99, 3);
  write_dataset(d2.string(), cfg, 99, 3);

  for (const char* rel :
       {"dataset.json", "annotations.jsonl", "prompts.jsonl", "scenes/0.f32",
        "scenes/1.f32", "scenes/2.f32"}) {
    CHECK(slurp(d1 / rel) == slurp(d2 / rel));
  }

  const Dataset ds = load_dataset(d1.string());
  CHECK(ds.seed == 99);
  CHECK(ds.cfg.size == 64);
  CHECK(ds.cfg.speckle_looks == cfg.speckle_looks);
  REQUIRE(ds.records.size() == 3);

  for (const SceneRecord& rec : ds.records) {
    // Scene i is generated from a stream derived from (seed, i).
    const Scene want = gen_scene(cfg, SplitMix64::derive(99, rec.id));
    REQUIRE(rec.boxes.size() == want.gts.size());
    for (size_t i = 0; i < rec.boxes.size(); ++i) {
      CHECK(rec.boxes[i].cx == doctest::Approx(want.gts[i].cx).epsilon(1e-12));
      CHECK(rec.boxes[i].theta ==
            doctest::Approx(want.gts[i].theta).epsilon(1e-12));
    }
    const Tensor img = ds.load_image(rec);
    REQUIRE(img.shape() == want.image.shape());
    const auto got = img.data();
    const auto exp = want.image.data();
    for (size_t i = 0; i < got.size(); ++i) {
      // Storage is float32; loading gives back exactly the rounded value.
      CHECK(got[i] == static_cast<double>(static_cast<float>(exp[i])));
    }
  }

  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
  CHECK_THROWS_AS(load_dataset((d1 / "missing").string()), IoError);
}
