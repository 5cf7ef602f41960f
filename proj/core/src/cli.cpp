#include "p2det/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "json.hpp"
#include "p2det/config.hpp"
#include "p2det/detector.hpp"
#include "p2det/errors.hpp"
#include "p2det/rng.hpp"

namespace p2det {

namespace {

using nlohmann::json;

int log_verbosity() {
  static const int level = [] {
    const char* env = std::getenv("P2DET_LOG");
    if (!env) return 1;
    const std::string v(env);
    if (v == "quiet") return 0;
    if (v == "debug") return 2;
    return 1;
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_verbosity() >= 1) std::cerr << msg << "\n";
}

RunConfig config_or_defaults(const std::string& path) {
  return path.empty() ? RunConfig{} : load_config(path);
}

Tensor read_f32(const std::string& path, int size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const size_t n = static_cast<size_t>(size) * static_cast<size_t>(size);
  std::vector<float> f(n);
  in.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<size_t>(in.gcount()) != n * sizeof(float)) {
    throw IoError("scene file " + path + " is not a " + std::to_string(size) +
                  "x" + std::to_string(size) + " float32 raster");
  }
  std::vector<double> d(f.begin(), f.end());
  return Tensor::from_data({1, size, size}, std::move(d));
}

std::vector<TrainExample> dataset_examples(const Dataset& ds) {
  std::vector<TrainExample> out;
  out.reserve(ds.records.size());
  for (const SceneRecord& rec : ds.records) {
    TrainExample ex;
    ex.image = normalize_image(ds.load_image(rec), ds.cfg.norm_mean, ds.cfg.norm_std);
    ex.gts = rec.boxes;
    ex.prompts = rec.prompts;
    out.push_back(std::move(ex));
  }
  return out;
}

// Training-time flip augmentation: 1 = mirror x, 2 = mirror y, 3 = transpose.
// Mirrors negate the long-edge angle (mod pi); the transpose maps it to
// pi/2 - theta. OrientedBox::make re-canonicalizes.
TrainExample flip_example(const TrainExample& ex, int mode, int S) {
  if (mode == 0) return ex;
  TrainExample out;
  const auto src = ex.image.data();
  std::vector<double> img(static_cast<size_t>(S) * S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const size_t i = static_cast<size_t>(y) * S + x;
      if (mode == 1) img[i] = src[static_cast<size_t>(y) * S + (S - 1 - x)];
      else if (mode == 2) img[i] = src[static_cast<size_t>(S - 1 - y) * S + x];
      else img[i] = src[static_cast<size_t>(x) * S + y];
    }
  out.image = Tensor::from_data({1, S, S}, std::move(img));
  auto map_xy = [mode, S](double x, double y) {
    if (mode == 1) return std::pair<double, double>{S - x, y};
    if (mode == 2) return std::pair<double, double>{x, S - y};
    return std::pair<double, double>{y, x};
  };
  for (const OrientedBox& b : ex.gts) {
    const auto [cx, cy] = map_xy(b.cx, b.cy);
    const double theta = mode == 3 ? M_PI / 2 - b.theta : -b.theta;
    out.gts.push_back(OrientedBox::make(cx, cy, b.w, b.h, theta));
  }
  for (const PointPrompt& p : ex.prompts) {
    const auto [x, y] = map_xy(p.x, p.y);
    // Mirrors map 0 to S, one past the encoder's valid range; clamp like the
    // generator does.
    out.prompts.push_back({std::clamp(x, 0.0, S - 1.0),
                           std::clamp(y, 0.0, S - 1.0), p.label});
  }
  return out;
}

// --- subcommands -------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 int count, bool seed_set, uint64_t seed, int size_override) {
  RunConfig cfg = config_or_defaults(config_path);
  if (seed_set) cfg.data_seed = seed;
  if (size_override > 0) cfg.scene.size = size_override;
  write_dataset(out_dir, cfg.scene, cfg.data_seed, count);
  log_info("wrote " + std::to_string(count) + " scenes to " + out_dir);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_path, int steps_override,
              const std::string& log_path) {
  const RunConfig cfg = config_or_defaults(config_path);
  const Dataset ds = load_dataset(data_dir);
  if (ds.cfg.size != cfg.model.fusion.image_size) {
    throw ConfigError("config constraint violated: model.image_size == dataset scene size (" +
                      std::to_string(cfg.model.fusion.image_size) + " vs " +
                      std::to_string(ds.cfg.size) + ")");
  }
  const std::vector<TrainExample> examples = dataset_examples(ds);
  if (examples.empty()) throw ConfigError("dataset has no scenes");

  Detector det(cfg.model, cfg.init_seed);
  SgdState opt = make_sgd_state(det, cfg.train);
  const int steps = steps_override >= 0 ? steps_override : cfg.train.steps;

  std::ofstream logf;
  if (!log_path.empty()) {
    logf.open(log_path);
    if (!logf) throw IoError("cannot open training log " + log_path);
  }

  SplitMix64 aug(SplitMix64::derive(cfg.data_seed, 0xF11Bu));
  for (int step = 0; step < steps; ++step) {
    double lr = cfg.train.lr;
    for (int m : cfg.train.lr_milestones)
      if (step >= m) lr *= cfg.train.lr_gamma;
    opt.lr = lr;
    std::vector<TrainExample> batch;
    batch.reserve(static_cast<size_t>(cfg.train.batch_size));
    for (int k = 0; k < cfg.train.batch_size; ++k) {
      const size_t idx = (static_cast<size_t>(step) * cfg.train.batch_size + k) %
                         examples.size();
      const int mode =
          cfg.train.flip_augment ? static_cast<int>(aug.below(4)) : 0;
      batch.push_back(flip_example(examples[idx], mode, ds.cfg.size));
    }
    LossBreakdown lb;
    try {
      lb = det.train_step(batch, opt);
    } catch (const NumericalError& e) {
      std::cerr << "training aborted at step " << step << ": " << e.what() << "\n";
      throw;
    }
    if (step == 0 || (step + 1) % cfg.train.log_every == 0 || step + 1 == steps) {
      const std::string line = json{{"step", step},
                                    {"l_cls", lb.l_cls},
                                    {"l_d1", lb.l_d1},
                                    {"l_d2", lb.l_d2},
                                    {"total", lb.total}}
                                   .dump();
      log_info(line);
      if (logf) logf << line << "\n";
    }
  }
  det.save(out_path);
  log_info("saved checkpoint to " + out_path);
  return 0;
}

// Prompts JSONL rows look like {"id": 3, "points": [[x,y],...]}; the scene
// file for id 3 is named 3.f32, so match rows to the scene by filename stem.
// A file with a single row and no id works for ad-hoc scenes.
std::vector<PointPrompt> prompts_for_scene(const std::string& prompts_path,
                                           const std::string& scene_path) {
  if (prompts_path.empty()) return {};
  std::ifstream in(prompts_path);
  if (!in) throw IoError("cannot open prompts file " + prompts_path);
  const std::string stem = std::filesystem::path(scene_path).stem().string();

  std::vector<PointPrompt> first, matched;
  bool have_first = false, have_match = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    std::vector<PointPrompt> pts;
    try {
      j = json::parse(line);
      if (j.contains("points")) {
        for (const auto& p : j["points"]) {
          pts.push_back({p.at(0).get<double>(), p.at(1).get<double>(),
                         PromptLabel::TowerBase});
        }
      }
    } catch (const json::exception& e) {
      throw IoError(std::string("bad prompts line: ") + e.what());
    }
    if (!have_first) {
      first = pts;
      have_first = true;
    }
    if (j.contains("id") && std::to_string(j["id"].get<int>()) == stem) {
      matched = pts;
      have_match = true;
    }
  }
  if (have_match) return matched;
  if (have_first) return first;
  return {};
}

int cmd_predict(const std::string& ckpt, const std::string& scene_path,
                const std::string& prompts_path, const std::string& out_path,
                double score_thresh, double nms_iou, double norm_mean,
                double norm_std) {
  const Detector det = Detector::load(ckpt);
  const int S = det.config().fusion.image_size;
  const Tensor img = normalize_image(read_f32(scene_path, S), norm_mean, norm_std);
  const std::vector<PointPrompt> prompts = prompts_for_scene(prompts_path, scene_path);
  const std::vector<Detection> dets = det.predict(img, prompts, score_thresh, nms_iou);

  std::ofstream out(out_path);
  if (!out) throw IoError("cannot open " + out_path);
  for (const Detection& d : dets) {
    json quad = json::array();
    for (const Vec2& c : d.quad.corners) quad.push_back({c.x, c.y});
    out << json{{"score", d.score},
                {"box", {d.box.cx, d.box.cy, d.box.w, d.box.h, d.box.theta}},
                {"quad", quad}}
        << "\n";
  }
  if (!out) throw IoError("short write to " + out_path);
  log_info(std::to_string(dets.size()) + " detections -> " + out_path);
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt,
             const std::string& data_dir, const std::string& out_path,
             std::string curve_path) {
  const RunConfig cfg = config_or_defaults(config_path);
  const Detector det = Detector::load(ckpt);
  const Dataset ds = load_dataset(data_dir);
  if (ds.cfg.size != det.config().fusion.image_size) {
    throw ConfigError("config constraint violated: checkpoint image_size == dataset scene size");
  }

  std::vector<EvalInstance> instances;
  instances.reserve(ds.records.size());
  for (const SceneRecord& rec : ds.records) {
    const Tensor img =
        normalize_image(ds.load_image(rec), ds.cfg.norm_mean, ds.cfg.norm_std);
    EvalInstance inst;
    inst.dets = det.predict(img, rec.prompts, cfg.eval.score_thresh, cfg.eval.nms_iou);
    inst.gts = rec.boxes;
    instances.push_back(std::move(inst));
  }

  if (curve_path.empty()) curve_path = out_path + ".pr.csv";
  std::ofstream csv(curve_path);
  if (!csv) throw IoError("cannot open " + curve_path);
  csv << "iou_thresh,score,recall,precision\n";

  json metrics;
  for (double t : cfg.eval.iou_thresholds) {
    const EvalResult r = evaluate(instances, t, cfg.eval.max_dets);
    const std::string suffix = std::to_string(std::lround(t * 100.0));
    metrics["AP" + suffix] = r.ap;
    metrics["AR" + suffix] = r.ar;
    for (const PrPoint& p : r.curve) {
      csv << t << "," << p.score << "," << p.recall << "," << p.precision << "\n";
    }
  }
  if (!csv) throw IoError("short write to " + curve_path);

  std::ofstream out(out_path);
  if (!out) throw IoError("cannot open " + out_path);
  out << metrics.dump(2) << "\n";
  if (!out) throw IoError("short write to " + out_path);
  log_info("metrics: " + metrics.dump());
  return 0;
}

int cmd_assign(const std::string& annotations, const std::string& out_path,
               int image_size, int grid, double w, int top_k,
               bool image_frame, int distance_exponent) {
  if (grid < 1 || image_size % grid != 0) {
    throw ConfigError("config constraint violated: image-size % grid == 0");
  }
  AssignerConfig acfg;
  acfg.w = w;
  acfg.top_k = top_k;
  acfg.rotated_frame = !image_frame;
  acfg.distance_exponent = distance_exponent;
  if (!(acfg.w > 0.0)) throw ConfigError("config constraint violated: assigner.w > 0");
  if (acfg.top_k < 1) throw ConfigError("config constraint violated: assigner.top_k >= 1");
  if (distance_exponent != 1 && distance_exponent != 2) {
    throw ConfigError("config constraint violated: assigner.distance_exponent in {1, 2}");
  }

  const std::vector<SamplePoint> samples =
      make_grid_samples(image_size, image_size / grid);

  std::ifstream in(annotations);
  if (!in) throw IoError("cannot open " + annotations);
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot open " + out_path);

  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    std::vector<OrientedBox> boxes;
    int id = 0;
    try {
      j = json::parse(line);
      id = j.at("id").get<int>();
      for (const auto& b : j.at("boxes")) {
        boxes.push_back(OrientedBox::make(b.at(0).get<double>(), b.at(1).get<double>(),
                                          b.at(2).get<double>(), b.at(3).get<double>(),
                                          b.at(4).get<double>()));
      }
    } catch (const json::exception& e) {
      throw IoError(std::string("bad annotations line: ") + e.what());
    }
    const AssignmentResult res = assign(samples, boxes, acfg);
    json positives = json::array();
    for (size_t i = 0; i < samples.size(); ++i) {
      if (!res.is_positive(i)) continue;
      positives.push_back(json{{"sample", i},
                               {"x", samples[i].x},
                               {"y", samples[i].y},
                               {"gt", res.gt_index[i]},
                               {"q", res.quality[i]}});
    }
    out << json{{"id", id}, {"positives", positives}} << "\n";
  }
  if (!out) throw IoError("short write to " + out_path);
  return 0;
}

// --- gradcheck suite ---------------------------------------------------------

Tensor rand_tensor(SplitMix64& rng, std::vector<int> shape, double lo, double hi,
                   bool requires_grad = true) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

struct GradCheckCase {
  std::string name;
  std::function<double()> run;
};

std::vector<GradCheckCase> gradcheck_cases(double eps) {
  std::vector<GradCheckCase> cases;
  auto add = [&](std::string name, std::function<Tensor(Graph&, const Tensor&)> f,
                 Tensor x) {
    cases.push_back({std::move(name), [f = std::move(f), x = std::move(x), eps] {
                       return grad_check(f, x, eps);
                     }});
  };
  SplitMix64 rng(12345);

  // elementwise, away from kinks and guard floors
  const Tensor a = rand_tensor(rng, {2, 3}, 0.5, 1.5, false);
  const Tensor w23 = rand_tensor(rng, {2, 3}, -1.0, 1.0, false);
  add("add", [w = w23](Graph& g, const Tensor& x) { return g.sum(g.mul(g.add(x, x), w)); },
      rand_tensor(rng, {2, 3}, -1.0, 1.0));
  add("sub_mul",
      [w = w23, a](Graph& g, const Tensor& x) {
        return g.sum(g.mul(g.sub(g.mul(x, a), a), w));
      },
      rand_tensor(rng, {2, 3}, -1.0, 1.0));
  add("div",
      [a](Graph& g, const Tensor& x) { return g.sum(g.div(a, x)); },
      rand_tensor(rng, {2, 3}, 0.7, 1.6));
  add("min_max",
      [w = w23](Graph& g, const Tensor& x) {
        Tensor lo = Tensor::full({2, 3}, 1.5);
        Tensor hi = Tensor::full({2, 3}, 10.0);
        return g.sum(g.mul(g.minimum(g.maximum(x, lo), hi), w));
      },
      rand_tensor(rng, {2, 3}, 2.0, 3.0));
  add("exp_scale",
      [](Graph& g, const Tensor& x) { return g.sum(g.exp(g.scale(x, 0.5))); },
      rand_tensor(rng, {2, 3}, -1.0, 1.0));
  add("log", [](Graph& g, const Tensor& x) { return g.sum(g.log(x)); },
      rand_tensor(rng, {2, 3}, 0.5, 2.0));
  add("sqrt", [](Graph& g, const Tensor& x) { return g.sum(g.sqrt(x)); },
      rand_tensor(rng, {2, 3}, 0.5, 2.0));
  add("abs", [w = w23](Graph& g, const Tensor& x) { return g.sum(g.mul(g.abs(x), w)); },
      rand_tensor(rng, {2, 3}, 0.3, 1.0));
  add("pow", [](Graph& g, const Tensor& x) { return g.sum(g.pow(x, 1.7)); },
      rand_tensor(rng, {2, 3}, 0.5, 2.0));
  add("relu", [w = w23](Graph& g, const Tensor& x) { return g.sum(g.mul(g.relu(x), w)); },
      rand_tensor(rng, {2, 3}, 0.2, 1.0));
  add("gelu", [w = w23](Graph& g, const Tensor& x) { return g.sum(g.mul(g.gelu(x), w)); },
      rand_tensor(rng, {2, 3}, -1.5, 1.5));
  add("sigmoid",
      [w = w23](Graph& g, const Tensor& x) { return g.sum(g.mul(g.sigmoid(x), w)); },
      rand_tensor(rng, {2, 3}, -2.0, 2.0));
  add("clamp",
      [w = w23](Graph& g, const Tensor& x) {
        return g.sum(g.mul(g.clamp(x, -10.0, 10.0), w));
      },
      rand_tensor(rng, {2, 3}, -2.0, 2.0));

  // shape ops
  add("reshape_transpose",
      [w = w23](Graph& g, const Tensor& x) {
        return g.sum(g.mul(g.reshape(g.transpose(g.reshape(x, {3, 2})), {2, 3}), w));
      },
      rand_tensor(rng, {6}, -1.0, 1.0));
  add("slice_concat",
      [](Graph& g, const Tensor& x) {
        Tensor left = g.slice_cols(x, 0, 2);
        Tensor right = g.slice_cols(x, 2, 2);
        return g.sum(g.mul(g.concat_cols({right, left}), g.concat_cols({left, right})));
      },
      rand_tensor(rng, {3, 4}, -1.0, 1.0));
  add("element_gather",
      [](Graph& g, const Tensor& x) {
        Tensor rows = g.gather_rows(x, {1, 0, 1});
        return g.add(g.sum(rows), g.element(x, 3));
      },
      rand_tensor(rng, {2, 3}, -1.0, 1.0));
  add("mean", [](Graph& g, const Tensor& x) { return g.mean(g.mul(x, x)); },
      rand_tensor(rng, {2, 3}, -1.0, 1.0));

  // linear algebra / nn kernels
  const Tensor m34 = rand_tensor(rng, {3, 4}, -1.0, 1.0, false);
  const Tensor w24 = rand_tensor(rng, {2, 4}, -1.0, 1.0, false);
  add("matmul_lhs",
      [m34, w24](Graph& g, const Tensor& x) {
        return g.sum(g.mul(g.matmul(x, m34), w24));
      },
      rand_tensor(rng, {2, 3}, -1.0, 1.0));
  add("matmul_rhs",
      [w24](Graph& g, const Tensor& x) {
        Tensor a = Tensor::from_data({2, 3}, {0.3, -0.4, 0.9, 1.2, 0.1, -0.7});
        return g.sum(g.mul(g.matmul(a, x), w24));
      },
      rand_tensor(rng, {3, 4}, -1.0, 1.0));
  add("add_rowwise_bias",
      [m34, w24](Graph& g, const Tensor& x) {
        Tensor a = Tensor::from_data({2, 3}, {0.3, -0.4, 0.9, 1.2, 0.1, -0.7});
        return g.sum(g.mul(g.add_rowwise(g.matmul(a, m34), x), w24));
      },
      rand_tensor(rng, {4}, -1.0, 1.0));
  add("softmax",
      [w24](Graph& g, const Tensor& x) { return g.sum(g.mul(g.softmax(x), w24)); },
      rand_tensor(rng, {2, 4}, -1.0, 1.0));
  {
    Tensor gain = rand_tensor(rng, {4}, 0.5, 1.5, false);
    Tensor beta = rand_tensor(rng, {4}, -0.5, 0.5, false);
    add("layernorm",
        [gain, beta, w24](Graph& g, const Tensor& x) {
          return g.sum(g.mul(g.layernorm(x, gain, beta), w24));
        },
        rand_tensor(rng, {2, 4}, -1.0, 1.0));
    add("layernorm_gain",
        [w24](Graph& g, const Tensor& x) {
          Tensor inp = Tensor::from_data({2, 4}, {0.3, -0.4, 0.9, 1.2, 0.1, -0.7, 0.5, -1.1});
          Tensor beta0 = Tensor::zeros({4});
          return g.sum(g.mul(g.layernorm(inp, x, beta0), w24));
        },
        rand_tensor(rng, {4}, 0.5, 1.5));
  }
  {
    const Tensor cw = rand_tensor(rng, {2, 3, 3, 3}, -0.5, 0.5, false);
    const Tensor cb = rand_tensor(rng, {2}, -0.2, 0.2, false);
    const Tensor wout = rand_tensor(rng, {2, 3, 3}, -1.0, 1.0, false);
    add("conv2d_input",
        [cw, cb, wout](Graph& g, const Tensor& x) {
          return g.sum(g.mul(g.conv2d(x, cw, cb, 2, 1), wout));
        },
        rand_tensor(rng, {3, 5, 5}, -1.0, 1.0));
    add("conv2d_weight",
        [cb, wout](Graph& g, const Tensor& x) {
          SplitMix64 r(7);
          Tensor inp = rand_tensor(r, {3, 5, 5}, -1.0, 1.0, false);
          return g.sum(g.mul(g.conv2d(inp, x, cb, 2, 1), wout));
        },
        rand_tensor(rng, {2, 3, 3, 3}, -0.5, 0.5));
  }
  {
    const Tensor dwb = rand_tensor(rng, {3}, -0.2, 0.2, false);
    const Tensor wout = rand_tensor(rng, {3, 4, 4}, -1.0, 1.0, false);
    add("depthwise_conv",
        [dwb, wout](Graph& g, const Tensor& x) {
          Tensor k = Tensor::from_data({3, 3, 3},
                                       std::vector<double>(27, 0.11), false);
          return g.sum(g.mul(g.depthwise_conv2d(x, k, dwb, 1), wout));
        },
        rand_tensor(rng, {3, 4, 4}, -1.0, 1.0));
  }
  add("bilinear_upsample",
      [](Graph& g, const Tensor& x) {
        Tensor w = Tensor::from_data({1, 4, 4}, {0.3, -0.4, 0.9, 1.2, 0.1, -0.7, 0.5,
                                                 -1.1, 0.2, 0.8, -0.3, 0.6, -0.9, 0.4,
                                                 1.0, -0.2});
        return g.sum(g.mul(g.bilinear_upsample(x, 4, 4), w));
      },
      rand_tensor(rng, {1, 2, 2}, -1.0, 1.0));

  return cases;
}

void append_model_cases(std::vector<GradCheckCase>& cases, double eps) {
  SplitMix64 rng(999);

  // attention + two-way block at width 8, 2 heads
  {
    FusionConfig fc;
    fc.dim = 8;
    fc.heads = 2;
    fc.patch = 8;
    fc.image_size = 16;
    fc.encoder_depth = 1;
    fc.twfm_depth = 1;
    fc.mlp_hidden = 12;
    SplitMix64 prng(4242);
    auto params = std::make_shared<FusionParams>(make_fusion_params(fc, prng));
    const Tensor wtok = rand_tensor(rng, {3, 8}, -1.0, 1.0, false);
    const Tensor wimg = rand_tensor(rng, {4, 8}, -1.0, 1.0, false);
    Tensor kv = rand_tensor(rng, {4, 8}, -1.0, 1.0, false);
    cases.push_back(
        {"attention", [params, wtok, kv, eps] {
           auto f = [params, wtok, kv](Graph& g, const Tensor& x) {
             return g.sum(g.mul(
                 attention(g, x, kv, kv, params->blocks[0].t2i, 2), wtok));
           };
           SplitMix64 r(31);
           return grad_check(f, rand_tensor(r, {3, 8}, -1.0, 1.0), eps);
         }});
    cases.push_back(
        {"two_way_block", [params, fc, wtok, wimg, kv, eps] {
           auto f = [params, fc, wtok, wimg, kv](Graph& g, const Tensor& x) {
             Tensor tokens = x;
             Tensor image = kv;
             Tensor pe_q = Tensor::from_data(
                 {3, 8}, {0.1, -0.2, 0.3, 0.0, -0.1, 0.2, 0.05, -0.05,
                          0.2, 0.1, -0.3, 0.15, 0.0, -0.2, 0.1, 0.3,
                          -0.1, 0.0, 0.2, -0.15, 0.1, 0.05, -0.2, 0.25});
             Tensor pe_k = Tensor::zeros({4, 8});
             two_way_block(g, tokens, pe_q, image, pe_k, params->blocks[0], fc);
             return g.add(g.sum(g.mul(tokens, wtok)), g.sum(g.mul(image, wimg)));
           };
           SplitMix64 r(32);
           return grad_check(f, rand_tensor(r, {3, 8}, -1.0, 1.0), eps);
         }});
  }

  // loss kernels against an oriented target
  {
    const OrientedBox gt = OrientedBox::make(5.0, 4.0, 6.0, 3.0, 0.35);
    auto quad_from = [](Graph& g, const Tensor& x) {
      TapeQuad q;
      for (int c = 0; c < 4; ++c) {
        q[static_cast<size_t>(c)].x = TapeScalar{g, g.element(x, 2 * c)};
        q[static_cast<size_t>(c)].y = TapeScalar{g, g.element(x, 2 * c + 1)};
      }
      return q;
    };
    const Tensor pred = Tensor::from_data(
        {8}, {2.3, 2.1, 7.9, 3.2, 7.4, 6.1, 1.8, 5.3}, true);
    cases.push_back({"reg_loss", [quad_from, gt, pred, eps] {
                       auto f = [quad_from, gt](Graph& g, const Tensor& x) {
                         return reg_loss_t(g, quad_from(g, x), gt).node;
                       };
                       return grad_check(f, pred, eps);
                     }});
    cases.push_back({"bc_loss", [quad_from, gt, pred, eps] {
                       auto f = [quad_from, gt](Graph& g, const Tensor& x) {
                         return bc_loss_t(g, quad_from(g, x), gt).node;
                       };
                       return grad_check(f, pred, eps);
                     }});
    cases.push_back(
        {"head_losses", [quad_from, gt, pred, eps] {
           auto f = [quad_from, gt](Graph& g, const Tensor& x) {
             const OrientedBox gt2 = OrientedBox::make(4.2, 5.1, 5.0, 2.0, -0.8);
             std::vector<HeadTermT> terms;
             HeadTermT t1;
             t1.gt = 0;
             t1.q = TapeScalar{g, 1.0};
             t1.reg = reg_loss_t(g, quad_from(g, x), gt);
             t1.bc = bc_loss_t(g, quad_from(g, x), gt);
             terms.push_back(t1);
             HeadTermT t2;
             t2.gt = 1;
             t2.q = TapeScalar{g, 0.5};
             t2.reg = reg_loss_t(g, quad_from(g, x), gt2);
             t2.bc = bc_loss_t(g, quad_from(g, x), gt2);
             terms.push_back(t2);
             TapeScalar d1 = head_loss_d1_t(g, terms, 2, true);
             TapeScalar d2 = head_loss_d2_t(g, terms, 2);
             return g.add(d1.node, d2.node);
           };
           return grad_check(f, pred, eps);
         }});
  }

  cases.push_back({"focal_map", [eps] {
                     auto f = [](Graph& g, const Tensor& x) {
                       return focal_loss_map(g, x, {1, 0, 0, 1, 0, 0}, 2.0, 0.25, 2.0);
                     };
                     SplitMix64 r(33);
                     return grad_check(f, rand_tensor(r, {6}, -1.5, 1.5), eps);
                   }});

  // full detector loss on a 16x16 scene, wrt image and wrt the prompt
  // type embeddings
  {
    ModelConfig mc;
    mc.fusion.dim = 8;
    mc.fusion.heads = 2;
    mc.fusion.patch = 8;
    mc.fusion.image_size = 16;
    mc.fusion.encoder_depth = 1;
    mc.fusion.twfm_depth = 1;
    mc.fusion.mlp_hidden = 12;
    mc.num_prompts = 2;
    mc.backbone_channels = 8;
    mc.head_channels = 8;
    mc.stride = 8;
    auto det = std::make_shared<Detector>(mc, /*init_seed=*/51);
    auto gts = std::make_shared<std::vector<OrientedBox>>();
    // Sized so some grid-cell centers land inside: both head losses are live.
    gts->push_back(OrientedBox::make(8.0, 8.0, 10.0, 7.0, 0.3));
    auto prompts = std::make_shared<std::vector<PointPrompt>>();
    prompts->push_back({4.0, 6.0, PromptLabel::TowerBase});

    cases.push_back({"detector_loss_wrt_image", [det, gts, prompts, eps] {
                       auto f = [det, gts, prompts](Graph& g, const Tensor& x) {
                         TrainExample ex{x, *gts, *prompts};
                         return example_loss(g, *det, ex).total;
                       };
                       SplitMix64 r(34);
                       return grad_check(f, rand_tensor(r, {1, 16, 16}, -0.5, 1.5), eps);
                     }});
    cases.push_back(
        {"detector_loss_wrt_embeddings", [det, gts, prompts, eps] {
           SplitMix64 r(35);
           Tensor img = rand_tensor(r, {1, 16, 16}, -0.5, 1.5, false);
           auto f = [det, gts, prompts, img](Graph& g, const Tensor&) {
             TrainExample ex{img, *gts, *prompts};
             return example_loss(g, *det, ex).total;
           };
           // x shares storage with the live parameter, so the probe wiggles
           // the actual embedding table.
           return grad_check(f, det->params().type_embeddings, eps);
         }});
  }
}

int cmd_gradcheck(double eps, double tol) {
  std::vector<GradCheckCase> cases = gradcheck_cases(eps);
  append_model_cases(cases, eps);
  bool all_ok = true;
  for (const GradCheckCase& c : cases) {
    const double err = c.run();
    const bool ok = err < tol;
    all_ok = all_ok && ok;
    std::cerr << "gradcheck " << c.name << ": max_rel_err=" << err
              << (ok ? "" : "  FAIL") << "\n";
  }
  if (!all_ok) throw NumericalError("gradient check failed");
  log_info("all gradient checks passed");
  return 0;
}

int cmd_bench(int scale) {
  using clock = std::chrono::steady_clock;
  auto rate = [](int n, clock::time_point t0) {
    const double s = std::chrono::duration<double>(clock::now() - t0).count();
    return s > 0.0 ? n / s : 0.0;
  };
  SplitMix64 rng(5);

  {
    std::vector<OrientedBox> boxes;
    for (int i = 0; i < 64; ++i) {
      boxes.push_back(OrientedBox::make(rng.uniform(20, 40), rng.uniform(20, 40),
                                        rng.uniform(8, 20), rng.uniform(3, 8),
                                        rng.uniform(-1.5, 1.5)));
    }
    const int n = 20000 * scale;
    volatile double sink = 0.0;
    auto t0 = clock::now();
    for (int i = 0; i < n; ++i) {
      sink = sink + obb_iou(boxes[i % 64], boxes[(i * 7 + 3) % 64]);
    }
    std::cerr << "bench obb_iou: " << rate(n, t0) << " pairs/s\n";

    auto t1 = clock::now();
    for (int i = 0; i < n; ++i) {
      sink = sink + corners_to_obb(obb_to_corners(boxes[i % 64])).w;
    }
    std::cerr << "bench corners_to_obb: " << rate(n, t1) << " boxes/s\n";
  }
  {
    FusionConfig fc;
    SplitMix64 prng(6);
    FusionParams fp = make_fusion_params(fc, prng);
    Tensor q = rand_tensor(rng, {8, 64}, -1.0, 1.0, false);
    Tensor kv = rand_tensor(rng, {64, 64}, -1.0, 1.0, false);
    const int n = 40 * scale;
    auto t0 = clock::now();
    for (int i = 0; i < n; ++i) {
      Graph g;
      Tensor out = attention(g, q, kv, kv, fp.blocks[0].t2i, fc.heads);
      g.backward(g.sum(out));
    }
    std::cerr << "bench attention fwd+bwd (8x64 @ 64): " << rate(n, t0) << " calls/s\n";
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"oriented tower detector toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_dir, ckpt_path, scene_path,
      prompts_path, log_path, annotations, curve_path;
  int count = 100, size_override = -1, steps_override = -1;
  uint64_t seed = 0;
  double score_thresh = 0.3, nms_iou = 0.1, norm_mean = 45.52, norm_std = 28.36;
  int image_size = 512, grid = 64, top_k = 9, distance_exponent = 1;
  double w = 2.0;
  bool image_frame = false;
  double eps = 1e-5, tol = 1e-4;
  int bench_scale = 1;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
  gen->add_option("--config", config_path, "run config JSON");
  gen->add_option("--out", out_path, "output dataset directory")->required();
  gen->add_option("--count", count, "number of scenes");
  auto* seed_opt = gen->add_option("--seed", seed, "override the data seed");
  gen->add_option("--size", size_override, "override the scene size");

  auto* train = app.add_subcommand("train", "train a detector");
  train->add_option("--config", config_path, "run config JSON");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_path, "output checkpoint path")->required();
  train->add_option("--steps", steps_override, "override the step count");
  train->add_option("--log", log_path, "JSONL training log path");

  auto* predict = app.add_subcommand("predict", "run inference on one scene");
  predict->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  predict->add_option("--scene", scene_path, "raw float32 scene file")->required();
  predict->add_option("--prompts", prompts_path, "prompts JSONL");
  predict->add_option("--out", out_path, "detections JSONL path")->required();
  predict->add_option("--score-thresh", score_thresh, "score threshold");
  predict->add_option("--nms-iou", nms_iou, "NMS IoU threshold");
  predict->add_option("--norm-mean", norm_mean, "intensity normalization mean");
  predict->add_option("--norm-std", norm_std, "intensity normalization std");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--config", config_path, "run config JSON");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--out", out_path, "metrics JSON path")->required();
  eval->add_option("--curve", curve_path, "PR curve CSV path");

  auto* assign_cmd = app.add_subcommand("assign", "dump label assignments");
  assign_cmd->add_option("--annotations", annotations, "annotations JSONL")->required();
  assign_cmd->add_option("--out", out_path, "assignments JSONL path")->required();
  assign_cmd->add_option("--image-size", image_size, "image size in pixels");
  assign_cmd->add_option("--grid", grid, "sample grid side (cells)");
  assign_cmd->add_option("--w", w, "shape factor decay rate");
  assign_cmd->add_option("--top-k", top_k, "candidate pool size");
  assign_cmd->add_flag("--image-frame", image_frame,
                       "measure offsets in image axes instead of the box frame");
  assign_cmd->add_option("--distance-exponent", distance_exponent,
                         "denominator power (1 or 2)");

  auto* gradcheck = app.add_subcommand("gradcheck", "run the gradient check suite");
  gradcheck->add_option("--eps", eps, "finite-difference step");
  gradcheck->add_option("--tol", tol, "max relative error tolerance");

  auto* bench = app.add_subcommand("bench", "time geometry and attention kernels");
  bench->add_option("--scale", bench_scale, "iteration multiplier");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      return cmd_gen_data(config_path, out_path, count, seed_opt->count() > 0, seed,
                          size_override);
    }
    if (train->parsed()) {
      return cmd_train(config_path, data_dir, out_path, steps_override, log_path);
    }
    if (predict->parsed()) {
      return cmd_predict(ckpt_path, scene_path, prompts_path, out_path, score_thresh,
                         nms_iou, norm_mean, norm_std);
    }
    if (eval->parsed()) {
      return cmd_eval(config_path, ckpt_path, data_dir, out_path, curve_path);
    }
    if (assign_cmd->parsed()) {
      return cmd_assign(annotations, out_path, image_size, grid, w, top_k,
                        image_frame, distance_exponent);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(eps, tol);
    if (bench->parsed()) return cmd_bench(bench_scale);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace p2det
