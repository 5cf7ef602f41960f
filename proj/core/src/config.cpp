#include "p2det/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "p2det/errors.hpp"

namespace p2det {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& constraint) {
  throw ConfigError("config constraint violated: " + constraint);
}

void check_keys(const json& j, const std::string& path,
                const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("expected an object at " + path);
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) {
      throw ConfigError("unknown config key: " + path + item.key());
    }
  }
}

template <typename T>
void read(const json& j, const std::string& path, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value type at " + path + key);
  }
}

// --- scene -------------------------------------------------------------------

void parse_scene(const json& j, SceneConfig& c) {
  check_keys(j, "scene.",
             {"size", "min_towers", "max_towers", "incidence_min_deg",
              "incidence_max_deg", "clutter_density", "speckle_looks",
              "jitter_radius", "norm_mean", "norm_std"});
  read(j, "scene.", "size", c.size);
  read(j, "scene.", "min_towers", c.min_towers);
  read(j, "scene.", "max_towers", c.max_towers);
  read(j, "scene.", "incidence_min_deg", c.incidence_min_deg);
  read(j, "scene.", "incidence_max_deg", c.incidence_max_deg);
  read(j, "scene.", "clutter_density", c.clutter_density);
  read(j, "scene.", "speckle_looks", c.speckle_looks);
  read(j, "scene.", "jitter_radius", c.jitter_radius);
  read(j, "scene.", "norm_mean", c.norm_mean);
  read(j, "scene.", "norm_std", c.norm_std);

  if (c.size < 32) fail("scene.size >= 32");
  if (c.min_towers < 0) fail("scene.min_towers >= 0");
  if (c.min_towers > c.max_towers) fail("scene.min_towers <= scene.max_towers");
  if (c.incidence_min_deg > c.incidence_max_deg) {
    fail("scene.incidence_min_deg <= scene.incidence_max_deg");
  }
  if (c.clutter_density < 0.0) fail("scene.clutter_density >= 0");
  if (c.speckle_looks < 1.0) fail("scene.speckle_looks >= 1");
  if (c.jitter_radius < 0.0) fail("scene.jitter_radius >= 0");
  if (!(c.norm_std > 0.0)) fail("scene.norm_std > 0");
}

json scene_json(const SceneConfig& c) {
  return json{{"size", c.size},
              {"min_towers", c.min_towers},
              {"max_towers", c.max_towers},
              {"incidence_min_deg", c.incidence_min_deg},
              {"incidence_max_deg", c.incidence_max_deg},
              {"clutter_density", c.clutter_density},
              {"speckle_looks", c.speckle_looks},
              {"jitter_radius", c.jitter_radius},
              {"norm_mean", c.norm_mean},
              {"norm_std", c.norm_std}};
}

// --- model -------------------------------------------------------------------

bool power_of_two(int v) {
  while (v > 1 && v % 2 == 0) v /= 2;
  return v == 1;
}

void parse_model(const json& j, ModelConfig& c) {
  check_keys(j, "model.",
             {"dim", "heads", "patch", "image_size", "encoder_depth",
              "twfm_depth", "mlp_hidden", "pe_in_values", "block_conv",
              "num_prompts", "backbone_channels", "head_channels", "stride",
              "fourier_sigma", "use_prompts"});
  read(j, "model.", "dim", c.fusion.dim);
  read(j, "model.", "heads", c.fusion.heads);
  read(j, "model.", "patch", c.fusion.patch);
  read(j, "model.", "image_size", c.fusion.image_size);
  read(j, "model.", "encoder_depth", c.fusion.encoder_depth);
  read(j, "model.", "twfm_depth", c.fusion.twfm_depth);
  read(j, "model.", "mlp_hidden", c.fusion.mlp_hidden);
  read(j, "model.", "pe_in_values", c.fusion.pe_in_values);
  read(j, "model.", "block_conv", c.fusion.block_conv);
  read(j, "model.", "num_prompts", c.num_prompts);
  read(j, "model.", "backbone_channels", c.backbone_channels);
  read(j, "model.", "head_channels", c.head_channels);
  read(j, "model.", "stride", c.stride);
  read(j, "model.", "fourier_sigma", c.fourier_sigma);
  read(j, "model.", "use_prompts", c.use_prompts);

  if (c.fusion.dim <= 0) fail("model.dim > 0");
  if (c.fusion.dim % 2 != 0) fail("model.dim even");
  if (c.fusion.heads <= 0) fail("model.heads > 0");
  if (c.fusion.dim % c.fusion.heads != 0) fail("model.dim % model.heads == 0");
  if (c.fusion.patch <= 0) fail("model.patch > 0");
  if (c.fusion.image_size < 8) fail("model.image_size >= 8");
  if (c.fusion.image_size % c.fusion.patch != 0) {
    fail("model.image_size % model.patch == 0");
  }
  if (c.fusion.encoder_depth < 0) fail("model.encoder_depth >= 0");
  if (c.fusion.twfm_depth < 0) fail("model.twfm_depth >= 0");
  if (c.fusion.mlp_hidden <= 0) fail("model.mlp_hidden > 0");
  if (c.num_prompts <= 0) fail("model.num_prompts > 0");
  if (c.backbone_channels <= 0) fail("model.backbone_channels > 0");
  if (c.head_channels <= 0) fail("model.head_channels > 0");
  if (c.stride <= 0 || !power_of_two(c.stride)) fail("model.stride power of two");
  if (c.fusion.image_size % c.stride != 0) fail("model.image_size % model.stride == 0");
  if (!(c.fourier_sigma > 0.0)) fail("model.fourier_sigma > 0");
}

json model_json(const ModelConfig& c) {
  return json{{"dim", c.fusion.dim},
              {"heads", c.fusion.heads},
              {"patch", c.fusion.patch},
              {"image_size", c.fusion.image_size},
              {"encoder_depth", c.fusion.encoder_depth},
              {"twfm_depth", c.fusion.twfm_depth},
              {"mlp_hidden", c.fusion.mlp_hidden},
              {"pe_in_values", c.fusion.pe_in_values},
              {"block_conv", c.fusion.block_conv},
              {"num_prompts", c.num_prompts},
              {"backbone_channels", c.backbone_channels},
              {"head_channels", c.head_channels},
              {"stride", c.stride},
              {"fourier_sigma", c.fourier_sigma},
              {"use_prompts", c.use_prompts}};
}

// --- assigner ----------------------------------------------------------------

void parse_assigner(const json& j, AssignerConfig& c) {
  check_keys(j, "assigner.",
             {"w", "top_k", "rotated_frame", "distance_exponent",
              "use_fixed_threshold", "fixed_threshold"});
  read(j, "assigner.", "w", c.w);
  read(j, "assigner.", "top_k", c.top_k);
  read(j, "assigner.", "rotated_frame", c.rotated_frame);
  read(j, "assigner.", "distance_exponent", c.distance_exponent);
  read(j, "assigner.", "use_fixed_threshold", c.use_fixed_threshold);
  read(j, "assigner.", "fixed_threshold", c.fixed_threshold);

  if (!(c.w > 0.0)) fail("assigner.w > 0");
  if (c.top_k < 1) fail("assigner.top_k >= 1");
  if (c.distance_exponent != 1 && c.distance_exponent != 2) {
    fail("assigner.distance_exponent in {1, 2}");
  }
  if (c.use_fixed_threshold &&
      !(c.fixed_threshold > 0.0 && c.fixed_threshold <= 1.0)) {
    fail("assigner.fixed_threshold in (0, 1]");
  }
}

json assigner_json(const AssignerConfig& c) {
  return json{{"w", c.w},
              {"top_k", c.top_k},
              {"rotated_frame", c.rotated_frame},
              {"distance_exponent", c.distance_exponent},
              {"use_fixed_threshold", c.use_fixed_threshold},
              {"fixed_threshold", c.fixed_threshold}};
}

// --- loss --------------------------------------------------------------------

void parse_loss(const json& j, LossConfig& c) {
  check_keys(j, "loss.",
             {"focal_gamma", "focal_alpha", "bc_inside_weighting", "lambda_cls",
              "lambda_d1", "lambda_d2"});
  read(j, "loss.", "focal_gamma", c.focal_gamma);
  read(j, "loss.", "focal_alpha", c.focal_alpha);
  read(j, "loss.", "bc_inside_weighting", c.bc_inside_weighting);
  read(j, "loss.", "lambda_cls", c.weights.lambda_cls);
  read(j, "loss.", "lambda_d1", c.weights.lambda_d1);
  read(j, "loss.", "lambda_d2", c.weights.lambda_d2);

  if (c.focal_gamma < 0.0) fail("loss.focal_gamma >= 0");
  if (!(c.focal_alpha > 0.0 && c.focal_alpha < 1.0)) fail("loss.focal_alpha in (0, 1)");
  if (c.weights.lambda_cls < 0.0) fail("loss.lambda_cls >= 0");
  if (c.weights.lambda_d1 < 0.0) fail("loss.lambda_d1 >= 0");
  if (c.weights.lambda_d2 < 0.0) fail("loss.lambda_d2 >= 0");
}

json loss_json(const LossConfig& c) {
  return json{{"focal_gamma", c.focal_gamma},
              {"focal_alpha", c.focal_alpha},
              {"bc_inside_weighting", c.bc_inside_weighting},
              {"lambda_cls", c.weights.lambda_cls},
              {"lambda_d1", c.weights.lambda_d1},
              {"lambda_d2", c.weights.lambda_d2}};
}

// --- train / eval ------------------------------------------------------------

void parse_train(const json& j, TrainConfig& c) {
  check_keys(j, "train.",
             {"lr", "momentum", "batch_size", "steps", "log_every", "lr_gamma",
              "lr_milestones", "flip_augment"});
  read(j, "train.", "lr", c.lr);
  read(j, "train.", "momentum", c.momentum);
  read(j, "train.", "batch_size", c.batch_size);
  read(j, "train.", "steps", c.steps);
  read(j, "train.", "log_every", c.log_every);
  read(j, "train.", "lr_gamma", c.lr_gamma);
  read(j, "train.", "lr_milestones", c.lr_milestones);
  read(j, "train.", "flip_augment", c.flip_augment);

  if (c.lr < 0.0) fail("train.lr >= 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail("train.momentum in [0, 1)");
  if (c.batch_size < 1) fail("train.batch_size >= 1");
  if (c.steps < 0) fail("train.steps >= 0");
  if (c.log_every < 1) fail("train.log_every >= 1");
  if (!(c.lr_gamma > 0.0)) fail("train.lr_gamma > 0");
  for (size_t i = 0; i < c.lr_milestones.size(); ++i) {
    if (c.lr_milestones[i] < 1) fail("train.lr_milestones entries >= 1");
    if (i > 0 && c.lr_milestones[i] <= c.lr_milestones[i - 1]) {
      fail("train.lr_milestones strictly ascending");
    }
  }
}

json train_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"momentum", c.momentum},
              {"batch_size", c.batch_size},
              {"steps", c.steps},
              {"log_every", c.log_every},
              {"lr_gamma", c.lr_gamma},
              {"lr_milestones", c.lr_milestones},
              {"flip_augment", c.flip_augment}};
}

void parse_eval(const json& j, EvalConfig& c) {
  check_keys(j, "eval.", {"score_thresh", "nms_iou", "iou_thresholds", "max_dets"});
  read(j, "eval.", "score_thresh", c.score_thresh);
  read(j, "eval.", "nms_iou", c.nms_iou);
  read(j, "eval.", "iou_thresholds", c.iou_thresholds);
  read(j, "eval.", "max_dets", c.max_dets);

  if (!(c.score_thresh >= 0.0 && c.score_thresh <= 1.0)) {
    fail("eval.score_thresh in [0, 1]");
  }
  if (!(c.nms_iou >= 0.0 && c.nms_iou <= 1.0)) fail("eval.nms_iou in [0, 1]");
  if (c.iou_thresholds.empty()) fail("eval.iou_thresholds nonempty");
  for (double t : c.iou_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) fail("eval.iou_thresholds each in (0, 1]");
  }
  if (c.max_dets < 1) fail("eval.max_dets >= 1");
}

json eval_json(const EvalConfig& c) {
  return json{{"score_thresh", c.score_thresh},
              {"nms_iou", c.nms_iou},
              {"iou_thresholds", c.iou_thresholds},
              {"max_dets", c.max_dets}};
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  check_keys(j, "", {"seeds", "scene", "model", "assigner", "loss", "train", "eval"});

  RunConfig cfg;
  if (j.contains("seeds")) {
    const json& s = j["seeds"];
    check_keys(s, "seeds.", {"data", "init", "fourier"});
    read(s, "seeds.", "data", cfg.data_seed);
    read(s, "seeds.", "init", cfg.init_seed);
    read(s, "seeds.", "fourier", cfg.model.fourier_seed);
  }
  if (j.contains("scene")) parse_scene(j["scene"], cfg.scene);
  if (j.contains("model")) parse_model(j["model"], cfg.model);
  if (j.contains("assigner")) parse_assigner(j["assigner"], cfg.model.assigner);
  if (j.contains("loss")) parse_loss(j["loss"], cfg.model.loss);
  if (j.contains("train")) parse_train(j["train"], cfg.train);
  if (j.contains("eval")) parse_eval(j["eval"], cfg.eval);
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const RunConfig& cfg) {
  const json j{{"seeds",
                {{"data", cfg.data_seed},
                 {"init", cfg.init_seed},
                 {"fourier", cfg.model.fourier_seed}}},
               {"scene", scene_json(cfg.scene)},
               {"model", model_json(cfg.model)},
               {"assigner", assigner_json(cfg.model.assigner)},
               {"loss", loss_json(cfg.model.loss)},
               {"train", train_json(cfg.train)},
               {"eval", eval_json(cfg.eval)}};
  return j.dump(2) + "\n";
}

std::string detector_meta_json(const ModelConfig& cfg, uint64_t init_seed) {
  const json j{{"init_seed", init_seed},
               {"fourier_seed", cfg.fourier_seed},
               {"model", model_json(cfg)},
               {"assigner", assigner_json(cfg.assigner)},
               {"loss", loss_json(cfg.loss)}};
  return j.dump();
}

ModelConfig detector_meta_parse(const std::string& meta, uint64_t& init_seed) {
  json j;
  try {
    j = json::parse(meta);
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint metadata: ") + e.what());
  }
  ModelConfig cfg;
  try {
    init_seed = j.at("init_seed").get<uint64_t>();
    cfg.fourier_seed = j.at("fourier_seed").get<uint64_t>();
    parse_model(j.at("model"), cfg);
    parse_assigner(j.at("assigner"), cfg.assigner);
    parse_loss(j.at("loss"), cfg.loss);
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint metadata: ") + e.what());
  }
  return cfg;
}

}  // namespace p2det
