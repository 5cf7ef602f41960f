#include "p2det/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "p2det/checkpoint.hpp"
#include "p2det/config.hpp"
#include "p2det/errors.hpp"

namespace p2det {

namespace {

Tensor conv_weight(SplitMix64& rng, int co, int ci, int k) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(ci) * k * k);
  std::vector<double> data(static_cast<size_t>(co) * ci * k * k);
  for (double& v : data) v = rng.gaussian() * stddev;
  return Tensor::from_data({co, ci, k, k}, std::move(data), /*requires_grad=*/true);
}

ConvParams make_conv(SplitMix64& rng, int co, int ci, int k) {
  return {conv_weight(rng, co, ci, k), Tensor::zeros({co}, true)};
}

int downsample_steps(int stride) {
  int steps = 0;
  int s = stride;
  while (s > 1 && s % 2 == 0) {
    s /= 2;
    ++steps;
  }
  if (s != 1) throw std::invalid_argument("detection stride must be a power of two");
  return steps;
}

void validate_model(const ModelConfig& cfg) {
  if (cfg.fusion.dim <= 0 || cfg.fusion.heads <= 0 || cfg.fusion.patch <= 0 ||
      cfg.fusion.encoder_depth < 0 || cfg.fusion.twfm_depth < 0 ||
      cfg.fusion.mlp_hidden <= 0) {
    throw std::invalid_argument("fusion dims must be positive");
  }
  if (cfg.fusion.dim % cfg.fusion.heads != 0) {
    throw std::invalid_argument("fusion dim must be divisible by heads");
  }
  if (cfg.fusion.dim % 2 != 0) {
    throw std::invalid_argument("fusion dim must be even (cos/sin pairs)");
  }
  if (cfg.fusion.image_size % cfg.fusion.patch != 0) {
    throw std::invalid_argument("image size must be divisible by patch");
  }
  if (cfg.stride <= 0 || cfg.fusion.image_size % cfg.stride != 0) {
    throw std::invalid_argument("image size must be divisible by stride");
  }
  downsample_steps(cfg.stride);
  if (cfg.num_prompts <= 0) throw std::invalid_argument("num_prompts must be > 0");
  if (cfg.backbone_channels <= 0 || cfg.head_channels <= 0) {
    throw std::invalid_argument("channel counts must be > 0");
  }
  if (!(cfg.fourier_sigma > 0.0)) throw std::invalid_argument("fourier sigma must be > 0");
}

// Corner offsets live in stride units relative to the cell center; biasing
// the initial head to a unit cell keeps the first quads non-degenerate.
const double kSquareBias[8] = {-0.5, -0.5, 0.5, -0.5, 0.5, 0.5, -0.5, 0.5};

TapeQuad quad_at(Graph& g, const Tensor& off, int cell, const SamplePoint& sp) {
  const int cells = off.dim(1) * off.dim(2);
  TapeQuad q;
  for (int c = 0; c < 4; ++c) {
    TapeScalar ox{g, g.element(off, static_cast<int64_t>(2 * c) * cells + cell)};
    TapeScalar oy{g, g.element(off, static_cast<int64_t>(2 * c + 1) * cells + cell)};
    q[static_cast<size_t>(c)].x = ox * sp.stride + sp.x;
    q[static_cast<size_t>(c)].y = oy * sp.stride + sp.y;
  }
  return q;
}

std::array<Vec2, 4> quad_values(const Tensor& off, int cell, const SamplePoint& sp) {
  const int cells = off.dim(1) * off.dim(2);
  std::array<Vec2, 4> q;
  for (int c = 0; c < 4; ++c) {
    q[static_cast<size_t>(c)].x =
        sp.x + sp.stride * off.at(static_cast<int64_t>(2 * c) * cells + cell);
    q[static_cast<size_t>(c)].y =
        sp.y + sp.stride * off.at(static_cast<int64_t>(2 * c + 1) * cells + cell);
  }
  return q;
}

void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("non-finite loss term ") + term);
  }
}

// Tape mirror of the assigner's shape_distance -> quality chain, evaluated
// at the quad's center. Follows the double path's arithmetic step for step
// (true divisions, same association) so the node's value agrees with the
// detached assignment's quality.
TapeScalar tape_quality(Graph& g, const TapeQuad& quad, const OrientedBox& gt,
                        const AssignerConfig& cfg) {
  const TapeScalar cx = 0.25 * (quad[0].x + quad[1].x + quad[2].x + quad[3].x);
  const TapeScalar cy = 0.25 * (quad[0].y + quad[1].y + quad[2].y + quad[3].y);
  const TapeScalar dx = cx - gt.cx;
  const TapeScalar dy = cy - gt.cy;
  TapeScalar lx = dx, ly = dy;
  if (cfg.rotated_frame) {
    const double c = std::cos(gt.theta);
    const double sn = std::sin(gt.theta);
    lx = dx * c + dy * sn;
    ly = -dx * sn + dy * c;
  }
  const double dw = cfg.distance_exponent == 1 ? gt.w : gt.w * gt.w;
  const double dh = cfg.distance_exponent == 1 ? gt.h : gt.h * gt.h;
  const TapeScalar dist =
      ad_sqrt(lx * lx / TapeScalar{g, dw} + ly * ly / TapeScalar{g, dh});
  return ad_exp(-dist);
}

}  // namespace

Detector::Detector(const ModelConfig& cfg, uint64_t init_seed)
    : cfg_(cfg),
      init_seed_(init_seed),
      fm_(cfg.fusion.dim / 2, cfg.fourier_sigma, cfg.fourier_seed) {
  validate_model(cfg_);
  SplitMix64 rng(init_seed);
  const int d = cfg_.fusion.dim;
  const int bc = cfg_.backbone_channels;
  const int hc = cfg_.head_channels;

  params_.type_embeddings = [&] {
    std::vector<double> data(static_cast<size_t>(2) * d);
    for (double& v : data) v = rng.gaussian() * 0.02;
    return Tensor::from_data({2, d}, std::move(data), true);
  }();
  params_.fusion = make_fusion_params(cfg_.fusion, rng);

  const int steps = downsample_steps(cfg_.stride);
  int ci = d;
  for (int i = 0; i < steps; ++i) {
    params_.backbone.push_back(make_conv(rng, bc, ci, 3));
    ci = bc;
  }
  params_.cls1 = make_conv(rng, hc, bc, 3);
  params_.cls2 = make_conv(rng, 1, hc, 3);
  params_.reg1 = make_conv(rng, hc, bc, 3);
  params_.reg2 = make_conv(rng, 8, hc, 3);
  std::copy(std::begin(kSquareBias), std::end(kSquareBias),
            params_.reg2.b.raw().begin());
  params_.ref1 = make_conv(rng, hc, bc + 8, 3);
  params_.ref2 = make_conv(rng, 8, hc, 3);  // zero bias: refinement is a delta
}

NamedParams Detector::named_params() const {
  NamedParams out;
  out.emplace_back("prompt.type_embeddings", params_.type_embeddings);
  collect_fusion_params(params_.fusion, cfg_.fusion, out);
  for (size_t i = 0; i < params_.backbone.size(); ++i) {
    const std::string pre = "backbone.conv" + std::to_string(i);
    out.emplace_back(pre + ".w", params_.backbone[i].w);
    out.emplace_back(pre + ".b", params_.backbone[i].b);
  }
  auto head = [&out](const char* name, const ConvParams& p) {
    out.emplace_back(std::string("head.") + name + ".w", p.w);
    out.emplace_back(std::string("head.") + name + ".b", p.b);
  };
  head("cls1", params_.cls1);
  head("cls2", params_.cls2);
  head("reg1", params_.reg1);
  head("reg2", params_.reg2);
  head("ref1", params_.ref1);
  head("ref2", params_.ref2);
  return out;
}

ForwardOut Detector::forward(Graph& g, const Tensor& image,
                             const std::vector<PointPrompt>& prompts) const {
  const int S = cfg_.fusion.image_size;
  if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) != S || image.dim(2) != S) {
    throw std::invalid_argument("forward image shape mismatch with config");
  }

  Tensor sparse = encode_prompts(g, cfg_.use_prompts ? prompts : std::vector<PointPrompt>{},
                                 fm_, params_.type_embeddings, cfg_.num_prompts, S);
  ImageEmbedding emb = encode_image(g, image, fm_, params_.fusion.encoder, cfg_.fusion);
  Tensor x = fuse(g, sparse, emb, params_.fusion, cfg_.fusion);

  for (const ConvParams& conv : params_.backbone) {
    x = g.relu(g.conv2d(x, conv.w, conv.b, /*stride=*/2, /*pad=*/1));
  }
  const int side = S / cfg_.stride;

  Tensor ch = g.relu(g.conv2d(x, params_.cls1.w, params_.cls1.b, 1, 1));
  Tensor logits = g.reshape(g.conv2d(ch, params_.cls2.w, params_.cls2.b, 1, 1),
                            {side * side});

  Tensor rh = g.relu(g.conv2d(x, params_.reg1.w, params_.reg1.b, 1, 1));
  Tensor init_off = g.conv2d(rh, params_.reg2.w, params_.reg2.b, 1, 1);

  // Refinement sees the backbone features with the initial offsets stacked
  // on as extra channels, and emits a delta on those offsets.
  const int bc = cfg_.backbone_channels;
  Tensor feat2d = g.transpose(g.reshape(x, {bc, side * side}));
  Tensor off2d = g.transpose(g.reshape(init_off, {8, side * side}));
  Tensor cat = g.reshape(g.transpose(g.concat_cols({feat2d, off2d})),
                         {bc + 8, side, side});
  Tensor fh = g.relu(g.conv2d(cat, params_.ref1.w, params_.ref1.b, 1, 1));
  Tensor delta = g.conv2d(fh, params_.ref2.w, params_.ref2.b, 1, 1);
  Tensor refined_off = g.add(init_off, delta);

  ForwardOut out;
  out.logits = logits;
  out.init_off = init_off;
  out.refined_off = refined_off;
  out.samples = make_grid_samples(S, cfg_.stride);
  return out;
}

ExampleLoss example_loss(Graph& g, const Detector& det, const TrainExample& ex) {
  const ModelConfig& cfg = det.config();
  ForwardOut out = det.forward(g, ex.image, ex.prompts);
  const int num_gts = static_cast<int>(ex.gts.size());

  const AssignmentResult a1 = assign(out.samples, ex.gts, cfg.assigner);
  std::vector<int> labels(out.samples.size(), 0);
  int num_pos = 0;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    if (a1.is_positive(i)) {
      labels[i] = 1;
      ++num_pos;
    }
  }
  Tensor l_cls = focal_loss_map(g, out.logits, labels, cfg.loss.focal_gamma,
                                cfg.loss.focal_alpha, std::max(1, num_pos));

  std::vector<HeadTermT> terms1;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    if (!a1.is_positive(i)) continue;
    const OrientedBox& gt = ex.gts[static_cast<size_t>(a1.gt_index[i])];
    const TapeQuad q = quad_at(g, out.init_off, static_cast<int>(i), out.samples[i]);
    HeadTermT t;
    t.gt = a1.gt_index[i];
    t.q = TapeScalar{g, a1.quality[i]};  // fixed sample grid: truly constant
    t.reg = reg_loss_t(g, q, gt);
    t.bc = bc_loss_t(g, q, gt);
    terms1.push_back(std::move(t));
  }
  TapeScalar l_d1 = head_loss_d1_t(g, terms1, num_gts, cfg.loss.bc_inside_weighting);

  // Second head: re-assign at the refined quad centers. The discrete
  // structure (who is positive, bound to which box) is decided from detached
  // values, but the quality weight itself is rebuilt on the tape: it is a
  // smooth function of the predicted centers, and the gradient check of the
  // composed graph only closes if that dependence is differentiated.
  std::vector<SamplePoint> refined = out.samples;
  for (size_t i = 0; i < refined.size(); ++i) {
    const auto q = quad_values(out.refined_off, static_cast<int>(i), out.samples[i]);
    refined[i].x = 0.25 * (q[0].x + q[1].x + q[2].x + q[3].x);
    refined[i].y = 0.25 * (q[0].y + q[1].y + q[2].y + q[3].y);
  }
  const AssignmentResult a2 = assign(refined, ex.gts, cfg.assigner);
  std::vector<HeadTermT> terms2;
  for (size_t i = 0; i < refined.size(); ++i) {
    if (!a2.is_positive(i)) continue;
    const OrientedBox& gt = ex.gts[static_cast<size_t>(a2.gt_index[i])];
    const TapeQuad q = quad_at(g, out.refined_off, static_cast<int>(i), out.samples[i]);
    HeadTermT t;
    t.gt = a2.gt_index[i];
    t.q = tape_quality(g, q, gt, cfg.assigner);
    t.reg = reg_loss_t(g, q, gt);
    terms2.push_back(std::move(t));
  }
  TapeScalar l_d2 = head_loss_d2_t(g, terms2, num_gts);

  require_finite(l_cls.value(), "l_cls");
  require_finite(l_d1.value(), "l_d1");
  require_finite(l_d2.value(), "l_d2");

  const LossWeights& lw = cfg.loss.weights;
  ExampleLoss el;
  el.total =
      g.add(g.add(g.scale(l_cls, lw.lambda_cls), g.scale(l_d1.node, lw.lambda_d1)),
            g.scale(l_d2.node, lw.lambda_d2));
  require_finite(el.total.value(), "total");
  el.l_cls = l_cls.value();
  el.l_d1 = l_d1.value();
  el.l_d2 = l_d2.value();
  return el;
}

LossBreakdown Detector::train_step(const std::vector<TrainExample>& batch,
                                   SgdState& opt) {
  if (batch.empty()) throw std::invalid_argument("empty training batch");
  NamedParams params = named_params();
  for (auto& [name, t] : params) t.zero_grad();

  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  double sum_cls = 0.0, sum_d1 = 0.0, sum_d2 = 0.0;

  for (const TrainExample& ex : batch) {
    Graph g;
    const ExampleLoss el = example_loss(g, *this, ex);
    g.backward(g.scale(el.total, inv_batch));
    sum_cls += el.l_cls;
    sum_d1 += el.l_d1;
    sum_d2 += el.l_d2;
  }

  if (opt.velocity.size() != params.size()) {
    throw std::invalid_argument("optimizer state does not match parameter registry");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    std::vector<double>& v = opt.velocity[i].raw();
    std::vector<double>& w = p.raw();
    if (p.has_grad()) {
      const std::span<const double> grad = p.grad();
      for (size_t j = 0; j < w.size(); ++j) {
        v[j] = opt.momentum * v[j] + grad[j];
        w[j] -= opt.lr * v[j];
      }
    } else {
      for (size_t j = 0; j < w.size(); ++j) {
        v[j] = opt.momentum * v[j];
        w[j] -= opt.lr * v[j];
      }
    }
    p.zero_grad();
  }

  return total_loss(sum_cls * inv_batch, sum_d1 * inv_batch, sum_d2 * inv_batch,
                    cfg_.loss.weights);
}

std::vector<Detection> rotated_nms(std::vector<Detection> dets, double nms_iou) {
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) {
    throw std::invalid_argument("nms_iou must be in [0, 1]");
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (obb_iou(d.box, k.box) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> Detector::predict(const Tensor& image,
                                         const std::vector<PointPrompt>& prompts,
                                         double score_thresh, double nms_iou) const {
  Graph g;
  const ForwardOut out = forward(g, image, prompts);

  std::vector<Detection> dets;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    const double logit = out.logits.at(static_cast<int64_t>(i));
    const double score = 1.0 / (1.0 + std::exp(-logit));
    if (score < score_thresh) continue;
    const auto corners = quad_values(out.refined_off, static_cast<int>(i), out.samples[i]);
    try {
      Detection d;
      d.quad = Quad::from_points(corners);
      d.box = corners_to_obb(d.quad);
      d.score = score;
      dets.push_back(d);
    } catch (const std::invalid_argument&) {
      // degenerate quad from an untrained head; nothing to report here
    }
  }
  return rotated_nms(std::move(dets), nms_iou);
}

void Detector::save(const std::string& path) const {
  Checkpoint ckpt;
  ckpt.tensors = named_params();
  ckpt.meta_json = detector_meta_json(cfg_, init_seed_);
  save_checkpoint(path, ckpt);
}

Detector Detector::load(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  uint64_t init_seed = 0;
  const ModelConfig cfg = detector_meta_parse(ckpt.meta_json, init_seed);
  Detector det(cfg, init_seed);
  NamedParams params = det.named_params();
  if (params.size() != ckpt.tensors.size()) {
    throw IoError("checkpoint parameter count mismatch");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, stored] = ckpt.tensors[i];
    Tensor& dst = params[i].second;
    if (name != params[i].first) {
      throw IoError("checkpoint parameter order mismatch at " + name);
    }
    if (stored.shape() != dst.shape()) {
      throw IoError("checkpoint shape mismatch for " + name);
    }
    std::copy(stored.data().begin(), stored.data().end(), dst.raw().begin());
  }
  return det;
}

SgdState make_sgd_state(const Detector& det, const TrainConfig& tc) {
  if (!(tc.lr >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(tc.momentum >= 0.0 && tc.momentum < 1.0)) {
    throw std::invalid_argument("momentum must be in [0, 1)");
  }
  SgdState s;
  s.lr = tc.lr;
  s.momentum = tc.momentum;
  for (const auto& [name, t] : det.named_params()) {
    s.velocity.push_back(Tensor::zeros(t.shape()));
  }
  return s;
}

}  // namespace p2det
