#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2det/assigner.hpp"
#include "p2det/eval.hpp"
#include "p2det/fusion.hpp"
#include "p2det/losses.hpp"
#include "p2det/prompt_encoder.hpp"
#include "p2det/synthgen.hpp"
#include "p2det/tensor.hpp"

namespace p2det {

struct ModelConfig {
  FusionConfig fusion;
  int num_prompts = 8;
  int backbone_channels = 64;
  int head_channels = 64;
  int stride = 8;  // detection grid stride; power of two, >= patch works best
  double fourier_sigma = 1.0;
  uint64_t fourier_seed = 3;
  bool use_prompts = true;  // ablation: false feeds only padding tokens
  AssignerConfig assigner;
  LossConfig loss;

  int grid_cells() const {
    const int side = fusion.image_size / stride;
    return side * side;
  }
};

struct TrainConfig {
  double lr = 0.0025;
  double momentum = 0.9;
  int batch_size = 4;
  int steps = 300;
  int log_every = 20;
  // Multistep schedule: lr is multiplied by lr_gamma when the step counter
  // reaches each milestone. Empty list = constant lr.
  double lr_gamma = 0.1;
  std::vector<int> lr_milestones;
  // Horizontal / vertical / transpose flips, one in four each, drawn from a
  // stream derived from the data seed.
  bool flip_augment = true;
};

struct ConvParams {
  Tensor w, b;
};

struct DetectorParams {
  Tensor type_embeddings;  // [2, dim]
  FusionParams fusion;
  std::vector<ConvParams> backbone;  // stride-2 3x3 convs down to the grid
  ConvParams cls1, cls2;
  ConvParams reg1, reg2;
  ConvParams ref1, ref2;
};

struct TrainExample {
  Tensor image;  // normalized [1,S,S]
  std::vector<OrientedBox> gts;
  std::vector<PointPrompt> prompts;
};

struct ForwardOut {
  Tensor logits;       // [cells], row-major grid order
  Tensor init_off;     // [8, side, side], corner offsets in stride units
  Tensor refined_off;  // [8, side, side]
  std::vector<SamplePoint> samples;
};

/// Momentum-SGD state, one velocity buffer per parameter (by registry order).
struct SgdState {
  double lr = 0.0025;
  double momentum = 0.9;
  std::vector<Tensor> velocity;
};

class Detector {
 public:
  Detector(const ModelConfig& cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  const FourierMap& fourier() const { return fm_; }
  DetectorParams& params() { return params_; }

  /// Stable-ordered (name, tensor) registry backing SGD and checkpoints.
  NamedParams named_params() const;

  ForwardOut forward(Graph& g, const Tensor& image,
                     const std::vector<PointPrompt>& prompts) const;

  /// One SGD step over the batch; throws NumericalError (with the offending
  /// term named) if any loss goes non-finite.
  LossBreakdown train_step(const std::vector<TrainExample>& batch, SgdState& opt);

  std::vector<Detection> predict(const Tensor& image,
                                 const std::vector<PointPrompt>& prompts,
                                 double score_thresh, double nms_iou) const;

  void save(const std::string& path) const;
  static Detector load(const std::string& path);

  uint64_t init_seed() const { return init_seed_; }

 private:
  ModelConfig cfg_;
  uint64_t init_seed_;
  FourierMap fm_;
  DetectorParams params_;
};

/// Descending-score greedy suppression at the given IoU.
std::vector<Detection> rotated_nms(std::vector<Detection> dets, double nms_iou);

SgdState make_sgd_state(const Detector& det, const TrainConfig& tc);

/// One example's full tape loss (classification + both head losses), plus
/// the detached term values. Used by train_step and the gradient checker.
struct ExampleLoss {
  Tensor total;
  double l_cls = 0.0;
  double l_d1 = 0.0;
  double l_d2 = 0.0;
};
ExampleLoss example_loss(Graph& g, const Detector& det, const TrainExample& ex);

}  // namespace p2det
