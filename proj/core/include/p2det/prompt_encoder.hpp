#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "p2det/tensor.hpp"

namespace p2det {

enum class PromptLabel { TowerBase, Padding };

struct PointPrompt {
  double x = 0.0;
  double y = 0.0;
  PromptLabel label = PromptLabel::TowerBase;
};

/// Random Fourier feature map: frozen Gaussian frequencies, deterministic
/// under the seed. Output dim is 2m (interleaved cos/sin pairs).
class FourierMap {
 public:
  FourierMap(int m, double sigma, uint64_t seed);

  int m() const { return m_; }
  int dim() const { return 2 * m_; }
  double sigma() const { return sigma_; }
  uint64_t seed() const { return seed_; }
  // Row-major m x 2 frequency matrix; not a trainable parameter.
  const std::vector<double>& frequencies() const { return b_; }
  const std::vector<double>& amplitudes() const { return a_; }

 private:
  int m_;
  double sigma_;
  uint64_t seed_;
  std::vector<double> b_;
  std::vector<double> a_;
};

/// Pixel-center normalization into [-1, 1]: u = 2*(x + 0.5)/W - 1.
std::pair<double, double> normalize_point(const PointPrompt& p, int image_size);

/// gamma(v) = [a1*cos(2pi b1.v), a1*sin(2pi b1.v), ...], length 2m.
std::vector<double> fourier_map(double u, double v, const FourierMap& fm);

/// One token per prompt: gamma(normalized coords) + type embedding, padded
/// to num_prompts slots with the Padding embedding alone. type_embeddings is
/// a trainable [2 x dim] tensor (row 0 = TowerBase, row 1 = Padding); the
/// Fourier part enters the graph as a constant, so gradients reach only the
/// embeddings.
Tensor encode_prompts(Graph& g, const std::vector<PointPrompt>& prompts,
                      const FourierMap& fm, const Tensor& type_embeddings,
                      int num_prompts, int image_size);

}  // namespace p2det
