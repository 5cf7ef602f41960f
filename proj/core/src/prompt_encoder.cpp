#include "p2det/prompt_encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "p2det/rng.hpp"

namespace p2det {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

FourierMap::FourierMap(int m, double sigma, uint64_t seed)
    : m_(m), sigma_(sigma), seed_(seed) {
  if (m <= 0) throw std::invalid_argument("fourier map needs m > 0");
  if (!(sigma > 0.0)) throw std::invalid_argument("fourier map needs sigma > 0");
  SplitMix64 rng(seed);
  b_.resize(static_cast<size_t>(m) * 2);
  for (double& v : b_) v = rng.gaussian() * sigma;
  a_.assign(static_cast<size_t>(m), 1.0);
}

std::pair<double, double> normalize_point(const PointPrompt& p, int image_size) {
  if (p.label == PromptLabel::Padding) {
    throw std::invalid_argument("padding prompt has no coordinates");
  }
  if (!(p.x >= 0.0 && p.x < image_size && p.y >= 0.0 && p.y < image_size)) {
    throw std::invalid_argument("prompt point outside image bounds");
  }
  const double u = 2.0 * (p.x + 0.5) / image_size - 1.0;
  const double v = 2.0 * (p.y + 0.5) / image_size - 1.0;
  return {u, v};
}

std::vector<double> fourier_map(double u, double v, const FourierMap& fm) {
  if (!std::isfinite(u) || !std::isfinite(v)) {
    throw std::invalid_argument("non-finite coords in fourier_map");
  }
  const auto& b = fm.frequencies();
  const auto& a = fm.amplitudes();
  std::vector<double> out(static_cast<size_t>(fm.dim()));
  for (int i = 0; i < fm.m(); ++i) {
    const double phase = kTwoPi * (b[2 * i] * u + b[2 * i + 1] * v);
    out[2 * i] = a[i] * std::cos(phase);
    out[2 * i + 1] = a[i] * std::sin(phase);
  }
  return out;
}

Tensor encode_prompts(Graph& g, const std::vector<PointPrompt>& prompts,
                      const FourierMap& fm, const Tensor& type_embeddings,
                      int num_prompts, int image_size) {
  const int d = fm.dim();
  if (type_embeddings.rank() != 2 || type_embeddings.dim(0) != 2 ||
      type_embeddings.dim(1) != d) {
    throw std::invalid_argument("type embedding table must be 2 x fourier dim");
  }
  if (static_cast<int>(prompts.size()) > num_prompts) {
    throw std::invalid_argument("more prompts than encoder slots");
  }

  std::vector<double> gamma(static_cast<size_t>(num_prompts) * d, 0.0);
  std::vector<int> rows(static_cast<size_t>(num_prompts), 1);  // Padding row
  for (size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].label == PromptLabel::Padding) continue;  // keep zero gamma
    auto [u, v] = normalize_point(prompts[i], image_size);
    const std::vector<double> feat = fourier_map(u, v, fm);
    std::copy(feat.begin(), feat.end(), gamma.begin() + static_cast<long>(i) * d);
    rows[i] = 0;
  }

  Tensor gamma_t = Tensor::from_data({num_prompts, d}, gamma);
  Tensor types = g.gather_rows(type_embeddings, rows);
  return g.add(gamma_t, types);
}

}  // namespace p2det
