#include "p2det/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace p2det {

namespace {

Tensor gaussian_param(SplitMix64& rng, std::vector<int> shape, double stddev) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.gaussian() * stddev;
  return Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

Tensor linear_w(SplitMix64& rng, int in, int out) {
  return gaussian_param(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
}

Tensor zero_param(std::vector<int> shape) {
  return Tensor::zeros(std::move(shape), /*requires_grad=*/true);
}

LayerNormParams make_ln(int d) {
  return {Tensor::full({d}, 1.0, true), zero_param({d})};
}

AttentionParams make_attn(SplitMix64& rng, int d) {
  AttentionParams p;
  p.wq = linear_w(rng, d, d);
  p.bq = zero_param({d});
  p.wk = linear_w(rng, d, d);
  p.bk = zero_param({d});
  p.wv = linear_w(rng, d, d);
  p.bv = zero_param({d});
  p.wo = linear_w(rng, d, d);
  p.bo = zero_param({d});
  return p;
}

MlpParams make_mlp(SplitMix64& rng, int d, int hidden) {
  MlpParams p;
  p.w1 = linear_w(rng, d, hidden);
  p.b1 = zero_param({hidden});
  p.w2 = linear_w(rng, hidden, d);
  p.b2 = zero_param({d});
  return p;
}

Tensor linear(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b) {
  return g.add_rowwise(g.matmul(x, w), b);
}

Tensor mlp(Graph& g, const Tensor& x, const MlpParams& p) {
  return linear(g, g.gelu(linear(g, x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor ln(Graph& g, const Tensor& x, const LayerNormParams& p) {
  return g.layernorm(x, p.gain, p.bias);
}

void collect_ln(const std::string& prefix, const LayerNormParams& p, NamedParams& out) {
  out.emplace_back(prefix + ".gain", p.gain);
  out.emplace_back(prefix + ".bias", p.bias);
}

void collect_attn(const std::string& prefix, const AttentionParams& p, NamedParams& out) {
  out.emplace_back(prefix + ".wq", p.wq);
  out.emplace_back(prefix + ".bq", p.bq);
  out.emplace_back(prefix + ".wk", p.wk);
  out.emplace_back(prefix + ".bk", p.bk);
  out.emplace_back(prefix + ".wv", p.wv);
  out.emplace_back(prefix + ".bv", p.bv);
  out.emplace_back(prefix + ".wo", p.wo);
  out.emplace_back(prefix + ".bo", p.bo);
}

void collect_mlp(const std::string& prefix, const MlpParams& p, NamedParams& out) {
  out.emplace_back(prefix + ".w1", p.w1);
  out.emplace_back(prefix + ".b1", p.b1);
  out.emplace_back(prefix + ".w2", p.w2);
  out.emplace_back(prefix + ".b2", p.b2);
}

// Depthwise 3x3 on the image stream; tokens come in as [cells, d].
Tensor token_conv(Graph& g, const Tensor& tokens, const Tensor& w, const Tensor& b,
                  int gh, int gw) {
  const int d = tokens.dim(1);
  Tensor grid = g.reshape(g.transpose(tokens), {d, gh, gw});
  Tensor conv = g.depthwise_conv2d(grid, w, b, /*pad=*/1);
  return g.transpose(g.reshape(conv, {d, gh * gw}));
}

}  // namespace

FusionParams make_fusion_params(const FusionConfig& cfg, SplitMix64& rng) {
  if (cfg.dim % cfg.heads != 0) {
    throw std::invalid_argument("fusion dim must be divisible by heads");
  }
  FusionParams p;
  const int d = cfg.dim;
  p.encoder.patch_w =
      gaussian_param(rng, {d, 1, cfg.patch, cfg.patch},
                     1.0 / static_cast<double>(cfg.patch));
  p.encoder.patch_b = zero_param({d});
  // One grid size per run, so the learned positional table is allocated for
  // it at construction.
  p.encoder.pos_embed = gaussian_param(rng, {cfg.grid_cells(), d}, 0.02);
  for (int i = 0; i < cfg.encoder_depth; ++i) {
    EncoderLayerParams layer;
    layer.ln1 = make_ln(d);
    layer.attn = make_attn(rng, d);
    layer.ln2 = make_ln(d);
    layer.mlp = make_mlp(rng, d, cfg.mlp_hidden);
    p.encoder.layers.push_back(std::move(layer));
  }
  p.encoder.neck_w = linear_w(rng, d, d);
  p.encoder.neck_b = zero_param({d});

  for (int i = 0; i < cfg.twfm_depth; ++i) {
    TwoWayBlockParams b;
    b.ln_self = make_ln(d);
    b.self_attn = make_attn(rng, d);
    b.ln_t2i = make_ln(d);
    b.t2i = make_attn(rng, d);
    b.ln_mlp = make_ln(d);
    b.mlp = make_mlp(rng, d, cfg.mlp_hidden);
    b.ln_i2t = make_ln(d);
    b.i2t = make_attn(rng, d);
    b.ln_conv = make_ln(d);
    b.conv_w = gaussian_param(rng, {d, 3, 3}, 1.0 / 3.0);
    b.conv_b = zero_param({d});
    p.blocks.push_back(std::move(b));
  }
  return p;
}

void collect_fusion_params(const FusionParams& p, const FusionConfig& cfg,
                           NamedParams& out) {
  out.emplace_back("fusion.encoder.patch.w", p.encoder.patch_w);
  out.emplace_back("fusion.encoder.patch.b", p.encoder.patch_b);
  out.emplace_back("fusion.encoder.pos_embed", p.encoder.pos_embed);
  for (size_t i = 0; i < p.encoder.layers.size(); ++i) {
    const std::string pre = "fusion.encoder.layer" + std::to_string(i);
    collect_ln(pre + ".ln1", p.encoder.layers[i].ln1, out);
    collect_attn(pre + ".attn", p.encoder.layers[i].attn, out);
    collect_ln(pre + ".ln2", p.encoder.layers[i].ln2, out);
    collect_mlp(pre + ".mlp", p.encoder.layers[i].mlp, out);
  }
  out.emplace_back("fusion.encoder.neck.w", p.encoder.neck_w);
  out.emplace_back("fusion.encoder.neck.b", p.encoder.neck_b);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string pre = "fusion.block" + std::to_string(i);
    collect_ln(pre + ".ln_self", p.blocks[i].ln_self, out);
    collect_attn(pre + ".self_attn", p.blocks[i].self_attn, out);
    collect_ln(pre + ".ln_t2i", p.blocks[i].ln_t2i, out);
    collect_attn(pre + ".t2i", p.blocks[i].t2i, out);
    collect_ln(pre + ".ln_mlp", p.blocks[i].ln_mlp, out);
    collect_mlp(pre + ".mlp", p.blocks[i].mlp, out);
    collect_ln(pre + ".ln_i2t", p.blocks[i].ln_i2t, out);
    collect_attn(pre + ".i2t", p.blocks[i].i2t, out);
    if (cfg.block_conv) {
      collect_ln(pre + ".ln_conv", p.blocks[i].ln_conv, out);
      out.emplace_back(pre + ".conv.w", p.blocks[i].conv_w);
      out.emplace_back(pre + ".conv.b", p.blocks[i].conv_b);
    }
  }
}

Tensor attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionParams& p, int heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument("attention expects 2-d inputs");
  }
  const int d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || k.dim(0) != v.dim(0)) {
    throw std::invalid_argument("attention width/row mismatch");
  }
  if (d % heads != 0) throw std::invalid_argument("attention dim not divisible by heads");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor Q = linear(g, q, p.wq, p.bq);
  Tensor K = linear(g, k, p.wk, p.bk);
  Tensor V = linear(g, v, p.wv, p.bv);

  std::vector<Tensor> head_out;
  head_out.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor Qh = g.slice_cols(Q, h * dh, dh);
    Tensor Kh = g.slice_cols(K, h * dh, dh);
    Tensor Vh = g.slice_cols(V, h * dh, dh);
    Tensor scores = g.scale(g.matmul(Qh, g.transpose(Kh)), inv_sqrt);
    head_out.push_back(g.matmul(g.softmax(scores), Vh));
  }
  Tensor merged = heads == 1 ? head_out[0] : g.concat_cols(head_out);
  return linear(g, merged, p.wo, p.bo);
}

ImageEmbedding encode_image(Graph& g, const Tensor& img, const FourierMap& fm,
                            const ImageEncoderParams& p, const FusionConfig& cfg) {
  if (img.rank() != 3 || img.dim(0) != 1) {
    throw std::invalid_argument("encode_image expects a [1,H,W] tensor");
  }
  const int H = img.dim(1);
  const int W = img.dim(2);
  if (H % cfg.patch != 0 || W % cfg.patch != 0) {
    throw std::invalid_argument("image dims must be divisible by patch size");
  }
  const int gh = H / cfg.patch;
  const int gw = W / cfg.patch;
  const int cells = gh * gw;
  const int d = cfg.dim;
  if (fm.dim() != d) throw std::invalid_argument("fourier dim != fusion dim");
  if (p.pos_embed.dim(0) != cells) {
    throw std::invalid_argument("learned positional table sized for a different grid");
  }

  Tensor grid = g.conv2d(img, p.patch_w, p.patch_b, /*stride=*/cfg.patch, /*pad=*/0);
  Tensor x = g.add(g.transpose(g.reshape(grid, {d, cells})), p.pos_embed);
  for (const EncoderLayerParams& layer : p.layers) {
    Tensor y = ln(g, x, layer.ln1);
    x = g.add(x, attention(g, y, y, y, layer.attn, cfg.heads));
    x = g.add(x, mlp(g, ln(g, x, layer.ln2), layer.mlp));
  }
  x = linear(g, x, p.neck_w, p.neck_b);

  // Fixed positional encoding: the same Fourier featurization the prompts
  // use, applied to patch-center coordinates.
  std::vector<double> pe(static_cast<size_t>(cells) * d);
  for (int i = 0; i < gh; ++i) {
    for (int j = 0; j < gw; ++j) {
      const double cy = (i + 0.5) * cfg.patch;  // pixel-space patch center + 0.5
      const double cx = (j + 0.5) * cfg.patch;
      const double u = 2.0 * cx / W - 1.0;
      const double v = 2.0 * cy / H - 1.0;
      const std::vector<double> feat = fourier_map(u, v, fm);
      std::copy(feat.begin(), feat.end(),
                pe.begin() + (static_cast<long>(i) * gw + j) * d);
    }
  }

  ImageEmbedding out;
  out.tokens = x;
  out.pos = Tensor::from_data({cells, d}, std::move(pe));
  out.gh = gh;
  out.gw = gw;
  out.patch = cfg.patch;
  return out;
}

void two_way_block(Graph& g, Tensor& tokens, const Tensor& pe_q, Tensor& image,
                   const Tensor& pe_k, const TwoWayBlockParams& p,
                   const FusionConfig& cfg) {
  if (tokens.dim(1) != image.dim(1)) {
    throw std::invalid_argument("two_way_block stream width mismatch");
  }
  auto with_pe = [&](const Tensor& x, const Tensor& pe) { return g.add(x, pe); };
  auto values = [&](const Tensor& x, const Tensor& pe) {
    return cfg.pe_in_values ? g.add(x, pe) : x;
  };

  // Token self-attention.
  {
    Tensor y = ln(g, tokens, p.ln_self);
    tokens = g.add(tokens, attention(g, with_pe(y, pe_q), with_pe(y, pe_q),
                                     values(y, pe_q), p.self_attn, cfg.heads));
  }
  // Tokens attend to the image.
  {
    Tensor y = ln(g, tokens, p.ln_t2i);
    tokens = g.add(tokens, attention(g, with_pe(y, pe_q), with_pe(image, pe_k),
                                     values(image, pe_k), p.t2i, cfg.heads));
  }
  tokens = g.add(tokens, mlp(g, ln(g, tokens, p.ln_mlp), p.mlp));
  // Image attends back to the tokens.
  {
    Tensor y = ln(g, image, p.ln_i2t);
    image = g.add(image, attention(g, with_pe(y, pe_k), with_pe(tokens, pe_q),
                                   values(tokens, pe_q), p.i2t, cfg.heads));
  }
}

Tensor fuse(Graph& g, const Tensor& sparse, const ImageEmbedding& image,
            const FusionParams& p, const FusionConfig& cfg) {
  Tensor tokens = sparse;
  Tensor img = image.tokens;
  const Tensor pe_q = sparse;  // the original sparse embedding re-added each block
  for (const TwoWayBlockParams& block : p.blocks) {
    two_way_block(g, tokens, pe_q, img, image.pos, block, cfg);
    if (cfg.block_conv) {
      Tensor y = ln(g, img, block.ln_conv);
      img = g.add(img, token_conv(g, y, block.conv_w, block.conv_b, image.gh, image.gw));
    }
  }
  const int d = img.dim(1);
  Tensor grid = g.reshape(g.transpose(img), {d, image.gh, image.gw});
  return g.bilinear_upsample(grid, image.gh * image.patch, image.gw * image.patch);
}

}  // namespace p2det
