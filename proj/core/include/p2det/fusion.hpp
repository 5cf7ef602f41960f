#pragma once

#include <string>
#include <utility>
#include <vector>

#include "p2det/prompt_encoder.hpp"
#include "p2det/rng.hpp"
#include "p2det/tensor.hpp"

namespace p2det {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct FusionConfig {
  int dim = 64;
  int heads = 4;
  int patch = 8;
  int image_size = 64;
  int encoder_depth = 2;
  int twfm_depth = 2;
  int mlp_hidden = 128;
  // Eq. 4/5 style: when true the positional encodings are also summed into
  // the attention values, not just Q/K.
  bool pe_in_values = false;
  // Depthwise 3x3 conv on the image stream at the end of each two-way block.
  bool block_conv = true;

  int grid_cells() const { return (image_size / patch) * (image_size / patch); }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct AttentionParams {
  Tensor wq, bq;
  Tensor wk, bk;
  Tensor wv, bv;
  Tensor wo, bo;
};

struct MlpParams {
  Tensor w1, b1;
  Tensor w2, b2;
};

struct EncoderLayerParams {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  MlpParams mlp;
};

struct TwoWayBlockParams {
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_t2i;
  AttentionParams t2i;
  LayerNormParams ln_mlp;
  MlpParams mlp;
  LayerNormParams ln_i2t;
  AttentionParams i2t;
  LayerNormParams ln_conv;  // only used when block_conv
  Tensor conv_w, conv_b;    // depthwise 3x3
};

struct ImageEncoderParams {
  Tensor patch_w, patch_b;  // [dim,1,p,p] conv, stride p
  Tensor pos_embed;         // [cells, dim], learned
  std::vector<EncoderLayerParams> layers;
  Tensor neck_w, neck_b;  // per-token linear (1x1 conv)
};

struct FusionParams {
  ImageEncoderParams encoder;
  std::vector<TwoWayBlockParams> blocks;
};

/// Image stream after the encoder: one token per patch cell plus a fixed
/// Fourier positional encoding of the cell centers.
struct ImageEmbedding {
  Tensor tokens;  // [gh*gw, dim]
  Tensor pos;     // [gh*gw, dim], constant
  int gh = 0;
  int gw = 0;
  int patch = 0;
};

FusionParams make_fusion_params(const FusionConfig& cfg, SplitMix64& rng);
void collect_fusion_params(const FusionParams& p, const FusionConfig& cfg,
                           NamedParams& out);

/// Multi-head scaled dot-product attention with input/output projections.
/// q: [n,d], k/v: [m,d]; d must divide evenly into heads.
Tensor attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionParams& p, int heads);

ImageEmbedding encode_image(Graph& g, const Tensor& img, const FourierMap& fm,
                            const ImageEncoderParams& p, const FusionConfig& cfg);

/// One fusion block: token self-attention, token->image cross-attention,
/// token MLP, image->token cross-attention (plus optional depthwise conv on
/// the image stream). Positional encodings ride on Q/K only by default.
void two_way_block(Graph& g, Tensor& tokens, const Tensor& pe_q, Tensor& image,
                   const Tensor& pe_k, const TwoWayBlockParams& p,
                   const FusionConfig& cfg);

/// Full fusion: runs the block stack and bilinearly upsamples the image
/// stream back to pixel resolution. Returns [dim, gh*patch, gw*patch].
Tensor fuse(Graph& g, const Tensor& sparse, const ImageEmbedding& image,
            const FusionParams& p, const FusionConfig& cfg);

}  // namespace p2det
