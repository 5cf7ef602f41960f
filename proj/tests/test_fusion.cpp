#include "p2det/fusion.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "p2det/rng.hpp"

using namespace p2det;

namespace {

Tensor randn(std::vector<int> shape, SplitMix64& rng, double scale = 0.4,
             bool grad = false) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.gaussian() * scale;
  return Tensor::from_data(std::move(shape), std::move(data), grad);
}

AttentionParams random_attention(int dim, SplitMix64& rng) {
  AttentionParams p;
  p.wq = randn({dim, dim}, rng, 0.3, true);
  p.bq = Tensor::zeros({dim}, true);
  p.wk = randn({dim, dim}, rng, 0.3, true);
  p.bk = Tensor::zeros({dim}, true);
  p.wv = randn({dim, dim}, rng, 0.3, true);
  p.bv = Tensor::zeros({dim}, true);
  p.wo = randn({dim, dim}, rng, 0.3, true);
  p.bo = Tensor::zeros({dim}, true);
  return p;
}

Tensor eye(int n) {
  std::vector<double> d(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) d[static_cast<size_t>(i) * n + i] = 1.0;
  return Tensor::from_data({n, n}, std::move(d));
}

AttentionParams identity_attention(int dim) {
  AttentionParams p;
  p.wq = eye(dim);
  p.bq = Tensor::zeros({dim});
  p.wk = eye(dim);
  p.bk = Tensor::zeros({dim});
  p.wv = eye(dim);
  p.bv = Tensor::zeros({dim});
  p.wo = eye(dim);
  p.bo = Tensor::zeros({dim});
  return p;
}

}  // namespace

TEST_CASE("attention over a single key returns that value row") {
  const int dim = 4;
  SplitMix64 rng(21);
  Graph g;
  Tensor q = randn({3, dim}, rng);
  Tensor kv = randn({1, dim}, rng);
  Tensor out = attention(g, q, kv, kv, identity_attention(dim), 2);
  REQUIRE(out.shape() == std::vector<int>{3, dim});
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < dim; ++j)
      CHECK(out.at(r * dim + j) == doctest::Approx(kv.at(j)).epsilon(1e-12));
}

TEST_CASE("identical keys give the mean of the value rows") {
  const int dim = 4;
  SplitMix64 rng(22);
  Graph g;
  Tensor q = randn({2, dim}, rng);
  Tensor k = Tensor::full({2, dim}, 0.3);
  Tensor v = randn({2, dim}, rng);
  Tensor out = attention(g, q, k, v, identity_attention(dim), 1);
  for (int r = 0; r < 2; ++r)
    for (int j = 0; j < dim; ++j)
      CHECK(out.at(r * dim + j) ==
            doctest::Approx(0.5 * (v.at(j) + v.at(dim + j))).epsilon(1e-12));
}

TEST_CASE("attention outputs are convex combinations of the values") {
  const int dim = 6;
  SplitMix64 rng(23);
  Graph g;
  Tensor q = randn({5, dim}, rng);
  Tensor k = randn({7, dim}, rng);
  Tensor v = randn({7, dim}, rng);
  Tensor out = attention(g, q, k, v, identity_attention(dim), 1);
  for (int j = 0; j < dim; ++j) {
    double lo = 1e30, hi = -1e30;
    for (int r = 0; r < 7; ++r) {
      lo = std::min(lo, v.at(r * dim + j));
      hi = std::max(hi, v.at(r * dim + j));
    }
    for (int r = 0; r < 5; ++r) {
      CHECK(out.at(r * dim + j) >= lo - 1e-12);
      CHECK(out.at(r * dim + j) <= hi + 1e-12);
    }
  }
}

TEST_CASE("cross attention block passes the gradient check") {
  const int dim = 8;
  SplitMix64 rng(24);
  AttentionParams p = random_attention(dim, rng);
  Tensor k = randn({8, dim}, rng);
  Tensor v = randn({8, dim}, rng);
  const double err = grad_check(
      [&](Graph& g, const Tensor& q) {
        return attention(g, q, k, v, p, 2);
      },
      randn({8, dim}, rng, 0.4, true), 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("image encoder output grid shape") {
  FusionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 8;
  cfg.image_size = 64;
  cfg.encoder_depth = 1;
  cfg.twfm_depth = 1;
  cfg.mlp_hidden = 16;
  SplitMix64 rng(33);
  FusionParams params = make_fusion_params(cfg, rng);
  FourierMap fm(cfg.dim / 2, 1.0, 5);
  Graph g;
  ImageEmbedding emb = encode_image(g, Tensor::zeros({1, 64, 64}), fm,
                                    params.encoder, cfg);
  CHECK(emb.gh == 8);
  CHECK(emb.gw == 8);
  CHECK(emb.tokens.shape() == std::vector<int>{64, cfg.dim});
  CHECK(emb.pos.shape() == std::vector<int>{64, cfg.dim});
}

TEST_CASE("two-way block with zero inputs and zero params is a no-op") {
  FusionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 8;
  cfg.image_size = 32;
  cfg.mlp_hidden = 16;
  SplitMix64 rng(44);
  FusionParams params = make_fusion_params(cfg, rng);
  TwoWayBlockParams blk = params.blocks.empty()
                              ? TwoWayBlockParams{}
                              : params.blocks[0];
  // Zero every parameter tensor, keeping layernorm gains at zero as well so
  // each sub-layer output (residual delta) is exactly zero.
  for (Tensor* t : {&blk.self_attn.wq, &blk.self_attn.bq, &blk.self_attn.wk,
                    &blk.self_attn.bk, &blk.self_attn.wv, &blk.self_attn.bv,
                    &blk.self_attn.wo, &blk.self_attn.bo, &blk.t2i.wq,
                    &blk.t2i.bq, &blk.t2i.wk, &blk.t2i.bk, &blk.t2i.wv,
                    &blk.t2i.bv, &blk.t2i.wo, &blk.t2i.bo, &blk.i2t.wq,
                    &blk.i2t.bq, &blk.i2t.wk, &blk.i2t.bk, &blk.i2t.wv,
                    &blk.i2t.bv, &blk.i2t.wo, &blk.i2t.bo, &blk.mlp.w1,
                    &blk.mlp.b1, &blk.mlp.w2, &blk.mlp.b2, &blk.ln_self.gain,
                    &blk.ln_self.bias, &blk.ln_t2i.gain, &blk.ln_t2i.bias,
                    &blk.ln_mlp.gain, &blk.ln_mlp.bias, &blk.ln_i2t.gain,
                    &blk.ln_i2t.bias, &blk.ln_conv.gain, &blk.ln_conv.bias,
                    &blk.conv_w, &blk.conv_b}) {
    if (t->defined()) *t = Tensor::zeros(t->shape());
  }
  Graph g;
  Tensor tokens = Tensor::zeros({4, cfg.dim});
  Tensor image = Tensor::zeros({16, cfg.dim});
  Tensor pe_q = Tensor::zeros({4, cfg.dim});
  Tensor pe_k = Tensor::zeros({16, cfg.dim});
  two_way_block(g, tokens, pe_q, image, pe_k, blk, cfg);
  for (int64_t i = 0; i < tokens.size(); ++i) CHECK(tokens.at(i) == 0.0);
  for (int64_t i = 0; i < image.size(); ++i) CHECK(image.at(i) == 0.0);
}

TEST_CASE("swapping two tokens swaps their outputs and fixes the image") {
  FusionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image_size = 16;
  cfg.mlp_hidden = 16;
  cfg.twfm_depth = 1;
  SplitMix64 rng(55);
  FusionParams params = make_fusion_params(cfg, rng);

  SplitMix64 data_rng(66);
  Tensor tokens = randn({4, cfg.dim}, data_rng);
  Tensor image = randn({16, cfg.dim}, data_rng);
  Tensor pe_k = randn({16, cfg.dim}, data_rng);
  Tensor pe_q = Tensor::zeros({4, cfg.dim});  // shared PE keeps slots symmetric

  auto run = [&](const Tensor& toks) {
    Graph g;
    Tensor t = toks, im = image;
    two_way_block(g, t, pe_q, im, pe_k, params.blocks[0], cfg);
    return std::pair<Tensor, Tensor>{t, im};
  };

  auto [t_base, im_base] = run(tokens);

  std::vector<double> swapped(tokens.data().begin(), tokens.data().end());
  for (int j = 0; j < cfg.dim; ++j)
    std::swap(swapped[static_cast<size_t>(j)], swapped[static_cast<size_t>(cfg.dim + j)]);
  auto [t_swap, im_swap] = run(Tensor::from_data({4, cfg.dim}, std::move(swapped)));

  for (int j = 0; j < cfg.dim; ++j) {
    CHECK(t_swap.at(j) == doctest::Approx(t_base.at(cfg.dim + j)).epsilon(1e-9));
    CHECK(t_swap.at(cfg.dim + j) == doctest::Approx(t_base.at(j)).epsilon(1e-9));
  }
  for (int64_t i = 0; i < im_base.size(); ++i)
    CHECK(im_swap.at(i) == doctest::Approx(im_base.at(i)).epsilon(1e-9));
}

TEST_CASE("two-way block gradient check") {
  FusionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 4;
  cfg.image_size = 16;
  cfg.mlp_hidden = 12;
  cfg.twfm_depth = 1;
  SplitMix64 rng(77);
  FusionParams params = make_fusion_params(cfg, rng);
  SplitMix64 data_rng(88);
  Tensor image = randn({16, cfg.dim}, data_rng);
  Tensor pe_q = randn({4, cfg.dim}, data_rng);
  Tensor pe_k = randn({16, cfg.dim}, data_rng);

  const double err = grad_check(
      [&](Graph& g, const Tensor& toks) {
        Tensor t = toks, im = image;
        two_way_block(g, t, pe_q, im, pe_k, params.blocks[0], cfg);
        Graph* gp = &g;
        return gp->add(gp->sum(t), gp->sum(im));
      },
      randn({4, cfg.dim}, data_rng, 0.4, true), 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("two-layer encoder gradient check on a 16x16 input") {
  FusionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 8;
  cfg.image_size = 16;
  cfg.encoder_depth = 2;
  cfg.twfm_depth = 0;
  cfg.mlp_hidden = 12;
  SplitMix64 rng(99);
  FusionParams params = make_fusion_params(cfg, rng);
  FourierMap fm(cfg.dim / 2, 1.0, 5);
  SplitMix64 data_rng(111);

  const double err = grad_check(
      [&](Graph& g, const Tensor& img) {
        ImageEmbedding emb = encode_image(g, img, fm, params.encoder, cfg);
        return g.sum(emb.tokens);
      },
      randn({1, 16, 16}, data_rng, 0.5, true), 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("fusion with depth zero is the upsampled encoder stream") {
  FusionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.patch = 8;
  cfg.image_size = 32;
  cfg.encoder_depth = 1;
  cfg.twfm_depth = 0;
  cfg.mlp_hidden = 16;
  SplitMix64 rng(123);
  FusionParams params = make_fusion_params(cfg, rng);
  FourierMap fm(cfg.dim / 2, 1.0, 5);
  SplitMix64 data_rng(321);
  Tensor img = randn({1, 32, 32}, data_rng);

  Graph g;
  ImageEmbedding emb = encode_image(g, img, fm, params.encoder, cfg);
  Tensor sparse = Tensor::zeros({2, cfg.dim});
  Tensor fused = fuse(g, sparse, emb, params, cfg);
  REQUIRE(fused.shape() == std::vector<int>{cfg.dim, 32, 32});

  // Depth 0 leaves the token grid untouched: the fused map is exactly the
  // bilinear upsample of the encoder tokens.
  Tensor grid = g.reshape(g.transpose(emb.tokens), {cfg.dim, emb.gh, emb.gw});
  Tensor up = g.bilinear_upsample(grid, 32, 32);
  for (int64_t i = 0; i < fused.size(); ++i)
    CHECK(fused.at(i) == doctest::Approx(up.at(i)).epsilon(1e-12));
}
