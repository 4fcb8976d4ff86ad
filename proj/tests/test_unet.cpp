#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "iedp/gradcheck_suites.hpp"
#include "iedp/unet.hpp"

using namespace iedp;

namespace {
using T = Tensor<float>;

UNetConfig small_cfg() {
  UNetConfig cfg;
  cfg.latent_channels = 4;
  cfg.channels = {8, 12, 16, 20};
  cfg.d_cond = 8;
  cfg.cond_tokens = 7;
  cfg.time_dim = 8;
  cfg.time_embed = 8;
  return cfg;
}

PromptEmbeddings<float> rand_cond(const UNetConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  PromptEmbeddings<float> p;
  p.vectors = T::uniform({cfg.cond_tokens, cfg.d_cond}, rng, -1, 1);
  return p;
}
}  // namespace

TEST_CASE("stride ladder: F1..F4 at exactly /8 /16 /32 /64 of the image") {
  UNetConfig cfg = small_cfg();
  ParamStore<float> ps(1);
  CondUNet<float> unet(ps, "unet", cfg);
  Rng rng(2);

  for (Index hw : {Index(64), Index(128)}) {
    auto z0 = T::uniform({cfg.latent_channels, hw / 8, hw / 8}, rng, -1, 1);
    auto fb = unet.forward(z0, rand_cond(cfg, 3), 0);
    CHECK(fb.f1.shape() == Shape{cfg.channels[0], hw / 8, hw / 8});
    CHECK(fb.f2.shape() == Shape{cfg.channels[1], hw / 16, hw / 16});
    CHECK(fb.f3.shape() == Shape{cfg.channels[2], hw / 32, hw / 32});
    CHECK(fb.f4.shape() == Shape{cfg.channels[3], hw / 64, hw / 64});
    CHECK(fb.f_ca.shape() == Shape{cfg.cond_tokens, hw / 8, hw / 8});
  }

  // non-square multiple-of-64 input
  auto z0 = T::uniform({cfg.latent_channels, 16, 8}, rng, -1, 1);
  auto fb = unet.forward(z0, rand_cond(cfg, 4), 0);
  CHECK(fb.f1.shape() == Shape{cfg.channels[0], 16, 8});
  CHECK(fb.f4.shape() == Shape{cfg.channels[3], 2, 1});
}

TEST_CASE("F_CA token channels sum to one at every pixel") {
  UNetConfig cfg = small_cfg();
  ParamStore<float> ps(5);
  CondUNet<float> unet(ps, "unet", cfg);
  Rng rng(6);
  auto z0 = T::uniform({cfg.latent_channels, 8, 8}, rng, -1, 1);
  auto fb = unet.forward(z0, rand_cond(cfg, 7), 0);
  Index plane = 64;
  for (Index p = 0; p < plane; ++p) {
    float sum = 0;
    for (Index k = 0; k < cfg.cond_tokens; ++k) sum += fb.f_ca.array()[k * plane + p];
    CHECK(std::abs(sum - 1.f) < 1e-4f);
    for (Index k = 0; k < cfg.cond_tokens; ++k) {
      CHECK(fb.f_ca.array()[k * plane + p] >= 0.f);
      CHECK(fb.f_ca.array()[k * plane + p] <= 1.f);
    }
  }
}

TEST_CASE("per-block cross-attention rows sum to one before averaging") {
  ParamStore<float> ps(9);
  CrossAttnBlock<float> blk(ps, "ca", 6, 8);
  Rng rng(10);
  auto x = T::uniform({6, 4, 4}, rng, -1, 1);
  auto cond = T::uniform({5, 8}, rng, -1, 1);
  std::vector<CapturedAttention<float>> caps;
  blk(x, cond, caps);
  REQUIRE(caps.size() == 1);
  REQUIRE(caps[0].weights.shape() == Shape{16, 5});
  for (Index r = 0; r < 16; ++r) {
    float sum = 0;
    for (Index c = 0; c < 5; ++c) sum += caps[0].weights.array()[r * 5 + c];
    CHECK(std::abs(sum - 1.f) < 1e-6f);
  }
}

TEST_CASE("conditioning is live: changing the prompt changes F1") {
  UNetConfig cfg = small_cfg();
  ParamStore<float> ps(11);
  CondUNet<float> unet(ps, "unet", cfg);
  Rng rng(12);
  auto z0 = T::uniform({cfg.latent_channels, 8, 8}, rng, -1, 1);
  auto fa = unet.forward(z0, rand_cond(cfg, 13), 0);
  auto fc = unet.forward(z0, rand_cond(cfg, 14), 0);
  double diff = 0;
  for (Index i = 0; i < fa.f1.numel(); ++i)
    diff += std::abs(fa.f1.array()[i] - fc.f1.array()[i]);
  CHECK(diff > 0);
}

TEST_CASE("identical inputs give a bit-identical bundle") {
  UNetConfig cfg = small_cfg();
  ParamStore<float> ps(15);
  CondUNet<float> unet(ps, "unet", cfg);
  Rng rng(16);
  auto z0 = T::uniform({cfg.latent_channels, 8, 8}, rng, -1, 1);
  auto cond = rand_cond(cfg, 17);
  auto a = unet.forward(z0, cond, 0);
  auto b = unet.forward(z0, cond, 0);
  for (Index i = 0; i < a.f1.numel(); ++i) CHECK(a.f1.array()[i] == b.f1.array()[i]);
  for (Index i = 0; i < a.f4.numel(); ++i) CHECK(a.f4.array()[i] == b.f4.array()[i]);
  for (Index i = 0; i < a.f_ca.numel(); ++i) CHECK(a.f_ca.array()[i] == b.f_ca.array()[i]);
}

TEST_CASE("timestep other than zero is rejected; cond count is checked") {
  UNetConfig cfg = small_cfg();
  ParamStore<float> ps(19);
  CondUNet<float> unet(ps, "unet", cfg);
  Rng rng(20);
  auto z0 = T::uniform({cfg.latent_channels, 8, 8}, rng, -1, 1);
  CHECK_THROWS_WITH_AS(unet.forward(z0, rand_cond(cfg, 21), 5),
                       doctest::Contains("unsupported timestep"), Error);

  PromptEmbeddings<float> bad;
  bad.vectors = T::zeros({cfg.cond_tokens + 1, cfg.d_cond});
  CHECK_THROWS_AS(unet.forward(z0, bad, 0), ShapeError);
}

TEST_CASE("count_cross_attention_blocks and the both-halves invariant") {
  UNetConfig cfg;  // defaults
  auto [n_enc, n_dec] = count_cross_attention_blocks(cfg);
  CHECK(n_enc == 2);
  CHECK(n_dec == 2);

  UNetConfig bad = cfg;
  bad.encoder_cross_attn = {false, false, false, false};  // decoder-only
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("miniature unet gradcheck suite passes") {
  for (const auto& e : gradcheck_unet_suite()) {
    CHECK(e.report.pass);
    CHECK(e.report.worst() < 1e-4);
  }
}
