#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "iedp/gradcheck_suites.hpp"
#include "iedp/heads.hpp"

using namespace iedp;

namespace {
using T = Tensor<double>;

T rnd(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  return T::uniform(std::move(s), rng, lo, hi);
}

FeatureBundle<double> rand_bundle(const UNetConfig& cfg, Index h8, Index w8,
                                  std::uint64_t seed) {
  Rng rng(seed);
  FeatureBundle<double> fb;
  fb.f1 = T::uniform({cfg.channels[0], h8, w8}, rng, -1, 1);
  fb.f2 = T::uniform({cfg.channels[1], h8 / 2, w8 / 2}, rng, -1, 1);
  fb.f3 = T::uniform({cfg.channels[2], h8 / 4, w8 / 4}, rng, -1, 1);
  fb.f4 = T::uniform({cfg.channels[3], h8 / 8, w8 / 8}, rng, -1, 1);
  fb.f_ca = T::uniform({cfg.cond_tokens, h8, w8}, rng, 0.0, 1.0);
  return fb;
}
}  // namespace

TEST_CASE("seg head: full-resolution logits, uniform under zero classifier") {
  UNetConfig cfg = miniature_unet_config();
  ParamStore<double> ps(1);
  FpnHead<double> head(ps, "head", cfg, 8, 6);
  auto fb = rand_bundle(cfg, 8, 8, 2);
  auto logits = seg_decode(head, fb, 64, 64);
  REQUIRE(logits.shape() == Shape{6, 64, 64});
  CHECK(logits.array().allFinite());

  ps.find("head.pred.k")->value.array().setZero();
  ps.find("head.pred.b")->value.array().setZero();
  auto z = seg_decode(head, fb, 64, 64);
  auto probs = softmax(z, 0);
  for (Index i = 0; i < probs.numel(); ++i)
    CHECK(probs.array()[i] == doctest::Approx(1.0 / 6).epsilon(1e-9));
}

TEST_CASE("depth head: strict positivity for random weights") {
  UNetConfig cfg = miniature_unet_config();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ParamStore<double> ps(100 + seed);
    FpnHead<double> head(ps, "head", cfg, 8, 1);
    auto fb = rand_bundle(cfg, 8, 8, 10 + seed);
    auto depth = depth_decode(head, fb, 64, 64);
    REQUIRE(depth.shape() == Shape{1, 64, 64});
    for (Index i = 0; i < depth.numel(); ++i) CHECK(depth.array()[i] > 0.0);
  }
}

TEST_CASE("cross-entropy: limit, closed form, and summation oracle") {
  // forcing the correct class drives the loss to zero
  auto big = T::zeros({2, 1, 1});
  big.array()[0] = 60.0;
  IntImage t11(1, 1, 0);
  CHECK(cross_entropy_spatial(big, t11, kIgnoreLabel).item() < 1e-9);

  // uniform logits over C classes give ln C
  IntImage t(4, 4, 2);
  CHECK(cross_entropy_spatial(T::zeros({5, 4, 4}), t, kIgnoreLabel).item() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // random 3-class 4x4 case against a per-pixel hand-summed oracle
  auto logits = rnd({3, 4, 4}, 3);
  IntImage target(4, 4);
  Rng rng(4);
  for (Index p = 0; p < 16; ++p)
    target.v[static_cast<std::size_t>(p)] =
        p == 7 ? kIgnoreLabel : static_cast<std::int32_t>(rng.below(3));
  double ref = 0;
  int n = 0;
  for (Index p = 0; p < 16; ++p) {
    std::int32_t tv = target.v[static_cast<std::size_t>(p)];
    if (tv == kIgnoreLabel) continue;
    double denom = 0;
    for (Index c = 0; c < 3; ++c) denom += std::exp(logits.array()[c * 16 + p]);
    ref += std::log(denom) - logits.array()[tv * 16 + p];
    ++n;
  }
  ref /= n;
  CHECK(std::abs(cross_entropy_spatial(logits, target, kIgnoreLabel).item() - ref) < 1e-10);
}

TEST_CASE("cross-entropy: all pixels ignored gives zero with a warning") {
  IntImage t(2, 2, kIgnoreLabel);
  int warns = 0;
  auto l = cross_entropy_spatial(T::zeros({3, 2, 2}), t, kIgnoreLabel, &warns);
  CHECK(l.item() == 0.0);
  CHECK(warns == 1);
}

TEST_CASE("ignore-label pixels contribute exactly zero gradient") {
  auto logits = rnd({3, 2, 2}, 5).set_requires_grad(true);
  IntImage target(2, 2, 1);
  target.v[3] = kIgnoreLabel;
  auto base = cross_entropy_spatial(logits, target, kIgnoreLabel);
  backward(base);
  for (Index c = 0; c < 3; ++c) CHECK(logits.grad()[c * 4 + 3] == 0.0);

  // perturbing the ignored pixel's logits leaves the loss bit-identical
  auto logits2 = logits.detach();
  for (Index c = 0; c < 3; ++c) logits2.array()[c * 4 + 3] += 7.25;
  CHECK(cross_entropy_spatial(logits2, target, kIgnoreLabel).item() == base.item());
}

TEST_CASE("scale-invariant loss: trivial and derived closed forms") {
  Rng rng(6);
  auto gt = T::uniform({4, 4}, rng, 0.5, 4.0);
  IntImage valid(4, 4, 1);

  CHECK(si_log_loss(gt, gt, valid, 1.0).item() == 0.0);

  auto pred2 = scale(gt, 2.0).detach();
  // pure scaling is free at lambda = 1
  CHECK(std::abs(si_log_loss(pred2, gt, valid, 1.0).item()) < 1e-9);

  // lambda = 0.5: (ln 2)^2 * 0.5, cross-checked by brute-force summation
  double ln2 = std::log(2.0);
  double expected = ln2 * ln2 - 0.5 * ln2 * ln2;
  CHECK(si_log_loss(pred2, gt, valid, 0.5).item() == doctest::Approx(expected).epsilon(1e-9));
  double sum_g = 0, sum_g2 = 0;
  for (Index i = 0; i < 16; ++i) {
    double g = std::log(pred2.array()[i]) - std::log(gt.array()[i]);
    sum_g += g;
    sum_g2 += g * g;
  }
  double brute = sum_g2 / 16 - 0.5 * (sum_g / 16) * (sum_g / 16);
  CHECK(si_log_loss(pred2, gt, valid, 0.5).item() == doctest::Approx(brute).epsilon(1e-12));

  // scale-invariance property for arbitrary alpha at lambda = 1
  for (double alpha : {0.3, 2.7, 9.9}) {
    auto pa = scale(gt, alpha).detach();
    CHECK(std::abs(si_log_loss(pa, gt, valid, 1.0).item()) < 1e-9);
  }

  int warns = 0;
  IntImage none(4, 4, 0);
  CHECK(si_log_loss(gt, gt, none, 1.0, &warns).item() == 0.0);
  CHECK(warns == 1);
}

TEST_CASE("SI loss is nonnegative for lambda <= 1") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto gt = T::uniform({3, 3}, rng, 0.5, 5.0);
    auto pred = T::uniform({3, 3}, rng, 0.5, 5.0);
    IntImage valid(3, 3, 1);
    CHECK(si_log_loss(pred, gt, valid, 1.0).item() >= -1e-12);
    CHECK(si_log_loss(pred, gt, valid, 0.5).item() >= -1e-12);
  }
}

TEST_CASE("Eq. 5: sum, zero-explicit identity, additive shared-weight grads") {
  auto w = rnd({4}, 8).set_requires_grad(true);
  auto x1 = rnd({4}, 9);
  auto x2 = rnd({4}, 10);

  auto make_losses = [&] {
    auto l_imp = sum_all(mul(w, x1));
    auto l_exp = sum_all(mul(mul(w, w), x2));
    return total_loss(l_imp, l_exp);
  };

  {
    auto j = total_loss(sum_all(mul(w, x1)), Tensor<double>::scalar(0.0));
    CHECK(j.total.item() == j.imp.item());
  }
  {
    auto j = make_losses();
    CHECK(j.total.item() == j.imp.item() + j.exp.item());
    w.zero_grad();
    backward(j.total);
    std::vector<double> g_total(w.grad().data(), w.grad().data() + 4);

    w.zero_grad();
    backward(make_losses().imp);
    std::vector<double> g_imp(w.grad().data(), w.grad().data() + 4);
    w.zero_grad();
    backward(make_losses().exp);
    for (Index i = 0; i < 4; ++i)
      CHECK(std::abs(g_total[static_cast<std::size_t>(i)] -
                     (g_imp[static_cast<std::size_t>(i)] + w.grad()[i])) < 1e-9);
  }
}

TEST_CASE("head gradcheck suite passes") {
  for (const auto& e : gradcheck_heads_suite()) {
    CHECK(e.report.pass);
    CHECK(e.report.worst() < 1e-4);
  }
}
