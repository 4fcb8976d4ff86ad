#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "iedp/eval.hpp"

using namespace iedp;

TEST_CASE("miou: perfect prediction, hand-counted case, zero-union exclusion") {
  {
    IntImage gt(4, 4), pred(4, 4);
    for (Index p = 0; p < 16; ++p) {
      gt.v[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(p % 3);
      pred.v[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(p % 3);
    }
    ConfusionMatrix cm(3);
    cm.accumulate(gt, pred);
    CHECK(miou(cm) == 1.0);
  }
  {
    // cm = [[3,1],[1,3]]: IoU per class 3/5, mIoU 0.6
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 3;
    cm.at(0, 1) = 1;
    cm.at(1, 0) = 1;
    cm.at(1, 1) = 3;
    CHECK(miou(cm) == doctest::Approx(0.6).epsilon(1e-12));
  }
  {
    // class 2 absent from both GT and prediction: excluded from the mean
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 5;
    cm.at(1, 1) = 5;
    CHECK(miou(cm) == 1.0);
    auto ious = per_class_iou(cm);
    CHECK(std::isnan(ious[2]));
  }
  {
    ConfusionMatrix cm(3);
    CHECK_THROWS_AS(miou(cm), Error);
  }
}

TEST_CASE("miou is invariant under consistent class permutation") {
  Rng rng(1);
  IntImage gt(8, 8), pred(8, 8);
  for (Index p = 0; p < 64; ++p) {
    gt.v[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(rng.below(4));
    pred.v[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(rng.below(4));
  }
  ConfusionMatrix a(4);
  a.accumulate(gt, pred);

  std::vector<std::int32_t> perm = {2, 3, 1, 0};
  IntImage gt2 = gt, pred2 = pred;
  for (Index p = 0; p < 64; ++p) {
    gt2.v[static_cast<std::size_t>(p)] = perm[static_cast<std::size_t>(gt.v[static_cast<std::size_t>(p)])];
    pred2.v[static_cast<std::size_t>(p)] = perm[static_cast<std::size_t>(pred.v[static_cast<std::size_t>(p)])];
  }
  ConfusionMatrix b(4);
  b.accumulate(gt2, pred2);
  CHECK(miou(a) == doctest::Approx(miou(b)).epsilon(1e-12));
}

TEST_CASE("ignore label excluded; total equals evaluated pixel count") {
  IntImage gt(2, 2, 1), pred(2, 2, 1);
  gt.v[0] = kIgnoreLabel;
  ConfusionMatrix cm(2);
  cm.accumulate(gt, pred);
  CHECK(cm.total() == 3);
}

TEST_CASE("depth metrics: trivial, boundary, and oracle cases") {
  Rng rng(2);
  FloatImage gt(8, 8);
  for (Index p = 0; p < 64; ++p) gt.v[static_cast<std::size_t>(p)] = static_cast<float>(rng.uniform(0.5, 5.0));
  IntImage valid(8, 8, 1);

  {
    auto m = depth_metrics(gt, gt, valid);
    CHECK(m.rmse == 0.0);
    CHECK(m.rel == 0.0);
    CHECK(m.log10 == 0.0);
    CHECK(m.delta1 == 1.0);
    CHECK(m.delta2 == 1.0);
    CHECK(m.delta3 == 1.0);
  }
  {
    // pred = 1.25 * gt exactly: strict inequality makes delta1 = 0
    FloatImage pred(8, 8);
    for (Index p = 0; p < 64; ++p) pred.v[static_cast<std::size_t>(p)] = 1.25f * gt.v[static_cast<std::size_t>(p)];
    auto m = depth_metrics(pred, gt, valid);
    CHECK(m.delta1 == 0.0);
    CHECK(m.delta2 == 1.0);
    CHECK(m.delta3 == 1.0);
    CHECK(m.rel == doctest::Approx(0.25).epsilon(1e-6));
  }
  {
    // randomized case vs direct per-pixel summation oracle
    FloatImage pred(8, 8);
    for (Index p = 0; p < 64; ++p) pred.v[static_cast<std::size_t>(p)] = static_cast<float>(rng.uniform(0.5, 5.0));
    valid.v[13] = 0;
    auto m = depth_metrics(pred, gt, valid);
    double se = 0, rel = 0, l10 = 0;
    std::int64_t n = 0, n1 = 0, n2 = 0, n3 = 0;
    for (Index p = 0; p < 64; ++p) {
      if (!valid.v[static_cast<std::size_t>(p)]) continue;
      double dp = pred.v[static_cast<std::size_t>(p)], dg = gt.v[static_cast<std::size_t>(p)];
      se += (dp - dg) * (dp - dg);
      rel += std::abs(dp - dg) / dg;
      l10 += std::abs(std::log10(dp) - std::log10(dg));
      double r = std::max(dp / dg, dg / dp);
      n1 += r < 1.25;
      n2 += r < 1.5625;
      n3 += r < 1.953125;
      ++n;
    }
    CHECK(std::abs(m.rmse - std::sqrt(se / n)) < 1e-10);
    CHECK(std::abs(m.rel - rel / n) < 1e-10);
    CHECK(std::abs(m.log10 - l10 / n) < 1e-10);
    CHECK(m.delta1 == doctest::Approx(double(n1) / n));
    CHECK(m.delta2 == doctest::Approx(double(n2) / n));
    CHECK(m.delta3 == doctest::Approx(double(n3) / n));
    CHECK(m.delta1 <= m.delta2);
    CHECK(m.delta2 <= m.delta3);
  }
  {
    IntImage none(8, 8, 0);
    CHECK_THROWS_AS(depth_metrics(gt, gt, none), Error);
  }
}

TEST_CASE("depth metrics scale check: alpha scaling moves RMSE only") {
  Rng rng(3);
  FloatImage gt(6, 6), pred(6, 6);
  for (Index p = 0; p < 36; ++p) {
    gt.v[static_cast<std::size_t>(p)] = static_cast<float>(rng.uniform(1.0, 4.0));
    pred.v[static_cast<std::size_t>(p)] = static_cast<float>(rng.uniform(1.0, 4.0));
  }
  IntImage valid(6, 6, 1);
  auto base = depth_metrics(pred, gt, valid);

  double alpha = 3.0;
  FloatImage gts(6, 6), preds(6, 6);
  for (Index p = 0; p < 36; ++p) {
    gts.v[static_cast<std::size_t>(p)] = static_cast<float>(alpha) * gt.v[static_cast<std::size_t>(p)];
    preds.v[static_cast<std::size_t>(p)] = static_cast<float>(alpha) * pred.v[static_cast<std::size_t>(p)];
  }
  auto scaled = depth_metrics(preds, gts, valid);
  CHECK(scaled.rmse == doctest::Approx(alpha * base.rmse).epsilon(1e-5));
  CHECK(scaled.rel == doctest::Approx(base.rel).epsilon(1e-5));
  CHECK(scaled.log10 == doctest::Approx(base.log10).epsilon(1e-4));
  CHECK(scaled.delta1 == base.delta1);
  CHECK(scaled.delta2 == base.delta2);
  CHECK(scaled.delta3 == base.delta3);
}

namespace {
ColorImage ramp_image(Index h, Index w) {
  ColorImage im(h, w);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        im.at(c, y, x) = static_cast<float>((c + 1) * (y * w + x)) / static_cast<float>(3 * h * w);
  return im;
}
}  // namespace

TEST_CASE("sliding window: coverage arithmetic for 96x96, crop 64, stride 32") {
  ColorImage im = ramp_image(96, 96);
  TileFn tf = [](const ColorImage& tile) {
    PredMap p(1, tile.h, tile.w);
    return p;
  };
  auto res = sliding_window_infer(im, 64, 32, tf);
  // tiles start at {0, 32}: center band covered 2x per axis -> 4x at center
  CHECK(res.coverage.at(0, 0) == 1);
  CHECK(res.coverage.at(48, 48) == 4);
  CHECK(res.coverage.at(0, 48) == 2);
  CHECK(res.coverage.at(95, 95) == 1);
  for (Index p = 0; p < 96 * 96; ++p) CHECK(res.coverage.v[static_cast<std::size_t>(p)] >= 1);
}

TEST_CASE("sliding window: crop-sized image equals the direct tile call bit-exactly") {
  ColorImage im = ramp_image(64, 64);
  int calls = 0;
  TileFn tf = [&](const ColorImage& tile) {
    ++calls;
    PredMap p(2, tile.h, tile.w);
    for (Index y = 0; y < tile.h; ++y)
      for (Index x = 0; x < tile.w; ++x) {
        p.at(0, y, x) = tile.at(0, y, x) * 2.f;
        p.at(1, y, x) = tile.at(1, y, x) - 1.f;
      }
    return p;
  };
  auto res = sliding_window_infer(im, 64, 43, tf);
  CHECK(calls == 1);
  PredMap direct = tf(im);
  CHECK(res.pred.v == direct.v);
}

TEST_CASE("sliding window: constant model is invariant to tiling") {
  ColorImage im = ramp_image(96, 64);
  TileFn tf = [](const ColorImage& tile) {
    PredMap p(1, tile.h, tile.w);
    for (auto& v : p.v) v = 3.5f;
    return p;
  };
  auto res = sliding_window_infer(im, 64, 17, tf);
  for (float v : res.pred.v) CHECK(v == 3.5f);
}

TEST_CASE("sliding window with stride == crop stitches disjoint tiles") {
  ColorImage im = ramp_image(128, 128);
  TileFn tf = [](const ColorImage& tile) {
    PredMap p(1, tile.h, tile.w);
    for (Index y = 0; y < tile.h; ++y)
      for (Index x = 0; x < tile.w; ++x) p.at(0, y, x) = tile.at(1, y, x);
    return p;
  };
  auto res = sliding_window_infer(im, 64, 64, tf);
  for (Index y = 0; y < 128; ++y)
    for (Index x = 0; x < 128; ++x) {
      CHECK(res.coverage.at(y, x) == 1);
      CHECK(res.pred.at(0, y, x) == im.at(1, y, x));
    }
}

TEST_CASE("undersized images are reflection-padded and cropped back") {
  ColorImage im = ramp_image(40, 48);
  TileFn tf = [](const ColorImage& tile) {
    PredMap p(1, tile.h, tile.w);
    for (Index y = 0; y < tile.h; ++y)
      for (Index x = 0; x < tile.w; ++x) p.at(0, y, x) = tile.at(0, y, x);
    return p;
  };
  auto res = sliding_window_infer(im, 64, 43, tf);
  REQUIRE(res.pred.h == 40);
  REQUIRE(res.pred.w == 48);
  for (Index y = 0; y < 40; ++y)
    for (Index x = 0; x < 48; ++x) CHECK(res.pred.at(0, y, x) == im.at(0, y, x));
}

TEST_CASE("hflip TTA: symmetric input + deterministic model keeps output; mean rule") {
  auto infer = [](const ColorImage& im) {
    PredMap p(1, im.h, im.w);
    for (Index y = 0; y < im.h; ++y)
      for (Index x = 0; x < im.w; ++x) p.at(0, y, x) = im.at(0, y, x) + im.at(2, y, x);
    return p;
  };
  // left-right symmetric image: TTA equals the plain pass
  ColorImage sym(8, 8);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < 8; ++y)
      for (Index x = 0; x < 8; ++x) sym.at(c, y, x) = static_cast<float>(y + std::min(x, 7 - x));
  PredMap plain = infer(sym);
  PredMap tta = hflip_tta(sym, infer);
  for (std::size_t i = 0; i < plain.v.size(); ++i) CHECK(tta.v[i] == doctest::Approx(plain.v[i]));

  // general image: TTA is the pixel-wise mean of the two passes
  ColorImage im = ramp_image(8, 8);
  PredMap a = infer(im);
  PredMap b = hflip(infer(hflip(im)));
  PredMap t = hflip_tta(im, infer);
  for (std::size_t i = 0; i < t.v.size(); ++i)
    CHECK(t.v[i] == doctest::Approx(0.5f * (a.v[i] + b.v[i])));
}

TEST_CASE("metrics json carries the full documented key set") {
  MetricsJson m;
  m.miou_ss = 0.5;
  auto j = m.to_json();
  for (const char* key :
       {"miou_ss", "miou_ms", "rmse", "rel", "log10", "delta1", "delta2", "delta3"})
    CHECK(j.contains(key));
  CHECK(j["miou_ms"].is_null());
  CHECK(j["miou_ss"].get<double>() == 0.5);
}
