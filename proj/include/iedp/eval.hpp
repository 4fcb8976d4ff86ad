#ifndef IEDP_EVAL_HPP
#define IEDP_EVAL_HPP

#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <thread>
#include <vector>

#include "iedp/model.hpp"

namespace iedp {

// ---- confusion matrix / mIoU ----

struct ConfusionMatrix {
  Index num_classes = 0;
  std::vector<std::int64_t> counts;  // rows = ground truth, cols = prediction

  explicit ConfusionMatrix(Index c = 0)
      : num_classes(c), counts(static_cast<std::size_t>(c * c), 0) {}

  std::int64_t& at(Index gt, Index pred) {
    return counts[static_cast<std::size_t>(gt * num_classes + pred)];
  }
  std::int64_t at(Index gt, Index pred) const {
    return counts[static_cast<std::size_t>(gt * num_classes + pred)];
  }

  void accumulate(const IntImage& gt, const IntImage& pred, std::int32_t ignore = kIgnoreLabel) {
    check_shape(gt.h == pred.h && gt.w == pred.w, "confusion: extent mismatch");
    for (Index p = 0; p < gt.size(); ++p) {
      std::int32_t g = gt.v[static_cast<std::size_t>(p)];
      if (g == ignore) continue;
      at(g, pred.v[static_cast<std::size_t>(p)]) += 1;
    }
  }

  void merge(const ConfusionMatrix& o) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
};

// NaN marks classes with zero union (absent from both GT and prediction).
inline std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  std::vector<double> ious(static_cast<std::size_t>(cm.num_classes),
                           std::numeric_limits<double>::quiet_NaN());
  for (Index c = 0; c < cm.num_classes; ++c) {
    std::int64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (Index o = 0; o < cm.num_classes; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    std::int64_t uni = tp + fp + fn;
    if (uni > 0) ious[static_cast<std::size_t>(c)] = static_cast<double>(tp) /
                                                     static_cast<double>(uni);
  }
  return ious;
}

inline double miou(const ConfusionMatrix& cm) {
  auto ious = per_class_iou(cm);
  double sum = 0;
  int n = 0;
  for (double v : ious) {
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    }
  }
  if (n == 0) throw Error("mIoU undefined: every class has zero union");
  return sum / n;
}

// ---- depth metrics ----

struct DepthMetrics {
  double rmse = 0, rel = 0, log10 = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
};

// Streaming accumulator so whole-split metrics aggregate per pixel.
struct DepthAccum {
  double se = 0, rel = 0, log10 = 0;
  std::int64_t n = 0, n1 = 0, n2 = 0, n3 = 0;

  void add(const FloatImage& pred, const FloatImage& gt, const IntImage& valid) {
    check_shape(pred.h == gt.h && pred.w == gt.w && valid.h == gt.h && valid.w == gt.w,
                "depth_metrics extent mismatch");
    for (Index p = 0; p < gt.size(); ++p) {
      if (!valid.v[static_cast<std::size_t>(p)]) continue;
      double dp = pred.v[static_cast<std::size_t>(p)];
      double dg = gt.v[static_cast<std::size_t>(p)];
      if (!(dg > 0)) throw Error("depth_metrics: ground truth must be positive on valid pixels");
      se += (dp - dg) * (dp - dg);
      rel += std::abs(dp - dg) / dg;
      log10 += std::abs(std::log10(dp) - std::log10(dg));
      double ratio = std::max(dg / dp, dp / dg);
      if (ratio < 1.25) ++n1;
      if (ratio < 1.25 * 1.25) ++n2;
      if (ratio < 1.25 * 1.25 * 1.25) ++n3;
      ++n;
    }
  }

  void merge(const DepthAccum& o) {
    se += o.se;
    rel += o.rel;
    log10 += o.log10;
    n += o.n;
    n1 += o.n1;
    n2 += o.n2;
    n3 += o.n3;
  }

  DepthMetrics finalize() const {
    if (n == 0) throw Error("depth metrics undefined: empty valid mask");
    DepthMetrics m;
    double dn = static_cast<double>(n);
    m.rmse = std::sqrt(se / dn);
    m.rel = rel / dn;
    m.log10 = log10 / dn;
    m.delta1 = static_cast<double>(n1) / dn;
    m.delta2 = static_cast<double>(n2) / dn;
    m.delta3 = static_cast<double>(n3) / dn;
    return m;
  }
};

inline DepthMetrics depth_metrics(const FloatImage& pred, const FloatImage& gt,
                                  const IntImage& valid) {
  DepthAccum a;
  a.add(pred, gt, valid);
  return a.finalize();
}

// ---- plain-buffer helpers ----

// channel-planar [C,H,W] prediction buffer
struct PredMap {
  Index c = 0, h = 0, w = 0;
  std::vector<float> v;
  PredMap() = default;
  PredMap(Index c_, Index h_, Index w_)
      : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_ * h_ * w_), 0.f) {}
  float& at(Index ci, Index y, Index x) {
    return v[static_cast<std::size_t>((ci * h + y) * w + x)];
  }
  float at(Index ci, Index y, Index x) const {
    return v[static_cast<std::size_t>((ci * h + y) * w + x)];
  }
};

inline PredMap hflip(const PredMap& m) {
  PredMap out(m.c, m.h, m.w);
  for (Index c = 0; c < m.c; ++c)
    for (Index y = 0; y < m.h; ++y)
      for (Index x = 0; x < m.w; ++x) out.at(c, y, x) = m.at(c, y, m.w - 1 - x);
  return out;
}

inline IntImage argmax_map(const PredMap& m) {
  IntImage out(m.h, m.w);
  for (Index y = 0; y < m.h; ++y)
    for (Index x = 0; x < m.w; ++x) {
      Index best = 0;
      for (Index c = 1; c < m.c; ++c)
        if (m.at(c, y, x) > m.at(best, y, x)) best = c;
      out.at(y, x) = static_cast<std::int32_t>(best);
    }
  return out;
}

inline FloatImage channel0(const PredMap& m) {
  FloatImage out(m.h, m.w);
  for (Index p = 0; p < m.h * m.w; ++p) out.v[static_cast<std::size_t>(p)] = m.v[static_cast<std::size_t>(p)];
  return out;
}

PredMap resize_bilinear(const PredMap& m, Index h2, Index w2);
ColorImage resize_bilinear(const ColorImage& im, Index h2, Index w2);

// ---- sliding window ----

using TileFn = std::function<PredMap(const ColorImage&)>;

struct SlidingWindowResult {
  PredMap pred;
  IntImage coverage;
};

// Overlapping tiles accumulated and divided by per-pixel coverage. Images
// smaller than the crop are reflection-padded and cropped back.
SlidingWindowResult sliding_window_infer(const ColorImage& image, Index crop, Index stride,
                                         const TileFn& tile_fn);

// Depth TTA: mean of the plain pass and the unflipped flipped pass.
inline PredMap hflip_tta(const ColorImage& image, const std::function<PredMap(const ColorImage&)>& infer) {
  PredMap a = infer(image);
  PredMap b = hflip(infer(hflip(image)));
  check_shape(a.c == b.c && a.h == b.h && a.w == b.w, "hflip_tta extent mismatch");
  PredMap out(a.c, a.h, a.w);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = 0.5f * (a.v[i] + b.v[i]);
  return out;
}

// ---- protocol over a dataset split ----

struct EvalProtocol {
  Index crop = 64;
  Index stride = 43;
  bool tta = true;         // depth only
  bool multiscale = false; // optional two-scale {1.0, 1.5} segmentation mode
  int threads = 0;         // 0: IEDP_THREADS env or hardware_concurrency
};

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("IEDP_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

struct SegEvalResult {
  double miou_ss = 0;
  std::optional<double> miou_ms;
  ConfusionMatrix cm;
  std::vector<double> per_class;
};

struct MetricsJson {
  std::optional<double> miou_ss, miou_ms, rmse, rel, log10, delta1, delta2, delta3;

  nlohmann::json to_json() const {
    auto put = [](const std::optional<double>& v) {
      return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    // keys pinned by the metrics schema
    return nlohmann::json{{"miou_ss", put(miou_ss)}, {"miou_ms", put(miou_ms)},
                          {"rmse", put(rmse)},       {"rel", put(rel)},
                          {"log10", put(log10)},     {"delta1", put(delta1)},
                          {"delta2", put(delta2)},   {"delta3", put(delta3)}};
  }
};

template <class S>
PredMap model_tile_fn(const PerceptionModel<S>& model, const Palette& palette,
                      const ColorImage& crop) {
  auto out = model.inference_forward(crop, palette);
  PredMap m(out.extent(0), out.extent(1), out.extent(2));
  for (Index i = 0; i < out.numel(); ++i) m.v[static_cast<std::size_t>(i)] = static_cast<float>(out.array()[i]);
  return m;
}

// One image, full protocol. Segmentation accumulates pre-softmax logits over
// tiles (and scales, when enabled); depth averages depths and applies TTA.
template <class S>
PredMap predict_image(const PerceptionModel<S>& model, const Palette& palette,
                      const ColorImage& image, const EvalProtocol& proto) {
  TileFn tf = [&](const ColorImage& c) { return model_tile_fn(model, palette, c); };
  if (model.config().task == Task::segmentation) {
    PredMap logits = sliding_window_infer(image, proto.crop, proto.stride, tf).pred;
    if (proto.multiscale) {
      Index h2 = (static_cast<Index>(std::llround(static_cast<double>(image.h) * 1.5)) / 64) * 64;
      Index w2 = (static_cast<Index>(std::llround(static_cast<double>(image.w) * 1.5)) / 64) * 64;
      h2 = std::max<Index>(h2, 64);
      w2 = std::max<Index>(w2, 64);
      ColorImage big = resize_bilinear(image, h2, w2);
      PredMap logits_big = sliding_window_infer(big, proto.crop, proto.stride, tf).pred;
      PredMap back = resize_bilinear(logits_big, image.h, image.w);
      for (std::size_t i = 0; i < logits.v.size(); ++i) logits.v[i] += back.v[i];
    }
    return logits;
  }
  auto infer_once = [&](const ColorImage& im) {
    return sliding_window_infer(im, proto.crop, proto.stride, tf).pred;
  };
  return proto.tta ? hflip_tta(image, infer_once) : infer_once(image);
}

// Deterministic parallel sweep: per-image work is independent; reductions are
// merged in index order.
template <class WorkFn>
void parallel_for_images(Index n, int threads, WorkFn&& work) {
  int t = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (t == 1) {
    for (Index i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<Index> next{0};
  std::vector<std::thread> pool;
  for (int k = 0; k < t; ++k)
    pool.emplace_back([&] {
      while (true) {
        Index i = next.fetch_add(1);
        if (i >= n) break;
        work(i);
      }
    });
  for (auto& th : pool) th.join();
}

template <class S>
SegEvalResult evaluate_segmentation(const PerceptionModel<S>& model, const Dataset& ds,
                                    const std::string& split, const EvalProtocol& proto,
                                    const std::string& vis_dir = "") {
  auto idx = ds.split_indices(split);
  if (idx.empty()) throw Error("split not present in manifest: " + split);
  Index n = static_cast<Index>(idx.size());
  std::vector<IntImage> preds(static_cast<std::size_t>(n));
  std::vector<PredMap> preds_ms(static_cast<std::size_t>(n));
  EvalProtocol single = proto;
  single.multiscale = false;

  parallel_for_images(n, resolve_threads(proto.threads), [&](Index k) {
    ColorImage im = ds.load_image(idx[static_cast<std::size_t>(k)]);
    preds[static_cast<std::size_t>(k)] = argmax_map(predict_image(model, ds.palette(), im, single));
    if (proto.multiscale)
      preds_ms[static_cast<std::size_t>(k)] = predict_image(model, ds.palette(), im, proto);
  });

  SegEvalResult r;
  r.cm = ConfusionMatrix(model.config().num_classes);
  ConfusionMatrix cm_ms(model.config().num_classes);
  for (Index k = 0; k < n; ++k) {
    IntImage gt = ds.load_mask(idx[static_cast<std::size_t>(k)]);
    r.cm.accumulate(gt, preds[static_cast<std::size_t>(k)]);
    if (proto.multiscale) cm_ms.accumulate(gt, argmax_map(preds_ms[static_cast<std::size_t>(k)]));
  }
  r.miou_ss = miou(r.cm);
  r.per_class = per_class_iou(r.cm);
  if (proto.multiscale) r.miou_ms = miou(cm_ms);

  if (!vis_dir.empty()) {
    std::filesystem::create_directories(vis_dir);
    std::vector<std::array<std::uint8_t, 3>> pal;
    for (const auto& e : ds.palette().entries)
      pal.push_back({static_cast<std::uint8_t>(e.base_color[0] * 255),
                     static_cast<std::uint8_t>(e.base_color[1] * 255),
                     static_cast<std::uint8_t>(e.base_color[2] * 255)});
    for (Index k = 0; k < n; ++k) {
      const auto& p = preds[static_cast<std::size_t>(k)];
      std::vector<std::uint8_t> buf(static_cast<std::size_t>(p.h * p.w));
      for (Index i = 0; i < p.size(); ++i)
        buf[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(p.v[static_cast<std::size_t>(i)]);
      char name[32];
      std::snprintf(name, sizeof(name), "pred_%05lld.png", static_cast<long long>(k));
      write_png_paletted((std::filesystem::path(vis_dir) / name).string(), p.w, p.h, buf.data(),
                         pal);
    }
  }
  return r;
}

template <class S>
DepthMetrics evaluate_depth(const PerceptionModel<S>& model, const Dataset& ds,
                            const std::string& split, const EvalProtocol& proto,
                            const std::string& vis_dir = "") {
  auto idx = ds.split_indices(split);
  if (idx.empty()) throw Error("split not present in manifest: " + split);
  Index n = static_cast<Index>(idx.size());
  std::vector<FloatImage> preds(static_cast<std::size_t>(n));

  parallel_for_images(n, resolve_threads(proto.threads), [&](Index k) {
    ColorImage im = ds.load_image(idx[static_cast<std::size_t>(k)]);
    preds[static_cast<std::size_t>(k)] = channel0(predict_image(model, ds.palette(), im, proto));
  });

  DepthAccum acc;
  for (Index k = 0; k < n; ++k) {
    FloatImage gt = ds.load_depth(idx[static_cast<std::size_t>(k)]);
    IntImage valid(gt.h, gt.w, 1);
    acc.add(preds[static_cast<std::size_t>(k)], gt, valid);
  }

  if (!vis_dir.empty()) {
    std::filesystem::create_directories(vis_dir);
    for (Index k = 0; k < n; ++k) {
      const auto& p = preds[static_cast<std::size_t>(k)];
      float lo = p.v[0], hi = p.v[0];
      for (float v : p.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      float range = hi - lo < 1e-9f ? 1.f : hi - lo;
      std::vector<std::uint8_t> buf(static_cast<std::size_t>(p.h * p.w));
      for (Index i = 0; i < p.size(); ++i)
        buf[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(
            std::lround((p.v[static_cast<std::size_t>(i)] - lo) / range * 255.f));
      char name[32];
      std::snprintf(name, sizeof(name), "pred_%05lld.png", static_cast<long long>(k));
      write_png_gray8((std::filesystem::path(vis_dir) / name).string(), p.w, p.h, buf.data());
    }
  }
  return acc.finalize();
}

void write_metrics_json(const std::string& path, const MetricsJson& m);
void write_per_class_iou_csv(const std::string& path, const Palette& palette,
                             const std::vector<double>& ious);

// ---- inline plain-buffer implementations ----

inline PredMap resize_bilinear(const PredMap& m, Index h2, Index w2) {
  auto ty = detail::bilinear_taps(m.h, h2);
  auto tx = detail::bilinear_taps(m.w, w2);
  PredMap out(m.c, h2, w2);
  for (Index c = 0; c < m.c; ++c)
    for (Index y = 0; y < h2; ++y) {
      auto& a = ty[static_cast<std::size_t>(y)];
      for (Index x = 0; x < w2; ++x) {
        auto& b = tx[static_cast<std::size_t>(x)];
        float v00 = m.at(c, a.i0, b.i0), v01 = m.at(c, a.i0, b.i1);
        float v10 = m.at(c, a.i1, b.i0), v11 = m.at(c, a.i1, b.i1);
        float top = v00 + (v01 - v00) * static_cast<float>(b.w1);
        float bot = v10 + (v11 - v10) * static_cast<float>(b.w1);
        out.at(c, y, x) = top + (bot - top) * static_cast<float>(a.w1);
      }
    }
  return out;
}

inline ColorImage resize_bilinear(const ColorImage& im, Index h2, Index w2) {
  PredMap m(3, im.h, im.w);
  m.v = im.v;
  PredMap r = resize_bilinear(m, h2, w2);
  ColorImage out(h2, w2);
  out.v = r.v;
  return out;
}

inline SlidingWindowResult sliding_window_infer(const ColorImage& image, Index crop, Index stride,
                                                const TileFn& tile_fn) {
  check_shape(stride >= 1 && stride <= crop, "sliding window requires 1 <= stride <= crop");

  // reflection-pad undersized images, predict, crop back
  if (image.h < crop || image.w < crop) {
    Index ph = std::max(image.h, crop), pw = std::max(image.w, crop);
    ColorImage padded(ph, pw);
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < ph; ++y) {
        Index sy = y < image.h ? y : 2 * image.h - 2 - y;
        sy = std::max<Index>(0, std::min(sy, image.h - 1));
        for (Index x = 0; x < pw; ++x) {
          Index sx = x < image.w ? x : 2 * image.w - 2 - x;
          sx = std::max<Index>(0, std::min(sx, image.w - 1));
          padded.at(c, y, x) = image.at(c, sy, sx);
        }
      }
    SlidingWindowResult full = sliding_window_infer(padded, crop, stride, tile_fn);
    SlidingWindowResult out;
    out.pred = PredMap(full.pred.c, image.h, image.w);
    out.coverage = IntImage(image.h, image.w);
    for (Index c = 0; c < full.pred.c; ++c)
      for (Index y = 0; y < image.h; ++y)
        for (Index x = 0; x < image.w; ++x) out.pred.at(c, y, x) = full.pred.at(c, y, x);
    for (Index y = 0; y < image.h; ++y)
      for (Index x = 0; x < image.w; ++x) out.coverage.at(y, x) = full.coverage.at(y, x);
    return out;
  }

  auto starts = [&](Index extent) {
    std::vector<Index> s;
    for (Index v = 0; v + crop < extent; v += stride) s.push_back(v);
    s.push_back(extent - crop);  // last window flush with the border
    return s;
  };
  auto ys = starts(image.h), xs = starts(image.w);

  SlidingWindowResult out;
  out.coverage = IntImage(image.h, image.w);
  bool first = true;
  for (Index y0 : ys) {
    for (Index x0 : xs) {
      ColorImage tile(crop, crop);
      for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < crop; ++y)
          for (Index x = 0; x < crop; ++x) tile.at(c, y, x) = image.at(c, y0 + y, x0 + x);
      PredMap p = tile_fn(tile);
      check_shape(p.h == crop && p.w == crop, "tile prediction extent mismatch");
      if (first) {
        out.pred = PredMap(p.c, image.h, image.w);
        first = false;
      }
      for (Index c = 0; c < p.c; ++c)
        for (Index y = 0; y < crop; ++y)
          for (Index x = 0; x < crop; ++x) out.pred.at(c, y0 + y, x0 + x) += p.at(c, y, x);
      for (Index y = 0; y < crop; ++y)
        for (Index x = 0; x < crop; ++x) out.coverage.at(y0 + y, x0 + x) += 1;
    }
  }
  for (Index y = 0; y < image.h; ++y)
    for (Index x = 0; x < image.w; ++x) {
      std::int32_t cov = out.coverage.at(y, x);
      if (cov < 1) throw Error("sliding window left a pixel uncovered");  // unreachable by construction
      for (Index c = 0; c < out.pred.c; ++c)
        out.pred.at(c, y, x) /= static_cast<float>(cov);
    }
  return out;
}

inline void write_metrics_json(const std::string& path, const MetricsJson& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write metrics: " + path);
  os << m.to_json().dump(2) << '\n';
}

inline void write_per_class_iou_csv(const std::string& path, const Palette& palette,
                                    const std::vector<double>& ious) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write per-class csv: " + path);
  os << "class_id,word,iou\n";
  for (std::size_t i = 0; i < ious.size(); ++i) {
    os << palette.entries[i].id << ',' << palette.entries[i].word << ',';
    if (std::isnan(ious[i])) os << "";
    else os << ious[i];
    os << '\n';
  }
}

}  // namespace iedp

#endif  // IEDP_EVAL_HPP
