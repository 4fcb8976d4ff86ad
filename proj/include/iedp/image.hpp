#ifndef IEDP_IMAGE_HPP
#define IEDP_IMAGE_HPP

#include <cstdint>
#include <vector>

#include "iedp/common.hpp"
#include "iedp/tensor.hpp"

namespace iedp {

// Plain (non-autodiff) buffers for labels, depth maps and raw pixels.

struct IntImage {
  Index h = 0, w = 0;
  std::vector<std::int32_t> v;

  IntImage() = default;
  IntImage(Index h_, Index w_, std::int32_t fill = 0)
      : h(h_), w(w_), v(static_cast<std::size_t>(h_ * w_), fill) {}
  std::int32_t& at(Index y, Index x) { return v[static_cast<std::size_t>(y * w + x)]; }
  std::int32_t at(Index y, Index x) const { return v[static_cast<std::size_t>(y * w + x)]; }
  Index size() const { return h * w; }
};

struct FloatImage {
  Index h = 0, w = 0;
  std::vector<float> v;

  FloatImage() = default;
  FloatImage(Index h_, Index w_, float fill = 0.f)
      : h(h_), w(w_), v(static_cast<std::size_t>(h_ * w_), fill) {}
  float& at(Index y, Index x) { return v[static_cast<std::size_t>(y * w + x)]; }
  float at(Index y, Index x) const { return v[static_cast<std::size_t>(y * w + x)]; }
  Index size() const { return h * w; }
};

// Planar float RGB in [0,1], layout [3,h,w].
struct ColorImage {
  Index h = 0, w = 0;
  std::vector<float> v;

  ColorImage() = default;
  ColorImage(Index h_, Index w_, float fill = 0.f)
      : h(h_), w(w_), v(static_cast<std::size_t>(3 * h_ * w_), fill) {}
  float& at(Index c, Index y, Index x) {
    return v[static_cast<std::size_t>((c * h + y) * w + x)];
  }
  float at(Index c, Index y, Index x) const {
    return v[static_cast<std::size_t>((c * h + y) * w + x)];
  }
};

inline ColorImage hflip(const ColorImage& im) {
  ColorImage out(im.h, im.w);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < im.h; ++y)
      for (Index x = 0; x < im.w; ++x) out.at(c, y, x) = im.at(c, y, im.w - 1 - x);
  return out;
}

inline IntImage hflip(const IntImage& im) {
  IntImage out(im.h, im.w);
  for (Index y = 0; y < im.h; ++y)
    for (Index x = 0; x < im.w; ++x) out.at(y, x) = im.at(y, im.w - 1 - x);
  return out;
}

inline FloatImage hflip(const FloatImage& im) {
  FloatImage out(im.h, im.w);
  for (Index y = 0; y < im.h; ++y)
    for (Index x = 0; x < im.w; ++x) out.at(y, x) = im.at(y, im.w - 1 - x);
  return out;
}

template <class S>
Tensor<S> to_tensor(const ColorImage& im) {
  auto t = Tensor<S>::zeros({3, im.h, im.w});
  for (Index i = 0; i < static_cast<Index>(im.v.size()); ++i)
    t.array()[i] = static_cast<S>(im.v[static_cast<std::size_t>(i)]);
  return t;
}

template <class S>
Tensor<S> to_tensor(const FloatImage& im) {
  auto t = Tensor<S>::zeros({im.h, im.w});
  for (Index i = 0; i < im.size(); ++i) t.array()[i] = static_cast<S>(im.v[static_cast<std::size_t>(i)]);
  return t;
}

}  // namespace iedp

#endif  // IEDP_IMAGE_HPP
