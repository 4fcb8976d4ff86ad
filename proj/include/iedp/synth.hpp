#ifndef IEDP_SYNTH_HPP
#define IEDP_SYNTH_HPP

#include <array>
#include <string>
#include <vector>

#include "iedp/image.hpp"
#include "iedp/random.hpp"

namespace iedp {

constexpr std::int32_t kIgnoreLabel = 255;

enum class ShapeKind { background, rectangle, disk, triangle };

struct PaletteEntry {
  int id;
  std::string word;
  std::array<float, 3> base_color;
  ShapeKind kind;
};

// Fixed closed palette; id 0 is the background class. Color alone is
// ambiguous for table/chair and sky/lamp, shape alone for floor/table.
struct Palette {
  std::vector<PaletteEntry> entries;

  static Palette default6() {
    Palette p;
    p.entries = {
        {0, "wall", {0.75f, 0.75f, 0.75f}, ShapeKind::background},
        {1, "floor", {0.20f, 0.60f, 0.25f}, ShapeKind::rectangle},
        {2, "sky", {0.30f, 0.50f, 0.90f}, ShapeKind::disk},
        {3, "table", {0.55f, 0.35f, 0.20f}, ShapeKind::rectangle},
        {4, "chair", {0.50f, 0.32f, 0.18f}, ShapeKind::triangle},
        {5, "lamp", {0.35f, 0.55f, 0.85f}, ShapeKind::triangle},
    };
    return p;
  }

  const PaletteEntry& by_id(int id) const {
    for (const auto& e : entries)
      if (e.id == id) return e;
    throw Error("palette id out of range: " + std::to_string(id));
  }

  const PaletteEntry& by_word(const std::string& w) const {
    for (const auto& e : entries)
      if (e.word == w) return e;
    throw Error("word not in palette: '" + w + "'");
  }

  int background_id() const { return 0; }
  int num_classes() const { return static_cast<int>(entries.size()); }

  std::vector<std::string> class_words() const {
    std::vector<std::string> out;
    for (const auto& e : entries) out.push_back(e.word);
    return out;
  }
};

// depth(x,y) = a*xn + b*yn + c over normalized coords, clamped to [0.5, 10]
struct DepthPlane {
  double a = 0, b = 0, c = 5;
  double at(double xn, double yn) const {
    double d = a * xn + b * yn + c;
    return d < 0.5 ? 0.5 : (d > 10.0 ? 10.0 : d);
  }
};

struct SceneObject {
  int class_id;
  ShapeKind kind;
  double cx, cy;    // center, normalized [0,1]
  double hx, hy;    // half extents, normalized
  DepthPlane plane;
  std::array<float, 3> color;

  bool contains(double xn, double yn) const {
    switch (kind) {
      case ShapeKind::rectangle:
        return std::abs(xn - cx) <= hx && std::abs(yn - cy) <= hy;
      case ShapeKind::disk: {
        double dx = (xn - cx) / hx, dy = (yn - cy) / hy;
        return dx * dx + dy * dy <= 1.0;
      }
      case ShapeKind::triangle: {
        // isosceles, apex up
        if (yn < cy - hy || yn > cy + hy) return false;
        double t = (yn - (cy - hy)) / (2 * hy);
        return std::abs(xn - cx) <= hx * t;
      }
      default:
        return false;
    }
  }
};

struct SceneSpec {
  std::uint64_t seed = 0;
  Index size = 64;
  std::array<float, 3> background_color{};
  DepthPlane background_plane;
  std::vector<SceneObject> objects;  // 1..5
};

struct Sample {
  ColorImage image;
  IntImage mask;
  FloatImage depth;
  std::vector<int> class_ids;           // present in mask, ascending
  std::vector<std::string> class_words; // same order
  std::string caption;
};

inline std::string make_caption(const std::vector<std::string>& class_words) {
  std::string c = "a scene with";
  for (const auto& w : class_words) c += " " + w;
  return c;
}

inline std::vector<std::string> caption_template_words() { return {"a", "scene", "with"}; }

inline SceneSpec make_scene_spec(std::uint64_t seed, const Palette& palette, Index size) {
  if (size % 64 != 0) throw Error("scene size must be a multiple of 64");
  SceneSpec spec;
  spec.seed = seed;
  spec.size = size;

  Rng rng(mix_seed(seed, 0x5ce7e));
  auto jitter = [&](const std::array<float, 3>& base, double amp) {
    std::array<float, 3> c;
    for (int i = 0; i < 3; ++i) {
      double v = base[static_cast<std::size_t>(i)] + rng.uniform(-amp, amp);
      c[static_cast<std::size_t>(i)] = static_cast<float>(std::min(0.98, std::max(0.02, v)));
    }
    return c;
  };

  // plane ranges keep every object strictly nearer than the background
  spec.background_color = jitter(palette.by_id(palette.background_id()).base_color, 0.10);
  spec.background_plane = {rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5), rng.uniform(6.5, 9.0)};

  int n_obj = 1 + static_cast<int>(rng.below(5));
  int n_classes = palette.num_classes() - 1;
  // stratified: the seed pins the first object's class so every class keeps
  // showing up over consecutive-seed datasets
  std::vector<int> pool;
  for (int c = 1; c <= n_classes; ++c) pool.push_back(c);
  int forced = 1 + static_cast<int>(seed % static_cast<std::uint64_t>(n_classes));
  pool.erase(std::find(pool.begin(), pool.end(), forced));
  rng.shuffle(pool);
  std::vector<int> classes = {forced};
  for (int i = 0; i < n_obj - 1 && i < static_cast<int>(pool.size()); ++i)
    classes.push_back(pool[static_cast<std::size_t>(i)]);

  for (int cid : classes) {
    const auto& e = palette.by_id(cid);
    SceneObject o;
    o.class_id = cid;
    o.kind = e.kind;
    o.cx = rng.uniform(0.15, 0.85);
    o.cy = rng.uniform(0.15, 0.85);
    o.hx = rng.uniform(0.12, 0.30);
    o.hy = rng.uniform(0.12, 0.30);
    o.plane = {rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(1.0, 4.5)};
    o.color = jitter(e.base_color, 0.16);
    spec.objects.push_back(o);
  }
  return spec;
}

// Per-pixel z-buffer: the mask and depth map agree with occlusion exactly.
inline Sample render_scene(const SceneSpec& spec, const Palette& palette) {
  Index n = spec.size;
  Sample s;
  s.image = ColorImage(n, n);
  s.mask = IntImage(n, n);
  s.depth = FloatImage(n, n);

  Rng noise(mix_seed(spec.seed, 0x4015e));
  for (Index y = 0; y < n; ++y) {
    for (Index x = 0; x < n; ++x) {
      double xn = (static_cast<double>(x) + 0.5) / static_cast<double>(n);
      double yn = (static_cast<double>(y) + 0.5) / static_cast<double>(n);
      int cls = palette.background_id();
      double depth = spec.background_plane.at(xn, yn);
      const std::array<float, 3>* color = &spec.background_color;
      for (const auto& o : spec.objects) {
        if (!o.contains(xn, yn)) continue;
        double d = o.plane.at(xn, yn);
        if (d < depth) {
          depth = d;
          cls = o.class_id;
          color = &o.color;
        }
      }
      s.mask.at(y, x) = cls;
      s.depth.at(y, x) = static_cast<float>(depth);
      for (Index c = 0; c < 3; ++c) {
        double v = (*color)[static_cast<std::size_t>(c)] + noise.uniform(-0.03, 0.03);
        s.image.at(c, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
      }
    }
  }

  std::vector<bool> present(static_cast<std::size_t>(palette.num_classes()), false);
  for (auto v : s.mask.v) present[static_cast<std::size_t>(v)] = true;
  for (int c = 0; c < palette.num_classes(); ++c) {
    if (present[static_cast<std::size_t>(c)]) {
      s.class_ids.push_back(c);
      s.class_words.push_back(palette.by_id(c).word);
    }
  }
  s.caption = make_caption(s.class_words);
  return s;
}

inline Sample generate_sample(std::uint64_t seed, const Palette& palette, Index size) {
  return render_scene(make_scene_spec(seed, palette, size), palette);
}

}  // namespace iedp

#endif  // IEDP_SYNTH_HPP
