#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "iedp/dataset.hpp"
#include "iedp/synth.hpp"

using namespace iedp;
namespace fs = std::filesystem;

namespace {
std::string tmp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / "iedp_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}
}  // namespace

TEST_CASE("generate_sample is deterministic") {
  Palette pal = Palette::default6();
  Sample a = generate_sample(42, pal, 64);
  Sample b = generate_sample(42, pal, 64);
  CHECK(a.image.v == b.image.v);
  CHECK(a.mask.v == b.mask.v);
  CHECK(a.depth.v == b.depth.v);
  CHECK(a.caption == b.caption);
}

TEST_CASE("single-object scene has exactly background plus one class") {
  Palette pal = Palette::default6();
  bool found = false;
  for (std::uint64_t seed = 0; seed < 64 && !found; ++seed) {
    SceneSpec spec = make_scene_spec(seed, pal, 64);
    if (spec.objects.size() != 1) continue;
    found = true;
    Sample s = render_scene(spec, pal);
    CHECK(s.class_ids.size() == 2);
    CHECK(s.class_ids[0] == pal.background_id());
  }
  CHECK(found);
}

TEST_CASE("occlusion: mask and depth match brute-force nearest-plane oracle") {
  Palette pal = Palette::default6();
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    SceneSpec spec = make_scene_spec(seed, pal, 64);
    Sample s = render_scene(spec, pal);
    for (Index y = 0; y < 64; ++y) {
      for (Index x = 0; x < 64; ++x) {
        double xn = (x + 0.5) / 64.0, yn = (y + 0.5) / 64.0;
        int best_cls = pal.background_id();
        double best_d = spec.background_plane.at(xn, yn);
        for (const auto& o : spec.objects) {
          if (!o.contains(xn, yn)) continue;
          double d = o.plane.at(xn, yn);
          if (d < best_d) {
            best_d = d;
            best_cls = o.class_id;
          }
        }
        REQUIRE(s.mask.at(y, x) == best_cls);
        REQUIRE(s.depth.at(y, x) == doctest::Approx(best_d).epsilon(1e-7));
      }
    }
  }
}

TEST_CASE("objects always sit in front of the background plane") {
  // plane parameter ranges keep every object nearer than the background
  Palette pal = Palette::default6();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    SceneSpec spec = make_scene_spec(seed, pal, 64);
    Sample s = render_scene(spec, pal);
    bool has_object_pixel = false;
    for (auto v : s.mask.v)
      if (v != pal.background_id()) has_object_pixel = true;
    CHECK(has_object_pixel);
  }
}

TEST_CASE("class balance: every class appears in at least 5% of 1000 scenes") {
  Palette pal = Palette::default6();
  std::vector<int> hits(static_cast<std::size_t>(pal.num_classes()), 0);
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    Sample s = generate_sample(static_cast<std::uint64_t>(i), pal, 64);
    for (int c : s.class_ids) ++hits[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < pal.num_classes(); ++c)
    CHECK(hits[static_cast<std::size_t>(c)] >= n / 20);
}

TEST_CASE("caption contains every class word exactly once") {
  Palette pal = Palette::default6();
  for (std::uint64_t seed = 300; seed < 320; ++seed) {
    Sample s = generate_sample(seed, pal, 64);
    for (const auto& w : s.class_words) {
      std::size_t count = 0, pos = 0;
      while ((pos = s.caption.find(" " + w, pos)) != std::string::npos) {
        ++count;
        pos += w.size();
      }
      CHECK(count == 1);
    }
  }
}

TEST_CASE("depth stays positive and within the clamp range") {
  Palette pal = Palette::default6();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Sample s = generate_sample(seed, pal, 64);
    for (float d : s.depth.v) {
      CHECK(d >= 0.5f);
      CHECK(d <= 10.0f);
    }
  }
}

TEST_CASE("write_dataset: splits, round-trips, and manifest consistency") {
  Palette pal = Palette::default6();
  std::string dir = tmp_dir("ds_roundtrip");
  auto res = write_dataset(100, dir, {0.8, 0.2}, 7, 64, pal);
  CHECK(res.split_counts[0] == 80);
  CHECK(res.split_counts[1] == 20);

  Dataset ds = Dataset::open(res.manifest_path);
  REQUIRE(ds.size() == 100);
  CHECK(ds.split_indices("train").size() == 80);
  CHECK(ds.split_indices("val").size() == 20);

  for (Index i : {Index(0), Index(17), Index(99)}) {
    Sample ref = generate_sample(7 + static_cast<std::uint64_t>(i), pal, 64);

    ColorImage im = ds.load_image(i);
    for (Index p = 0; p < 3 * 64 * 64; ++p)
      CHECK(std::abs(im.v[static_cast<std::size_t>(p)] -
                     ref.image.v[static_cast<std::size_t>(p)]) <= 0.5f / 255.f + 1e-6f);

    IntImage mask = ds.load_mask(i);
    CHECK(mask.v == ref.mask.v);

    // depth read-back within the 16-bit quantization step
    FloatImage depth = ds.load_depth(i);
    double step = ds.info(i).depth_scale;
    for (Index p = 0; p < 64 * 64; ++p)
      CHECK(std::abs(depth.v[static_cast<std::size_t>(p)] -
                     ref.depth.v[static_cast<std::size_t>(p)]) <= step);

    // manifest class set equals unique mask values mapped to words
    std::set<std::int32_t> uniq(mask.v.begin(), mask.v.end());
    REQUIRE(ds.info(i).classes.size() == uniq.size());
    std::size_t k = 0;
    for (std::int32_t c : uniq) CHECK(ds.info(i).classes[k++] == pal.by_id(c).word);
  }
}

TEST_CASE("write_dataset rerun with same seed produces identical manifest bytes") {
  Palette pal = Palette::default6();
  std::string d1 = tmp_dir("ds_det1"), d2 = tmp_dir("ds_det2");
  auto r1 = write_dataset(20, d1, {0.5, 0.5}, 99, 64, pal);
  auto r2 = write_dataset(20, d2, {0.5, 0.5}, 99, 64, pal);
  std::string a = file_bytes(r1.manifest_path), b = file_bytes(r2.manifest_path);
  // manifests embed only relative paths, so bytes must match exactly
  CHECK(a == b);
  CHECK(file_bytes(d1 + "/images/00003.png") == file_bytes(d2 + "/images/00003.png"));
  CHECK(file_bytes(d1 + "/depths/00003.png") == file_bytes(d2 + "/depths/00003.png"));
}

TEST_CASE("split fractions must sum to one") {
  Palette pal = Palette::default6();
  CHECK_THROWS_AS(write_dataset(10, tmp_dir("ds_bad"), {0.5, 0.4}, 1, 64, pal), Error);
}

TEST_CASE("leak guard blocks mask and depth reads during inference") {
  Palette pal = Palette::default6();
  std::string dir = tmp_dir("ds_guard");
  auto res = write_dataset(4, dir, {1.0}, 3, 64, pal);
  Dataset ds = Dataset::open(res.manifest_path);
  CHECK_NOTHROW(ds.load_mask(0));
  {
    guard::LeakGuard lg;
    CHECK_THROWS_AS(ds.load_mask(0), LeakError);
    CHECK_THROWS_AS(ds.load_depth(0), LeakError);
    CHECK_NOTHROW(ds.load_image(0));
  }
  CHECK_NOTHROW(ds.load_depth(0));
}

TEST_CASE("vocabulary file round-trip and sortedness") {
  Palette pal = Palette::default6();
  Vocabulary v = dataset_vocabulary(pal);
  std::string dir = tmp_dir("vocab");
  v.save(dir + "/vocab.txt");
  Vocabulary loaded = Vocabulary::load(dir + "/vocab.txt");
  CHECK(v == loaded);
  CHECK(std::is_sorted(v.words().begin(), v.words().end()));
}
