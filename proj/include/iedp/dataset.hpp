#ifndef IEDP_DATASET_HPP
#define IEDP_DATASET_HPP

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iedp/guard.hpp"
#include "iedp/png_io.hpp"
#include "iedp/synth.hpp"
#include "iedp/vocab.hpp"

namespace iedp {

struct ManifestSample {
  std::string image, mask, depth;
  double depth_scale = 0;
  std::vector<std::string> classes;
  std::string caption;
  std::string split;
};

struct Manifest {
  std::vector<ManifestSample> samples;
  Palette palette;
  std::string root;  // directory containing the manifest

  static Manifest load(const std::string& path);
  void save(const std::string& path) const;
};

struct WriteDatasetResult {
  std::string manifest_path;
  std::vector<Index> split_counts;
};

// Renders n samples with consecutive seeds and writes PNGs + manifest JSON
// (+ the vocabulary file). split_fractions must sum to 1.
WriteDatasetResult write_dataset(Index n, const std::string& out_dir,
                                 const std::vector<double>& split_fractions,
                                 std::uint64_t base_seed, Index size, const Palette& palette);

// Read-side view over a manifest. Mask/depth loads go through the leak guard.
class Dataset {
 public:
  explicit Dataset(Manifest m) : m_(std::move(m)) {}
  static Dataset open(const std::string& manifest_path) {
    return Dataset(Manifest::load(manifest_path));
  }

  const Manifest& manifest() const { return m_; }
  const Palette& palette() const { return m_.palette; }
  Index size() const { return static_cast<Index>(m_.samples.size()); }

  std::vector<Index> split_indices(const std::string& split) const {
    std::vector<Index> out;
    for (Index i = 0; i < size(); ++i)
      if (m_.samples[static_cast<std::size_t>(i)].split == split) out.push_back(i);
    return out;
  }

  const ManifestSample& info(Index i) const { return m_.samples[static_cast<std::size_t>(i)]; }

  std::string path(const std::string& rel) const {
    return (std::filesystem::path(m_.root) / rel).string();
  }

  ColorImage load_image(Index i) const;
  IntImage load_mask(Index i) const;    // leak-guarded
  FloatImage load_depth(Index i) const; // leak-guarded

  std::vector<int> class_ids(Index i) const {
    std::vector<int> out;
    for (const auto& w : info(i).classes) out.push_back(m_.palette.by_word(w).id);
    return out;
  }

 private:
  Manifest m_;
};

Vocabulary dataset_vocabulary(const Palette& palette);

// ---- inline implementation ----

inline Manifest Manifest::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw IoError("manifest parse error in " + path + ": " + e.what());
  }
  Manifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  Palette def = Palette::default6();
  for (const auto& pj : j.at("palette")) {
    int id = pj.at("id").get<int>();
    std::string word = pj.at("word").get<std::string>();
    // colors/shapes are generator-side; match by id against the default table
    const auto& base = def.by_id(id);
    if (base.word != word)
      throw IoError("manifest palette word mismatch for id " + std::to_string(id));
    m.palette.entries.push_back(base);
  }
  for (const auto& sj : j.at("samples")) {
    ManifestSample s;
    s.image = sj.at("image").get<std::string>();
    s.mask = sj.at("mask").get<std::string>();
    s.depth = sj.at("depth").get<std::string>();
    s.depth_scale = sj.at("depth_scale").get<double>();
    for (const auto& c : sj.at("classes")) s.classes.push_back(c.get<std::string>());
    s.caption = sj.at("caption").get<std::string>();
    s.split = sj.at("split").get<std::string>();
    m.samples.push_back(std::move(s));
  }
  return m;
}

inline void Manifest::save(const std::string& path) const {
  nlohmann::json j;
  j["samples"] = nlohmann::json::array();
  for (const auto& s : samples) {
    nlohmann::json sj;
    sj["image"] = s.image;
    sj["mask"] = s.mask;
    sj["depth"] = s.depth;
    sj["depth_scale"] = s.depth_scale;
    sj["classes"] = s.classes;
    sj["caption"] = s.caption;
    sj["split"] = s.split;
    j["samples"].push_back(sj);
  }
  j["palette"] = nlohmann::json::array();
  for (const auto& e : palette.entries)
    j["palette"].push_back({{"id", e.id}, {"word", e.word}});
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write manifest: " + path);
  os << j.dump(2) << '\n';
}

inline Vocabulary dataset_vocabulary(const Palette& palette) {
  std::vector<std::string> words = palette.class_words();
  for (const auto& w : caption_template_words()) words.push_back(w);
  return Vocabulary::from_words(words);
}

inline WriteDatasetResult write_dataset(Index n, const std::string& out_dir,
                                        const std::vector<double>& split_fractions,
                                        std::uint64_t base_seed, Index size,
                                        const Palette& palette) {
  if (n < 1) throw Error("write_dataset: n must be >= 1");
  double total = 0;
  for (double f : split_fractions) total += f;
  if (split_fractions.empty() || std::abs(total - 1.0) > 1e-9)
    throw Error("write_dataset: split fractions must sum to 1");
  static const std::vector<std::string> kSplitNames = {"train", "val", "test"};
  if (split_fractions.size() > kSplitNames.size())
    throw Error("write_dataset: at most 3 splits supported");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  fs::create_directories(fs::path(out_dir) / "masks", ec);
  fs::create_directories(fs::path(out_dir) / "depths", ec);
  if (!fs::exists(fs::path(out_dir) / "images"))
    throw IoError("cannot create dataset directory: " + out_dir);

  // cumulative rounding keeps each split within +-1 of its fraction
  std::vector<Index> bounds;
  double cum = 0;
  for (double f : split_fractions) {
    cum += f;
    bounds.push_back(static_cast<Index>(std::llround(cum * static_cast<double>(n))));
  }
  bounds.back() = n;

  const double depth_scale = 10.0 / 65535.0;
  Manifest manifest;
  manifest.palette = palette;
  manifest.root = out_dir;
  WriteDatasetResult result;
  result.split_counts.assign(split_fractions.size(), 0);

  for (Index i = 0; i < n; ++i) {
    Sample s = generate_sample(base_seed + static_cast<std::uint64_t>(i), palette, size);
    char name[32];
    std::snprintf(name, sizeof(name), "%05lld.png", static_cast<long long>(i));

    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(size * size * 3));
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x)
        for (Index c = 0; c < 3; ++c)
          rgb[static_cast<std::size_t>((y * size + x) * 3 + c)] =
              static_cast<std::uint8_t>(std::lround(s.image.at(c, y, x) * 255.0f));
    write_png_rgb8((fs::path(out_dir) / "images" / name).string(), size, size, rgb.data());

    std::vector<std::uint8_t> mask(static_cast<std::size_t>(size * size));
    for (Index p = 0; p < size * size; ++p)
      mask[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(s.mask.v[static_cast<std::size_t>(p)]);
    write_png_gray8((fs::path(out_dir) / "masks" / name).string(), size, size, mask.data());

    std::vector<std::uint16_t> depth(static_cast<std::size_t>(size * size));
    for (Index p = 0; p < size * size; ++p)
      depth[static_cast<std::size_t>(p)] = static_cast<std::uint16_t>(
          std::lround(s.depth.v[static_cast<std::size_t>(p)] / depth_scale));
    write_png_gray16((fs::path(out_dir) / "depths" / name).string(), size, size, depth.data());

    std::size_t split_idx = 0;
    while (i >= bounds[split_idx]) ++split_idx;
    ++result.split_counts[split_idx];

    ManifestSample ms;
    ms.image = std::string("images/") + name;
    ms.mask = std::string("masks/") + name;
    ms.depth = std::string("depths/") + name;
    ms.depth_scale = depth_scale;
    ms.classes = s.class_words;
    ms.caption = s.caption;
    ms.split = kSplitNames[split_idx];
    manifest.samples.push_back(std::move(ms));
  }

  result.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  manifest.save(result.manifest_path);
  dataset_vocabulary(palette).save((fs::path(out_dir) / "vocab.txt").string());
  return result;
}

inline ColorImage Dataset::load_image(Index i) const {
  PngImage png = read_png(path(info(i).image));
  if (png.channels != 3 || png.bit_depth != 8)
    throw IoError("expected 8-bit RGB image: " + info(i).image);
  ColorImage out(png.h, png.w);
  for (Index y = 0; y < png.h; ++y)
    for (Index x = 0; x < png.w; ++x)
      for (Index c = 0; c < 3; ++c)
        out.at(c, y, x) =
            static_cast<float>(png.data8[static_cast<std::size_t>((y * png.w + x) * 3 + c)]) /
            255.0f;
  return out;
}

inline IntImage Dataset::load_mask(Index i) const {
  guard::note_label_read(path(info(i).mask));
  PngImage png = read_png(path(info(i).mask));
  if (png.channels != 1 || png.bit_depth != 8)
    throw IoError("expected 8-bit gray mask: " + info(i).mask);
  IntImage out(png.h, png.w);
  for (Index p = 0; p < png.h * png.w; ++p)
    out.v[static_cast<std::size_t>(p)] = png.data8[static_cast<std::size_t>(p)];
  return out;
}

inline FloatImage Dataset::load_depth(Index i) const {
  guard::note_label_read(path(info(i).depth));
  PngImage png = read_png(path(info(i).depth));
  if (png.channels != 1 || png.bit_depth != 16)
    throw IoError("expected 16-bit gray depth: " + info(i).depth);
  FloatImage out(png.h, png.w);
  double scale = info(i).depth_scale;
  for (Index p = 0; p < png.h * png.w; ++p)
    out.v[static_cast<std::size_t>(p)] =
        static_cast<float>(png.data16[static_cast<std::size_t>(p)] * scale);
  return out;
}

}  // namespace iedp

#endif  // IEDP_DATASET_HPP
