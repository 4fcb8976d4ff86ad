#ifndef IEDP_TESTS_FIXTURE_HPP
#define IEDP_TESTS_FIXTURE_HPP

#include <filesystem>
#include <string>

#include "iedp/trainer.hpp"

namespace iedp_tests {

using namespace iedp;

struct TestWorld {
  std::string dir;
  std::string manifest;
  std::string encoders_ckpt;
};

// 24 synthetic samples (16 train / 8 val) plus a briefly pretrained encoder
// checkpoint; built once per process.
inline const TestWorld& test_world() {
  static TestWorld world = [] {
    TestWorld tw;
    auto p = std::filesystem::temp_directory_path() / "iedp_tests" / "world";
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    tw.dir = p.string();

    Palette pal = Palette::default6();
    auto res = write_dataset(24, tw.dir, {2.0 / 3, 1.0 / 3}, 11, 64, pal);
    tw.manifest = res.manifest_path;

    Vocabulary vocab = dataset_vocabulary(pal);
    EncoderConfig enc_cfg;
    ParamStore<float> ps(1234);
    LatentEncoder<float> latent(ps, "latent", enc_cfg.latent_channels);
    DualEncoder<float> clip(ps, "clip", enc_cfg, vocab);

    Dataset ds = Dataset::open(tw.manifest);
    std::vector<std::pair<ColorImage, std::string>> pairs;
    for (Index i : ds.split_indices("train"))
      pairs.emplace_back(ds.load_image(i), ds.info(i).caption);
    PretrainConfig pcfg;
    pcfg.iters = 12;
    pcfg.batch = 8;
    contrastive_pretrain(clip, ps, "clip", pairs, {}, pcfg);

    tw.encoders_ckpt = tw.dir + "/encoders.bin";
    save_encoders_checkpoint(tw.encoders_ckpt, ps, enc_cfg, vocab.size());
    return tw;
  }();
  return world;
}

inline RunConfig small_run_config(const std::string& out_sub) {
  const TestWorld& tw = test_world();
  RunConfig cfg;
  cfg.data_manifest = tw.manifest;
  cfg.encoders_checkpoint = tw.encoders_ckpt;
  cfg.out_dir = tw.dir + "/" + out_sub;
  cfg.task = Task::segmentation;
  cfg.base_lr = 1e-3;
  cfg.weight_decay = 0.01;
  cfg.max_iters = 6;
  cfg.batch_size = 2;
  cfg.seed = 5;
  cfg.nq = 64;
  cfg.d_cond = 16;
  cfg.unet_channels = {8, 12, 16, 20};
  cfg.checkpoint_every = 3;
  cfg.eval_at_end = false;
  return cfg;
}

}  // namespace iedp_tests

#endif
