#ifndef IEDP_MODEL_HPP
#define IEDP_MODEL_HPP

#include <memory>
#include <optional>
#include <string>

#include "iedp/checkpoint.hpp"
#include "iedp/config.hpp"
#include "iedp/dataset.hpp"
#include "iedp/encoders.hpp"
#include "iedp/guard.hpp"
#include "iedp/heads.hpp"
#include "iedp/prompt.hpp"
#include "iedp/unet.hpp"

namespace iedp {

struct ModelConfig {
  Task task = Task::segmentation;
  Index num_classes = 6;
  EncoderConfig enc;
  Index nq = 256;
  Index d_cond = 64;
  bool position_embeddings = true;
  AdapterKind adapter_kind = AdapterKind::learnable_queries;
  Conditioning conditioning = Conditioning::implicit;
  std::array<Index, 4> unet_channels = {32, 64, 96, 128};
  Index fpn_dim = 64;
  double si_lambda = 0.5;

  // the mlp_only adapter emits one token per patch
  Index effective_cond_tokens() const {
    return adapter_kind == AdapterKind::learnable_queries ? nq : enc.num_patches();
  }

  static ModelConfig from_run(const RunConfig& rc, const Palette& palette) {
    ModelConfig mc;
    mc.task = rc.task;
    mc.num_classes = palette.num_classes();
    mc.enc.latent_channels = rc.latent_channels;
    mc.nq = rc.nq;
    mc.d_cond = rc.d_cond;
    mc.position_embeddings = rc.position_embeddings;
    mc.adapter_kind = rc.adapter_kind;
    mc.conditioning = rc.conditioning;
    for (int i = 0; i < 4; ++i)
      mc.unet_channels[static_cast<std::size_t>(i)] = rc.unet_channels[static_cast<std::size_t>(i)];
    mc.si_lambda = rc.si_lambda;
    return mc;
  }
};

inline const std::vector<std::string>& frozen_prefixes() {
  static const std::vector<std::string> p = {"latent.", "clip."};
  return p;
}

// The full perception model. Implicit and explicit branches run through the
// same UNet/head parameter objects; the prompt modules are branch-private.
template <class S>
class PerceptionModel {
 public:
  explicit PerceptionModel(ModelConfig cfg, const Vocabulary& vocab, std::uint64_t init_seed)
      : cfg_(cfg), store_(init_seed) {
    latent_ = LatentEncoder<S>(store_, "latent", cfg_.enc.latent_channels);
    clip_ = DualEncoder<S>(store_, "clip", cfg_.enc, vocab);
    if (cfg_.adapter_kind == AdapterKind::learnable_queries)
      implicit_ = std::make_unique<ImplicitPromptModule<S>>(
          store_, "implicit", cfg_.enc.d, cfg_.d_cond, cfg_.nq, cfg_.enc.num_patches(),
          cfg_.position_embeddings);
    else
      mlp_adapter_ = std::make_unique<MlpPromptAdapter<S>>(store_, "implicit", cfg_.enc.d,
                                                           cfg_.d_cond);
    explicit_ = ExplicitPromptModule<S>(store_, "explicit", cfg_.enc.d, cfg_.d_cond,
                                        cfg_.effective_cond_tokens());

    unet_cfg_.latent_channels = cfg_.enc.latent_channels;
    unet_cfg_.channels = cfg_.unet_channels;
    unet_cfg_.d_cond = cfg_.d_cond;
    unet_cfg_.cond_tokens = cfg_.effective_cond_tokens();
    unet_ = CondUNet<S>(store_, "unet", unet_cfg_);

    Index out_ch = cfg_.task == Task::segmentation ? cfg_.num_classes : 1;
    head_ = FpnHead<S>(store_, "head", unet_cfg_, cfg_.fpn_dim, out_ch);

    for (const auto& p : frozen_prefixes()) store_.freeze_prefix(p);
  }

  const ModelConfig& config() const { return cfg_; }
  const UNetConfig& unet_config() const { return unet_cfg_; }
  ParamStore<S>& store() { return store_; }
  const ParamStore<S>& store() const { return store_; }
  const LatentEncoder<S>& latent_encoder() const { return latent_; }
  const DualEncoder<S>& clip() const { return clip_; }
  const ImplicitPromptModule<S>* implicit_module() const { return implicit_.get(); }
  const ExplicitPromptModule<S>& explicit_module() const { return explicit_; }
  const CondUNet<S>& unet() const { return unet_; }
  const FpnHead<S>& head() const { return head_; }

  // ---- conditioning streams ----

  PromptEmbeddings<S> implicit_condition_from_patches(const Tensor<S>& patches) const {
    PromptEmbeddings<S> p = implicit_
                                ? implicit_->embed(implicit_->project_visual(patches))
                                : mlp_adapter_->embed(patches);
    assert_stream_shape(p);
    return p;
  }

  PromptEmbeddings<S> implicit_condition(const Tensor<S>& image) const {
    Tensor<S> patches;
    {
      NoGradGuard ng;  // frozen tower boundary
      patches = clip_.encode_image(image).patches.detach();
    }
    return implicit_condition_from_patches(patches);
  }

  PromptEmbeddings<S> explicit_condition(const TextEncoding<S>& text) const {
    auto p = explicit_.embed(text);
    assert_stream_shape(p);
    return p;
  }

  PromptEmbeddings<S> explicit_condition_from_prompt(const std::string& prompt) const {
    TextEncoding<S> text;
    {
      NoGradGuard ng;
      text = clip_.encode_text(prompt);
      text.tokens_real = text.tokens_real.detach();
    }
    return explicit_condition(text);
  }

  // VPD-style baseline: one prompt listing every dataset class, used for both
  // training and inference.
  PromptEmbeddings<S> unaligned_condition(const Palette& palette) const {
    std::vector<int> all_ids;
    for (const auto& e : palette.entries) all_ids.push_back(e.id);
    return explicit_condition_from_prompt(build_prompt(all_ids, palette).text);
  }

  // ---- shared trunk ----

  Tensor<S> encode_latent(const Tensor<S>& image) const { return latent_.encode(image).detach(); }

  FeatureBundle<S> features(const Tensor<S>& z0, const PromptEmbeddings<S>& cond) const {
    return unet_.forward(z0, cond, 0);
  }

  Tensor<S> head_output(const FeatureBundle<S>& fb, Index h, Index w) const {
    return cfg_.task == Task::segmentation ? seg_decode(head_, fb, h, w)
                                           : depth_decode(head_, fb, h, w);
  }

  Tensor<S> task_forward(const Tensor<S>& z0, const PromptEmbeddings<S>& cond, Index h,
                         Index w) const {
    return head_output(features(z0, cond), h, w);
  }

  // Inference: implicit guidance only (or the unaligned baseline prompt when
  // so configured). Runs under the leak guard; returns a detached map
  // [num_classes,H,W] or [1,H,W].
  Tensor<S> inference_forward(const ColorImage& image, const Palette& palette) const {
    guard::LeakGuard lg;
    NoGradGuard ng;
    std::uint64_t reads_before = guard::label_reads();
    auto img = to_tensor<S>(image);
    auto z0 = latent_.encode(img);
    PromptEmbeddings<S> cond = cfg_.conditioning == Conditioning::implicit
                                   ? implicit_condition(img)
                                   : unaligned_condition(palette);
    auto out = task_forward(z0, cond, image.h, image.w);
    if (guard::label_reads() != reads_before)
      throw LeakError("label read counter moved during inference_forward");
    return out.detach();
  }

  // ---- checkpoint plumbing ----

  void load_encoders(const std::string& path) {
    NamedTensors nt = load_named_tensors(path);
    load_params_prefixed(nt, store_, frozen_prefixes());
  }

  void save(const std::string& path) const { save_params(path, store_); }
  void load(const std::string& path) { load_params(path, store_); }

 private:
  void assert_stream_shape(const PromptEmbeddings<S>& p) const {
    check_shape(p.vectors.rank() == 2 && p.vectors.extent(0) == cfg_.effective_cond_tokens() &&
                    p.vectors.extent(1) == cfg_.d_cond,
                "prompt stream must emit [" + std::to_string(cfg_.effective_cond_tokens()) + "," +
                    std::to_string(cfg_.d_cond) + "], got " + shape_str(p.vectors.shape()));
  }

  ModelConfig cfg_;
  ParamStore<S> store_;
  UNetConfig unet_cfg_;
  LatentEncoder<S> latent_;
  DualEncoder<S> clip_;
  std::unique_ptr<ImplicitPromptModule<S>> implicit_;
  std::unique_ptr<MlpPromptAdapter<S>> mlp_adapter_;
  ExplicitPromptModule<S> explicit_;
  CondUNet<S> unet_;
  FpnHead<S> head_;
};

// Encoder checkpoints carry their construction metadata so training can
// rebuild matching towers.
template <class S>
void save_encoders_checkpoint(const std::string& path, const ParamStore<S>& store,
                              const EncoderConfig& cfg, int vocab_size) {
  NamedTensors nt;
  for (auto* p : store.all()) {
    if (p->name.rfind("latent.", 0) == 0 || p->name.rfind("clip.", 0) == 0)
      nt.put_tensor(p->name, p->value);
  }
  nt.put_scalar("_meta.enc.d", static_cast<float>(cfg.d));
  nt.put_scalar("_meta.enc.patch", static_cast<float>(cfg.patch));
  nt.put_scalar("_meta.enc.image_size", static_cast<float>(cfg.image_size));
  nt.put_scalar("_meta.enc.l_max", static_cast<float>(cfg.l_max));
  nt.put_scalar("_meta.enc.latent_channels", static_cast<float>(cfg.latent_channels));
  nt.put_scalar("_meta.enc.tower_blocks", static_cast<float>(cfg.tower_blocks));
  nt.put_scalar("_meta.enc.ffn_hidden", static_cast<float>(cfg.ffn_hidden));
  nt.put_scalar("_meta.enc.vocab_size", static_cast<float>(vocab_size));
  save_named_tensors(path, nt);
}

inline EncoderConfig read_encoder_config(const std::string& path, int* vocab_size = nullptr) {
  NamedTensors nt = load_named_tensors(path);
  EncoderConfig cfg;
  cfg.d = static_cast<Index>(nt.get_scalar("_meta.enc.d"));
  cfg.patch = static_cast<Index>(nt.get_scalar("_meta.enc.patch"));
  cfg.image_size = static_cast<Index>(nt.get_scalar("_meta.enc.image_size"));
  cfg.l_max = static_cast<Index>(nt.get_scalar("_meta.enc.l_max"));
  cfg.latent_channels = static_cast<Index>(nt.get_scalar("_meta.enc.latent_channels"));
  cfg.tower_blocks = static_cast<Index>(nt.get_scalar("_meta.enc.tower_blocks"));
  cfg.ffn_hidden = static_cast<Index>(nt.get_scalar("_meta.enc.ffn_hidden"));
  if (vocab_size) *vocab_size = static_cast<int>(nt.get_scalar("_meta.enc.vocab_size"));
  return cfg;
}

}  // namespace iedp

#endif  // IEDP_MODEL_HPP
