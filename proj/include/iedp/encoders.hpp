#ifndef IEDP_ENCODERS_HPP
#define IEDP_ENCODERS_HPP

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "iedp/image.hpp"
#include "iedp/nn.hpp"
#include "iedp/optim.hpp"
#include "iedp/vocab.hpp"

namespace iedp {

struct EncoderConfig {
  Index d = 64;           // dual-encoder width
  Index patch = 8;        // image tower patch size
  Index image_size = 64;  // configured tower input extent
  Index l_max = 16;       // text length cap, tokens incl start/end
  Index latent_channels = 8;
  Index tower_blocks = 2;
  Index ffn_hidden = 128;

  Index num_patches() const { return (image_size / patch) * (image_size / patch); }
};

// Frozen random strided conv stack: image [3,H,W] -> z0 [C,H/8,W/8].
// The stride-8 contract is what the rest of the model consumes; the weights
// stay fixed for the whole lifetime of a run.
template <class S>
struct LatentEncoder {
  Conv2dLayer<S> c1, c2, c3;
  Index channels;

  LatentEncoder() = default;
  LatentEncoder(ParamStore<S>& ps, const std::string& prefix, Index c_lat)
      : c1(ps, prefix + ".c1", 3, 16, 3, 2, 1),
        c2(ps, prefix + ".c2", 16, 32, 3, 2, 1),
        c3(ps, prefix + ".c3", 32, c_lat, 3, 2, 1),
        channels(c_lat) {}

  Tensor<S> encode(const Tensor<S>& image) const {
    check_shape(image.rank() == 3 && image.extent(0) == 3,
                "encode_latent expects [3,H,W], got " + shape_str(image.shape()));
    check_shape(image.extent(1) % 8 == 0 && image.extent(2) % 8 == 0,
                "encode_latent requires extents divisible by 8, got " +
                    shape_str(image.shape()));
    NoGradGuard ng;  // frozen producer, constant w.r.t. the training graph
    return c3(silu(c2(silu(c1(image)))));
  }
};

template <class S>
struct TextEncoding {
  Tensor<S> tokens_padded;  // [L_max, D], zero rows past real_len
  Tensor<S> tokens_real;    // [Lt, D]
  Tensor<S> pooled;         // [D], unit norm
  Index real_len = 0;
  bool truncated = false;
};

template <class S>
struct ImageEncoding {
  Tensor<S> patches;  // [Np, D]
  Tensor<S> pooled;   // [D], unit norm
};

// Toy contrastive dual encoder standing in for CLIP: conv-patch image tower
// and token-embedding text tower, both tiny pre-norm transformers.
template <class S>
class DualEncoder {
 public:
  DualEncoder() = default;

  DualEncoder(ParamStore<S>& ps, const std::string& prefix, EncoderConfig cfg, Vocabulary vocab)
      : cfg_(cfg), vocab_(std::move(vocab)) {
    img_patch_ = Conv2dLayer<S>(ps, prefix + ".img.patch", 3, cfg.d, cfg.patch, cfg.patch, 0);
    Rng rp = ps.init_rng(prefix + ".img.pos");
    img_pos_ = ps.add(prefix + ".img.pos",
                      Tensor<S>::randn({cfg.num_patches(), cfg.d}, rp, S(0.02)))
                   .value;
    for (Index i = 0; i < cfg.tower_blocks; ++i)
      img_blocks_.emplace_back(ps, prefix + ".img.blk" + std::to_string(i), cfg.d,
                               cfg.ffn_hidden);
    img_ln_ = LayerNormM<S>(ps, prefix + ".img.ln", cfg.d);
    img_proj_ = Linear<S>(ps, prefix + ".img.proj", cfg.d, cfg.d);

    Rng re = ps.init_rng(prefix + ".txt.emb");
    txt_emb_ = ps.add(prefix + ".txt.emb",
                      Tensor<S>::randn({static_cast<Index>(vocab_.size()), cfg.d}, re, S(0.02)))
                   .value;
    Rng rt = ps.init_rng(prefix + ".txt.pos");
    txt_pos_ = ps.add(prefix + ".txt.pos", Tensor<S>::randn({cfg.l_max, cfg.d}, rt, S(0.02)))
                   .value;
    for (Index i = 0; i < cfg.tower_blocks; ++i)
      txt_blocks_.emplace_back(ps, prefix + ".txt.blk" + std::to_string(i), cfg.d,
                               cfg.ffn_hidden);
    txt_ln_ = LayerNormM<S>(ps, prefix + ".txt.ln", cfg.d);
    txt_proj_ = Linear<S>(ps, prefix + ".txt.proj", cfg.d, cfg.d);

    log_temp_ = ps.add(prefix + ".log_temp",
                       Tensor<S>::filled({}, static_cast<S>(std::log(1.0 / 0.07))))
                    .value;
  }

  const EncoderConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  Tensor<S> log_temp() const { return log_temp_; }

  ImageEncoding<S> encode_image(const Tensor<S>& image) const {
    check_shape(image.rank() == 3 && image.extent(0) == 3 &&
                    image.extent(1) == cfg_.image_size && image.extent(2) == cfg_.image_size,
                "encode_image_clip expects [3," + std::to_string(cfg_.image_size) + "," +
                    std::to_string(cfg_.image_size) + "], got " + shape_str(image.shape()));
    auto grid = img_patch_(image);  // [D, g, g]
    auto tok = add(to_tokens(grid), img_pos_);
    for (const auto& blk : img_blocks_) tok = blk(tok);
    tok = img_ln_(tok);
    auto pooled = normalize_rows(img_proj_(reshape(mean_rows(tok), {1, cfg_.d})));
    return {tok, reshape(pooled, {cfg_.d})};
  }

  TextEncoding<S> encode_text(const std::string& prompt) const {
    auto t = vocab_.tokenize(prompt, static_cast<int>(cfg_.l_max));
    return encode_tokens(t.ids, t.truncated);
  }

  TextEncoding<S> encode_tokens(const std::vector<int>& ids, bool truncated = false) const {
    Index lt = static_cast<Index>(ids.size());
    check_shape(lt >= 2 && lt <= cfg_.l_max, "token count " + std::to_string(lt) +
                                                 " outside [2," + std::to_string(cfg_.l_max) + "]");
    std::vector<Index> rows(ids.begin(), ids.end());
    auto tok = add(gather_rows(txt_emb_, rows), slice(txt_pos_, 0, 0, lt));
    for (const auto& blk : txt_blocks_) tok = blk(tok);
    tok = txt_ln_(tok);
    auto pooled = normalize_rows(txt_proj_(reshape(mean_rows(tok), {1, cfg_.d})));

    TextEncoding<S> out;
    out.tokens_real = tok;
    out.pooled = reshape(pooled, {cfg_.d});
    out.real_len = lt;
    out.truncated = truncated;
    if (lt == cfg_.l_max) {
      out.tokens_padded = tok;
    } else {
      auto pad = Tensor<S>::zeros({cfg_.l_max - lt, cfg_.d});
      out.tokens_padded = concat<S>({tok, pad}, 0);
    }
    return out;
  }

 private:
  EncoderConfig cfg_;
  Vocabulary vocab_;
  Conv2dLayer<S> img_patch_;
  Tensor<S> img_pos_;
  std::vector<TransformerBlock<S>> img_blocks_;
  LayerNormM<S> img_ln_;
  Linear<S> img_proj_;
  Tensor<S> txt_emb_, txt_pos_;
  std::vector<TransformerBlock<S>> txt_blocks_;
  LayerNormM<S> txt_ln_;
  Linear<S> txt_proj_;
  Tensor<S> log_temp_;
};

// ---- contrastive pretraining ----

struct PretrainConfig {
  std::int64_t iters = 500;
  Index batch = 32;
  double lr = 2e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 7;
};

struct RetrievalReport {
  double top1_image_to_text = 0;
  double top1_text_to_image = 0;
  double chance = 0;  // caption-duplicate-aware random baseline
  Index heldout = 0;
  double initial_loss = 0;
  double final_loss = 0;
  std::int64_t skipped_batches = 0;
};

// Symmetric InfoNCE over pooled vectors. pairs: (image, caption).
template <class S>
RetrievalReport contrastive_pretrain(DualEncoder<S>& enc, ParamStore<S>& store,
                                     const std::string& prefix,
                                     const std::vector<std::pair<ColorImage, std::string>>& train,
                                     const std::vector<std::pair<ColorImage, std::string>>& heldout,
                                     const PretrainConfig& cfg) {
  if (train.size() < 2) throw Error("contrastive_pretrain needs at least 2 pairs");
  AdamW<S> opt(S(0.9), S(0.999), S(1e-8));
  auto params = store.with_prefix(prefix);
  RetrievalReport report;

  Rng rng(mix_seed(cfg.seed, 0xc11b));
  auto batch_loss = [&](const std::vector<Index>& idx) {
    Index b = static_cast<Index>(idx.size());
    std::vector<Tensor<S>> img_rows, txt_rows;
    for (Index i : idx) {
      const auto& [im, cap] = train[static_cast<std::size_t>(i)];
      img_rows.push_back(reshape(enc.encode_image(to_tensor<S>(im)).pooled, {1, enc.config().d}));
      txt_rows.push_back(reshape(enc.encode_text(cap).pooled, {1, enc.config().d}));
    }
    auto imgs = concat<S>(img_rows, 0);
    auto txts = concat<S>(txt_rows, 0);
    auto logits = scale_by(matmul(imgs, transpose2d(txts)), exp_(enc.log_temp()));
    std::vector<int> diag(static_cast<std::size_t>(b));
    for (Index i = 0; i < b; ++i) diag[static_cast<std::size_t>(i)] = static_cast<int>(i);
    auto l_i2t = cross_entropy_rows(logits, diag);
    auto l_t2i = cross_entropy_rows(transpose2d(logits), diag);
    return scale(add(l_i2t, l_t2i), S(0.5));
  };

  for (std::int64_t it = 0; it < cfg.iters; ++it) {
    // batch with at least 2 distinct captions; degenerate draws are skipped
    std::vector<Index> idx;
    bool ok = false;
    for (int attempt = 0; attempt < 16 && !ok; ++attempt) {
      idx.clear();
      for (Index i = 0; i < cfg.batch; ++i)
        idx.push_back(static_cast<Index>(rng.below(train.size())));
      for (std::size_t i = 1; i < idx.size(); ++i)
        if (train[static_cast<std::size_t>(idx[i])].second !=
            train[static_cast<std::size_t>(idx[0])].second)
          ok = true;
      if (!ok) ++report.skipped_batches;
    }
    if (!ok) continue;

    store.zero_grad();
    auto loss = batch_loss(idx);
    if (it == 0) report.initial_loss = static_cast<double>(loss.item());
    report.final_loss = static_cast<double>(loss.item());
    backward(loss);
    opt.step(params, static_cast<S>(cfg.lr), static_cast<S>(cfg.weight_decay));
  }

  // held-out retrieval, scored by caption equality (captions repeat)
  if (!heldout.empty()) {
    NoGradGuard ng;
    Index n = static_cast<Index>(heldout.size());
    std::vector<Tensor<S>> img_rows, txt_rows;
    for (const auto& [im, cap] : heldout) {
      img_rows.push_back(reshape(enc.encode_image(to_tensor<S>(im)).pooled, {1, enc.config().d}));
      txt_rows.push_back(reshape(enc.encode_text(cap).pooled, {1, enc.config().d}));
    }
    auto imgs = concat<S>(img_rows, 0);
    auto txts = concat<S>(txt_rows, 0);
    auto sim = matmul(imgs, transpose2d(txts));
    Index hit_i2t = 0, hit_t2i = 0;
    for (Index i = 0; i < n; ++i) {
      Index best_t = 0, best_i = 0;
      for (Index j = 1; j < n; ++j) {
        if (sim.array()[i * n + j] > sim.array()[i * n + best_t]) best_t = j;
        if (sim.array()[j * n + i] > sim.array()[best_i * n + i]) best_i = j;
      }
      if (heldout[static_cast<std::size_t>(best_t)].second ==
          heldout[static_cast<std::size_t>(i)].second)
        ++hit_i2t;
      if (heldout[static_cast<std::size_t>(best_i)].second ==
          heldout[static_cast<std::size_t>(i)].second)
        ++hit_t2i;
    }
    report.top1_image_to_text = static_cast<double>(hit_i2t) / static_cast<double>(n);
    report.top1_text_to_image = static_cast<double>(hit_t2i) / static_cast<double>(n);
    double chance = 0;
    for (Index i = 0; i < n; ++i) {
      Index dup = 0;
      for (Index j = 0; j < n; ++j)
        if (heldout[static_cast<std::size_t>(j)].second ==
            heldout[static_cast<std::size_t>(i)].second)
          ++dup;
      chance += static_cast<double>(dup) / static_cast<double>(n);
    }
    report.chance = chance / static_cast<double>(n);
    report.heldout = n;
  }
  return report;
}

}  // namespace iedp

#endif  // IEDP_ENCODERS_HPP
