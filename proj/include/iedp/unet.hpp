#ifndef IEDP_UNET_HPP
#define IEDP_UNET_HPP

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "iedp/nn.hpp"
#include "iedp/prompt.hpp"

namespace iedp {

// Stage i lives at image-relative stride 8*2^i (latent input is stride 8).
struct UNetConfig {
  Index latent_channels = 8;
  std::array<Index, 4> channels = {32, 64, 96, 128};
  std::array<bool, 4> encoder_cross_attn = {false, true, true, false};
  std::array<bool, 4> decoder_cross_attn = {false, true, true, false};
  Index d_cond = 64;
  Index cond_tokens = 256;
  Index time_dim = 32;
  Index time_embed = 64;

  void validate() const {
    int n_enc = 0, n_dec = 0;
    for (bool b : encoder_cross_attn) n_enc += b;
    for (bool b : decoder_cross_attn) n_dec += b;
    if (n_enc == 0 || n_dec == 0)
      throw Error("UNetConfig: cross-attention must exist in both encoder and decoder halves");
    for (Index c : channels)
      if (c < 1) throw Error("UNetConfig: channels must be positive");
  }
};

inline std::pair<int, int> count_cross_attention_blocks(const UNetConfig& cfg) {
  int n_enc = 0, n_dec = 0;
  for (bool b : cfg.encoder_cross_attn) n_enc += b;
  for (bool b : cfg.decoder_cross_attn) n_dec += b;
  return {n_enc, n_dec};
}

// F1..F4 from the last layer of each decoder block; F_CA is the average of
// every cross-attention map resized to the stride-8 grid. Each pre-average
// map is row-stochastic over tokens, so F_CA token sums stay at 1.
template <class S>
struct FeatureBundle {
  Tensor<S> f1, f2, f3, f4;
  Tensor<S> f_ca;  // [K, H/8, W/8], K = cond token count
};

template <class S>
struct ResBlock {
  ChannelNorm<S> n1, n2;
  Conv2dLayer<S> conv1, conv2, skip;
  Linear<S> time_proj;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParamStore<S>& ps, const std::string& name, Index cin, Index cout, Index time_embed)
      : n1(ps, name + ".n1", cin),
        n2(ps, name + ".n2", cout),
        conv1(ps, name + ".conv1", cin, cout, 3, 1, 1),
        conv2(ps, name + ".conv2", cout, cout, 3, 1, 1),
        time_proj(ps, name + ".temb", time_embed, cout),
        has_skip(cin != cout) {
    if (has_skip) skip = Conv2dLayer<S>(ps, name + ".skip", cin, cout, 1, 1, 0);
  }

  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& t_emb) const {
    auto h = conv1(silu(n1(x)));
    auto tb = reshape(time_proj(t_emb), {h.extent(0)});
    h = conv2(silu(n2(add_channelwise(h, tb))));
    return add(has_skip ? skip(x) : x, h);
  }
};

template <class S>
struct CapturedAttention {
  Tensor<S> weights;  // [H*W, K], row-stochastic
  Index h = 0, w = 0;
};

template <class S>
struct CrossAttnBlock {
  LayerNormM<S> ln;
  Linear<S> wq, wk, wv, wo;

  CrossAttnBlock() = default;
  CrossAttnBlock(ParamStore<S>& ps, const std::string& name, Index c, Index d_cond)
      : ln(ps, name + ".ln", c),
        wq(ps, name + ".wq", c, c),
        wk(ps, name + ".wk", d_cond, c, false, /*with_bias=*/false),
        wv(ps, name + ".wv", d_cond, c),
        wo(ps, name + ".wo", c, c) {}

  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& cond,
                       std::vector<CapturedAttention<S>>& captures) const {
    Index h = x.extent(1), w = x.extent(2);
    auto tok = to_tokens(x);
    auto [att, weights] = attention(wq(ln(tok)), wk(cond), wv(cond));
    captures.push_back({weights, h, w});
    return from_tokens(add(tok, wo(att)), h, w);
  }
};

// Cross-attention-conditioned UNet used purely as a t=0 feature extractor.
template <class S>
class CondUNet {
 public:
  CondUNet() = default;

  CondUNet(ParamStore<S>& ps, const std::string& prefix, UNetConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const auto& ch = cfg_.channels;
    time_mlp_ = Mlp<S>(ps, prefix + ".time", cfg_.time_dim, cfg_.time_embed, cfg_.time_embed);
    stem_ = Conv2dLayer<S>(ps, prefix + ".stem", cfg_.latent_channels, ch[0], 3, 1, 1);
    for (int i = 0; i < 4; ++i) {
      enc_rb_[i] = ResBlock<S>(ps, prefix + ".enc" + std::to_string(i),
                               i == 0 ? ch[0] : ch[i], ch[i], cfg_.time_embed);
      if (cfg_.encoder_cross_attn[static_cast<std::size_t>(i)])
        enc_ca_[i] = CrossAttnBlock<S>(ps, prefix + ".enc" + std::to_string(i) + ".ca", ch[i],
                                       cfg_.d_cond);
      if (i < 3)
        down_[i] = Conv2dLayer<S>(ps, prefix + ".down" + std::to_string(i), ch[i], ch[i + 1], 3,
                                  2, 1);
    }
    mid_ = ResBlock<S>(ps, prefix + ".mid", ch[3], ch[3], cfg_.time_embed);
    for (int i = 3; i >= 0; --i) {
      Index cin = (i == 3 ? ch[3] : ch[i + 1]) + ch[i];  // upsampled + skip concat
      dec_rb_[i] = ResBlock<S>(ps, prefix + ".dec" + std::to_string(i), cin, ch[i],
                               cfg_.time_embed);
      if (cfg_.decoder_cross_attn[static_cast<std::size_t>(i)])
        dec_ca_[i] = CrossAttnBlock<S>(ps, prefix + ".dec" + std::to_string(i) + ".ca", ch[i],
                                       cfg_.d_cond);
    }
  }

  const UNetConfig& config() const { return cfg_; }

  FeatureBundle<S> forward(const Tensor<S>& z0, const PromptEmbeddings<S>& cond,
                           std::int64_t t = 0) const {
    if (t != 0)
      throw Error("unsupported timestep " + std::to_string(t) +
                  ": this artifact extracts features at t=0 only");
    check_shape(z0.rank() == 3 && z0.extent(0) == cfg_.latent_channels,
                "unet_forward expects z0 [" + std::to_string(cfg_.latent_channels) +
                    ",h,w], got " + shape_str(z0.shape()));
    check_shape(cond.vectors.rank() == 2 && cond.vectors.extent(0) == cfg_.cond_tokens &&
                    cond.vectors.extent(1) == cfg_.d_cond,
                "unet_forward conditioning must be [" + std::to_string(cfg_.cond_tokens) + "," +
                    std::to_string(cfg_.d_cond) + "], got " + shape_str(cond.vectors.shape()));
    Index h8 = z0.extent(1), w8 = z0.extent(2);
    check_shape(h8 % 8 == 0 && w8 % 8 == 0,
                "unet_forward latent extents must be multiples of 8 (input a multiple of 64), got " +
                    shape_str(z0.shape()));

    std::vector<CapturedAttention<S>> captures;
    auto t_emb = time_mlp_(timestep_embedding(t));

    std::array<Tensor<S>, 4> enc;
    auto x = stem_(z0);
    for (int i = 0; i < 4; ++i) {
      x = enc_rb_[i](x, t_emb);
      if (cfg_.encoder_cross_attn[static_cast<std::size_t>(i)])
        x = enc_ca_[i](x, cond.vectors, captures);
      enc[static_cast<std::size_t>(i)] = x;
      if (i < 3) x = down_[i](x);
    }
    x = mid_(x, t_emb);

    FeatureBundle<S> out;
    std::array<Tensor<S>*, 4> taps = {&out.f1, &out.f2, &out.f3, &out.f4};
    for (int i = 3; i >= 0; --i) {
      if (i < 3)
        x = upsample_bilinear(x, enc[static_cast<std::size_t>(i)].extent(1),
                              enc[static_cast<std::size_t>(i)].extent(2));
      x = dec_rb_[i](concat<S>({x, enc[static_cast<std::size_t>(i)]}, 0), t_emb);
      if (cfg_.decoder_cross_attn[static_cast<std::size_t>(i)])
        x = dec_ca_[i](x, cond.vectors, captures);
      *taps[static_cast<std::size_t>(i)] = x;
    }

    auto [n_enc, n_dec] = count_cross_attention_blocks(cfg_);
    if (static_cast<int>(captures.size()) != n_enc + n_dec)
      throw Error("cross-attention capture count " + std::to_string(captures.size()) +
                  " does not match configured blocks " + std::to_string(n_enc + n_dec));

    Tensor<S> acc;
    for (const auto& cap : captures) {
      auto map = reshape(transpose2d(cap.weights), {cfg_.cond_tokens, cap.h, cap.w});
      if (cap.h != h8 || cap.w != w8) map = upsample_bilinear(map, h8, w8);
      acc = acc.defined() ? add(acc, map) : map;
    }
    out.f_ca = scale(acc, S(1) / static_cast<S>(captures.size()));
    return out;
  }

 private:
  Tensor<S> timestep_embedding(std::int64_t t) const {
    // standard sinusoidal embedding, evaluated at the pinned t=0
    Index half = cfg_.time_dim / 2;
    auto e = Tensor<S>::zeros({1, cfg_.time_dim});
    for (Index i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                             static_cast<double>(half));
      e.array()[i] = static_cast<S>(std::sin(static_cast<double>(t) * freq));
      e.array()[half + i] = static_cast<S>(std::cos(static_cast<double>(t) * freq));
    }
    return e;
  }

  UNetConfig cfg_;
  Mlp<S> time_mlp_;
  Conv2dLayer<S> stem_;
  std::array<ResBlock<S>, 4> enc_rb_;
  std::array<CrossAttnBlock<S>, 4> enc_ca_;
  std::array<Conv2dLayer<S>, 3> down_;
  ResBlock<S> mid_;
  std::array<ResBlock<S>, 4> dec_rb_;
  std::array<CrossAttnBlock<S>, 4> dec_ca_;
};

}  // namespace iedp

#endif  // IEDP_UNET_HPP
