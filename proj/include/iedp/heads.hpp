#ifndef IEDP_HEADS_HPP
#define IEDP_HEADS_HPP

#include <string>

#include "iedp/unet.hpp"

namespace iedp {

// Semantic-FPN-style trunk shared by both task heads: 1x1 laterals, top-down
// sum at stride 8, fused conv, 1x1 prediction, x8 bilinear upsample. F_CA is
// concatenated onto F1 channel-wise before the merge.
template <class S>
class FpnHead {
 public:
  FpnHead() = default;

  FpnHead(ParamStore<S>& ps, const std::string& prefix, const UNetConfig& unet, Index fpn_dim,
          Index out_channels)
      : out_channels_(out_channels) {
    const auto& ch = unet.channels;
    lat1_ = Conv2dLayer<S>(ps, prefix + ".lat1", ch[0] + unet.cond_tokens, fpn_dim, 1, 1, 0);
    lat2_ = Conv2dLayer<S>(ps, prefix + ".lat2", ch[1], fpn_dim, 1, 1, 0);
    lat3_ = Conv2dLayer<S>(ps, prefix + ".lat3", ch[2], fpn_dim, 1, 1, 0);
    lat4_ = Conv2dLayer<S>(ps, prefix + ".lat4", ch[3], fpn_dim, 1, 1, 0);
    fuse_ = Conv2dLayer<S>(ps, prefix + ".fuse", fpn_dim, fpn_dim, 3, 1, 1);
    pred_ = Conv2dLayer<S>(ps, prefix + ".pred", fpn_dim, out_channels, 1, 1, 0);
  }

  Index out_channels() const { return out_channels_; }

  // raw prediction map at full input resolution [out_channels, H, W]
  Tensor<S> operator()(const FeatureBundle<S>& fb, Index out_h, Index out_w) const {
    Index h8 = fb.f1.extent(1), w8 = fb.f1.extent(2);
    auto p1 = lat1_(concat<S>({fb.f1, fb.f_ca}, 0));
    auto p2 = upsample_bilinear(lat2_(fb.f2), h8, w8);
    auto p3 = upsample_bilinear(lat3_(fb.f3), h8, w8);
    auto p4 = upsample_bilinear(lat4_(fb.f4), h8, w8);
    auto s = silu(fuse_(add(add(p1, p2), add(p3, p4))));
    return upsample_bilinear(pred_(s), out_h, out_w);
  }

 private:
  Index out_channels_ = 0;
  Conv2dLayer<S> lat1_, lat2_, lat3_, lat4_, fuse_, pred_;
};

// logits [num_classes, H, W] at input resolution
template <class S>
Tensor<S> seg_decode(const FpnHead<S>& head, const FeatureBundle<S>& fb, Index h, Index w) {
  return head(fb, h, w);
}

// strictly positive depth [1, H, W]
template <class S>
Tensor<S> depth_decode(const FpnHead<S>& head, const FeatureBundle<S>& fb, Index h, Index w) {
  check_shape(head.out_channels() == 1, "depth head must emit one channel");
  return softplus(head(fb, h, w));
}

struct LossReport {
  double l_imp = 0, l_exp = 0, l_total = 0;
};

template <class S>
struct JointLoss {
  Tensor<S> imp, exp, total;

  LossReport report() const {
    return {static_cast<double>(imp.item()), static_cast<double>(exp.item()),
            static_cast<double>(total.item())};
  }
};

// Eq. 5: one graph, one backward; gradients from both branches accumulate.
template <class S>
JointLoss<S> total_loss(const Tensor<S>& l_imp, const Tensor<S>& l_exp) {
  JointLoss<S> j;
  j.imp = l_imp;
  j.exp = l_exp;
  j.total = add(l_imp, l_exp);
  return j;
}

}  // namespace iedp

#endif  // IEDP_HEADS_HPP
