#ifndef IEDP_NN_HPP
#define IEDP_NN_HPP

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "iedp/ops.hpp"
#include "iedp/random.hpp"
#include "iedp/tensor.hpp"

namespace iedp {

template <class S>
struct Parameter {
  Tensor<S> value;
  bool frozen = false;
  std::string name;
};

// Owns every parameter of a model under unique dotted names. Iteration is
// name-ordered so checkpoints and optimizer sweeps are deterministic.
template <class S>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

  std::uint64_t init_seed() const { return init_seed_; }

  Parameter<S>& add(const std::string& name, Tensor<S> value, bool frozen = false) {
    if (params_.count(name)) throw Error("duplicate parameter name: " + name);
    value.set_requires_grad(true);
    auto p = std::make_shared<Parameter<S>>();
    p->value = std::move(value);
    p->frozen = frozen;
    p->name = name;
    params_[name] = p;
    return *p;
  }

  Parameter<S>* find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : it->second.get();
  }

  std::vector<Parameter<S>*> all() const {
    std::vector<Parameter<S>*> out;
    for (auto& [k, v] : params_) out.push_back(v.get());
    return out;
  }

  std::vector<Parameter<S>*> trainable() const {
    std::vector<Parameter<S>*> out;
    for (auto& [k, v] : params_)
      if (!v->frozen) out.push_back(v.get());
    return out;
  }

  std::vector<Parameter<S>*> with_prefix(const std::string& prefix) const {
    std::vector<Parameter<S>*> out;
    for (auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) out.push_back(v.get());
    return out;
  }

  void freeze_prefix(const std::string& prefix) {
    for (auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) v->frozen = true;
  }

  void zero_grad() {
    for (auto& [k, v] : params_) v->value.zero_grad();
  }

  // maps autodiff node pointer -> parameter, for graph-reachability checks
  std::map<const void*, Parameter<S>*> node_index() const {
    std::map<const void*, Parameter<S>*> out;
    for (auto& [k, v] : params_) out[v->value.raw()] = v.get();
    return out;
  }

  std::size_t size() const { return params_.size(); }

  // Per-name init stream: stable under construction-order changes.
  Rng init_rng(const std::string& name) const { return Rng(mix_seed(init_seed_, fnv1a(name))); }

 private:
  std::uint64_t init_seed_;
  std::map<std::string, std::shared_ptr<Parameter<S>>> params_;
};

// ---- layers ----

template <class S>
struct Linear {
  Tensor<S> w;  // [in, out]
  Tensor<S> b;  // [out]; undefined for bias-free layers

  Linear() = default;
  // Key projections in attention are bias-free: a shared key bias shifts all
  // scores in a row equally, which softmax cancels exactly.
  Linear(ParamStore<S>& ps, const std::string& name, Index in, Index out, bool frozen = false,
         bool with_bias = true) {
    Rng rng = ps.init_rng(name);
    S std = static_cast<S>(std::sqrt(2.0 / static_cast<double>(in + out)));
    w = ps.add(name + ".w", Tensor<S>::randn({in, out}, rng, std), frozen).value;
    if (with_bias) b = ps.add(name + ".b", Tensor<S>::zeros({out}), frozen).value;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    auto y = matmul(x, w);
    return b.defined() ? add_rowwise(y, b) : y;
  }
};

template <class S>
struct Mlp {
  Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<S>& ps, const std::string& name, Index in, Index hidden, Index out,
      bool frozen = false)
      : fc1(ps, name + ".fc1", in, hidden, frozen), fc2(ps, name + ".fc2", hidden, out, frozen) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return fc2(silu(fc1(x))); }
};

template <class S>
struct LayerNormM {
  Tensor<S> gain, bias;
  S eps = S(1e-5);

  LayerNormM() = default;
  LayerNormM(ParamStore<S>& ps, const std::string& name, Index d, bool frozen = false) {
    gain = ps.add(name + ".g", Tensor<S>::ones({d}), frozen).value;
    bias = ps.add(name + ".b", Tensor<S>::zeros({d}), frozen).value;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gain, bias, eps); }
};

template <class S>
struct Conv2dLayer {
  Tensor<S> k;  // [Co,Ci,kh,kw]
  Tensor<S> b;  // [Co]
  Index stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore<S>& ps, const std::string& name, Index ci, Index co, Index ksize,
              Index stride_, Index pad_, bool frozen = false)
      : stride(stride_), pad(pad_) {
    Rng rng = ps.init_rng(name);
    S std = static_cast<S>(std::sqrt(2.0 / static_cast<double>(ci * ksize * ksize)));
    k = ps.add(name + ".k", Tensor<S>::randn({co, ci, ksize, ksize}, rng, std), frozen).value;
    b = ps.add(name + ".b", Tensor<S>::zeros({co}), frozen).value;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    return add_channelwise(conv2d(x, k, stride, pad), b);
  }
};

// [C,H,W] -> [H*W, C]
template <class S>
Tensor<S> to_tokens(const Tensor<S>& x) {
  check_shape(x.rank() == 3, "to_tokens expects [C,H,W]");
  return transpose2d(reshape(x, {x.extent(0), x.extent(1) * x.extent(2)}));
}

// [H*W, C] -> [C,H,W]
template <class S>
Tensor<S> from_tokens(const Tensor<S>& t, Index h, Index w) {
  check_shape(t.rank() == 2 && t.extent(0) == h * w, "from_tokens extent mismatch");
  return reshape(transpose2d(t), {t.extent(1), h, w});
}

// Layer norm over the channel axis of a feature map.
template <class S>
struct ChannelNorm {
  LayerNormM<S> ln;

  ChannelNorm() = default;
  ChannelNorm(ParamStore<S>& ps, const std::string& name, Index c, bool frozen = false)
      : ln(ps, name, c, frozen) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    return from_tokens(ln(to_tokens(x)), x.extent(1), x.extent(2));
  }
};

// Pre-norm transformer block (self-attention + feed-forward), used by the
// frozen dual-encoder towers.
template <class S>
struct TransformerBlock {
  LayerNormM<S> ln1, ln2;
  Linear<S> wq, wk, wv, wo;
  Mlp<S> ffn;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<S>& ps, const std::string& name, Index d, Index ffn_hidden,
                   bool frozen = false)
      : ln1(ps, name + ".ln1", d, frozen),
        ln2(ps, name + ".ln2", d, frozen),
        wq(ps, name + ".wq", d, d, frozen),
        wk(ps, name + ".wk", d, d, frozen, /*with_bias=*/false),
        wv(ps, name + ".wv", d, d, frozen),
        wo(ps, name + ".wo", d, d, frozen),
        ffn(ps, name + ".ffn", d, ffn_hidden, d, frozen) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    auto h = ln1(x);
    auto [att, w] = attention(wq(h), wk(h), wv(h));
    auto y = add(x, wo(att));
    return add(y, ffn(ln2(y)));
  }
};

}  // namespace iedp

#endif  // IEDP_NN_HPP
