#ifndef IEDP_PROMPT_HPP
#define IEDP_PROMPT_HPP

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "iedp/encoders.hpp"
#include "iedp/nn.hpp"
#include "iedp/synth.hpp"

namespace iedp {

enum class PromptSource { implicit, explicit_labels };

template <class S>
struct PromptEmbeddings {
  Tensor<S> vectors;  // [Nq, D_cond]
  PromptSource source = PromptSource::implicit;

  void check_finite() const {
    if (!vectors.array().allFinite())
      throw Error("prompt embeddings contain non-finite values");
  }
};

struct PromptText {
  std::string text;                 // each class word followed by one space
  std::vector<std::string> classes; // dataset class-index order, duplicate-free
};

// Prompt from the ground-truth class set: words concatenated in class-index
// order, each followed by one space. Empty sets fall back to the designated
// background word.
inline PromptText build_prompt(const std::vector<int>& class_ids, const Palette& palette,
                               int* warn_empty = nullptr) {
  std::set<int> uniq(class_ids.begin(), class_ids.end());
  if (uniq.empty()) {
    if (warn_empty) ++(*warn_empty);
    uniq.insert(palette.background_id());
  }
  PromptText p;
  for (int id : uniq) {
    const auto& e = palette.by_id(id);
    p.classes.push_back(e.word);
    p.text += e.word + " ";
  }
  return p;
}

// f_pro: h = fc1(x); out = h + fc2(silu(h)). Zeroing fc2 leaves the
// first-layer affine map.
template <class S>
struct ResidualMlp {
  Linear<S> fc1, fc2;

  ResidualMlp() = default;
  ResidualMlp(ParamStore<S>& ps, const std::string& name, Index in, Index out)
      : fc1(ps, name + ".fc1", in, out), fc2(ps, name + ".fc2", out, out) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    auto h = fc1(x);
    return add(h, fc2(silu(h)));
  }
};

template <class S>
struct ImplicitResult {
  Tensor<S> q_s, q_c, out;
};

// Learnable-query adapter:
//   Q_s = Q + f_SA(f_LN(Q))
//   Q_c = Q_s + f_CA(f_LN(Q_s), f_LN(F_vis))
//   out = Q_c + f_FFN(f_LN(Q_c))
// Position embeddings enter the attention inputs only (queries before f_SA,
// keys before f_CA); the residual stream itself carries Q unchanged.
template <class S>
class ImplicitPromptModule {
 public:
  ImplicitPromptModule() = default;

  ImplicitPromptModule(ParamStore<S>& ps, const std::string& prefix, Index d_in, Index d_cond,
                       Index nq, Index np, bool position_embeddings)
      : d_in_(d_in), d_cond_(d_cond), nq_(nq), np_(np), use_pos_(position_embeddings) {
    projector_ = ResidualMlp<S>(ps, prefix + ".pro", d_in, d_cond);
    Rng rq = ps.init_rng(prefix + ".q");
    queries_ = ps.add(prefix + ".q", Tensor<S>::randn({nq, d_cond}, rq, S(0.02))).value;
    Rng rqp = ps.init_rng(prefix + ".q_pos");
    q_pos_ = ps.add(prefix + ".q_pos", Tensor<S>::randn({nq, d_cond}, rqp, S(0.02))).value;
    Rng rkp = ps.init_rng(prefix + ".k_pos");
    k_pos_ = ps.add(prefix + ".k_pos", Tensor<S>::randn({np, d_cond}, rkp, S(0.02))).value;
    ln1_ = LayerNormM<S>(ps, prefix + ".ln1", d_cond);
    ln2_ = LayerNormM<S>(ps, prefix + ".ln2", d_cond);
    ln3_ = LayerNormM<S>(ps, prefix + ".ln3", d_cond);
    sa_q_ = Linear<S>(ps, prefix + ".sa.wq", d_cond, d_cond);
    sa_k_ = Linear<S>(ps, prefix + ".sa.wk", d_cond, d_cond, false, /*with_bias=*/false);
    sa_v_ = Linear<S>(ps, prefix + ".sa.wv", d_cond, d_cond);
    sa_o_ = Linear<S>(ps, prefix + ".sa.wo", d_cond, d_cond);
    ca_q_ = Linear<S>(ps, prefix + ".ca.wq", d_cond, d_cond);
    ca_k_ = Linear<S>(ps, prefix + ".ca.wk", d_cond, d_cond, false, /*with_bias=*/false);
    ca_v_ = Linear<S>(ps, prefix + ".ca.wv", d_cond, d_cond);
    ca_o_ = Linear<S>(ps, prefix + ".ca.wo", d_cond, d_cond);
    ffn_ = Mlp<S>(ps, prefix + ".ffn", d_cond, 2 * d_cond, d_cond);
  }

  Index nq() const { return nq_; }
  Index d_cond() const { return d_cond_; }
  const Tensor<S>& queries() const { return queries_; }

  // Eq. 1 tail: per-token MLP on frozen tower patches.
  Tensor<S> project_visual(const Tensor<S>& patch_features) const {
    check_shape(patch_features.rank() == 2 && patch_features.extent(1) == d_in_,
                "project_visual expects [Np," + std::to_string(d_in_) + "], got " +
                    shape_str(patch_features.shape()));
    return projector_(patch_features);
  }

  ImplicitResult<S> embed_detailed(const Tensor<S>& f_vis) const {
    check_shape(f_vis.rank() == 2 && f_vis.extent(1) == d_cond_,
                "implicit_embed expects [Np," + std::to_string(d_cond_) + "], got " +
                    shape_str(f_vis.shape()));
    if (!f_vis.array().allFinite()) throw Error("implicit_embed: non-finite visual features");

    ImplicitResult<S> r;
    auto hq = ln1_(queries_);
    auto qk_in = use_pos_ ? add(hq, q_pos_) : hq;
    auto [sa_att, sa_w] = attention(sa_q_(qk_in), sa_k_(qk_in), sa_v_(hq));
    r.q_s = add(queries_, sa_o_(sa_att));

    auto hq2 = ln2_(r.q_s);
    auto hk = ln2_(f_vis);
    auto k_in = use_pos_ ? add(hk, key_pos_slice(f_vis.extent(0))) : hk;
    auto [ca_att, ca_w] = attention(ca_q_(hq2), ca_k_(k_in), ca_v_(hk));
    r.q_c = add(r.q_s, ca_o_(ca_att));

    r.out = add(r.q_c, ffn_(ln3_(r.q_c)));
    return r;
  }

  PromptEmbeddings<S> embed(const Tensor<S>& f_vis) const {
    PromptEmbeddings<S> p;
    p.vectors = embed_detailed(f_vis).out;
    p.source = PromptSource::implicit;
    p.check_finite();
    return p;
  }

 private:
  Tensor<S> key_pos_slice(Index np) const {
    check_shape(np == np_, "implicit_embed: key count " + std::to_string(np) +
                               " does not match configured " + std::to_string(np_));
    return k_pos_;
  }

  Index d_in_ = 0, d_cond_ = 0, nq_ = 0, np_ = 0;
  bool use_pos_ = true;
  ResidualMlp<S> projector_;
  Tensor<S> queries_, q_pos_, k_pos_;
  LayerNormM<S> ln1_, ln2_, ln3_;
  Linear<S> sa_q_, sa_k_, sa_v_, sa_o_;
  Linear<S> ca_q_, ca_k_, ca_v_, ca_o_;
  Mlp<S> ffn_;
};

// Table IV alternative: a plain MLP maps each projected patch feature to a
// conditioning token, so the token count equals Np.
template <class S>
class MlpPromptAdapter {
 public:
  MlpPromptAdapter() = default;
  MlpPromptAdapter(ParamStore<S>& ps, const std::string& prefix, Index d_in, Index d_cond)
      : d_in_(d_in), mlp_(ps, prefix + ".mlp", d_in, 2 * d_cond, d_cond) {}

  PromptEmbeddings<S> embed(const Tensor<S>& patch_features) const {
    check_shape(patch_features.rank() == 2 && patch_features.extent(1) == d_in_,
                "mlp adapter expects [Np," + std::to_string(d_in_) + "]");
    PromptEmbeddings<S> p;
    p.vectors = mlp_(patch_features);
    p.source = PromptSource::implicit;
    p.check_finite();
    return p;
  }

 private:
  Index d_in_ = 0;
  Mlp<S> mlp_;
};

// Explicit stream: frozen text-tower features of the real tokens, projected
// to the conditioning width by one shared linear map, then repeated
// (cyclically tiled and truncated) to exactly Nq rows.
template <class S>
class ExplicitPromptModule {
 public:
  ExplicitPromptModule() = default;
  ExplicitPromptModule(ParamStore<S>& ps, const std::string& prefix, Index d_txt, Index d_cond,
                       Index nq)
      : nq_(nq), proj_(ps, prefix + ".proj", d_txt, d_cond) {}

  Index nq() const { return nq_; }

  PromptEmbeddings<S> embed(const TextEncoding<S>& text) const {
    check_shape(text.real_len >= 1, "explicit_embed requires at least one real token");
    auto projected = proj_(text.tokens_real);
    std::vector<Index> idx(static_cast<std::size_t>(nq_));
    for (Index i = 0; i < nq_; ++i) idx[static_cast<std::size_t>(i)] = i % text.real_len;
    PromptEmbeddings<S> p;
    p.vectors = gather_rows(projected, idx);
    p.source = PromptSource::explicit_labels;
    p.check_finite();
    return p;
  }

 private:
  Index nq_ = 0;
  Linear<S> proj_;
};

}  // namespace iedp

#endif  // IEDP_PROMPT_HPP
