#ifndef IEDP_GRADCHECK_SUITES_HPP
#define IEDP_GRADCHECK_SUITES_HPP

#include <string>
#include <vector>

#include "iedp/gradcheck.hpp"
#include "iedp/heads.hpp"
#include "iedp/prompt.hpp"
#include "iedp/unet.hpp"

namespace iedp {

struct SuiteEntry {
  std::string name;
  GradCheckReport report;
};

// Every differentiable primitive, checked element-by-element at 64-bit.
inline std::vector<SuiteEntry> gradcheck_ops_suite(double h = 1e-5, double tol = 1e-4) {
  using T = Tensor<double>;
  std::vector<SuiteEntry> out;

  auto run = [&](const std::string& name, ParamStore<double>& ps,
                 const std::function<Tensor<double>()>& f, Index max_entries = -1) {
    out.push_back({name, finite_diff_check(f, ps.all(), h, tol, max_entries)});
  };

  auto rnd = [](Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
    Rng rng(seed);
    return T::uniform(std::move(s), rng, lo, hi);
  };

  {
    ParamStore<double> ps(101);
    auto a = ps.add("a", rnd({3, 4}, 1)).value;
    auto b = ps.add("b", rnd({4, 2}, 2)).value;
    run("matmul", ps, [=] { return sum_all(matmul(a, b)); });
  }
  {
    ParamStore<double> ps(102);
    auto a = ps.add("a", rnd({2, 3, 4}, 3)).value;
    auto b = ps.add("b", rnd({4, 2}, 4)).value;
    run("matmul_batched", ps, [=] { return sum_all(matmul(a, b)); });
  }
  {
    ParamStore<double> ps(103);
    auto x = ps.add("x", rnd({3, 5}, 5)).value;
    auto w = rnd({3, 5}, 6);
    run("softmax", ps, [=] { return sum_all(mul(softmax(x, 1), w)); });
  }
  {
    ParamStore<double> ps(104);
    auto x = ps.add("x", rnd({4, 6}, 7)).value;
    auto g = ps.add("g", rnd({6}, 8, 0.5, 1.5)).value;
    auto b = ps.add("b", rnd({6}, 9)).value;
    auto w = rnd({4, 6}, 10);
    run("layer_norm", ps, [=] { return sum_all(mul(layer_norm(x, g, b, 1e-5), w)); });
  }
  {
    ParamStore<double> ps(105);
    auto x = ps.add("x", rnd({2, 5, 5}, 11)).value;
    auto k = ps.add("k", rnd({3, 2, 3, 3}, 12)).value;
    auto w = rnd({3, 3, 3}, 13);
    run("conv2d", ps, [=] { return sum_all(mul(conv2d(x, k, 2, 1), w)); });
  }
  {
    ParamStore<double> ps(106);
    auto q = ps.add("q", rnd({3, 4}, 14)).value;
    auto k = ps.add("k", rnd({5, 4}, 15)).value;
    auto v = ps.add("v", rnd({5, 4}, 16)).value;
    auto w = rnd({3, 4}, 17);
    run("attention", ps, [=] { return sum_all(mul(attention(q, k, v).first, w)); });
  }
  {
    ParamStore<double> ps(107);
    auto x = ps.add("x", rnd({1, 4, 5}, 18)).value;
    auto w = rnd({1, 7, 9}, 19);
    run("upsample_bilinear", ps, [=] { return sum_all(mul(upsample_bilinear(x, 7, 9), w)); });
  }
  {
    ParamStore<double> ps(108);
    auto x = ps.add("x", rnd({3, 4}, 20, 0.2, 2.0)).value;
    auto w = rnd({3, 4}, 21);
    run("add_mul_sub_neg", ps,
        [=] { return sum_all(mul(sub(add(x, x), neg(x)), w)); });
    run("silu", ps, [=] { return sum_all(mul(silu(x), w)); });
    run("relu", ps, [=] { return sum_all(mul(relu(add_scalar(x, -1.0)), w)); });
    run("sigmoid", ps, [=] { return sum_all(mul(sigmoid(x), w)); });
    run("softplus", ps, [=] { return sum_all(mul(softplus(x), w)); });
    run("exp", ps, [=] { return sum_all(mul(exp_(x), w)); });
    run("log", ps, [=] { return sum_all(mul(log_(x), w)); });
    run("scale_add_scalar", ps, [=] { return sum_all(mul(scale(add_scalar(x, 0.5), 1.7), w)); });
    run("reshape_transpose", ps,
        [=] { return sum_all(mul(transpose2d(reshape(x, {4, 3})), w)); });
    run("slice", ps, [=] { return sum_all(slice(x, 1, 1, 2)); });
    run("concat", ps, [=] {
      return sum_all(mul(concat<double>({x, x}, 0), concat<double>({w, w}, 0)));
    });
    run("gather_rows", ps, [=] { return sum_all(gather_rows(x, {2, 0, 1, 0})); });
    run("mean_rows", ps, [=] { return sum_all(mean_rows(mul(x, w))); });
    run("mean_all", ps, [=] { return mean_all(mul(x, w)); });
    run("normalize_rows", ps, [=] { return sum_all(mul(normalize_rows(x), w)); });
  }
  {
    ParamStore<double> ps(109);
    auto x = ps.add("x", rnd({3, 4}, 22)).value;
    auto b = ps.add("b", rnd({4}, 23)).value;
    auto w = rnd({3, 4}, 24);
    run("add_rowwise", ps, [=] { return sum_all(mul(add_rowwise(x, b), w)); });
  }
  {
    ParamStore<double> ps(110);
    auto x = ps.add("x", rnd({2, 3, 3}, 25)).value;
    auto b = ps.add("b", rnd({2}, 26)).value;
    auto w = rnd({2, 3, 3}, 27);
    run("add_channelwise", ps, [=] { return sum_all(mul(add_channelwise(x, b), w)); });
  }
  {
    ParamStore<double> ps(111);
    auto x = ps.add("x", rnd({3}, 28)).value;
    auto s = ps.add("s", rnd({}, 29, 0.5, 1.5)).value;
    run("scale_by", ps, [=] { return sum_all(scale_by(x, exp_(s))); });
  }
  {
    ParamStore<double> ps(112);
    auto logits = ps.add("logits", rnd({3, 4, 4}, 30)).value;
    IntImage target(4, 4);
    Rng rng(31);
    for (Index p = 0; p < 16; ++p)
      target.v[static_cast<std::size_t>(p)] =
          p == 3 ? kIgnoreLabel : static_cast<std::int32_t>(rng.below(3));
    run("cross_entropy_spatial", ps,
        [=] { return cross_entropy_spatial(logits, target, kIgnoreLabel); });
  }
  {
    ParamStore<double> ps(113);
    auto logits = ps.add("logits", rnd({4, 5}, 32)).value;
    std::vector<int> targets = {1, 0, 4, 2};
    run("cross_entropy_rows", ps, [=] { return cross_entropy_rows(logits, targets); });
  }
  {
    ParamStore<double> ps(114);
    auto pred = ps.add("pred", rnd({4, 4}, 33, 0.5, 3.0)).value;
    auto gt = rnd({4, 4}, 34, 0.5, 3.0);
    IntImage valid(4, 4, 1);
    valid.v[5] = 0;
    run("si_log_loss", ps, [=] { return si_log_loss(pred, gt, valid, 0.5); });
  }
  return out;
}

// Miniature Eq. 2 adapter, every parameter checked.
inline std::vector<SuiteEntry> gradcheck_adapter_suite(double h = 1e-5, double tol = 1e-4) {
  ParamStore<double> ps(201);
  Index d_in = 10, d_cond = 12, nq = 6, np = 5;
  ImplicitPromptModule<double> adapter(ps, "adapter", d_in, d_cond, nq, np, true);
  Rng rng(41);
  auto patches = Tensor<double>::uniform({np, d_in}, rng, -1, 1);
  auto w = Tensor<double>::uniform({nq, d_cond}, rng, -1, 1);
  auto f = [&] {
    return sum_all(mul(adapter.embed(adapter.project_visual(patches)).vectors, w));
  };
  return {{"implicit_adapter", finite_diff_check(f, ps.all(), h, tol)}};
}

inline UNetConfig miniature_unet_config() {
  UNetConfig cfg;
  cfg.latent_channels = 3;
  cfg.channels = {6, 8, 10, 12};
  cfg.d_cond = 8;
  cfg.cond_tokens = 5;
  cfg.time_dim = 8;
  cfg.time_embed = 8;
  return cfg;
}

// Miniature UNet on an 8x8 latent; entries sampled per parameter.
inline std::vector<SuiteEntry> gradcheck_unet_suite(double h = 1e-5, double tol = 1e-4,
                                                    Index entries_per_param = 6) {
  ParamStore<double> ps(301);
  UNetConfig cfg = miniature_unet_config();
  CondUNet<double> unet(ps, "unet", cfg);
  Rng rng(51);
  auto z0 = Tensor<double>::uniform({cfg.latent_channels, 8, 8}, rng, -1, 1);
  PromptEmbeddings<double> cond;
  cond.vectors = Tensor<double>::uniform({cfg.cond_tokens, cfg.d_cond}, rng, -1, 1);
  auto w1 = Tensor<double>::uniform({cfg.channels[0], 8, 8}, rng, -1, 1);
  auto w4 = Tensor<double>::uniform({cfg.channels[3], 1, 1}, rng, -1, 1);
  auto wca = Tensor<double>::uniform({cfg.cond_tokens, 8, 8}, rng, -1, 1);
  auto f = [&] {
    auto fb = unet.forward(z0, cond, 0);
    return add(sum_all(mul(fb.f1, w1)), add(sum_all(mul(fb.f4, w4)), sum_all(mul(fb.f_ca, wca))));
  };
  return {{"miniature_unet", finite_diff_check(f, ps.all(), h, tol, entries_per_param)}};
}

// Both heads (with their losses) on a random miniature bundle.
inline std::vector<SuiteEntry> gradcheck_heads_suite(double h = 1e-5, double tol = 1e-4,
                                                     Index entries_per_param = 8) {
  std::vector<SuiteEntry> out;
  UNetConfig cfg = miniature_unet_config();
  Rng rng(61);
  FeatureBundle<double> fb;
  fb.f1 = Tensor<double>::uniform({cfg.channels[0], 2, 2}, rng, -1, 1);
  fb.f2 = Tensor<double>::uniform({cfg.channels[1], 1, 1}, rng, -1, 1);
  fb.f3 = Tensor<double>::uniform({cfg.channels[2], 1, 1}, rng, -1, 1);
  fb.f4 = Tensor<double>::uniform({cfg.channels[3], 1, 1}, rng, -1, 1);
  fb.f_ca = Tensor<double>::uniform({cfg.cond_tokens, 2, 2}, rng, 0.01, 0.99);

  {
    ParamStore<double> ps(401);
    FpnHead<double> head(ps, "seg", cfg, 8, 3);
    IntImage target(16, 16);
    for (Index p = 0; p < 256; ++p)
      target.v[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(rng.below(3));
    auto f = [&] {
      return cross_entropy_spatial(seg_decode(head, fb, 16, 16), target, kIgnoreLabel);
    };
    out.push_back({"seg_head", finite_diff_check(f, ps.all(), h, tol, entries_per_param)});
  }
  {
    ParamStore<double> ps(402);
    FpnHead<double> head(ps, "depth", cfg, 8, 1);
    auto gt = Tensor<double>::uniform({16, 16}, rng, 0.5, 5.0);
    IntImage valid(16, 16, 1);
    auto f = [&] {
      return si_log_loss(reshape(depth_decode(head, fb, 16, 16), {16, 16}), gt, valid, 0.5);
    };
    out.push_back({"depth_head", finite_diff_check(f, ps.all(), h, tol, entries_per_param)});
  }
  return out;
}

}  // namespace iedp

#endif  // IEDP_GRADCHECK_SUITES_HPP
