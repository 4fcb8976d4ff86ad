#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "iedp/checkpoint.hpp"
#include "iedp/config.hpp"
#include "iedp/optim.hpp"

using namespace iedp;

namespace {
std::string tmp_path(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / "iedp_tests";
  std::filesystem::create_directories(d);
  return (d / name).string();
}
}  // namespace

TEST_CASE("poly schedule closed forms and monotonicity") {
  RunConfig cfg;
  cfg.base_lr = 0.01;
  cfg.max_iters = 1000;
  cfg.poly_power = 0.9;

  CHECK(poly_lr(0, cfg) == 0.01);
  CHECK(poly_lr(500, cfg) == doctest::Approx(0.01 * std::pow(0.5, 0.9)).epsilon(1e-12));
  CHECK(poly_lr(500, cfg) == doctest::Approx(0.005358867).epsilon(1e-6));

  double prev = poly_lr(0, cfg);
  for (std::int64_t it = 1; it < 1000; it += 7) {
    double lr = poly_lr(it, cfg);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(1000, cfg), Error);
  CHECK_THROWS_AS(poly_lr(-1, cfg), Error);
}

TEST_CASE("adamw: zero grad no-op, first-step magnitude, frozen exclusion") {
  ParamStore<float> ps(1);
  auto& p = ps.add("w", Tensor<float>::filled({3}, 2.0f));
  auto& frozen = ps.add("f", Tensor<float>::filled({2}, 1.0f), true);
  AdamW<float> opt;

  // zero grad, zero weight decay: parameter unchanged
  p.value.zero_grad();
  frozen.value.zero_grad();
  opt.step(ps.all(), 0.1f, 0.0f);
  for (Index i = 0; i < 3; ++i) CHECK(p.value.array()[i] == 2.0f);

  // constant grad from zero moments: step is -lr * g/(|g| + eps) ~ -lr*sign(g)
  ParamStore<float> ps2(2);
  auto& q = ps2.add("w", Tensor<float>::zeros({2}));
  q.value.grad()[0] = 0.5f;
  q.value.grad()[1] = -2.0f;
  AdamW<float> opt2;
  opt2.step(ps2.all(), 0.1f, 0.0f);
  CHECK(q.value.array()[0] == doctest::Approx(-0.1).epsilon(1e-4));
  CHECK(q.value.array()[1] == doctest::Approx(0.1).epsilon(1e-4));

  // frozen parameters never acquire moment buffers and never move
  frozen.value.grad().setConstant(9.0f);
  opt.step(ps.all(), 0.1f, 0.0f);
  CHECK(!opt.has_state("f"));
  for (Index i = 0; i < 2; ++i) CHECK(frozen.value.array()[i] == 1.0f);
}

TEST_CASE("adamw: decoupled weight decay shrinks without grads") {
  ParamStore<float> ps(3);
  auto& p = ps.add("w", Tensor<float>::filled({1}, 1.0f));
  p.value.zero_grad();
  AdamW<float> opt;
  opt.step(ps.all(), 0.5f, 0.1f);
  CHECK(p.value.array()[0] == doctest::Approx(1.0f - 0.5f * 0.1f * 1.0f));
}

TEST_CASE("adamw: non-finite grad skips that parameter with a warning count") {
  ParamStore<float> ps(4);
  auto& a = ps.add("a", Tensor<float>::filled({2}, 1.0f));
  auto& b = ps.add("b", Tensor<float>::filled({2}, 1.0f));
  a.value.grad().setConstant(std::numeric_limits<float>::quiet_NaN());
  b.value.grad().setConstant(1.0f);
  AdamW<float> opt;
  opt.step(ps.all(), 0.1f, 0.0f);
  CHECK(opt.skipped_nonfinite() == 1);
  CHECK(a.value.array()[0] == 1.0f);   // untouched
  CHECK(b.value.array()[0] != 1.0f);   // updated
}

TEST_CASE("adamw matches a hand-stepped reference over several iterations") {
  ParamStore<double> ps(5);
  auto& p = ps.add("w", Tensor<double>::filled({1}, 0.7));
  AdamW<double> opt(0.9, 0.999, 1e-8);

  double theta = 0.7, m = 0, v = 0;
  Rng rng(9);
  for (int t = 1; t <= 7; ++t) {
    double g = rng.uniform(-1, 1);
    p.value.grad()[0] = g;
    opt.step(ps.all(), 0.05, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    double mhat = m / (1 - std::pow(0.9, t));
    double vhat = v / (1 - std::pow(0.999, t));
    theta -= 0.05 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * theta);
    CHECK(p.value.array()[0] == doctest::Approx(theta).epsilon(1e-12));
    p.value.zero_grad();
  }
}

TEST_CASE("checkpoint container round-trips names, shapes, payloads") {
  NamedTensors nt;
  nt.put("alpha", {2, 3}, {1, 2, 3, 4, 5, 6});
  nt.put("beta.gamma", {4}, {0.5f, -0.5f, 7.25f, 1e-20f});
  nt.put_scalar("meta.iter", 42.0f);
  std::string path = tmp_path("roundtrip.bin");
  save_named_tensors(path, nt);
  NamedTensors back = load_named_tensors(path);
  REQUIRE(back.entries.size() == 3);
  CHECK(back.get("alpha").first == Shape{2, 3});
  CHECK(back.get("alpha").second == std::vector<float>{1, 2, 3, 4, 5, 6});
  CHECK(back.get("beta.gamma").second[3] == 1e-20f);
  CHECK(back.get_scalar("meta.iter") == 42.0f);
}

TEST_CASE("checkpoint header is versioned") {
  std::string path = tmp_path("badmagic.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE1garbage";
  }
  CHECK_THROWS_AS(load_named_tensors(path), IoError);
}

TEST_CASE("param store save/load round-trip preserves values bit-exactly") {
  ParamStore<float> a(6), b(6);
  Rng rng(10);
  a.add("x", Tensor<float>::randn({5, 4}, rng));
  a.add("y", Tensor<float>::randn({7}, rng));
  b.add("x", Tensor<float>::zeros({5, 4}));
  b.add("y", Tensor<float>::zeros({7}));
  std::string path = tmp_path("params.bin");
  save_params(path, a);
  load_params(path, b);
  for (Index i = 0; i < 20; ++i)
    CHECK(a.find("x")->value.array()[i] == b.find("x")->value.array()[i]);
  for (Index i = 0; i < 7; ++i)
    CHECK(a.find("y")->value.array()[i] == b.find("y")->value.array()[i]);
}

TEST_CASE("duplicate parameter names are rejected") {
  ParamStore<float> ps(7);
  ps.add("x", Tensor<float>::zeros({1}));
  CHECK_THROWS_AS(ps.add("x", Tensor<float>::zeros({1})), Error);
}

TEST_CASE("config: parse, snapshot, unknown keys, enumerated validation") {
  auto kv = KvConfig::parse_text(
      "task = segmentation\n"
      "# comment line\n"
      "base_lr = 0.002\n"
      "nq = 128\n"
      "adapter_kind = mlp_only\n"
      "explicit_branch_enabled = false\n");
  RunConfig cfg = RunConfig::from_kv(kv);
  CHECK(cfg.base_lr == 0.002);
  CHECK(cfg.nq == 128);
  CHECK(cfg.adapter_kind == AdapterKind::mlp_only);
  CHECK(!cfg.explicit_branch_enabled);

  auto bad = KvConfig::parse_text("nq = 100\nbogus_key = 1\n");
  try {
    RunConfig::from_kv(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string m = e.what();
    CHECK(m.find("bogus_key") != std::string::npos);
  }

  RunConfig invalid;
  invalid.nq = 100;  // also missing paths
  try {
    invalid.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string m = e.what();
    CHECK(m.find("nq") != std::string::npos);
    CHECK(m.find("data_manifest") != std::string::npos);
  }

  // snapshot round-trips through the parser
  RunConfig full;
  full.data_manifest = "m.json";
  full.encoders_checkpoint = "e.bin";
  full.out_dir = "out";
  auto snap = full.to_kv();
  RunConfig back = RunConfig::from_kv(KvConfig::parse_text(snap.to_text()));
  CHECK(back.base_lr == full.base_lr);
  CHECK(back.unet_channels == full.unet_channels);
  CHECK(to_string(back.resolved_explicit_source()) == "ground_truth_labels");
}
