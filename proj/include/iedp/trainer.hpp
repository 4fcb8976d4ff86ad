#ifndef IEDP_TRAINER_HPP
#define IEDP_TRAINER_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <unordered_set>

#include "iedp/eval.hpp"
#include "iedp/model.hpp"
#include "iedp/optim.hpp"

namespace iedp {

inline double poly_lr(std::int64_t iter, const RunConfig& cfg) {
  return poly_lr(iter, cfg.base_lr, cfg.max_iters, cfg.poly_power);
}

// Names of parameters whose autodiff nodes are reachable from a loss graph.
template <class S>
std::set<std::string> reachable_param_names(const Tensor<S>& root, const ParamStore<S>& store) {
  auto index = store.node_index();
  std::set<std::string> out;
  std::unordered_set<const TensorNode<S>*> seen;
  std::vector<const TensorNode<S>*> stack = {root.raw()};
  while (!stack.empty()) {
    const TensorNode<S>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    auto it = index.find(n);
    if (it != index.end()) out.insert(it->second->name);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return out;
}

// One training example after crop/flip, with its frozen features precomputed.
template <class S>
struct BatchItem {
  Tensor<S> z0;       // [C_lat, h/8, w/8], constant
  Tensor<S> patches;  // [Np, D] CLIP patch features, constant
  TextEncoding<S> text;
  IntImage mask;
  FloatImage depth;
  Index h = 0, w = 0;
};

template <class S = float>
class Trainer {
 public:
  Trainer(RunConfig cfg, Dataset ds)
      : cfg_(std::move(cfg)),
        ds_(std::move(ds)),
        vocab_(load_vocab(ds_)),
        model_(build_model(cfg_, ds_, vocab_)),
        opt_(static_cast<S>(cfg_.adam_beta1), static_cast<S>(cfg_.adam_beta2),
             static_cast<S>(cfg_.adam_eps)) {
    model_.load_encoders(cfg_.encoders_checkpoint);
    train_indices_ = ds_.split_indices(cfg_.train_split);
    if (train_indices_.empty()) throw Error("no samples in split: " + cfg_.train_split);
    build_cache();
    if (cfg_.conditioning == Conditioning::unaligned_text) {
      NoGradGuard ng;
      std::vector<int> all_ids;
      for (const auto& e : ds_.palette().entries) all_ids.push_back(e.id);
      unaligned_text_ = model_.clip().encode_text(build_prompt(all_ids, ds_.palette()).text);
      unaligned_text_->tokens_real = unaligned_text_->tokens_real.detach();
    }
  }

  PerceptionModel<S>& model() { return model_; }
  const RunConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return ds_; }
  AdamW<S>& optimizer() { return opt_; }

  // Deterministic batch for an iteration: i.i.d. sample draws plus a flip bit.
  std::vector<BatchItem<S>> sample_batch(std::int64_t iter) const {
    Rng rng(mix_seed(cfg_.seed, 0xba7c4 + static_cast<std::uint64_t>(iter)));
    std::vector<BatchItem<S>> out;
    for (std::int64_t b = 0; b < cfg_.batch_size; ++b) {
      std::size_t k = static_cast<std::size_t>(rng.below(train_indices_.size()));
      bool flip = rng.below(2) == 1;
      out.push_back(cache_[k * 2 + (flip ? 1 : 0)]);
    }
    return out;
  }

  // One §III-C step: both branches through the shared UNet/head, one backward
  // on the Eq. 5 sum, one optimizer update skipping the frozen set.
  LossReport joint_step(const std::vector<BatchItem<S>>& batch, double lr) {
    if (batch.empty()) throw Error("joint_step: empty batch");
    model_.store().zero_grad();
    auto joint = compute_losses(batch);
    backward(joint.total);
    opt_.step(model_.store().trainable(), static_cast<S>(lr), static_cast<S>(cfg_.weight_decay));
    return joint.report();
  }

  JointLoss<S> compute_losses(const std::vector<BatchItem<S>>& batch) {
    S inv_b = S(1) / static_cast<S>(batch.size());
    Tensor<S> l_imp, l_exp;
    for (const auto& item : batch) {
      PromptEmbeddings<S> cond_p =
          cfg_.conditioning == Conditioning::implicit
              ? model_.implicit_condition_from_patches(item.patches)
              : model_.explicit_condition(*unaligned_text_);
      auto li = task_loss(model_.task_forward(item.z0, cond_p, item.h, item.w), item);
      l_imp = l_imp.defined() ? add(l_imp, li) : li;
      if (cfg_.explicit_branch_enabled) {
        auto cond_e = model_.explicit_condition(item.text);
        auto le = task_loss(model_.task_forward(item.z0, cond_e, item.h, item.w), item);
        l_exp = l_exp.defined() ? add(l_exp, le) : le;
      }
    }
    l_imp = scale(l_imp, inv_b);
    l_exp = cfg_.explicit_branch_enabled ? scale(l_exp, inv_b) : Tensor<S>::scalar(S(0));
    return total_loss(l_imp, l_exp);
  }

  Tensor<S> task_loss(const Tensor<S>& out, const BatchItem<S>& item) {
    if (cfg_.task == Task::segmentation)
      return cross_entropy_spatial(out, item.mask, kIgnoreLabel, &warn_all_ignored_);
    IntImage valid(item.h, item.w, 1);
    for (Index p = 0; p < item.h * item.w; ++p)
      if (!(item.depth.v[static_cast<std::size_t>(p)] > 0))
        valid.v[static_cast<std::size_t>(p)] = 0;
    auto gt = to_tensor<S>(item.depth);
    return si_log_loss(reshape(out, {item.h, item.w}), gt, valid,
                       static_cast<S>(cfg_.si_lambda), &warn_empty_depth_);
  }

  // ---- helpers used by the CLI run loop and tests ----

  BatchItem<S> make_item(const ColorImage& image, const IntImage& mask, const FloatImage& depth,
                         const std::vector<int>& class_ids, const std::string& caption) const {
    BatchItem<S> item;
    item.h = image.h;
    item.w = image.w;
    item.mask = mask;
    item.depth = depth;
    NoGradGuard ng;
    auto img = to_tensor<S>(image);
    item.z0 = model_.latent_encoder().encode(img).detach();
    item.patches = model_.clip().encode_image(img).patches.detach();
    std::string prompt_text =
        cfg_.resolved_explicit_source() == ExplicitSource::ground_truth_labels
            ? build_prompt(class_ids, ds_.palette(), &warn_empty_prompt_).text
            : caption;
    item.text = model_.clip().encode_text(prompt_text);
    item.text.tokens_real = item.text.tokens_real.detach();
    item.text.tokens_padded = Tensor<S>();
    item.text.pooled = Tensor<S>();
    return item;
  }

  int warnings_all_ignored() const { return warn_all_ignored_; }

 private:
  static Vocabulary load_vocab(const Dataset& ds) {
    auto vpath = std::filesystem::path(ds.manifest().root) / "vocab.txt";
    if (std::filesystem::exists(vpath)) return Vocabulary::load(vpath.string());
    return dataset_vocabulary(ds.palette());
  }

  static PerceptionModel<S> build_model(const RunConfig& cfg, const Dataset& ds,
                                        const Vocabulary& vocab) {
    int vocab_size = 0;
    EncoderConfig enc = read_encoder_config(cfg.encoders_checkpoint, &vocab_size);
    if (vocab_size != vocab.size())
      throw ConfigError("encoder checkpoint vocabulary size " + std::to_string(vocab_size) +
                        " does not match dataset vocabulary " + std::to_string(vocab.size()));
    if (enc.latent_channels != cfg.latent_channels)
      throw ConfigError("latent_channels mismatch: config " + std::to_string(cfg.latent_channels) +
                        " vs encoder checkpoint " + std::to_string(enc.latent_channels));
    ModelConfig mc = ModelConfig::from_run(cfg, ds.palette());
    mc.enc = enc;
    return PerceptionModel<S>(mc, vocab, cfg.seed);
  }

  void build_cache() {
    // Frozen producers are deterministic, so per-sample features are
    // precomputed for both flip orientations. Requires train images at the
    // tower input size; the synthetic benchmark satisfies this.
    cache_.clear();
    cache_.reserve(train_indices_.size() * 2);
    for (Index idx : train_indices_) {
      ColorImage image = ds_.load_image(idx);
      if (image.h != model_.config().enc.image_size || image.w != model_.config().enc.image_size)
        throw Error("training expects images at the tower input size " +
                    std::to_string(model_.config().enc.image_size) + ", got " +
                    std::to_string(image.h) + "x" + std::to_string(image.w));
      IntImage mask = cfg_.task == Task::segmentation ? ds_.load_mask(idx) : IntImage(image.h, image.w, 0);
      FloatImage depth = cfg_.task == Task::depth ? ds_.load_depth(idx) : FloatImage(image.h, image.w, 1.f);
      auto ids = ds_.class_ids(idx);
      const std::string& caption = ds_.info(idx).caption;
      cache_.push_back(make_item(image, mask, depth, ids, caption));
      cache_.push_back(make_item(hflip(image), hflip(mask), hflip(depth), ids, caption));
    }
  }

  RunConfig cfg_;
  Dataset ds_;
  Vocabulary vocab_;
  PerceptionModel<S> model_;
  AdamW<S> opt_;
  std::vector<Index> train_indices_;
  std::vector<BatchItem<S>> cache_;  // [sample][flip]
  std::optional<TextEncoding<S>> unaligned_text_;
  int warn_all_ignored_ = 0;
  int warn_empty_depth_ = 0;
  mutable int warn_empty_prompt_ = 0;
};

struct RunArtifacts {
  std::string run_dir;
  std::string loss_csv;
  std::string final_checkpoint;
  std::string metrics_json;
  LossReport first, last;
  MetricsJson metrics;
  std::int64_t iters_run = 0;
};

namespace detail_train {

inline std::string ckpt_name(std::int64_t iter) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%07lld.bin", static_cast<long long>(iter));
  return buf;
}

inline std::optional<std::string> latest_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir)) return std::nullopt;
  std::optional<std::string> best;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0 && name.size() == 16 && name.find(".bin") == 12) {
      if (!best || name > *best) best = name;
    }
  }
  if (!best) return std::nullopt;
  return (fs::path(dir) / *best).string();
}

}  // namespace detail_train

// Full training run: config snapshot, per-iteration loss CSV, periodic
// checkpoints, optional final evaluation. stop_after >= 0 simulates an
// interruption after that many iterations (used by the resume tests).
template <class S = float>
RunArtifacts run_training(const RunConfig& cfg, std::int64_t stop_after = -1) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  Dataset ds = Dataset::open(cfg.data_manifest);
  Trainer<S> trainer(cfg, std::move(ds));

  // resume before anything is written
  std::int64_t start_iter = 0;
  if (cfg.resume != "none") {
    std::optional<std::string> ckpt;
    if (cfg.resume == "auto")
      ckpt = detail_train::latest_checkpoint(cfg.out_dir);
    else
      ckpt = cfg.resume;
    if (ckpt && fs::exists(*ckpt)) {
      trainer.model().load(*ckpt);
      NamedTensors opt_state = load_named_tensors(*ckpt + ".opt");
      trainer.optimizer().load_state(opt_state);
      start_iter = static_cast<std::int64_t>(opt_state.get_scalar("meta.iter"));
    }
  }

  {
    std::ofstream os(fs::path(cfg.out_dir) / "config.txt", std::ios::trunc);
    os << cfg.to_kv().to_text();
  }

  // loss CSV; on resume, keep only rows before start_iter
  std::string csv_path = (fs::path(cfg.out_dir) / "loss.csv").string();
  std::vector<std::string> kept;
  if (start_iter > 0 && fs::exists(csv_path)) {
    std::ifstream is(csv_path);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      if (std::stoll(line.substr(0, comma)) < start_iter) kept.push_back(line);
    }
  }
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << "iter,lr,l_imp,l_exp,l_total\n";
  for (const auto& line : kept) csv << line << '\n';

  auto save_ckpt = [&](std::int64_t next_iter, const std::string& name) {
    std::string path = (fs::path(cfg.out_dir) / name).string();
    trainer.model().save(path);
    NamedTensors opt_state;
    trainer.optimizer().save_state(opt_state);
    opt_state.put_scalar("meta.iter", static_cast<float>(next_iter));
    save_named_tensors(path + ".opt", opt_state);
    return path;
  };

  RunArtifacts art;
  art.run_dir = cfg.out_dir;
  art.loss_csv = csv_path;

  char line[160];
  for (std::int64_t iter = start_iter; iter < cfg.max_iters; ++iter) {
    double lr = poly_lr(iter, cfg);
    auto batch = trainer.sample_batch(iter);
    LossReport rep = trainer.joint_step(batch, lr);
    if (iter == start_iter) art.first = rep;
    art.last = rep;
    ++art.iters_run;
    std::snprintf(line, sizeof(line), "%lld,%.10g,%.9g,%.9g,%.9g", static_cast<long long>(iter),
                  lr, rep.l_imp, rep.l_exp, rep.l_total);
    csv << line << '\n';
    bool interrupted = stop_after >= 0 && (iter - start_iter + 1) >= stop_after;
    if ((iter + 1) % cfg.checkpoint_every == 0 || interrupted)
      save_ckpt(iter + 1, detail_train::ckpt_name(iter + 1));
    if (interrupted) {
      csv.flush();
      return art;
    }
  }
  csv.flush();

  art.final_checkpoint = save_ckpt(cfg.max_iters, "ckpt_final.bin");

  if (cfg.eval_at_end) {
    EvalProtocol proto;
    proto.crop = cfg.eval_crop;
    proto.stride = cfg.eval_stride;
    proto.tta = cfg.eval_tta;
    proto.multiscale = cfg.eval_multiscale;
    MetricsJson m;
    if (cfg.task == Task::segmentation) {
      auto r = evaluate_segmentation(trainer.model(), trainer.dataset(), cfg.val_split, proto);
      m.miou_ss = r.miou_ss;
      if (r.miou_ms) m.miou_ms = *r.miou_ms;
      write_per_class_iou_csv((fs::path(cfg.out_dir) / "per_class_iou.csv").string(),
                              trainer.dataset().palette(), r.per_class);
    } else {
      auto dm = evaluate_depth(trainer.model(), trainer.dataset(), cfg.val_split, proto);
      m.rmse = dm.rmse;
      m.rel = dm.rel;
      m.log10 = dm.log10;
      m.delta1 = dm.delta1;
      m.delta2 = dm.delta2;
      m.delta3 = dm.delta3;
    }
    art.metrics = m;
    art.metrics_json = (fs::path(cfg.out_dir) / "metrics.json").string();
    write_metrics_json(art.metrics_json, m);
  }
  return art;
}

}  // namespace iedp

#endif  // IEDP_TRAINER_HPP
