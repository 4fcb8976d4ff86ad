#ifndef IEDP_CONFIG_HPP
#define IEDP_CONFIG_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "iedp/common.hpp"

namespace iedp {

// Flat key=value text config. '#' starts a comment; blank lines ignored.
struct KvConfig {
  std::map<std::string, std::string> values;

  static KvConfig parse_file(const std::string& path);
  static KvConfig parse_text(const std::string& text);

  void set(const std::string& key, const std::string& value) { values[key] = value; }
  bool has(const std::string& key) const { return values.count(key) != 0; }
  std::string to_text() const;
};

enum class Task { segmentation, depth };
enum class AdapterKind { learnable_queries, mlp_only };
enum class ExplicitSource { auto_default, ground_truth_labels, generated_captions };
enum class Conditioning { implicit, unaligned_text };

std::string to_string(Task t);
std::string to_string(AdapterKind k);
std::string to_string(ExplicitSource s);
std::string to_string(Conditioning c);

struct RunConfig {
  // data / io
  std::string data_manifest;
  std::string encoders_checkpoint;
  std::string out_dir;

  // optimization
  Task task = Task::segmentation;
  double base_lr = 2e-3;
  double poly_power = 0.9;
  double weight_decay = 0.01;
  std::int64_t max_iters = 2000;
  std::int64_t batch_size = 4;
  std::uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // model / ablation switches
  std::int64_t nq = 256;
  bool position_embeddings = true;
  AdapterKind adapter_kind = AdapterKind::learnable_queries;
  ExplicitSource explicit_source = ExplicitSource::auto_default;
  bool explicit_branch_enabled = true;
  Conditioning conditioning = Conditioning::implicit;
  std::int64_t d_cond = 64;
  std::vector<std::int64_t> unet_channels = {32, 64, 96, 128};
  std::int64_t latent_channels = 8;
  double si_lambda = 0.5;

  // evaluation protocol
  std::int64_t eval_crop = 64;
  std::int64_t eval_stride = 43;  // ~2/3 of crop
  bool eval_at_end = true;
  bool eval_tta = true;  // depth only
  bool eval_multiscale = false;

  // run mechanics
  std::int64_t checkpoint_every = 500;
  std::string resume = "auto";  // auto | none | <path>
  std::string train_split = "train";
  std::string val_split = "val";

  // Rejects unknown keys; collects every validation failure before throwing.
  static RunConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;

  // explicit_source with auto resolved (labels for segmentation, captions for depth)
  ExplicitSource resolved_explicit_source() const {
    if (explicit_source != ExplicitSource::auto_default) return explicit_source;
    return task == Task::segmentation ? ExplicitSource::ground_truth_labels
                                      : ExplicitSource::generated_captions;
  }

  void validate() const;
};

}  // namespace iedp

#endif  // IEDP_CONFIG_HPP
