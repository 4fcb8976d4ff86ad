#include "iedp/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace iedp {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected number, got '" + v + "'");
  }
}

std::vector<std::int64_t> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<std::int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": expected comma-separated integers");
  return out;
}

std::string join_ints(const std::vector<std::int64_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    os << v[i];
  }
  return os.str();
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

KvConfig KvConfig::parse_text(const std::string& text) {
  KvConfig kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                        line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv.values[key] = value;
  }
  return kv;
}

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_text(ss.str());
}

std::string KvConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : values) os << k << " = " << v << '\n';
  return os.str();
}

std::string to_string(Task t) { return t == Task::segmentation ? "segmentation" : "depth"; }
std::string to_string(AdapterKind k) {
  return k == AdapterKind::learnable_queries ? "learnable_queries" : "mlp_only";
}
std::string to_string(ExplicitSource s) {
  switch (s) {
    case ExplicitSource::auto_default: return "auto";
    case ExplicitSource::ground_truth_labels: return "ground_truth_labels";
    default: return "generated_captions";
  }
}
std::string to_string(Conditioning c) {
  return c == Conditioning::implicit ? "implicit" : "unaligned_text";
}

RunConfig RunConfig::from_kv(const KvConfig& kv) {
  RunConfig c;
  std::vector<std::string> errors;
  std::set<std::string> known;
  auto take = [&](const std::string& key, auto&& fn) {
    known.insert(key);
    auto it = kv.values.find(key);
    if (it == kv.values.end()) return;
    try {
      fn(it->second);
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  };

  take("data_manifest", [&](const std::string& v) { c.data_manifest = v; });
  take("encoders_checkpoint", [&](const std::string& v) { c.encoders_checkpoint = v; });
  take("out_dir", [&](const std::string& v) { c.out_dir = v; });
  take("task", [&](const std::string& v) {
    if (v == "segmentation") c.task = Task::segmentation;
    else if (v == "depth") c.task = Task::depth;
    else throw ConfigError("task: expected segmentation|depth, got '" + v + "'");
  });
  take("base_lr", [&](const std::string& v) { c.base_lr = parse_double("base_lr", v); });
  take("poly_power", [&](const std::string& v) { c.poly_power = parse_double("poly_power", v); });
  take("weight_decay",
       [&](const std::string& v) { c.weight_decay = parse_double("weight_decay", v); });
  take("max_iters", [&](const std::string& v) { c.max_iters = parse_int("max_iters", v); });
  take("batch_size", [&](const std::string& v) { c.batch_size = parse_int("batch_size", v); });
  take("seed", [&](const std::string& v) {
    c.seed = static_cast<std::uint64_t>(parse_int("seed", v));
  });
  take("adam_beta1", [&](const std::string& v) { c.adam_beta1 = parse_double("adam_beta1", v); });
  take("adam_beta2", [&](const std::string& v) { c.adam_beta2 = parse_double("adam_beta2", v); });
  take("adam_eps", [&](const std::string& v) { c.adam_eps = parse_double("adam_eps", v); });
  take("nq", [&](const std::string& v) { c.nq = parse_int("nq", v); });
  take("position_embeddings",
       [&](const std::string& v) { c.position_embeddings = parse_bool("position_embeddings", v); });
  take("adapter_kind", [&](const std::string& v) {
    if (v == "learnable_queries") c.adapter_kind = AdapterKind::learnable_queries;
    else if (v == "mlp_only") c.adapter_kind = AdapterKind::mlp_only;
    else throw ConfigError("adapter_kind: expected learnable_queries|mlp_only, got '" + v + "'");
  });
  take("explicit_source", [&](const std::string& v) {
    if (v == "auto") c.explicit_source = ExplicitSource::auto_default;
    else if (v == "ground_truth_labels") c.explicit_source = ExplicitSource::ground_truth_labels;
    else if (v == "generated_captions") c.explicit_source = ExplicitSource::generated_captions;
    else
      throw ConfigError(
          "explicit_source: expected auto|ground_truth_labels|generated_captions, got '" + v + "'");
  });
  take("explicit_branch_enabled", [&](const std::string& v) {
    c.explicit_branch_enabled = parse_bool("explicit_branch_enabled", v);
  });
  take("conditioning", [&](const std::string& v) {
    if (v == "implicit") c.conditioning = Conditioning::implicit;
    else if (v == "unaligned_text") c.conditioning = Conditioning::unaligned_text;
    else throw ConfigError("conditioning: expected implicit|unaligned_text, got '" + v + "'");
  });
  take("d_cond", [&](const std::string& v) { c.d_cond = parse_int("d_cond", v); });
  take("unet_channels",
       [&](const std::string& v) { c.unet_channels = parse_int_list("unet_channels", v); });
  take("latent_channels",
       [&](const std::string& v) { c.latent_channels = parse_int("latent_channels", v); });
  take("si_lambda", [&](const std::string& v) { c.si_lambda = parse_double("si_lambda", v); });
  take("eval_crop", [&](const std::string& v) { c.eval_crop = parse_int("eval_crop", v); });
  take("eval_stride", [&](const std::string& v) { c.eval_stride = parse_int("eval_stride", v); });
  take("eval_at_end", [&](const std::string& v) { c.eval_at_end = parse_bool("eval_at_end", v); });
  take("eval_tta", [&](const std::string& v) { c.eval_tta = parse_bool("eval_tta", v); });
  take("eval_multiscale",
       [&](const std::string& v) { c.eval_multiscale = parse_bool("eval_multiscale", v); });
  take("checkpoint_every",
       [&](const std::string& v) { c.checkpoint_every = parse_int("checkpoint_every", v); });
  take("resume", [&](const std::string& v) { c.resume = v; });
  take("train_split", [&](const std::string& v) { c.train_split = v; });
  take("val_split", [&](const std::string& v) { c.val_split = v; });

  for (const auto& [k, v] : kv.values)
    if (!known.count(k)) errors.push_back("unknown config key: '" + k + "'");

  if (!errors.empty()) {
    std::string msg = "config errors:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return c;
}

KvConfig RunConfig::to_kv() const {
  KvConfig kv;
  kv.set("data_manifest", data_manifest);
  kv.set("encoders_checkpoint", encoders_checkpoint);
  kv.set("out_dir", out_dir);
  kv.set("task", to_string(task));
  kv.set("base_lr", fmt_double(base_lr));
  kv.set("poly_power", fmt_double(poly_power));
  kv.set("weight_decay", fmt_double(weight_decay));
  kv.set("max_iters", std::to_string(max_iters));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("seed", std::to_string(seed));
  kv.set("adam_beta1", fmt_double(adam_beta1));
  kv.set("adam_beta2", fmt_double(adam_beta2));
  kv.set("adam_eps", fmt_double(adam_eps));
  kv.set("nq", std::to_string(nq));
  kv.set("position_embeddings", position_embeddings ? "true" : "false");
  kv.set("adapter_kind", to_string(adapter_kind));
  kv.set("explicit_source", to_string(resolved_explicit_source()));
  kv.set("explicit_branch_enabled", explicit_branch_enabled ? "true" : "false");
  kv.set("conditioning", to_string(conditioning));
  kv.set("d_cond", std::to_string(d_cond));
  kv.set("unet_channels", join_ints(unet_channels));
  kv.set("latent_channels", std::to_string(latent_channels));
  kv.set("si_lambda", fmt_double(si_lambda));
  kv.set("eval_crop", std::to_string(eval_crop));
  kv.set("eval_stride", std::to_string(eval_stride));
  kv.set("eval_at_end", eval_at_end ? "true" : "false");
  kv.set("eval_tta", eval_tta ? "true" : "false");
  kv.set("eval_multiscale", eval_multiscale ? "true" : "false");
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("resume", resume);
  kv.set("train_split", train_split);
  kv.set("val_split", val_split);
  return kv;
}

void RunConfig::validate() const {
  std::vector<std::string> errors;
  if (data_manifest.empty()) errors.push_back("data_manifest is required");
  if (out_dir.empty()) errors.push_back("out_dir is required");
  if (encoders_checkpoint.empty()) errors.push_back("encoders_checkpoint is required");
  if (base_lr <= 0) errors.push_back("base_lr must be positive");
  if (poly_power <= 0) errors.push_back("poly_power must be positive");
  if (weight_decay < 0) errors.push_back("weight_decay must be nonnegative");
  if (max_iters < 1) errors.push_back("max_iters must be >= 1");
  if (batch_size < 1) errors.push_back("batch_size must be >= 1");
  if (nq != 64 && nq != 128 && nq != 256) errors.push_back("nq must be one of 64, 128, 256");
  if (d_cond < 1) errors.push_back("d_cond must be positive");
  if (unet_channels.size() != 4) errors.push_back("unet_channels must list 4 stage widths");
  for (auto c : unet_channels)
    if (c < 1) errors.push_back("unet_channels entries must be positive");
  if (latent_channels < 1) errors.push_back("latent_channels must be positive");
  if (si_lambda < 0 || si_lambda > 1) errors.push_back("si_lambda must be in [0,1]");
  if (eval_crop < 64 || eval_crop % 64 != 0)
    errors.push_back("eval_crop must be a positive multiple of 64");
  if (eval_stride < 1 || eval_stride > eval_crop)
    errors.push_back("eval_stride must be in [1, eval_crop]");
  if (checkpoint_every < 1) errors.push_back("checkpoint_every must be >= 1");
  if (resume != "auto" && resume != "none" && resume.empty())
    errors.push_back("resume must be auto, none, or a checkpoint path");
  if (!errors.empty()) {
    std::string msg = "config errors:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

}  // namespace iedp
