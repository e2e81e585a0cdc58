#pragma once

// Run configuration as a key = value text file. Lines starting with '#' are
// comments; unknown keys are errors. to_text() writes every key, so a saved
// config reproduces the run.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fpanet/data.hpp"
#include "fpanet/losses.hpp"
#include "fpanet/model.hpp"
#include "fpanet/optim.hpp"

namespace fpanet {

struct TrainConfig {
  // optimization
  double lr = 1e-3;
  double lr_min = 1e-6;
  std::int64_t restart_period = 10000;
  double restart_mult = 1.0;
  AdamWOptions adamw;
  double clip_norm = 1.0;  // 0 disables clipping
  std::int64_t max_iters = 2000;
  std::uint64_t seed = 0;
  std::string precision = "float32";  // float32 | float64

  // objective
  LossWeights loss;
  int vgg_width_divisor = 8;  // 1 is the full VGG19 layout
  std::string vgg_weights;    // optional checkpoint with features.* tensors
  std::uint64_t vgg_seed = 1234;

  ModelConfig model;

  // data
  std::string data_root = "data/synthetic";
  std::string train_split = "train";
  std::string eval_split = "test";
  int crop = 384;
  int batch = 8;
  bool edge_padding = true;

  // bookkeeping
  std::string output_dir = "runs/default";
  std::int64_t checkpoint_every = 500;
  std::int64_t log_every = 10;
  std::string resume;  // checkpoint to continue from

  void validate() const {
    schedule().validate();
    AdamW<float> check(adamw);
    (void)check;
    if (precision != "float32" && precision != "float64") throw ConfigError("precision must be float32 or float64");
    if (clip_norm < 0) throw ConfigError("clip_norm must be >= 0");
    if (max_iters < 0) throw ConfigError("max_iters must be >= 0");
    if (vgg_width_divisor < 1) throw ConfigError("vgg_width_divisor must be >= 1");
    if (crop < 0 || batch < 1) throw ConfigError("crop must be >= 0 and batch >= 1");
    if (checkpoint_every < 0 || log_every < 1) throw ConfigError("checkpoint_every >= 0 and log_every >= 1 required");
    loss.validate();
    model.validate();
  }

  [[nodiscard]] CosineWarmRestarts schedule() const { return {lr, lr_min, restart_period, restart_mult}; }

  [[nodiscard]] DatasetSpec dataset(const std::string& split) const {
    DatasetSpec s;
    s.root = data_root;
    s.split = split;
    s.mode = model.input_frames == 1 ? FrameMode::single : FrameMode::triplet;
    s.crop = crop;
    s.batch = batch;
    s.seed = seed;
    s.edge_padding = edge_padding;
    return s;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  if constexpr (std::is_floating_point_v<N>) {
    std::size_t used = 0;
    try {
      out = static_cast<N>(std::stod(v, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  } else {
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

template <typename N>
std::string fmt(N v) {
  if constexpr (std::is_floating_point_v<N>) {
    // shortest text that reads back to the same value
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  } else {
    return std::to_string(v);
  }
}

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

}  // namespace detail

/// Every recognised key, in file order.
inline const std::vector<detail::ConfigKey>& config_keys() {
  using detail::ConfigKey;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto num = [&k](std::string name, std::string doc, auto member) {
      k.push_back({name, std::move(doc), [member](const TrainConfig& c) { return detail::fmt(member(const_cast<TrainConfig&>(c))); },
                   [member, name](TrainConfig& c, const std::string& v) {
                     auto& ref = member(c);
                     ref = detail::parse_number<std::decay_t<decltype(ref)>>(name, v);
                   }});
    };
    auto flag = [&k](std::string name, std::string doc, auto member) {
      k.push_back({name, std::move(doc), [member](const TrainConfig& c) { return member(const_cast<TrainConfig&>(c)) ? "true" : "false"; },
                   [member, name](TrainConfig& c, const std::string& v) { member(c) = detail::parse_bool(name, v); }});
    };
    auto str = [&k](std::string name, std::string doc, auto member) {
      k.push_back({name, std::move(doc), [member](const TrainConfig& c) { return member(const_cast<TrainConfig&>(c)); },
                   [member](TrainConfig& c, const std::string& v) { member(c) = v; }});
    };
#define FPANET_M(expr) [](TrainConfig& c) -> auto& { return c.expr; }
    num("optim.lr", "peak learning rate", FPANET_M(lr));
    num("optim.lr_min", "floor of the cosine schedule", FPANET_M(lr_min));
    num("optim.restart_period", "iterations in the first cosine cycle", FPANET_M(restart_period));
    num("optim.restart_mult", "cycle length multiplier after each restart", FPANET_M(restart_mult));
    num("optim.beta1", "AdamW first-moment decay", FPANET_M(adamw.beta1));
    num("optim.beta2", "AdamW second-moment decay", FPANET_M(adamw.beta2));
    num("optim.eps", "AdamW denominator epsilon", FPANET_M(adamw.eps));
    num("optim.weight_decay", "decoupled weight decay (biases excluded)", FPANET_M(adamw.weight_decay));
    num("optim.clip_norm", "global gradient-norm clip, 0 disables", FPANET_M(clip_norm));
    num("optim.max_iters", "training iterations", FPANET_M(max_iters));
    num("seed", "data order and crop seed", FPANET_M(seed));
    str("precision", "float32 or float64", FPANET_M(precision));

    num("loss.lambda_p", "perceptual term weight", FPANET_M(loss.lambda_p));
    num("loss.lambda_f", "frequency term weight", FPANET_M(loss.lambda_f));
    flag("loss.raw_phase_l1", "unwrapped |phase difference| instead of the wrapped one", FPANET_M(loss.raw_phase_l1));
    num("loss.vgg_width_divisor", "perceptual backbone channel divisor (1 = full VGG19)", FPANET_M(vgg_width_divisor));
    str("loss.vgg_weights", "checkpoint holding features.* weights; empty uses a seeded random backbone", FPANET_M(vgg_weights));
    num("loss.vgg_seed", "seed of the random backbone", FPANET_M(vgg_seed));

    num("model.base_width", "channels at full resolution", FPANET_M(model.base_width));
    k.push_back({"model.encoder_blocks", "FSF blocks per encoder scale (decoder mirrors), e.g. 2,2,4",
                 [](const TrainConfig& c) {
                   const auto& b = c.model.encoder_blocks;
                   return std::to_string(b[0]) + "," + std::to_string(b[1]) + "," + std::to_string(b[2]);
                 },
                 [](TrainConfig& c, const std::string& v) {
                   std::stringstream ss(v);
                   std::string part;
                   std::vector<int> vals;
                   while (std::getline(ss, part, ','))
                     vals.push_back(detail::parse_number<int>("model.encoder_blocks", detail::trim(part)));
                   if (vals.size() != 3) throw ConfigError("model.encoder_blocks: expected three comma-separated counts");
                   c.model.encoder_blocks = {vals[0], vals[1], vals[2]};
                 }});
    num("model.bottleneck_blocks", "FSF blocks at the coarsest scale", FPANET_M(model.bottleneck_blocks));
    flag("model.use_amp_phase", "frequency branch (amplitude/phase convs)", FPANET_M(model.use_amp_phase));
    flag("model.use_fsm", "selective amplitude/phase fusion", FPANET_M(model.use_fsm));
    flag("model.use_csfm", "multi-scale spatial branch", FPANET_M(model.use_csfm));
    flag("model.use_pam", "neighbor alignment and fusion", FPANET_M(model.use_pam));
    k.push_back({"model.align_target", "neighbor or reference",
                 [](const TrainConfig& c) -> std::string {
                   return c.model.align_target == AlignTarget::neighbor ? "neighbor" : "reference";
                 },
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "neighbor") c.model.align_target = AlignTarget::neighbor;
                   else if (v == "reference") c.model.align_target = AlignTarget::reference;
                   else throw ConfigError("model.align_target: expected neighbor or reference, got '" + v + "'");
                 }});
    num("model.input_frames", "3 for triplets, 1 for single-frame", FPANET_M(model.input_frames));
    num("model.deform_groups", "deformable offset groups, 0 = scale with width", FPANET_M(model.deform_groups));
    num("model.sfeb_expansion", "inner expansion of the spatial blocks", FPANET_M(model.sfeb_expansion));
    num("model.init_seed", "parameter initialization seed", FPANET_M(model.init_seed));

    str("data.root", "dataset root (<root>/<split>/<seq>/{moire,gt}/%05d.png)", FPANET_M(data_root));
    str("data.train_split", "split used for training", FPANET_M(train_split));
    str("data.eval_split", "split used for evaluation", FPANET_M(eval_split));
    num("data.crop", "square training crop, 0 keeps full frames", FPANET_M(crop));
    num("data.batch", "triplets per batch", FPANET_M(batch));
    flag("data.edge_padding", "first/last frames replicate their neighbor", FPANET_M(edge_padding));

    str("run.output_dir", "directory for checkpoints, logs and the resolved config", FPANET_M(output_dir));
    num("run.checkpoint_every", "iterations between checkpoints, 0 = final only", FPANET_M(checkpoint_every));
    num("run.log_every", "iterations between log lines", FPANET_M(log_every));
    str("run.resume", "checkpoint to resume from", FPANET_M(resume));
#undef FPANET_M
    return k;
  }();
  return keys;
}

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.name == key) {
      k.set(c, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// All keys with their current values, with a doc comment above each.
inline std::string to_text(const TrainConfig& c, bool with_docs = true) {
  std::string out;
  for (const auto& k : config_keys()) {
    if (with_docs) out += "# " + k.doc + "\n";
    out += k.name + " = " + k.get(c) + "\n";
  }
  return out;
}

inline void write_config(const std::filesystem::path& path, const TrainConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_text(c);
}

/// FNV-1a over the resolved config text, skipping keys that start with any of the
/// given prefixes (used to show that ablation runs differ only in their switches).
inline std::uint64_t config_hash(const TrainConfig& c, const std::vector<std::string>& skip = {}) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& k : config_keys()) {
    bool skipped = false;
    for (const auto& s : skip) skipped = skipped || k.name.rfind(s, 0) == 0;
    if (skipped) continue;
    for (char ch : k.name + "=" + k.get(c) + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

/// Switch keys varied by the ablation table.
inline const std::vector<std::string>& ablation_switch_keys() {
  static const std::vector<std::string> k = {"model.use_amp_phase", "model.use_fsm", "model.use_csfm", "model.use_pam"};
  return k;
}

/// Model section of a config as JSON (stored in checkpoints).
inline nlohmann::json model_to_json(const ModelConfig& m) {
  TrainConfig c;
  c.model = m;
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : config_keys())
    if (k.name.rfind("model.", 0) == 0) j[k.name] = k.get(c);
  return j;
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) set_config_value(c, key, value.get<std::string>());
  c.model.validate();
  return c.model;
}

}  // namespace fpanet
