#pragma once

// Training loop, evaluation, the amplitude/phase swap demo and ablation runs.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpanet/checkpoint.hpp"
#include "fpanet/config.hpp"
#include "fpanet/data.hpp"
#include "fpanet/frequency.hpp"
#include "fpanet/image_io.hpp"
#include "fpanet/log.hpp"
#include "fpanet/losses.hpp"
#include "fpanet/metrics.hpp"
#include "fpanet/model.hpp"
#include "fpanet/optim.hpp"

namespace fpanet {

/// Raised when the loss becomes non-finite; the last checkpoint on disk is kept.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct TrainLogRow {
  std::int64_t iteration = 0;
  double lr = 0;
  double total = 0;
  double spatial = 0;
  double perceptual = 0;
  double frequency = 0;
  double grad_norm = 0;
};

inline nlohmann::json to_json(const TrainLogRow& r) {
  return {{"iter", r.iteration}, {"lr", r.lr},          {"loss", r.total},          {"spatial", r.spatial},
          {"perceptual", r.perceptual}, {"frequency", r.frequency}, {"grad_norm", r.grad_norm}};
}

inline const char* kFinalCheckpoint = "final.ckpt";
inline const char* kLastCheckpoint = "last.ckpt";
inline const char* kResolvedConfig = "config.txt";

template <typename T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "float32" : "float64";
}

/// Frozen perceptual backbone for the configured precision; random (seeded) unless a
/// weights checkpoint is given.
template <typename T>
std::unique_ptr<Vgg19Extractor<T>> make_backbone(int width_divisor, std::uint64_t seed, bool imagenet_norm,
                                                 const std::string& weights, int taps = 4) {
  auto vgg = std::make_unique<Vgg19Extractor<T>>(VggOptions{width_divisor, taps, imagenet_norm, seed});
  if (!weights.empty()) {
    load_params(vgg->params(), load_checkpoint(weights), false);
    vgg->params().set_requires_grad(false);
  }
  return vgg;
}

template <typename T>
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), model_((cfg_.validate(), cfg_.model)), opt_(cfg_.adamw) {
    if (std::string(dtype_name<T>()) != cfg_.precision) throw ConfigError("trainer precision does not match config");
    data_ = std::make_unique<MoireDataset>(cfg_.dataset(cfg_.train_split));
    if (cfg_.loss.lambda_p > 0) {
      if (cfg_.vgg_weights.empty()) log::info("perceptual loss: seeded random VGG19 backbone (no weights file given)");
      backbone_ = make_backbone<T>(cfg_.vgg_width_divisor, cfg_.vgg_seed, true, cfg_.vgg_weights);
    }
    if (!cfg_.resume.empty()) {
      const auto ck = load_checkpoint(cfg_.resume);
      if (ck.meta.contains("model") && model_from_json(ck.meta["model"]) != cfg_.model) {
        throw ConfigError("resume checkpoint was trained with a different model config");
      }
      load_params(model_.params(), ck, true);
      opt_.load_state(ck, model_.params());
      iteration_ = ck.meta.value("iteration", std::int64_t{0});
      log::info("resumed from " + cfg_.resume + " at iteration " + std::to_string(iteration_));
    }
    std::filesystem::create_directories(cfg_.output_dir);
    write_config(std::filesystem::path(cfg_.output_dir) / kResolvedConfig, cfg_);
  }

  FpaNet<T>& model() { return model_; }
  [[nodiscard]] const TrainConfig& config() const { return cfg_; }
  [[nodiscard]] std::int64_t iteration() const { return iteration_; }
  [[nodiscard]] const MoireDataset& dataset() const { return *data_; }

  [[nodiscard]] Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.dtype = dtype_name<T>();
    ck.meta["iteration"] = iteration_;
    ck.meta["model"] = model_to_json(cfg_.model);
    ck.meta["config"] = to_text(cfg_, false);
    store_params(ck, model_.params());
    opt_.save_state(ck);
    return ck;
  }

  void save(const std::filesystem::path& p) const { save_checkpoint(p, checkpoint()); }

  /// One optimization step on batch `iteration()`.
  TrainLogRow step() {
    const Batch b = data_->batch(static_cast<std::uint64_t>(iteration_));
    auto cast = [](const Tensor<double>& t) { return Var<T>(t.template cast<T>()); };
    model_.params().zero_grad();
    TrainLogRow row;
    row.iteration = iteration_;
    row.lr = cfg_.schedule().lr(iteration_);
    auto diverged = [&](const std::string& why) {
      dump_batch(b, row);
      return DivergenceError(why + " at iteration " + std::to_string(iteration_) + "; batch dumped under " +
                             (std::filesystem::path(cfg_.output_dir) / "nan_dump").string());
    };
    std::optional<LossBreakdown<T>> loss;
    try {
      const auto out = model_.forward(cast(b.moire[0]), cast(b.moire[1]), cast(b.moire[2]));
      loss = total_loss(out, cast(b.target), cfg_.loss, backbone_.get());
    } catch (const InvalidInputError& e) {
      // Batches are finite on load, so a non-finite intermediate means the weights diverged.
      row.total = std::numeric_limits<double>::quiet_NaN();
      throw diverged(std::string("non-finite activations (") + e.what() + ")");
    }
    row.total = static_cast<double>(loss->total.item());
    row.spatial = loss->spatial;
    row.perceptual = loss->perceptual;
    row.frequency = loss->frequency;
    if (!std::isfinite(row.total)) throw diverged("non-finite loss");
    backward(loss->total);
    row.grad_norm = clip_grad_norm(model_.params(), cfg_.clip_norm);
    if (!std::isfinite(row.grad_norm)) throw diverged("non-finite gradient");
    opt_.step(model_.params(), row.lr);
    model_.params().zero_grad();
    ++iteration_;
    return row;
  }

  /// Trains until `until` (default max_iters), checkpointing on the configured cadence
  /// and writing final.ckpt when max_iters is reached.
  std::vector<TrainLogRow> run(std::optional<std::int64_t> until = std::nullopt) {
    const std::int64_t stop = std::min(until.value_or(cfg_.max_iters), cfg_.max_iters);
    const std::filesystem::path dir = cfg_.output_dir;
    std::ofstream logf(dir / "train_log.jsonl", std::ios::app);
    std::vector<TrainLogRow> rows;
    const auto t0 = std::chrono::steady_clock::now();
    while (iteration_ < stop) {
      const auto row = step();
      rows.push_back(row);
      logf << to_json(row).dump() << '\n';
      if (iteration_ % cfg_.log_every == 0 || iteration_ == stop) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream os;
        os << "iter " << iteration_ << "/" << cfg_.max_iters << " loss " << row.total << " (s " << row.spatial
           << " p " << row.perceptual << " f " << row.frequency << ") lr " << row.lr << " |g| " << row.grad_norm
           << " " << secs << "s";
        log::info(os.str());
      }
      if (cfg_.checkpoint_every > 0 && iteration_ % cfg_.checkpoint_every == 0) save(dir / kLastCheckpoint);
    }
    if (iteration_ >= cfg_.max_iters) {
      save(dir / kFinalCheckpoint);
      save(dir / kLastCheckpoint);
    }
    return rows;
  }

 private:
  void dump_batch(const Batch& b, const TrainLogRow& row) const {
    const auto dir = std::filesystem::path(cfg_.output_dir) / "nan_dump" / ("iter_" + std::to_string(row.iteration));
    std::filesystem::create_directories(dir);
    nlohmann::json info = to_json(row);
    info["samples"] = nlohmann::json::array();
    for (std::size_t k = 0; k < b.samples.size(); ++k) {
      const auto& s = b.samples[k];
      info["samples"].push_back({{"sequence", data_->sequences()[s.sequence].id},
                                 {"center", s.center},
                                 {"crop_origin", b.origins[k]}});
      const int n = static_cast<int>(k);
      write_png(dir / ("item" + std::to_string(k) + "_prev.png"), b.moire[0], n);
      write_png(dir / ("item" + std::to_string(k) + "_ref.png"), b.moire[1], n);
      write_png(dir / ("item" + std::to_string(k) + "_next.png"), b.moire[2], n);
      write_png(dir / ("item" + std::to_string(k) + "_target.png"), b.target, n);
    }
    std::ofstream(dir / "info.json") << info.dump(2) << '\n';
  }

  TrainConfig cfg_;
  FpaNet<T> model_;
  AdamW<T> opt_;
  std::unique_ptr<MoireDataset> data_;
  std::unique_ptr<Vgg19Extractor<T>> backbone_;
  std::int64_t iteration_ = 0;
};

struct TrainSummary {
  std::vector<TrainLogRow> log;
  std::filesystem::path checkpoint;
};

/// Runs a full training job in the configured precision.
inline TrainSummary train(const TrainConfig& cfg) {
  auto go = [&](auto tag) {
    using T = decltype(tag);
    Trainer<T> tr(cfg);
    TrainSummary s;
    s.log = tr.run();
    s.checkpoint = std::filesystem::path(cfg.output_dir) / kFinalCheckpoint;
    return s;
  };
  return cfg.precision == "float64" ? go(double{}) : go(float{});
}

// ---------------------------------------------------------------------------
// Evaluation

inline const std::vector<std::string>& all_metric_names() {
  static const std::vector<std::string> names = [] {
    auto n = metrics::frame_metric_names();
    n.push_back("fvd");
    return n;
  }();
  return names;
}

/// Parses "psnr,ssim" into a validated list (order preserved, duplicates dropped).
inline std::vector<std::string> parse_metric_list(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string m;
  while (std::getline(ss, m, ',')) {
    m = detail::trim(m);
    if (m.empty()) continue;
    if (std::find(all_metric_names().begin(), all_metric_names().end(), m) == all_metric_names().end()) {
      throw ConfigError("unknown metric '" + m + "'");
    }
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  }
  if (out.empty()) throw ConfigError("empty metric selection");
  return out;
}

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data_root;
  std::string split = "test";
  bool single_frame = false;
  bool edge_padding = true;
  std::vector<std::string> metrics = all_metric_names();
  std::filesystem::path output_dir;  // empty: no files written
  bool save_images = false;
  int lpips_width_divisor = 4;
  std::uint64_t backbone_seed = 4321;
  std::string lpips_weights;  // optional features.* checkpoint
  int fvd_dim = 64;
};

inline std::string fmt_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

inline nlohmann::json metric_json(double v) {
  if (std::isfinite(v)) return v;
  return fmt_metric(v);
}

/// Writes report.jsonl (frame, sequence and summary lines) and summary.tsv.
inline void write_report(const std::filesystem::path& dir, const metrics::MetricsReport& r) {
  std::filesystem::create_directories(dir);
  std::ofstream js(dir / "report.jsonl");
  for (const auto& f : r.frames) {
    nlohmann::json j = {{"type", "frame"}, {"sequence", f.sequence}, {"index", f.index}};
    for (const auto& [k, v] : f.values) j[k] = metric_json(v);
    js << j.dump() << '\n';
  }
  for (const auto& [seq, v] : r.sequence_fvd) js << nlohmann::json{{"type", "sequence"}, {"sequence", seq}, {"fvd", v}}.dump() << '\n';
  nlohmann::json summary = {{"type", "summary"}, {"frames", r.frames.size()}};
  for (const auto& [k, s] : r.aggregate()) summary[k] = {{"mean", metric_json(s.mean)}, {"std", s.std}, {"count", s.count}};
  if (r.fvd) summary["fvd"] = *r.fvd;
  summary["non_comparable"] = r.non_comparable;
  if (!r.non_comparable.empty()) summary["note"] = "random fallback backbone: values are non-comparable to published numbers";
  js << summary.dump() << '\n';

  std::ofstream tsv(dir / "summary.tsv");
  tsv << "metric\tmean\tstd\tcount\tnote\n";
  for (const auto& name : r.selected) {
    const bool nc = std::find(r.non_comparable.begin(), r.non_comparable.end(), name) != r.non_comparable.end();
    const std::string note = nc ? "non-comparable (random backbone)" : "";
    if (name == "fvd") {
      tsv << "fvd\t" << (r.fvd ? fmt_metric(*r.fvd) : "n/a") << "\t\t" << r.sequence_fvd.size() << "\t" << note << '\n';
      continue;
    }
    const auto s = r.aggregate().at(name);
    tsv << name << '\t' << fmt_metric(s.mean) << '\t' << fmt_metric(s.std) << '\t' << s.count << '\t' << note << '\n';
  }
}

/// Per-frame metrics of (pred, gt) for the selected names (fvd handled separately).
class FrameScorer {
 public:
  explicit FrameScorer(const EvalOptions& o) : sel_(o.metrics) {
    if (has("lpips")) {
      lpips_backbone_ = std::shared_ptr<const FeatureExtractor<double>>(
          make_backbone<double>(o.lpips_width_divisor, o.backbone_seed, false, o.lpips_weights));
      lpips_ = std::make_unique<metrics::Lpips>(lpips_backbone_, !o.lpips_weights.empty());
    }
  }
  [[nodiscard]] bool has(const std::string& m) const { return std::find(sel_.begin(), sel_.end(), m) != sel_.end(); }
  [[nodiscard]] bool lpips_pretrained() const { return lpips_ && lpips_->pretrained(); }

  [[nodiscard]] std::map<std::string, double> operator()(const Tensor<double>& pred, const Tensor<double>& gt) const {
    std::map<std::string, double> v;
    for (const auto& m : sel_) {
      if (m == "psnr") v[m] = metrics::psnr(pred, gt);
      else if (m == "ssim") v[m] = metrics::ssim(pred, gt);
      else if (m == "lpips") v[m] = (*lpips_)(pred, gt);
      else if (m == "fsim") v[m] = metrics::fsim(pred, gt);
      else if (m == "y_psnr") v[m] = metrics::y_psnr(pred, gt);
      else if (m == "hist_corr") v[m] = metrics::color_histogram_correlation(pred, gt);
    }
    return v;
  }

 private:
  std::vector<std::string> sel_;
  std::shared_ptr<const FeatureExtractor<double>> lpips_backbone_;
  std::unique_ptr<metrics::Lpips> lpips_;
};

/// Runs `restore` (reference-frame restorer over a full-frame triplet) on every valid
/// center of the dataset and scores it.
inline metrics::MetricsReport evaluate_with(const MoireDataset& ds, const EvalOptions& o,
                                            const std::function<Tensor<double>(const FrameTriplet<double>&)>& restore) {
  metrics::MetricsReport rep;
  rep.selected = o.metrics;
  FrameScorer score(o);
  if (score.has("lpips") && !score.lpips_pretrained()) rep.non_comparable.push_back("lpips");
  const bool want_fvd = score.has("fvd");
  if (want_fvd) rep.non_comparable.push_back("fvd");
  std::map<int, std::vector<std::pair<Tensor<double>, Tensor<double>>>> clips;  // seq -> (pred, gt) frames
  for (const auto& s : ds.samples()) {
    const auto trip = ds.triplet(s);
    const Tensor<double> pred = restore(trip);
    rep.frames.push_back({trip.sequence, trip.index, score(pred, trip.target)});
    if (want_fvd) clips[s.sequence].emplace_back(pred, trip.target);
    if (o.save_images && !o.output_dir.empty()) {
      write_png(o.output_dir / "restored" / trip.sequence / detail::frame_name(trip.index), pred);
    }
  }
  if (want_fvd) {
    const metrics::RandomVideoEmbedding emb(o.fvd_dim, o.backbone_seed);
    auto stack = [](const std::vector<Tensor<double>>& frames, std::size_t first, std::size_t count) {
      const auto& f0 = frames[first];
      Tensor<double> clip(Shape{static_cast<int>(count), 3, f0.h(), f0.w()});
      for (std::size_t k = 0; k < count; ++k)
        std::copy(frames[first + k].vec().begin(), frames[first + k].vec().end(), clip.vec().begin() + f0.size() * k);
      return clip;
    };
    std::vector<Tensor<double>> all_pred, all_gt;
    for (const auto& [seq, frames] : clips) {
      std::vector<Tensor<double>> p, g;
      for (const auto& [pp, gg] : frames) {
        p.push_back(pp);
        g.push_back(gg);
      }
      all_pred.push_back(stack(p, 0, p.size()));
      all_gt.push_back(stack(g, 0, g.size()));
      if (p.size() < 4) {
        log::warn("fvd: sequence " + ds.sequences()[seq].id + " has fewer than two 3-frame windows, skipped");
        continue;
      }
      std::vector<Tensor<double>> wp, wg;
      for (std::size_t i = 0; i + 3 <= p.size(); ++i) {
        wp.push_back(stack(p, i, 3));
        wg.push_back(stack(g, i, 3));
      }
      rep.sequence_fvd[ds.sequences()[seq].id] = metrics::fvd(wp, wg, emb);
    }
    bool same_size = true;
    for (const auto& c : all_pred) same_size = same_size && c.h() == all_pred[0].h() && c.w() == all_pred[0].w();
    if (all_pred.size() >= 2 && same_size) rep.fvd = metrics::fvd(all_pred, all_gt, emb);
  }
  if (!rep.non_comparable.empty()) {
    log::warn("random fallback backbone for: " + [&] {
      std::string s;
      for (const auto& m : rep.non_comparable) s += (s.empty() ? "" : ", ") + m;
      return s;
    }() + " (values non-comparable to published numbers)");
  }
  return rep;
}

/// Loads a checkpoint into a double-precision model (float32 values convert exactly).
inline std::unique_ptr<FpaNet<double>> load_model(const std::filesystem::path& ckpt_path) {
  const auto ck = load_checkpoint(ckpt_path);
  if (!ck.meta.contains("model")) throw ConfigError("checkpoint " + ckpt_path.string() + " has no model config");
  auto model = std::make_unique<FpaNet<double>>(model_from_json(ck.meta["model"]));
  load_params(model->params(), ck, true);
  model->params().set_requires_grad(false);
  return model;
}

inline metrics::MetricsReport evaluate(const EvalOptions& o) {
  const auto model = load_model(o.checkpoint);
  DatasetSpec spec;
  spec.root = o.data_root;
  spec.split = o.split;
  spec.mode = o.single_frame ? FrameMode::single : FrameMode::triplet;
  spec.crop = 0;
  spec.batch = 1;
  spec.edge_padding = o.edge_padding;
  spec.cache = false;
  const MoireDataset ds(spec);
  auto rep = evaluate_with(ds, o, [&](const FrameTriplet<double>& t) {
    return model->infer(t.frames.slice_batch(0, 1), t.frames.slice_batch(1, 1), t.frames.slice_batch(2, 1));
  });
  if (!o.output_dir.empty()) {
    write_report(o.output_dir, rep);
    std::ofstream cfg(o.output_dir / "eval_config.txt");
    cfg << "checkpoint = " << o.checkpoint.string() << "\ndata = " << o.data_root.string() << "\nsplit = " << o.split
        << "\nsingle_frame = " << (o.single_frame ? "true" : "false") << "\nedge_padding = "
        << (o.edge_padding ? "true" : "false") << "\nmetrics = ";
    for (std::size_t i = 0; i < o.metrics.size(); ++i) cfg << (i ? "," : "") << o.metrics[i];
    cfg << "\nlpips_width_divisor = " << o.lpips_width_divisor << "\nbackbone_seed = " << o.backbone_seed
        << "\nlpips_weights = " << o.lpips_weights << "\nfvd_dim = " << o.fvd_dim << '\n';
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Swap demo

struct SwapResult {
  Tensor<double> amp_a_phase_b;
  Tensor<double> amp_b_phase_a;
};

/// Recombines the amplitude of one image with the phase of the other, per channel,
/// and writes both (clamped, 8-bit) to out_dir.
inline SwapResult demo_swap(const Tensor<double>& a, const Tensor<double>& b, const std::filesystem::path& out_dir) {
  if (a.shape() != b.shape()) throw ShapeError("demo_swap: image sizes differ " + a.shape().str() + " vs " + b.shape().str());
  NoGradGuard ng;
  SwapResult r;
  auto clamp01 = [](Tensor<double> t) {
    for (auto& v : t.vec()) v = std::clamp(v, 0.0, 1.0);
    return t;
  };
  r.amp_a_phase_b = clamp01(swap_components(Var<double>(a), Var<double>(b)).value());
  r.amp_b_phase_a = clamp01(swap_components(Var<double>(b), Var<double>(a)).value());
  if (!out_dir.empty()) {
    write_png(out_dir / "amp_a_phase_b.png", r.amp_a_phase_b);
    write_png(out_dir / "amp_b_phase_a.png", r.amp_b_phase_a);
  }
  std::ostringstream os;
  os << "swap: PSNR(amp_a_phase_b, b) = " << fmt_metric(metrics::psnr(r.amp_a_phase_b, b))
     << " dB, PSNR(amp_b_phase_a, b) = " << fmt_metric(metrics::psnr(r.amp_b_phase_a, b)) << " dB";
  log::info(os.str());
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
  int model_id = 0;
  TrainConfig config;
  metrics::MetricsReport report;
  std::uint64_t controlled_hash = 0;  // config hash without the switch keys
};

/// Config for ablation model `id`: switches from the ablation table, output in a
/// per-model subdirectory; everything else (seed, budget, data) unchanged.
inline TrainConfig ablation_config(const TrainConfig& base, int id) {
  TrainConfig c = base;
  c.model = ModelConfig::ablation(id, base.model);
  c.output_dir = (std::filesystem::path(base.output_dir) / ("model" + std::to_string(id))).string();
  c.resume.clear();
  return c;
}

inline std::uint64_t ablation_controlled_hash(const TrainConfig& c) {
  auto skip = ablation_switch_keys();
  skip.push_back("run.output_dir");
  return config_hash(c, skip);
}

inline AblationRun ablate(const TrainConfig& base, int id, const std::vector<std::string>& eval_metrics = {"psnr", "ssim"}) {
  AblationRun run;
  run.model_id = id;
  run.config = ablation_config(base, id);
  run.controlled_hash = ablation_controlled_hash(run.config);
  const auto t = train(run.config);
  EvalOptions eo;
  eo.checkpoint = t.checkpoint;
  eo.data_root = run.config.data_root;
  eo.split = run.config.eval_split;
  eo.single_frame = run.config.model.input_frames == 1;
  eo.metrics = eval_metrics;
  eo.output_dir = std::filesystem::path(run.config.output_dir) / "eval";
  run.report = evaluate(eo);
  return run;
}

}  // namespace fpanet
