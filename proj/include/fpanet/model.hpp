#pragma once

// Three-frame encoder/decoder: shared FSF encoder, FSF bottleneck on the
// reference frame, decoder stages with post-alignment and encoder skips.

#include <array>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fpanet/alignment.hpp"
#include "fpanet/fsf.hpp"

namespace fpanet {

struct ModelConfig {
  int base_width = 64;
  std::array<int, 3> encoder_blocks{2, 2, 4};  // decoder mirrors these per scale
  int bottleneck_blocks = 12;
  bool use_amp_phase = true;
  bool use_fsm = true;
  bool use_csfm = true;
  bool use_pam = true;
  AlignTarget align_target = AlignTarget::neighbor;
  int input_frames = 3;   // 1: the reference frame stands in for both neighbors
  int deform_groups = 0;  // 0: 8 at width 64, scaled with base_width
  int sfeb_expansion = 2;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (base_width < 1) throw ConfigError("base_width must be positive");
    for (int b : encoder_blocks)
      if (b < 0) throw ConfigError("block counts must be non-negative");
    if (bottleneck_blocks < 0) throw ConfigError("bottleneck_blocks must be non-negative");
    if (input_frames != 1 && input_frames != 3) throw ConfigError("input_frames must be 1 or 3");
    if (deform_groups < 0 || (deform_groups > 0 && base_width % deform_groups != 0)) {
      throw ConfigError("deform_groups must divide base_width");
    }
    fsf_options().validate();
  }

  [[nodiscard]] FsfOptions fsf_options() const { return {use_amp_phase, use_fsm, use_csfm, sfeb_expansion}; }

  [[nodiscard]] int resolved_deform_groups() const {
    if (deform_groups > 0) return deform_groups;
    const int g = std::max(1, 8 * base_width / 64);
    return std::gcd(g, base_width);
  }

  /// Switch combination of ablation model `id` (1..6) on top of `base`.
  static ModelConfig ablation(int id, ModelConfig base) {
    struct Row {
      bool amp_phase, fsm, csfm, pam;
    };
    static constexpr Row rows[] = {{false, false, false, false}, {false, false, true, true},
                                   {true, false, true, true},    {true, true, false, true},
                                   {true, true, true, false},    {true, true, true, true}};
    if (id < 1 || id > 6) throw ConfigError("ablation model id must be in 1..6, got " + std::to_string(id));
    const Row& r = rows[id - 1];
    base.use_amp_phase = r.amp_phase;
    base.use_fsm = r.fsm;
    base.use_csfm = r.csfm;
    base.use_pam = r.pam;
    return base;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Three consecutive frames and the clean middle frame for one sample.
template <typename T>
struct FrameTriplet {
  Tensor<T> frames;  // (3, 3, H, W): t-1, t, t+1
  Tensor<T> target;  // (1, 3, H, W)
  std::string sequence;
  int index = 0;
};

template <typename T>
struct ModelOutput {
  Var<T> pred;     // (N, 3, H, W), unclamped
  Var<T> half;     // (N, 3, ceil(H/2), ceil(W/2))
  Var<T> quarter;  // (N, 3, ceil(H/4), ceil(W/4))
  std::vector<Var<T>> offsets;  // per PAM stage coarse to fine: prev, next
};

template <typename T>
struct Pyramid {
  std::array<Var<T>, 3> stage;  // x1, x1/2, x1/4
};

template <typename T>
class FpaNet {
 public:
  static constexpr int kPadMultiple = 8;

  explicit FpaNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.init_seed);
    const Builder<T> b{&params_, &rng, ""};
    const int C = cfg_.base_width;
    const FsfOptions fo = cfg_.fsf_options();
    const std::array<int, 3> width{C, 2 * C, 4 * C};
    conv_in_ = Conv2d<T>(b, "conv_in", 3, C, 3);
    for (int s = 0; s < 3; ++s) {
      const auto es = b.sub("enc" + std::to_string(s + 1));
      for (int i = 0; i < cfg_.encoder_blocks[s]; ++i) enc_[s].emplace_back(es.sub(std::to_string(i)), width[s], fo);
      if (s < 2) down_[s] = Conv2d<T>(b, "down" + std::to_string(s + 1), width[s], width[s + 1], 3, 2);
    }
    const auto bb = b.sub("bottleneck");
    for (int i = 0; i < cfg_.bottleneck_blocks; ++i) bottleneck_.emplace_back(bb.sub(std::to_string(i)), width[2], fo);
    const int G = cfg_.resolved_deform_groups();
    for (int s = 2; s >= 0; --s) {
      const auto ds = b.sub("dec" + std::to_string(s + 1));
      if (cfg_.use_pam) pam_[s] = PamStage<T>(ds.sub("pam"), width[s], G, s < 2, cfg_.align_target);
      for (int i = 0; i < cfg_.encoder_blocks[s]; ++i) dec_[s].emplace_back(ds.sub(std::to_string(i)), width[s], fo);
      if (s > 0) up_[s - 1] = Conv2d<T>(b, "up" + std::to_string(s + 1), width[s], width[s - 1], 1);
    }
    aux_quarter_ = Conv2d<T>(b, "aux_quarter", width[2], 3, 3);
    aux_half_ = Conv2d<T>(b, "aux_half", width[1], 3, 3);
    head_ = Conv2d<T>(b, "head", C, 3, 3);
  }

  FpaNet(const FpaNet&) = delete;
  FpaNet& operator=(const FpaNet&) = delete;

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Scalar parameter counts per top-level module name.
  [[nodiscard]] std::vector<std::pair<std::string, std::size_t>> census() const {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& p : params_.params()) {
      const std::string top = p.name.substr(0, p.name.find('.'));
      if (out.empty() || out.back().first != top) out.emplace_back(top, 0);
      out.back().second += p.var.value().size();
    }
    return out;
  }

  /// Encoder features of each input (all items share weights), on padded inputs.
  [[nodiscard]] std::vector<Pyramid<T>> encode(const std::vector<Var<T>>& frames) const {
    const int N = frames.front().shape().n;
    Var<T> x = conv_in_(frames.size() == 1 ? frames.front() : concat_batch(frames));
    std::array<Var<T>, 3> st;
    for (int s = 0; s < 3; ++s) {
      if (s > 0) x = down_[s - 1](x);
      for (const auto& blk : enc_[s]) x = blk(x);
      st[s] = x;
    }
    std::vector<Pyramid<T>> out(frames.size());
    for (std::size_t f = 0; f < frames.size(); ++f)
      for (int s = 0; s < 3; ++s)
        out[f].stage[s] = frames.size() == 1 ? st[s] : slice_batch(st[s], static_cast<int>(f) * N, N);
    return out;
  }

  /// Restores the middle frame. Inputs (N, 3, H, W) in [0, 1]; any H, W >= 1.
  ModelOutput<T> forward(const Var<T>& prev, const Var<T>& ref, const Var<T>& next) const {
    const Shape s = ref.shape();
    if (s.c != 3) throw ShapeError("model expects RGB input, got " + s.str());
    if (prev.shape() != s || next.shape() != s) throw ShapeError("frame shapes differ");
    if (!ref.value().all_finite() || !prev.value().all_finite() || !next.value().all_finite()) {
      throw InvalidInputError("non-finite input frame");
    }
    const int ph = (kPadMultiple - s.h % kPadMultiple) % kPadMultiple;
    const int pw = (kPadMultiple - s.w % kPadMultiple) % kPadMultiple;
    auto pad = [&](const Var<T>& v) { return pad_reflect(v, ph, pw); };
    const Var<T> r = pad(ref);
    const bool single = cfg_.input_frames == 1;

    std::vector<Pyramid<T>> pyr;
    if (cfg_.use_pam) {
      pyr = single ? encode({r}) : encode({pad(prev), r, pad(next)});
      if (single) pyr = {pyr[0], pyr[0], pyr[0]};
    } else {
      pyr = encode({r});
      pyr = {pyr[0], pyr[0], pyr[0]};
    }
    const Pyramid<T>& fp = pyr[0];
    const Pyramid<T>& ft = pyr[1];
    const Pyramid<T>& fn = pyr[2];

    ModelOutput<T> out;
    Var<T> x = ft.stage[2];
    for (const auto& blk : bottleneck_) x = blk(x);
    std::optional<Var<T>> off_p, off_n;
    std::array<Var<T>, 3> dec_out;
    for (int st = 2; st >= 0; --st) {
      Var<T> d = st == 2 ? add(x, ft.stage[2]) : add(up_[st](upsample2(x)), ft.stage[st]);
      if (cfg_.use_pam) {
        auto res = pam_[st](d, fp.stage[st], ft.stage[st], fn.stage[st], off_p, off_n);
        d = res.fused;
        off_p = res.offset_prev;
        off_n = res.offset_next;
        out.offsets.push_back(res.offset_prev);
        out.offsets.push_back(res.offset_next);
      }
      for (const auto& blk : dec_[st]) d = blk(d);
      dec_out[st] = d;
      x = d;
    }
    const Shape ps = r.shape();
    auto residual = [&](const Conv2d<T>& headc, const Var<T>& feat, int f) {
      return add(headc(feat), resize_bilinear(r, ps.h / f, ps.w / f));
    };
    out.pred = crop(residual(head_, dec_out[0], 1), s.h, s.w);
    out.half = crop(residual(aux_half_, dec_out[1], 2), (s.h + 1) / 2, (s.w + 1) / 2);
    out.quarter = crop(residual(aux_quarter_, dec_out[2], 4), (s.h + 3) / 4, (s.w + 3) / 4);
    return out;
  }

  ModelOutput<T> forward(const Tensor<T>& prev, const Tensor<T>& ref, const Tensor<T>& next) const {
    return forward(Var<T>(prev), Var<T>(ref), Var<T>(next));
  }

  /// Inference: no graph, output clamped to [0, 1].
  Tensor<T> infer(const Tensor<T>& prev, const Tensor<T>& ref, const Tensor<T>& next) const {
    NoGradGuard ng;
    auto o = forward(prev, ref, next);
    Tensor<T> p = o.pred.value();
    for (auto& v : p.vec()) v = std::clamp(v, T(0), T(1));
    return p;
  }

  [[nodiscard]] const PamStage<T>& pam(int stage) const { return pam_[stage]; }
  [[nodiscard]] const std::vector<FsfBlock<T>>& encoder_blocks(int stage) const { return enc_[stage]; }

 private:
  static Var<T> upsample2(const Var<T>& v) { return resize_bilinear(v, 2 * v.shape().h, 2 * v.shape().w); }

  ModelConfig cfg_;
  ParamStore<T> params_;
  Conv2d<T> conv_in_;
  std::array<std::vector<FsfBlock<T>>, 3> enc_, dec_;
  std::array<Conv2d<T>, 2> down_, up_;
  std::vector<FsfBlock<T>> bottleneck_;
  std::array<PamStage<T>, 3> pam_;
  Conv2d<T> aux_quarter_, aux_half_, head_;
};

}  // namespace fpanet
