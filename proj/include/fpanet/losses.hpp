#pragma once

// Training objective: multi-scale L1, perceptual L1 on frozen features,
// amplitude/phase L1 in the Fourier domain.

#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fpanet/frequency.hpp"
#include "fpanet/model.hpp"
#include "fpanet/nn.hpp"

namespace fpanet {

/// Wraps an angle difference into (-pi, pi].
template <typename T>
T wrap_angle(T d) {
  const T two_pi = T(2) * std::numbers::pi_v<T>;
  d = std::remainder(d, two_pi);
  if (d <= -std::numbers::pi_v<T>) d += two_pi;
  return d;
}

/// mean(|wrap(a - b)|); the wrap is locally a translation, so the gradient is sign(wrap(a - b)).
template <typename T>
Var<T> mean_abs_wrapped_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mean_abs_wrapped_diff");
  const std::size_t N = a.value().size();
  T acc = 0;
  for (std::size_t i = 0; i < N; ++i) acc += std::abs(wrap_angle(a.value()[i] - b.value()[i]));
  return make_result<T>(Tensor<T>::scalar(acc / static_cast<T>(N)), {a, b}, [N](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T s = self.grad[0] / static_cast<T>(N);
    auto* ga = grad_sink(self, 0);
    auto* gb = grad_sink(self, 1);
    for (std::size_t i = 0; i < N; ++i) {
      const T d = wrap_angle(av[i] - bv[i]);
      const T sg = d > T(0) ? s : (d < T(0) ? -s : T(0));
      if (ga) (*ga)[i] += sg;
      if (gb) (*gb)[i] -= sg;
    }
  });
}

/// Per-channel fixed affine map y = x * scale[c] + shift[c].
template <typename T>
Var<T> channel_affine(const Var<T>& x, const std::vector<T>& scale_c, const std::vector<T>& shift_c) {
  const Shape s = x.shape();
  detail::require(static_cast<int>(scale_c.size()) == s.c && static_cast<int>(shift_c.size()) == s.c,
                  "channel_affine: coefficient count");
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = src[i] * scale_c[c] + shift_c[c];
    }
  return make_result<T>(std::move(out), {x}, [scale_c](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const Shape s = g->shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* go = self.grad.plane(n, c);
        T* d = g->plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) d[i] += go[i] * scale_c[c];
      }
  });
}

/// Frozen network mapping an RGB batch to a list of tap activations.
template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Var<T>> features(const Var<T>& x) const = 0;
  [[nodiscard]] virtual bool frozen() const = 0;
  /// Smallest input extent the taps are defined for.
  [[nodiscard]] virtual int min_extent() const { return 1; }
};

struct VggOptions {
  int width_divisor = 1;   // 1: the full 64..512 layout
  int taps = 4;            // after pools 1..taps
  bool imagenet_norm = true;
  std::uint64_t seed = 0;  // fallback initialization
};

/// VGG19 feature stack up to the fourth pooling stage. Parameter names follow the
/// torchvision `features.<index>` numbering so exported weights load directly.
template <typename T>
class Vgg19Extractor : public FeatureExtractor<T> {
 public:
  explicit Vgg19Extractor(const VggOptions& opt = {}) : opt_(opt) {
    if (opt.width_divisor < 1 || 64 % opt.width_divisor != 0) throw ConfigError("vgg width_divisor must divide 64");
    if (opt.taps < 1 || opt.taps > 4) throw ConfigError("vgg taps must be in 1..4");
    std::mt19937_64 rng(opt.seed);
    const Builder<T> b{&store_, &rng, "features"};
    static constexpr int kLayout[] = {64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0};
    int cin = 3, idx = 0;
    for (int v : kLayout) {
      if (v == 0) {
        layers_.push_back({Conv2d<T>(), true});
        ++idx;
        continue;
      }
      const int cout = v / opt.width_divisor;
      Conv2d<T> conv(b, std::to_string(idx), cin, cout, 3);
      // He-normal so random features keep their scale through 16 layers.
      std::normal_distribution<double> d(0.0, std::sqrt(2.0 / (9.0 * cin)));
      for (auto& w : conv.weight.mutable_value().vec()) w = static_cast<T>(d(rng));
      conv.bias.mutable_value().fill(T(0));
      layers_.push_back({conv, false});
      cin = cout;
      idx += 2;  // conv + relu
    }
    store_.set_requires_grad(false);
  }

  ParamStore<T>& params() { return store_; }
  [[nodiscard]] const VggOptions& options() const { return opt_; }
  [[nodiscard]] bool frozen() const override {
    for (const auto& p : store_.params())
      if (p.var.requires_grad()) return false;
    return true;
  }
  [[nodiscard]] int min_extent() const override { return 1 << opt_.taps; }

  std::vector<Var<T>> features(const Var<T>& x) const override {
    Var<T> h = x;
    if (opt_.imagenet_norm) {
      h = channel_affine(h, {T(1 / 0.229), T(1 / 0.224), T(1 / 0.225)},
                         {T(-0.485 / 0.229), T(-0.456 / 0.224), T(-0.406 / 0.225)});
    }
    std::vector<Var<T>> taps;
    for (const auto& l : layers_) {
      if (l.pool) {
        h = max_pool2(h);
        taps.push_back(h);
        if (static_cast<int>(taps.size()) == opt_.taps) break;
      } else {
        h = relu(l.conv(h));
      }
    }
    return taps;
  }

 private:
  struct Layer {
    Conv2d<T> conv;
    bool pool;
  };
  VggOptions opt_;
  ParamStore<T> store_;
  std::vector<Layer> layers_;
};

struct LossWeights {
  double lambda_p = 0.1;
  double lambda_f = 0.1;
  bool raw_phase_l1 = false;  // literal |phi_1 - phi_2| instead of the wrapped difference

  void validate() const {
    if (!(lambda_p >= 0) || !(lambda_f >= 0)) throw ConfigError("loss weights must be non-negative");
  }
};

/// Sum over scales of mean |pred - target|.
template <typename T>
Var<T> spatial_loss(const std::vector<Var<T>>& preds, const std::vector<Var<T>>& targets) {
  if (preds.size() != targets.size() || preds.empty()) throw ShapeError("spatial_loss: scale count mismatch");
  Var<T> acc;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto term = mean_abs_diff(preds[i], targets[i]);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

/// Sum over taps (and over the given scales) of mean |phi(pred) - phi(target)|.
/// Scales smaller than the extractor's minimum extent are skipped.
template <typename T>
Var<T> perceptual_loss(const std::vector<Var<T>>& preds, const std::vector<Var<T>>& targets,
                       const FeatureExtractor<T>& fx) {
  if (!fx.frozen()) throw ConfigError("perceptual extractor must be frozen");
  if (preds.size() != targets.size() || preds.empty()) throw ShapeError("perceptual_loss: scale count mismatch");
  Var<T> acc(Tensor<T>::scalar(T(0)));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    detail::require_same_shape(preds[i], targets[i], "perceptual_loss");
    if (std::min(preds[i].shape().h, preds[i].shape().w) < fx.min_extent()) continue;
    std::vector<Var<T>> ft;
    {
      NoGradGuard ng;
      ft = fx.features(targets[i]);
    }
    auto fp = fx.features(preds[i]);
    for (std::size_t k = 0; k < fp.size(); ++k) acc = add(acc, mean_abs_diff(fp[k], ft[k]));
  }
  return acc;
}

template <typename T>
Var<T> perceptual_loss(const Var<T>& pred, const Var<T>& target, const FeatureExtractor<T>& fx) {
  return perceptual_loss<T>(std::vector<Var<T>>{pred}, std::vector<Var<T>>{target}, fx);
}

/// mean |A(pred) - A(target)| + mean |wrap(P(pred) - P(target))|.
template <typename T>
Var<T> frequency_loss(const Var<T>& pred, const Var<T>& target, bool raw_phase = false) {
  detail::require_same_shape(pred, target, "frequency_loss");
  const Spectrum<T> sp = decompose(pred);
  Spectrum<T> st;
  {
    NoGradGuard ng;
    st = decompose(target);
  }
  auto phase = raw_phase ? mean_abs_diff(sp.phase, st.phase) : mean_abs_wrapped_diff(sp.phase, st.phase);
  return add(mean_abs_diff(sp.amplitude, st.amplitude), phase);
}

template <typename T>
struct LossBreakdown {
  Var<T> total;
  double spatial = 0;
  double perceptual = 0;
  double frequency = 0;
};

/// Targets for the model's output scales: the clean frame and its bilinear downsamples.
template <typename T>
std::vector<Var<T>> scale_targets(const ModelOutput<T>& out, const Var<T>& target) {
  detail::require_same_shape(out.pred, target, "scale_targets");
  std::vector<Var<T>> t{target};
  for (const Var<T>* aux : {&out.half, &out.quarter})
    if (aux->defined()) t.push_back(resize_bilinear(target, aux->shape().h, aux->shape().w));
  return t;
}

template <typename T>
std::vector<Var<T>> scale_preds(const ModelOutput<T>& out) {
  std::vector<Var<T>> p{out.pred};
  for (const Var<T>* aux : {&out.half, &out.quarter})
    if (aux->defined()) p.push_back(*aux);
  return p;
}

/// L_s + lambda_p L_p + lambda_f L_f. The frequency term uses the full-resolution output only.
template <typename T>
LossBreakdown<T> total_loss(const ModelOutput<T>& out, const Var<T>& target, const LossWeights& w,
                            const FeatureExtractor<T>* fx) {
  w.validate();
  const auto preds = scale_preds(out);
  std::vector<Var<T>> targets;
  {
    NoGradGuard ng;
    targets = scale_targets(out, target);
  }
  LossBreakdown<T> r;
  Var<T> total = spatial_loss(preds, targets);
  r.spatial = static_cast<double>(total.item());
  if (w.lambda_p > 0) {
    if (!fx) throw ConfigError("lambda_p > 0 needs a feature extractor");
    auto lp = perceptual_loss(preds, targets, *fx);
    r.perceptual = static_cast<double>(lp.item());
    total = add(total, scale(lp, static_cast<T>(w.lambda_p)));
  }
  if (w.lambda_f > 0) {
    auto lf = frequency_loss(out.pred, target, w.raw_phase_l1);
    r.frequency = static_cast<double>(lf.item());
    total = add(total, scale(lf, static_cast<T>(w.lambda_f)));
  }
  r.total = total;
  return r;
}

}  // namespace fpanet
