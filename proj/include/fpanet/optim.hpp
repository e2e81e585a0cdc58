#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "fpanet/checkpoint.hpp"
#include "fpanet/nn.hpp"

namespace fpanet {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled; skipped for parameters with decay = false
};

/// Adam with decoupled weight decay: p <- p (1 - lr wd), then the bias-corrected
/// moment step.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {
    if (!(opt.beta1 >= 0 && opt.beta1 < 1) || !(opt.beta2 >= 0 && opt.beta2 < 1) || !(opt.eps > 0) ||
        !(opt.weight_decay >= 0)) {
      throw ConfigError("invalid AdamW hyperparameters");
    }
  }

  [[nodiscard]] std::int64_t steps() const { return step_; }

  void step(ParamStore<T>& ps, double lr) {
    ++step_;
    const double bc1 = 1 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (auto& p : ps.params()) {
      if (!p.var.requires_grad()) continue;
      auto& w = p.var.mutable_value();
      auto [it, fresh] = state_.try_emplace(p.name);
      if (fresh) it->second = {Tensor<T>(w.shape()), Tensor<T>(w.shape())};
      auto& [m, v] = it->second;
      if (!p.var.has_grad()) continue;
      const auto& g = p.var.grad();
      const T decay = p.decay ? static_cast<T>(1 - lr * opt_.weight_decay) : T(1);
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = static_cast<T>(opt_.beta1 * m[i] + (1 - opt_.beta1) * g[i]);
        v[i] = static_cast<T>(opt_.beta2 * v[i] + (1 - opt_.beta2) * g[i] * g[i]);
        const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
        w[i] = static_cast<T>(w[i] * decay - lr * upd);
      }
    }
  }

  void save_state(Checkpoint& ck) const {
    ck.meta["optim_step"] = step_;
    for (const auto& [name, mv] : state_) {
      ck.tensors[kOptimPrefix + "m." + name] = mv.first.template cast<double>();
      ck.tensors[kOptimPrefix + "v." + name] = mv.second.template cast<double>();
    }
  }

  void load_state(const Checkpoint& ck, const ParamStore<T>& ps) {
    state_.clear();
    step_ = ck.meta.value("optim_step", std::int64_t{0});
    for (const auto& p : ps.params()) {
      auto m = ck.tensors.find(kOptimPrefix + "m." + p.name);
      auto v = ck.tensors.find(kOptimPrefix + "v." + p.name);
      if (m == ck.tensors.end() || v == ck.tensors.end()) {
        if (step_ > 0 && p.var.requires_grad()) throw ConfigError("checkpoint lacks optimizer state for " + p.name);
        continue;
      }
      state_[p.name] = {m->second.template cast<T>(), v->second.template cast<T>()};
    }
  }

 private:
  AdamWOptions opt_;
  std::int64_t step_ = 0;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> state_;
};

/// Cosine annealing with warm restarts: within a cycle of length T_i starting at s_i,
/// lr = lr_min + (lr_max - lr_min) (1 + cos(pi (t - s_i) / T_i)) / 2; T_{i+1} = mult T_i.
struct CosineWarmRestarts {
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  std::int64_t period = 10000;
  double mult = 1.0;

  void validate() const {
    if (!(lr_max > 0)) throw ConfigError("lr must be positive");
    if (!(lr_min >= 0 && lr_min <= lr_max)) throw ConfigError("lr_min must lie in [0, lr]");
    if (period < 1) throw ConfigError("restart period must be >= 1");
    if (!(mult >= 1)) throw ConfigError("restart multiplier must be >= 1");
  }

  [[nodiscard]] double lr(std::int64_t it) const {
    double len = static_cast<double>(period);
    double t = static_cast<double>(it);
    while (t >= len) {
      t -= len;
      len *= mult;
    }
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + std::cos(std::numbers::pi * t / len));
  }
};

/// Scales gradients so their global L2 norm is at most max_norm; returns the norm
/// before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& ps, double max_norm) {
  double sq = 0;
  for (auto& p : ps.params())
    if (p.var.has_grad())
      for (T g : p.var.grad().vec()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : ps.params())
      if (p.var.has_grad())
        for (T& g : p.var.grad().vec()) g *= s;
  }
  return norm;
}

}  // namespace fpanet
