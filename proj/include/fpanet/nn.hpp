#pragma once

// Named parameter storage and the small layer wrappers the model is built from.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fpanet/ops.hpp"

namespace fpanet {

template <typename T>
struct Param {
  std::string name;
  Var<T> var;
  bool decay = true;  // weight decay applies (false for biases)
};

/// Ordered map from hierarchical names ("enc.1.0.fsm.pre1.weight") to trainable tensors.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> value, bool decay) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({name, Var<T>(std::move(value), true), decay});
    return params_.back().var;
  }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Var<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return params_[it->second].var;
  }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  /// Number of scalar parameters whose name starts with `prefix`.
  [[nodiscard]] std::size_t count(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.name.compare(0, prefix.size(), prefix) == 0) n += p.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  void set_requires_grad(bool r) {
    for (auto& p : params_) p.var.set_requires_grad(r);
  }

  /// Sets every parameter to zero.
  void zero_values() {
    for (auto& p : params_) p.var.mutable_value().fill(T(0));
  }

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Parameter construction context: store, name prefix and initialization RNG.
template <typename T>
struct Builder {
  ParamStore<T>* store;
  std::mt19937_64* rng;
  std::string prefix;

  [[nodiscard]] Builder sub(const std::string& name) const {
    return Builder{store, rng, prefix.empty() ? name : prefix + "." + name};
  }
  [[nodiscard]] std::string full(const std::string& name) const {
    return prefix.empty() ? name : prefix + "." + name;
  }

  /// U(-bound, bound) tensor.
  Var<T> uniform(const std::string& name, Shape s, double bound, bool decay) const {
    std::uniform_real_distribution<double> d(-bound, bound);
    Tensor<T> t(s);
    for (auto& v : t.vec()) v = static_cast<T>(d(*rng));
    return store->add(full(name), std::move(t), decay);
  }
  Var<T> zeros(const std::string& name, Shape s, bool decay) const {
    return store->add(full(name), Tensor<T>(s), decay);
  }
};

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;
  int pad = 0;
  int groups = 1;

  Conv2d() = default;
  /// Weights and bias drawn from U(+-1/sqrt(fan_in)).
  Conv2d(const Builder<T>& b, const std::string& name, int cin, int cout, int k, int stride_ = 1,
         int groups_ = 1, bool with_bias = true)
      : stride(stride_), pad(k / 2), groups(groups_) {
    if (cin % groups != 0 || cout % groups != 0) throw ConfigError(name + ": channels not divisible by groups");
    const auto sb = b.sub(name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin / groups * k * k));
    weight = sb.uniform("weight", Shape{cout, cin / groups, k, k}, bound, true);
    if (with_bias) bias = sb.uniform("bias", Shape{1, cout, 1, 1}, bound, false);
  }

  [[nodiscard]] int in_channels() const { return weight.shape().c * groups; }
  [[nodiscard]] int out_channels() const { return weight.shape().n; }

  Var<T> operator()(const Var<T>& x) const {
    if (x.shape().c != in_channels()) {
      throw ShapeError("conv expects " + std::to_string(in_channels()) + " channels, got " + x.shape().str());
    }
    return conv2d(x, weight, bias, stride, pad, groups);
  }

  void zero() {
    weight.mutable_value().fill(T(0));
    if (bias.defined()) bias.mutable_value().fill(T(0));
  }
};

}  // namespace fpanet
