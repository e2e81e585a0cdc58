#pragma once

// Frequency Spatial Fusion block: a frequency-domain selective fusion module
// (FSM) followed by a multi-scale spatial fusion module (CSFM), both residual.

#include <string>
#include <vector>

#include "fpanet/frequency.hpp"
#include "fpanet/nn.hpp"

namespace fpanet {

/// Switches shared by every FSF block of a model.
struct FsfOptions {
  bool use_amp_phase = true;  // frequency branch present
  bool use_fsm = true;        // confidence-weighted selection inside the frequency branch
  bool use_csfm = true;
  int sfeb_expansion = 2;

  void validate() const {
    if (use_fsm && !use_amp_phase) throw ConfigError("use_fsm requires use_amp_phase");
    if (sfeb_expansion < 1) throw ConfigError("sfeb_expansion must be >= 1");
  }
};

/// Intermediate values recorded on request, for inspection and tests.
template <typename T>
struct FsfTrace {
  Tensor<T> alpha;           // (N, C, 1, 1)
  Tensor<T> beta;            // (N, C, 1, 1)
  Tensor<T> fusion_weights;  // (N, 3, H, W) after padding
  std::vector<Tensor<T>> branches;
};

/// Frequency branch. With `selective` off it degenerates to IFFT(Conv(A), Conv(P)).
template <typename T>
struct Fsm {
  int channels = 0;
  bool selective = true;
  Conv2d<T> pre1, pre2, head, amp_conv, phase_conv;

  Fsm() = default;
  Fsm(const Builder<T>& b, int c, bool selective_) : channels(c), selective(selective_) {
    if (selective) {
      pre1 = Conv2d<T>(b, "pre1", 2 * c, c, 1);
      pre2 = Conv2d<T>(b, "pre2", c, c, 3);
      head = Conv2d<T>(b, "head", c, 2 * c, 1);
    }
    amp_conv = Conv2d<T>(b, "amp_conv", c, c, 1);
    phase_conv = Conv2d<T>(b, "phase_conv", c, c, 1);
  }

  /// Confidence maps (alpha, beta), each (N, C, 1, 1), alpha + beta = 1.
  std::pair<Var<T>, Var<T>> confidence(const Spectrum<T>& s) const {
    auto z = pre2(pre1(concat_channels<T>({s.amplitude, s.phase})));
    auto w = softmax_branches(head(global_avg_pool(z)), 2);
    return {slice_channels(w, 0, channels), slice_channels(w, channels, channels)};
  }

  Var<T> operator()(const Var<T>& x, FsfTrace<T>* trace = nullptr) const {
    if (x.shape().c != channels) {
      throw ShapeError("fsm expects " + std::to_string(channels) + " channels, got " + x.shape().str());
    }
    const Spectrum<T> s = decompose(x);
    Var<T> a = s.amplitude, p = s.phase;
    if (selective) {
      auto [alpha, beta] = confidence(s);
      if (trace) {
        trace->alpha = alpha.value();
        trace->beta = beta.value();
      }
      a = mul_channel(a, alpha);
      p = mul_channel(p, beta);
    }
    return recompose(Spectrum<T>{amp_conv(a), phase_conv(p), s.source_width});
  }
};

/// 1x1 expand, depthwise 3x3, simple gate, simplified channel attention, 1x1 project.
template <typename T>
struct Sfeb {
  int channels = 0;
  Conv2d<T> expand, dw, sca, project;

  Sfeb() = default;
  Sfeb(const Builder<T>& b, int c, int expansion) : channels(c) {
    const int inner = c * expansion;
    if (inner % 2 != 0) {
      throw ConfigError("sfeb internal width " + std::to_string(inner) + " is odd; simple gate needs it even");
    }
    expand = Conv2d<T>(b, "expand", c, inner, 1);
    dw = Conv2d<T>(b, "dw", inner, inner, 3, 1, inner);
    sca = Conv2d<T>(b, "sca", inner / 2, inner / 2, 1);
    project = Conv2d<T>(b, "project", inner / 2, c, 1);
  }

  Var<T> operator()(const Var<T>& x) const {
    auto g = simple_gate(dw(expand(x)));
    g = mul_channel(g, sca(global_avg_pool(g)));
    return project(g);
  }
};

/// Three SFEB branches at x1, x1/2, x1/4 merged by per-pixel softmax weights.
template <typename T>
struct Csfm {
  static constexpr int kBranches = 3;
  int channels = 0;
  std::vector<Sfeb<T>> branches;
  Conv2d<T> fusion;

  Csfm() = default;
  Csfm(const Builder<T>& b, int c, int expansion) : channels(c) {
    for (int i = 0; i < kBranches; ++i) branches.emplace_back(b.sub("sfeb" + std::to_string(i)), c, expansion);
    fusion = Conv2d<T>(b, "fusion", kBranches * c, kBranches, 1);
  }

  Var<T> operator()(const Var<T>& x, FsfTrace<T>* trace = nullptr) const {
    const int H = x.shape().h, W = x.shape().w;
    const int ph = (4 - H % 4) % 4, pw = (4 - W % 4) % 4;
    const Var<T> xp = pad_reflect(x, ph, pw);
    const int Hp = H + ph, Wp = W + pw;
    std::vector<Var<T>> outs;
    for (int i = 0; i < kBranches; ++i) {
      const int f = 1 << i;
      auto y = branches[i](resize_bilinear(xp, Hp / f, Wp / f));
      outs.push_back(resize_bilinear(y, Hp, Wp));
    }
    auto w = softmax_branches(fusion(concat_channels(outs)), kBranches);
    Var<T> acc;
    for (int i = 0; i < kBranches; ++i) {
      auto term = mul_spatial(outs[i], slice_channels(w, i, 1));
      acc = acc.defined() ? add(acc, term) : term;
    }
    if (trace) {
      trace->fusion_weights = w.value();
      trace->branches.clear();
      for (const auto& o : outs) trace->branches.push_back(o.value());
    }
    return crop(acc, H, W);
  }
};

/// y1 = FSM(x) + x, y = CSFM(y1) + y1; disabled parts are skipped and own no parameters.
template <typename T>
struct FsfBlock {
  FsfOptions opt;
  Fsm<T> fsm;
  Csfm<T> csfm;

  FsfBlock() = default;
  FsfBlock(const Builder<T>& b, int c, const FsfOptions& o) : opt(o) {
    opt.validate();
    if (opt.use_amp_phase) fsm = Fsm<T>(b.sub("fsm"), c, opt.use_fsm);
    if (opt.use_csfm) csfm = Csfm<T>(b.sub("csfm"), c, opt.sfeb_expansion);
  }

  Var<T> operator()(const Var<T>& x, FsfTrace<T>* trace = nullptr) const {
    Var<T> y = opt.use_amp_phase ? add(fsm(x, trace), x) : x;
    if (opt.use_csfm) y = add(csfm(y, trace), y);
    return y;
  }
};

}  // namespace fpanet
