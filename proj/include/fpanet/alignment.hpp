#pragma once

// Post-alignment: offsets predicted from neighbor/reference feature pairs,
// propagated coarse to fine, consumed by a 3x3 deformable convolution.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "fpanet/nn.hpp"

namespace fpanet {

inline constexpr int kDeformTaps = 9;

enum class AlignTarget { neighbor, reference };

namespace detail {

// Bilinear sampling plan for one (group, tap) pair over all output pixels.
template <typename T>
struct SamplePlan {
  std::vector<int> y0, y1, x0, x1;
  std::vector<T> ly, lx;
  std::vector<unsigned char> free_y, free_x;  // 0 where the coordinate was clamped
};

template <typename T>
SamplePlan<T> plan_samples(const T* dy, const T* dx, int H, int W, int ky, int kx) {
  const std::size_t P = static_cast<std::size_t>(H) * W;
  SamplePlan<T> s;
  s.y0.resize(P), s.y1.resize(P), s.x0.resize(P), s.x1.resize(P);
  s.ly.resize(P), s.lx.resize(P), s.free_y.resize(P), s.free_x.resize(P);
  auto axis = [](T raw, int n, int& i0, int& i1, T& l, unsigned char& fr) {
    T c = raw;
    fr = 1;
    if (c <= T(0)) {
      c = T(0);
      fr = raw == T(0) ? 1 : 0;
    } else if (c >= T(n - 1)) {
      c = T(n - 1);
      fr = raw == T(n - 1) ? 1 : 0;
    }
    i0 = std::min(static_cast<int>(std::floor(c)), n - 1);
    i1 = std::min(i0 + 1, n - 1);
    l = c - T(i0);
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      axis(T(y + ky - 1) + dy[p], H, s.y0[p], s.y1[p], s.ly[p], s.free_y[p]);
      axis(T(x + kx - 1) + dx[p], W, s.x0[p], s.x1[p], s.lx[p], s.free_x[p]);
    }
  return s;
}

template <typename T>
T bilinear_at(const T* src, int W, const SamplePlan<T>& s, std::size_t p) {
  const T a = src[s.y0[p] * W + s.x0[p]], b = src[s.y0[p] * W + s.x1[p]];
  const T c = src[s.y1[p] * W + s.x0[p]], d = src[s.y1[p] * W + s.x1[p]];
  const T ly = s.ly[p], lx = s.lx[p];
  return (T(1) - ly) * ((T(1) - lx) * a + lx * b) + ly * ((T(1) - lx) * c + lx * d);
}

}  // namespace detail

/// 3x3 deformable convolution without modulation. offset (N, 18G, H, W) holds, for
/// group g and tap k = 3 ky + kx, dy at channel 18 g + 2 k and dx at 18 g + 2 k + 1.
/// Sampling coordinates are clamped to the border before bilinear interpolation.
template <typename T>
Var<T> deform_conv2d(const Var<T>& x, const Var<T>& offset, const Var<T>& weight, const Var<T>& bias,
                     int groups) {
  const Shape xs = x.shape();
  const Shape os = offset.shape();
  const Shape ws = weight.shape();
  const int C = xs.c, H = xs.h, W = xs.w;
  detail::require(groups >= 1 && C % groups == 0, "deform_conv2d: channels not divisible by groups");
  detail::require(os == Shape{xs.n, 2 * kDeformTaps * groups, H, W},
                  "deform_conv2d: offset shape " + os.str() + " inconsistent with input " + xs.str() +
                      " and " + std::to_string(groups) + " groups");
  detail::require(ws.c == C && ws.h == 3 && ws.w == 3, "deform_conv2d: weight shape " + ws.str());
  const bool has_bias = bias.defined();
  if (has_bias) detail::require(bias.shape() == Shape{1, ws.n, 1, 1}, "deform_conv2d: bias shape");
  const int Cout = ws.n;
  const int cg = C / groups;
  const int K = C * kDeformTaps;
  const std::size_t P = static_cast<std::size_t>(H) * W;

  auto plans_for = [=](const Tensor<T>& off, int n) {
    std::vector<detail::SamplePlan<T>> plans;
    plans.reserve(static_cast<std::size_t>(groups) * kDeformTaps);
    for (int g = 0; g < groups; ++g)
      for (int k = 0; k < kDeformTaps; ++k)
        plans.push_back(detail::plan_samples(off.plane(n, 18 * g + 2 * k), off.plane(n, 18 * g + 2 * k + 1), H, W,
                                             k / 3, k % 3));
    return plans;
  };
  auto fill_col = [=](const Tensor<T>& xv, int n, const std::vector<detail::SamplePlan<T>>& plans, T* col) {
    for (int c = 0; c < C; ++c) {
      const T* src = xv.plane(n, c);
      const int g = c / cg;
      for (int k = 0; k < kDeformTaps; ++k) {
        const auto& s = plans[g * kDeformTaps + k];
        T* row = col + (static_cast<std::size_t>(c) * kDeformTaps + k) * P;
        for (std::size_t p = 0; p < P; ++p) row[p] = detail::bilinear_at(src, W, s, p);
      }
    }
  };

  Tensor<T> out(Shape{xs.n, Cout, H, W});
  Buffer<T> col(static_cast<std::size_t>(K) * P);
  Eigen::Map<const detail::RowMat<T>> Wm(weight.value().data(), Cout, K);
  for (int n = 0; n < xs.n; ++n) {
    fill_col(x.value(), n, plans_for(offset.value(), n), col.data());
    Eigen::Map<const detail::RowMat<T>> Cm(col.data(), K, static_cast<Eigen::Index>(P));
    Eigen::Map<detail::RowMat<T>> Om(out.plane(n, 0), Cout, static_cast<Eigen::Index>(P));
    Om.noalias() = Wm * Cm;
    if (has_bias)
      for (int o = 0; o < Cout; ++o) Om.row(o).array() += bias.value()[o];
  }

  std::vector<Var<T>> parents{x, offset, weight};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& ov = self.parents[1]->value;
    const auto& wv = self.parents[2]->value;
    auto* gx = grad_sink(self, 0);
    auto* goff = grad_sink(self, 1);
    auto* gw = grad_sink(self, 2);
    Tensor<T>* gb = has_bias ? grad_sink(self, 3) : nullptr;
    const Tensor<T>& go = self.grad;
    Buffer<T> col(static_cast<std::size_t>(K) * P), dcol(static_cast<std::size_t>(K) * P);
    Eigen::Map<const detail::RowMat<T>> Wm(wv.data(), Cout, K);
    for (int n = 0; n < xs.n; ++n) {
      Eigen::Map<const detail::RowMat<T>> Gm(go.plane(n, 0), Cout, static_cast<Eigen::Index>(P));
      if (gb)
        for (int o = 0; o < Cout; ++o) (*gb)[o] += Gm.row(o).sum();
      const auto plans = plans_for(ov, n);
      if (gw) {
        fill_col(xv, n, plans, col.data());
        Eigen::Map<const detail::RowMat<T>> Cm(col.data(), K, static_cast<Eigen::Index>(P));
        Eigen::Map<detail::RowMat<T>> GWm(gw->data(), Cout, K);
        GWm.noalias() += Gm * Cm.transpose();
      }
      if (!gx && !goff) continue;
      Eigen::Map<detail::RowMat<T>> Dm(dcol.data(), K, static_cast<Eigen::Index>(P));
      Dm.noalias() = Wm.transpose() * Gm;
      for (int c = 0; c < C; ++c) {
        const T* src = xv.plane(n, c);
        T* gxp = gx ? gx->plane(n, c) : nullptr;
        const int g = c / cg;
        for (int k = 0; k < kDeformTaps; ++k) {
          const auto& s = plans[g * kDeformTaps + k];
          const T* d = dcol.data() + (static_cast<std::size_t>(c) * kDeformTaps + k) * P;
          T* gdy = goff ? goff->plane(n, 18 * g + 2 * k) : nullptr;
          T* gdx = goff ? goff->plane(n, 18 * g + 2 * k + 1) : nullptr;
          for (std::size_t p = 0; p < P; ++p) {
            const T v = d[p];
            if (v == T(0)) continue;
            const T ly = s.ly[p], lx = s.lx[p];
            const int i00 = s.y0[p] * W + s.x0[p], i01 = s.y0[p] * W + s.x1[p];
            const int i10 = s.y1[p] * W + s.x0[p], i11 = s.y1[p] * W + s.x1[p];
            if (gxp) {
              gxp[i00] += v * (T(1) - ly) * (T(1) - lx);
              gxp[i01] += v * (T(1) - ly) * lx;
              gxp[i10] += v * ly * (T(1) - lx);
              gxp[i11] += v * ly * lx;
            }
            if (goff) {
              const T a = src[i00], b = src[i01], cc = src[i10], dd = src[i11];
              if (s.free_y[p] && s.y1[p] != s.y0[p]) gdy[p] += v * ((T(1) - lx) * (cc - a) + lx * (dd - b));
              if (s.free_x[p] && s.x1[p] != s.x0[p]) gdx[p] += v * ((T(1) - ly) * (b - a) + ly * (dd - cc));
            }
          }
        }
      }
    }
  });
}

/// Bilinear x2 upscaling of an offset field; displacement values double with the grid.
template <typename T>
Var<T> upscale_offset(const Var<T>& offset, int out_h, int out_w) {
  const Shape s = offset.shape();
  if (out_h != 2 * s.h || out_w != 2 * s.w) {
    throw ShapeError("previous offset " + s.str() + " is not half of " + std::to_string(out_h) + "x" +
                     std::to_string(out_w));
  }
  return scale(resize_bilinear(offset, out_h, out_w), T(2));
}

/// One decoder-stage alignment unit: offset head, shared deformable kernel, fusion conv.
template <typename T>
struct PamStage {
  int channels = 0;
  int groups = 1;
  bool has_prev = false;
  AlignTarget target = AlignTarget::neighbor;
  Conv2d<T> feat;     // concat(n, ref) -> C, finer stages only
  Conv2d<T> off;      // -> 18 G, zero-initialized
  Conv2d<T> dconv;    // deformable kernel (C, C, 3, 3), used through deform_conv2d
  Conv2d<T> fuse;     // concat(decoder_in, A_prev, A_next) -> C

  PamStage() = default;
  PamStage(const Builder<T>& b, int c, int g, bool has_prev_, AlignTarget t)
      : channels(c), groups(g), has_prev(has_prev_), target(t) {
    if (g < 1 || c % g != 0) throw ConfigError("deformable groups must divide stage width");
    const int oc = 2 * kDeformTaps * g;
    if (has_prev) {
      feat = Conv2d<T>(b, "feat", 2 * c, c, 3);
      off = Conv2d<T>(b, "offset", c + oc, oc, 3);
    } else {
      off = Conv2d<T>(b, "offset", 2 * c, oc, 3);
    }
    off.zero();
    dconv = Conv2d<T>(b, "dconv", c, c, 3);
    fuse = Conv2d<T>(b, "fuse", 3 * c, c, 1);
    // Identity on the decoder_in block; the aligned blocks keep their random init.
    auto& w = fuse.weight.mutable_value();
    for (int o = 0; o < c; ++o)
      for (int i = 0; i < c; ++i) w.at(o, i, 0, 0) = T(o == i ? 1 : 0);
    fuse.bias.mutable_value().fill(T(0));
  }

  /// Fusion that returns decoder_in unchanged.
  void set_identity_fusion() {
    auto& w = fuse.weight.mutable_value();
    w.fill(T(0));
    for (int o = 0; o < channels; ++o) w.at(o, o, 0, 0) = T(1);
    fuse.bias.mutable_value().fill(T(0));
  }

  [[nodiscard]] T max_offset(int H, int W) const { return static_cast<T>(std::max(H, W)) / T(2); }

  /// Coarsest stage: Conv([n, ref]). Finer: Conv([Conv([n, ref]), Up(prev)]).
  Var<T> compute_offset(const Var<T>& neighbor, const Var<T>& reference, const std::optional<Var<T>>& prev) const {
    detail::require_same_shape(neighbor, reference, "compute_offset");
    if (neighbor.shape().c != channels) throw ShapeError("compute_offset: channel mismatch " + neighbor.shape().str());
    const int H = neighbor.shape().h, W = neighbor.shape().w;
    auto pair = concat_channels<T>({neighbor, reference});
    Var<T> o;
    if (has_prev) {
      if (!prev) throw ShapeError("compute_offset: stage expects a coarser offset field");
      o = off(concat_channels<T>({feat(pair), upscale_offset(*prev, H, W)}));
    } else {
      if (prev) throw ShapeError("compute_offset: coarsest stage takes no previous offset");
      o = off(pair);
    }
    const T m = max_offset(H, W);
    return clamp(o, -m, m);
  }

  Var<T> deform_align(const Var<T>& feature, const Var<T>& offset) const {
    return deform_conv2d(feature, offset, dconv.weight, dconv.bias, groups);
  }

  Var<T> pam_fuse(const Var<T>& decoder_in, const Var<T>& a_prev, const Var<T>& a_next) const {
    detail::require_same_shape(decoder_in, a_prev, "pam_fuse");
    detail::require_same_shape(decoder_in, a_next, "pam_fuse");
    return fuse(concat_channels<T>({decoder_in, a_prev, a_next}));
  }

  struct Result {
    Var<T> fused;
    Var<T> offset_prev;
    Var<T> offset_next;
  };

  /// Full stage: offsets for both neighbors, alignment, fusion with the decoder stream.
  Result operator()(const Var<T>& decoder_in, const Var<T>& f_prev, const Var<T>& f_ref, const Var<T>& f_next,
                    const std::optional<Var<T>>& prev_offset_prev,
                    const std::optional<Var<T>>& prev_offset_next) const {
    Result r;
    r.offset_prev = compute_offset(f_prev, f_ref, prev_offset_prev);
    r.offset_next = compute_offset(f_next, f_ref, prev_offset_next);
    const bool lit = target == AlignTarget::reference;
    auto a_prev = deform_align(lit ? f_ref : f_prev, r.offset_prev);
    auto a_next = deform_align(lit ? f_ref : f_next, r.offset_next);
    r.fused = pam_fuse(decoder_in, a_prev, a_next);
    return r;
  }
};

}  // namespace fpanet
