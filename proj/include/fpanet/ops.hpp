#pragma once

// Differentiable tensor operations on Var<T>. Every op computes its forward
// value eagerly and records a closure that scatters the output gradient into
// its parents.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "fpanet/autograd.hpp"
#include "fpanet/tensor.hpp"

namespace fpanet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = grad_sink(self, p)) *g += self.grad;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) *g += self.grad;
    if (auto* g = grad_sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = grad_sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v += s;
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) *g += self.grad;
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > T(0)) (*g)[i] += self.grad[i];
  });
}

/// Hard clamp; gradient passes only strictly inside (lo, hi).
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v = std::clamp(v, lo, hi);
  return make_result<T>(std::move(out), {a}, [lo, hi](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > lo && x[i] < hi) (*g)[i] += self.grad[i];
  });
}

/// x (N,C,H,W) times per-channel factors w (N,C,1,1).
template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& w) {
  const Shape s = x.shape();
  detail::require(w.shape() == Shape{s.n, s.c, 1, 1},
                  "mul_channel: factor shape " + w.shape().str() + " vs " + s.str());
  Tensor<T> out(s);
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T f = w.value().at(n, c, 0, 0);
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) dst[i] = src[i] * f;
    }
  return make_result<T>(std::move(out), {x, w}, [](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    const Shape s = xv.shape();
    const std::size_t P = s.plane();
    auto* gx = grad_sink(self, 0);
    auto* gw = grad_sink(self, 1);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* go = self.grad.plane(n, c);
        if (gx) {
          const T f = wv.at(n, c, 0, 0);
          T* d = gx->plane(n, c);
          for (std::size_t i = 0; i < P; ++i) d[i] += go[i] * f;
        }
        if (gw) {
          const T* src = xv.plane(n, c);
          T acc = 0;
          for (std::size_t i = 0; i < P; ++i) acc += go[i] * src[i];
          gw->at(n, c, 0, 0) += acc;
        }
      }
  });
}

/// x (N,C,H,W) times a per-position map w (N,1,H,W) shared across channels.
template <typename T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& w) {
  const Shape s = x.shape();
  detail::require(w.shape() == Shape{s.n, 1, s.h, s.w},
                  "mul_spatial: map shape " + w.shape().str() + " vs " + s.str());
  Tensor<T> out(s);
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const T* m = w.value().plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) dst[i] = src[i] * m[i];
    }
  }
  return make_result<T>(std::move(out), {x, w}, [](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    const Shape s = xv.shape();
    const std::size_t P = s.plane();
    auto* gx = grad_sink(self, 0);
    auto* gw = grad_sink(self, 1);
    for (int n = 0; n < s.n; ++n) {
      const T* m = wv.plane(n, 0);
      for (int c = 0; c < s.c; ++c) {
        const T* go = self.grad.plane(n, c);
        if (gx) {
          T* d = gx->plane(n, c);
          for (std::size_t i = 0; i < P; ++i) d[i] += go[i] * m[i];
        }
        if (gw) {
          const T* src = xv.plane(n, c);
          T* d = gw->plane(n, 0);
          for (std::size_t i = 0; i < P; ++i) d[i] += go[i] * src[i];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels of nothing");
  Shape s = parts.front().shape();
  s.c = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    detail::require(ps.n == s.n && ps.h == s.h && ps.w == s.w,
                    "concat_channels: mismatched " + ps.str() + " vs " + parts.front().shape().str());
    s.c += ps.c;
  }
  Tensor<T> out(s);
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().c;
      std::copy_n(p.value().plane(n, 0), pc * P, out.plane(n, c0));
      c0 += pc;
    }
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& self) {
    const Shape s = self.value.shape();
    const std::size_t P = s.plane();
    int c0 = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const int pc = self.parents[k]->value.c();
      if (auto* g = grad_sink(self, k)) {
        for (int n = 0; n < s.n; ++n) {
          const T* src = self.grad.plane(n, c0);
          T* dst = g->plane(n, 0);
          for (std::size_t i = 0; i < pc * P; ++i) dst[i] += src[i];
        }
      }
      c0 += pc;
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int start, int count) {
  const Shape xs = x.shape();
  detail::require(start >= 0 && count >= 0 && start + count <= xs.c,
                  "slice_channels out of range for " + xs.str());
  Shape s = xs;
  s.c = count;
  Tensor<T> out(s);
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n) std::copy_n(x.value().plane(n, start), count * P, out.plane(n, 0));
  return make_result<T>(std::move(out), {x}, [start](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const Shape s = self.value.shape();
    const std::size_t P = s.plane();
    for (int n = 0; n < s.n; ++n) {
      const T* src = self.grad.plane(n, 0);
      T* dst = g->plane(n, start);
      for (std::size_t i = 0; i < s.c * P; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> concat_batch(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_batch of nothing");
  std::vector<Tensor<T>> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  Tensor<T> out = stack_batch<T>(values);
  return make_result<T>(std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t len = self.parents[k]->value.size();
      if (auto* g = grad_sink(self, k))
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[offset + i];
      offset += len;
    }
  });
}

template <typename T>
Var<T> slice_batch(const Var<T>& x, int first, int count) {
  Tensor<T> out = x.value().slice_batch(first, count);
  return make_result<T>(std::move(out), {x}, [first](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const std::size_t offset = static_cast<std::size_t>(first) * self.value.c() * self.value.shape().plane();
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[offset + i] += self.grad[i];
  });
}

/// Reflective padding on the bottom and right edges (replicate when an extent is 1).
template <typename T>
Var<T> pad_reflect(const Var<T>& x, int pad_bottom, int pad_right) {
  if (pad_bottom == 0 && pad_right == 0) return x;
  const Shape xs = x.shape();
  detail::require(pad_bottom >= 0 && pad_right >= 0, "pad_reflect: negative padding");
  Shape s = xs;
  s.h += pad_bottom;
  s.w += pad_right;
  // Repeated reflection, so padding may exceed the extent.
  auto src_index = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  std::vector<int> ry(s.h), rx(s.w);
  for (int i = 0; i < s.h; ++i) ry[i] = src_index(i, xs.h);
  for (int i = 0; i < s.w; ++i) rx[i] = src_index(i, xs.w);
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) dst[y * s.w + xx] = src[ry[y] * xs.w + rx[xx]];
    }
  return make_result<T>(std::move(out), {x}, [ry, rx](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const Shape s = self.value.shape();
    const int iw = g->w();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* go = self.grad.plane(n, c);
        T* d = g->plane(n, c);
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx) d[ry[y] * iw + rx[xx]] += go[y * s.w + xx];
      }
  });
}

/// Keeps the top-left (h, w) window.
template <typename T>
Var<T> crop(const Var<T>& x, int h, int w) {
  const Shape xs = x.shape();
  if (h == xs.h && w == xs.w) return x;
  detail::require(h <= xs.h && w <= xs.w && h > 0 && w > 0, "crop larger than " + xs.str());
  Shape s = xs;
  s.h = h;
  s.w = w;
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        std::copy_n(x.value().plane(n, c) + y * xs.w, w, out.plane(n, c) + y * w);
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const Shape s = self.value.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y) {
          const T* go = self.grad.plane(n, c) + y * s.w;
          T* d = g->plane(n, c) + y * g->w();
          for (int xx = 0; xx < s.w; ++xx) d[xx] += go[xx];
        }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

template <typename T>
void im2col(const T* in, int C, int H, int W, int k, int stride, int pad, int OH, int OW, T* col) {
  const int P = OH * OW;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * P;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* r = row + oy * OW;
          if (iy < 0 || iy >= H) {
            std::fill(r, r + OW, T(0));
            continue;
          }
          const T* src = in + (static_cast<std::size_t>(c) * H + iy) * W;
          if (stride == 1) {
            const int lo = std::min(OW, std::max(0, pad - kx));
            const int hi = std::max(lo, std::min(OW, W + pad - kx));
            std::fill(r, r + lo, T(0));
            for (int ox = lo; ox < hi; ++ox) r[ox] = src[ox - pad + kx];
            std::fill(r + hi, r + OW, T(0));
          } else {
            for (int ox = 0; ox < OW; ++ox) {
              const int ix = ox * stride - pad + kx;
              r[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
            }
          }
        }
      }
}

template <typename T>
void col2im(const T* col, int C, int H, int W, int k, int stride, int pad, int OH, int OW, T* in) {
  const int P = OH * OW;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * P;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = in + (static_cast<std::size_t>(c) * H + iy) * W;
          const T* r = row + oy * OW;
          if (stride == 1) {
            const int lo = std::min(OW, std::max(0, pad - kx));
            const int hi = std::max(lo, std::min(OW, W + pad - kx));
            T* d = dst - pad + kx;
            for (int ox = lo; ox < hi; ++ox) d[ox] += r[ox];
            continue;
          }
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += r[ox];
          }
        }
      }
}

/// Visits the valid (tap, output row) spans of a stride-1 zero-padded k x k
/// depthwise filter: fn(ky, kx, oy, ox0, ox1, iy, ix0), where output columns
/// [ox0, ox1) of row oy read input row iy starting at column ix0.
template <typename Fn>
void depthwise_taps(int k, int pad, int OH, int OW, int H, int W, Fn&& fn) {
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx) {
      const int ox0 = std::max(0, pad - kx), ox1 = std::min(OW, W + pad - kx);
      if (ox0 >= ox1) continue;
      for (int oy = std::max(0, pad - ky); oy < std::min(OH, H + pad - ky); ++oy)
        fn(ky, kx, oy, ox0, ox1, oy - pad + ky, ox0 - pad + kx);
    }
}

}  // namespace detail

/// Zero-padded 2-D convolution (cross-correlation). weight (Cout, Cin/groups, k, k),
/// bias (1, Cout, 1, 1) or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad,
              int groups = 1) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int k = ws.h;
  detail::require(ws.h == ws.w, "conv2d: non-square kernel " + ws.str());
  detail::require(groups >= 1 && xs.c % groups == 0 && ws.n % groups == 0,
                  "conv2d: channels not divisible by groups");
  detail::require(ws.c * groups == xs.c, "conv2d: weight " + ws.str() + " does not accept input " + xs.str());
  const bool has_bias = bias.defined();
  if (has_bias) detail::require(bias.shape() == Shape{1, ws.n, 1, 1}, "conv2d: bias shape " + bias.shape().str());
  const int OH = (xs.h + 2 * pad - k) / stride + 1;
  const int OW = (xs.w + 2 * pad - k) / stride + 1;
  detail::require(OH > 0 && OW > 0, "conv2d: input too small " + xs.str());
  const int Cout = ws.n;
  const int cin_g = xs.c / groups;
  const int cout_g = Cout / groups;
  const int K = cin_g * k * k;
  const int P = OH * OW;
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  const bool depthwise = (groups == xs.c && cin_g == 1 && cout_g == 1 && stride == 1);

  Tensor<T> out(Shape{xs.n, Cout, OH, OW});
  const T* wv = weight.value().data();
  if (depthwise) {
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        const T* src = x.value().plane(n, c);
        T* dst = out.plane(n, c);
        const T* wk = wv + static_cast<std::size_t>(c) * k * k;
        std::fill(dst, dst + P, has_bias ? bias.value()[c] : T(0));
        detail::depthwise_taps(k, pad, OH, OW, xs.h, xs.w, [&](int ky, int kx, int oy, int ox0, int ox1, int iy, int ix0) {
          const T wt = wk[ky * k + kx];
          T* d = dst + oy * OW;
          const T* s = src + iy * xs.w + ix0 - ox0;
          for (int ox = ox0; ox < ox1; ++ox) d[ox] += wt * s[ox];
        });
      }
  } else {
    Buffer<T> col(direct ? 0 : static_cast<std::size_t>(K) * P);
    for (int n = 0; n < xs.n; ++n)
      for (int g = 0; g < groups; ++g) {
        const T* in = x.value().plane(n, g * cin_g);
        const T* colp = in;
        if (!direct) {
          detail::im2col(in, cin_g, xs.h, xs.w, k, stride, pad, OH, OW, col.data());
          colp = col.data();
        }
        Eigen::Map<const detail::RowMat<T>> Wm(wv + static_cast<std::size_t>(g) * cout_g * K, cout_g, K);
        Eigen::Map<const detail::RowMat<T>> Cm(colp, K, P);
        Eigen::Map<detail::RowMat<T>> Om(out.plane(n, g * cout_g), cout_g, P);
        Om.noalias() = Wm * Cm;
        if (has_bias)
          for (int o = 0; o < cout_g; ++o) Om.row(o).array() += bias.value()[g * cout_g + o];
      }
  }

  std::vector<Var<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wt = self.parents[1]->value;
    auto* gx = grad_sink(self, 0);
    auto* gw = grad_sink(self, 1);
    Tensor<T>* gb = has_bias ? grad_sink(self, 2) : nullptr;
    const Tensor<T>& go = self.grad;
    if (gb) {
      for (int n = 0; n < xs.n; ++n)
        for (int o = 0; o < Cout; ++o) {
          const T* p = go.plane(n, o);
          T acc = 0;
          for (int i = 0; i < P; ++i) acc += p[i];
          (*gb)[o] += acc;
        }
    }
    if (depthwise) {
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          const T* src = xv.plane(n, c);
          const T* gop = go.plane(n, c);
          const T* wk = wt.data() + static_cast<std::size_t>(c) * k * k;
          T* gxp = gx ? gx->plane(n, c) : nullptr;
          T* gwk = gw ? gw->data() + static_cast<std::size_t>(c) * k * k : nullptr;
          detail::depthwise_taps(k, pad, OH, OW, xs.h, xs.w, [&](int ky, int kx, int oy, int ox0, int ox1, int iy, int ix0) {
            const T* g = gop + oy * OW;
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(iy) * xs.w + ix0 - ox0;
            if (gxp) {
              const T wv_ = wk[ky * k + kx];
              T* d = gxp + off;
              for (int ox = ox0; ox < ox1; ++ox) d[ox] += wv_ * g[ox];
            }
            if (gwk) {
              const T* s = src + off;
              T acc = 0;
              for (int ox = ox0; ox < ox1; ++ox) acc += g[ox] * s[ox];
              gwk[ky * k + kx] += acc;
            }
          });
        }
      return;
    }
    Buffer<T> col(direct ? 0 : static_cast<std::size_t>(K) * P);
    Buffer<T> dcol(static_cast<std::size_t>(K) * P);
    for (int n = 0; n < xs.n; ++n)
      for (int g = 0; g < groups; ++g) {
        Eigen::Map<const detail::RowMat<T>> Gm(go.plane(n, g * cout_g), cout_g, P);
        if (gw) {
          const T* in = xv.plane(n, g * cin_g);
          const T* colp = in;
          if (!direct) {
            detail::im2col(in, cin_g, xs.h, xs.w, k, stride, pad, OH, OW, col.data());
            colp = col.data();
          }
          Eigen::Map<const detail::RowMat<T>> Cm(colp, K, P);
          Eigen::Map<detail::RowMat<T>> GWm(gw->data() + static_cast<std::size_t>(g) * cout_g * K, cout_g, K);
          GWm.noalias() += Gm * Cm.transpose();
        }
        if (gx) {
          Eigen::Map<const detail::RowMat<T>> Wm(wt.data() + static_cast<std::size_t>(g) * cout_g * K, cout_g, K);
          if (direct) {
            Eigen::Map<detail::RowMat<T>> GXm(gx->plane(n, g * cin_g), K, P);
            GXm.noalias() += Wm.transpose() * Gm;
          } else {
            Eigen::Map<detail::RowMat<T>> Dm(dcol.data(), K, P);
            Dm.noalias() = Wm.transpose() * Gm;
            detail::col2im(dcol.data(), cin_g, xs.h, xs.w, k, stride, pad, OH, OW, gx->plane(n, g * cin_g));
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Pooling, resizing, gating

/// Mean over each spatial plane: (N,C,H,W) -> (N,C,1,1).
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < P; ++i) acc += p[i];
      out.at(n, c, 0, 0) = acc / static_cast<T>(P);
    }
  return make_result<T>(std::move(out), {x}, [P](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const Shape s = g->shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T v = self.grad.at(n, c, 0, 0) / static_cast<T>(P);
        T* d = g->plane(n, c);
        for (std::size_t i = 0; i < P; ++i) d[i] += v;
      }
  });
}

/// Softmax across `branches` channel groups: x (N, branches*C, H, W), where
/// group b occupies channels [b*C, (b+1)*C). Weights for a fixed (c, y, x) sum to 1.
template <typename T>
Var<T> softmax_branches(const Var<T>& x, int branches) {
  const Shape s = x.shape();
  detail::require(branches >= 1 && s.c % branches == 0, "softmax_branches: channels not divisible");
  const int C = s.c / branches;
  const std::size_t P = s.plane();
  Tensor<T> out(s);
  std::vector<T> e(branches);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i) {
        T m = -std::numeric_limits<T>::infinity();
        for (int b = 0; b < branches; ++b) m = std::max(m, x.value().plane(n, b * C + c)[i]);
        T sum = 0;
        for (int b = 0; b < branches; ++b) {
          e[b] = std::exp(x.value().plane(n, b * C + c)[i] - m);
          sum += e[b];
        }
        for (int b = 0; b < branches; ++b) out.plane(n, b * C + c)[i] = e[b] / sum;
      }
  return make_result<T>(std::move(out), {x}, [branches, C, P](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const Shape s = self.value.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) {
          T dot = 0;
          for (int b = 0; b < branches; ++b)
            dot += self.grad.plane(n, b * C + c)[i] * self.value.plane(n, b * C + c)[i];
          for (int b = 0; b < branches; ++b) {
            const T y = self.value.plane(n, b * C + c)[i];
            g->plane(n, b * C + c)[i] += y * (self.grad.plane(n, b * C + c)[i] - dot);
          }
        }
  });
}

namespace detail {

struct LerpTable {
  std::vector<int> i0, i1;
  std::vector<double> l1;
};

/// Half-pixel-centred source coordinates (align_corners = false).
inline LerpTable lerp_table(int in, int out) {
  LerpTable t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.l1.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 < in - 1 ? i0 + 1 : i0;
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.l1[o] = src - i0;
  }
  return t;
}

}  // namespace detail

/// Bilinear resize with half-pixel centres (align_corners = false, no antialiasing).
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int out_h, int out_w) {
  const Shape xs = x.shape();
  if (out_h == xs.h && out_w == xs.w) return x;
  detail::require(out_h > 0 && out_w > 0, "resize_bilinear: empty target");
  const auto ty = detail::lerp_table(xs.h, out_h);
  const auto tx = detail::lerp_table(xs.w, out_w);
  Tensor<T> out(Shape{xs.n, xs.c, out_h, out_w});
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < out_h; ++y) {
        const T ly = static_cast<T>(ty.l1[y]);
        const T* r0 = src + ty.i0[y] * xs.w;
        const T* r1 = src + ty.i1[y] * xs.w;
        for (int xx = 0; xx < out_w; ++xx) {
          const T lx = static_cast<T>(tx.l1[xx]);
          const int a = tx.i0[xx], b = tx.i1[xx];
          dst[y * out_w + xx] = (T(1) - ly) * ((T(1) - lx) * r0[a] + lx * r0[b]) +
                                ly * ((T(1) - lx) * r1[a] + lx * r1[b]);
        }
      }
    }
  return make_result<T>(std::move(out), {x}, [ty, tx](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const Shape s = self.value.shape();
    const int iw = g->w();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* go = self.grad.plane(n, c);
        T* d = g->plane(n, c);
        for (int y = 0; y < s.h; ++y) {
          const T ly = static_cast<T>(ty.l1[y]);
          T* r0 = d + ty.i0[y] * iw;
          T* r1 = d + ty.i1[y] * iw;
          for (int xx = 0; xx < s.w; ++xx) {
            const T lx = static_cast<T>(tx.l1[xx]);
            const T v = go[y * s.w + xx];
            const int a = tx.i0[xx], b = tx.i1[xx];
            r0[a] += (T(1) - ly) * (T(1) - lx) * v;
            r0[b] += (T(1) - ly) * lx * v;
            r1[a] += ly * (T(1) - lx) * v;
            r1[b] += ly * lx * v;
          }
        }
      }
  });
}

/// 2x2 max pooling with stride 2 (floor on odd extents).
template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  const Shape xs = x.shape();
  const int oh = xs.h / 2, ow = xs.w / 2;
  detail::require(oh > 0 && ow > 0, "max_pool2: input too small " + xs.str());
  Tensor<T> out(Shape{xs.n, xs.c, oh, ow});
  std::vector<int> arg(out.size());
  std::size_t k = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* src = x.value().plane(n, c);
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx, ++k) {
          int best = (2 * y) * xs.w + 2 * xx;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = (2 * y + dy) * xs.w + 2 * xx + dx;
              if (src[idx] > src[best]) best = idx;
            }
          arg[k] = best;
          out[k] = src[best];
        }
    }
  return make_result<T>(std::move(out), {x}, [arg = std::move(arg)](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const Shape s = self.value.shape();
    std::size_t k = 0;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        T* d = g->plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i, ++k) d[arg[k]] += self.grad[k];
      }
  });
}

/// Splits channels in half and multiplies the halves.
template <typename T>
Var<T> simple_gate(const Var<T>& x) {
  const Shape xs = x.shape();
  if (xs.c % 2 != 0) throw ConfigError("simple_gate needs an even channel count, got " + std::to_string(xs.c));
  const int half = xs.c / 2;
  Shape s = xs;
  s.c = half;
  Tensor<T> out(s);
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < half; ++c) {
      const T* a = x.value().plane(n, c);
      const T* b = x.value().plane(n, c + half);
      T* d = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) d[i] = a[i] * b[i];
    }
  return make_result<T>(std::move(out), {x}, [half, P](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (int n = 0; n < self.value.n(); ++n)
      for (int c = 0; c < half; ++c) {
        const T* a = xv.plane(n, c);
        const T* b = xv.plane(n, c + half);
        const T* go = self.grad.plane(n, c);
        T* ga = g->plane(n, c);
        T* gb = g->plane(n, c + half);
        for (std::size_t i = 0; i < P; ++i) {
          ga[i] += go[i] * b[i];
          gb[i] += go[i] * a[i];
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().vec()) acc += v;
  return make_result<T>(Tensor<T>::scalar(acc), {x}, [](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (auto& v : g->vec()) v += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const T inv = T(1) / static_cast<T>(x.value().size());
  return scale(sum(x), inv);
}

/// mean(|a - b|); subgradient 0 where a == b.
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mean_abs_diff");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t N = av.size();
  T acc = 0;
  for (std::size_t i = 0; i < N; ++i) acc += std::abs(av[i] - bv[i]);
  return make_result<T>(Tensor<T>::scalar(acc / static_cast<T>(N)), {a, b}, [N](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T s = self.grad[0] / static_cast<T>(N);
    auto* ga = grad_sink(self, 0);
    auto* gb = grad_sink(self, 1);
    for (std::size_t i = 0; i < N; ++i) {
      const T d = av[i] - bv[i];
      const T sg = d > T(0) ? s : (d < T(0) ? -s : T(0));
      if (ga) (*ga)[i] += sg;
      if (gb) (*gb)[i] -= sg;
    }
  });
}

/// mean((a - b)^2).
template <typename T>
Var<T> mean_sq_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mean_sq_diff");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t N = av.size();
  T acc = 0;
  for (std::size_t i = 0; i < N; ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  return make_result<T>(Tensor<T>::scalar(acc / static_cast<T>(N)), {a, b}, [N](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T s = T(2) * self.grad[0] / static_cast<T>(N);
    auto* ga = grad_sink(self, 0);
    auto* gb = grad_sink(self, 1);
    for (std::size_t i = 0; i < N; ++i) {
      const T d = (av[i] - bv[i]) * s;
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

}  // namespace fpanet
