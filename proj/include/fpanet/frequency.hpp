#pragma once

// Half-plane 2-D Fourier primitives and the amplitude/phase view of a feature map.
//
// Convention: the forward transform is unnormalized,
//   X(u, v) = sum_{y, x} f(y, x) exp(-2 pi i (u y / H + v x / W)),
// and the inverse carries the 1 / (H W) factor. Only the ceil-half columns
// v = 0 .. floor(W/2) are stored; the width of the source plane is kept next to
// the spectrum so odd and even widths invert unambiguously.

#include <unsupported/Eigen/FFT>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "fpanet/ops.hpp"

namespace fpanet {

namespace fft {

template <typename T>
Eigen::FFT<T>& engine() {
  // kissfft caches twiddles per length; one instance per thread keeps calls pure.
  thread_local Eigen::FFT<T> f;
  f.SetFlag(Eigen::FFT<T>::Unscaled);
  return f;
}

inline int half_width(int w) { return w / 2 + 1; }

// kissfft does not handle length-1 transforms.
template <typename T>
void fwd1d(std::complex<T>* dst, const std::complex<T>* src, int n) {
  if (n == 1) {
    dst[0] = src[0];
    return;
  }
  engine<T>().fwd(dst, src, n);
}

template <typename T>
void inv1d(std::complex<T>* dst, const std::complex<T>* src, int n) {
  if (n == 1) {
    dst[0] = src[0];
    return;
  }
  engine<T>().inv(dst, src, n);
}

// Real-input forward transform; writes the full length-n spectrum.
template <typename T>
void r2c1d(std::complex<T>* dst, const T* src, int n) {
  if (n == 1) {
    dst[0] = std::complex<T>(src[0], 0);
    return;
  }
  engine<T>().fwd(dst, src, n);
}

// Inverse of a Hermitian spectrum given by its first n/2+1 entries; the imaginary
// parts of the DC and (even n) Nyquist bins do not contribute.
template <typename T>
void c2r1d(T* dst, const std::complex<T>* src, int n) {
  if (n == 1) {
    dst[0] = src[0].real();
    return;
  }
  engine<T>().inv(dst, src, n);
}

/// Forward transform of one real H x W plane into an H x (W/2+1) complex half plane.
template <typename T>
void rfft2_plane(const T* in, int H, int W, std::complex<T>* out) {
  using C = std::complex<T>;
  const int Wf = half_width(W);
  std::vector<C> row_out(W), rows(static_cast<std::size_t>(H) * Wf), col_in(H), col_out(H);
  for (int y = 0; y < H; ++y) {
    r2c1d(row_out.data(), in + static_cast<std::size_t>(y) * W, W);
    for (int v = 0; v < Wf; ++v) rows[y * Wf + v] = row_out[v];
  }
  for (int v = 0; v < Wf; ++v) {
    for (int y = 0; y < H; ++y) col_in[y] = rows[y * Wf + v];
    fwd1d(col_out.data(), col_in.data(), H);
    for (int u = 0; u < H; ++u) out[u * Wf + v] = col_out[u];
  }
}

/// Real part of the unnormalized inverse of a half plane zero-extended to full width.
/// This is the adjoint of rfft2_plane.
template <typename T>
void rfft2_adjoint_plane(const std::complex<T>* g, int H, int W, T* out) {
  using C = std::complex<T>;
  const int Wf = half_width(W);
  std::vector<C> cols(static_cast<std::size_t>(H) * Wf), col_in(H), col_out(H);
  for (int v = 0; v < Wf; ++v) {
    for (int u = 0; u < H; ++u) col_in[u] = g[u * Wf + v];
    inv1d(col_out.data(), col_in.data(), H);
    for (int y = 0; y < H; ++y) cols[y * Wf + v] = col_out[y];
  }
  // Re(ifft(z)) of a zero-extended half row z equals the Hermitian inverse of z
  // with its mirrored bins halved.
  const int last_mirrored = W - W / 2 - 1;
  for (int y = 0; y < H; ++y) {
    C* row = cols.data() + static_cast<std::size_t>(y) * Wf;
    for (int v = 1; v <= last_mirrored; ++v) row[v] *= T(0.5);
    c2r1d(out + static_cast<std::size_t>(y) * W, row, W);
  }
}

/// Inverse transform of a half plane to a real H x W plane, completing the missing
/// columns by Hermitian symmetry and keeping the real part.
template <typename T>
void irfft2_plane(const std::complex<T>* in, int H, int W, T* out) {
  using C = std::complex<T>;
  const int Wf = half_width(W);
  std::vector<C> cols(static_cast<std::size_t>(H) * Wf), col_in(H), col_out(H);
  for (int v = 0; v < Wf; ++v) {
    for (int u = 0; u < H; ++u) col_in[u] = in[u * Wf + v];
    inv1d(col_out.data(), col_in.data(), H);
    for (int y = 0; y < H; ++y) cols[y * Wf + v] = col_out[y];
  }
  const T norm = T(1) / (static_cast<T>(H) * static_cast<T>(W));
  for (int y = 0; y < H; ++y) {
    T* o = out + static_cast<std::size_t>(y) * W;
    c2r1d(o, cols.data() + static_cast<std::size_t>(y) * Wf, W);
    for (int x = 0; x < W; ++x) o[x] *= norm;
  }
}

/// Gradient of irfft2_plane with respect to the (re, im) parts of its half-plane input.
template <typename T>
void irfft2_adjoint_plane(const T* g, int H, int W, std::complex<T>* out) {
  rfft2_plane(g, H, W, out);
  const int Wf = half_width(W);
  const T norm = T(1) / (static_cast<T>(H) * static_cast<T>(W));
  const int last_mirrored = W - W / 2 - 1;
  for (int u = 0; u < H; ++u)
    for (int v = 0; v < Wf; ++v) {
      const T m = (v >= 1 && v <= last_mirrored) ? T(2) : T(1);
      out[u * Wf + v] *= m * norm;
    }
}

}  // namespace fft

/// Differentiable half-plane transform: (N, C, H, W) -> (N, 2C, H, W/2+1) with the
/// real parts in channels [0, C) and the imaginary parts in [C, 2C).
template <typename T>
Var<T> rfft2(const Var<T>& x) {
  const Shape s = x.shape();
  const int Wf = fft::half_width(s.w);
  Tensor<T> out(Shape{s.n, 2 * s.c, s.h, Wf});
  std::vector<std::complex<T>> buf(static_cast<std::size_t>(s.h) * Wf);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      fft::rfft2_plane(x.value().plane(n, c), s.h, s.w, buf.data());
      T* re = out.plane(n, c);
      T* im = out.plane(n, c + s.c);
      for (std::size_t i = 0; i < buf.size(); ++i) {
        re[i] = buf[i].real();
        im[i] = buf[i].imag();
      }
    }
  return make_result<T>(std::move(out), {x}, [s, Wf](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    std::vector<std::complex<T>> buf(static_cast<std::size_t>(s.h) * Wf);
    std::vector<T> plane(s.plane());
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* gre = self.grad.plane(n, c);
        const T* gim = self.grad.plane(n, c + s.c);
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = {gre[i], gim[i]};
        fft::rfft2_adjoint_plane(buf.data(), s.h, s.w, plane.data());
        T* d = g->plane(n, c);
        for (std::size_t i = 0; i < plane.size(); ++i) d[i] += plane[i];
      }
  });
}

/// Inverse of rfft2 for a spectrum in the same [re | im] channel layout.
template <typename T>
Var<T> irfft2(const Var<T>& spec, int width) {
  const Shape s = spec.shape();
  if (s.c % 2 != 0) throw ShapeError("irfft2: expected [re | im] channel pairs, got " + s.str());
  if (width < 1 || fft::half_width(width) != s.w) {
    throw ShapeError("irfft2: source width " + std::to_string(width) + " inconsistent with half-plane width " +
                     std::to_string(s.w));
  }
  const int C = s.c / 2;
  Tensor<T> out(Shape{s.n, C, s.h, width});
  std::vector<std::complex<T>> buf(s.plane());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < C; ++c) {
      const T* re = spec.value().plane(n, c);
      const T* im = spec.value().plane(n, c + C);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = {re[i], im[i]};
      fft::irfft2_plane(buf.data(), s.h, width, out.plane(n, c));
    }
  return make_result<T>(std::move(out), {spec}, [s, C, width](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    std::vector<std::complex<T>> buf(s.plane());
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < C; ++c) {
        fft::irfft2_adjoint_plane(self.grad.plane(n, c), s.h, width, buf.data());
        T* gre = g->plane(n, c);
        T* gim = g->plane(n, c + C);
        for (std::size_t i = 0; i < buf.size(); ++i) {
          gre[i] += buf[i].real();
          gim[i] += buf[i].imag();
        }
      }
  });
}

/// Gradient of the magnitude at the origin uses a stabilized root.
inline constexpr double kAmplitudeEpsilon = 1e-12;

/// |re + i im| from a [re | im] tensor. Exact forward; the backward divides by
/// sqrt(re^2 + im^2 + 1e-12), which makes the subgradient 0 at the origin and
/// shrinks gradients of bins with magnitude near 1e-6.
template <typename T>
Var<T> amplitude(const Var<T>& spec) {
  const Shape s = spec.shape();
  const int C = s.c / 2;
  Shape os = s;
  os.c = C;
  Tensor<T> out(os);
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < C; ++c) {
      const T* re = spec.value().plane(n, c);
      const T* im = spec.value().plane(n, c + C);
      T* d = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) d[i] = std::sqrt(re[i] * re[i] + im[i] * im[i]);
    }
  return make_result<T>(std::move(out), {spec}, [C, P](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const auto& sv = self.parents[0]->value;
    const T eps = static_cast<T>(kAmplitudeEpsilon);
    for (int n = 0; n < sv.n(); ++n)
      for (int c = 0; c < C; ++c) {
        const T* re = sv.plane(n, c);
        const T* im = sv.plane(n, c + C);
        const T* go = self.grad.plane(n, c);
        T* gre = g->plane(n, c);
        T* gim = g->plane(n, c + C);
        for (std::size_t i = 0; i < P; ++i) {
          const T r2 = re[i] * re[i] + im[i] * im[i];
          if (r2 == T(0)) continue;
          const T inv = go[i] / std::sqrt(r2 + eps);
          gre[i] += re[i] * inv;
          gim[i] += im[i] * inv;
        }
      }
  });
}

/// atan2(im, re) mapped into (-pi, pi]; 0 at the origin with zero gradient there.
template <typename T>
Var<T> phase_angle(const Var<T>& spec) {
  const Shape s = spec.shape();
  const int C = s.c / 2;
  Shape os = s;
  os.c = C;
  Tensor<T> out(os);
  const std::size_t P = s.plane();
  const T pi = std::numbers::pi_v<T>;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < C; ++c) {
      const T* re = spec.value().plane(n, c);
      const T* im = spec.value().plane(n, c + C);
      T* d = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) {
        if (re[i] == T(0) && im[i] == T(0)) {
          d[i] = T(0);
          continue;
        }
        T a = std::atan2(im[i], re[i]);
        if (a <= -pi) a = pi;
        d[i] = a;
      }
    }
  return make_result<T>(std::move(out), {spec}, [C, P](Node<T>& self) {
    auto* g = grad_sink(self, 0);
    if (!g) return;
    const auto& sv = self.parents[0]->value;
    for (int n = 0; n < sv.n(); ++n)
      for (int c = 0; c < C; ++c) {
        const T* re = sv.plane(n, c);
        const T* im = sv.plane(n, c + C);
        const T* go = self.grad.plane(n, c);
        T* gre = g->plane(n, c);
        T* gim = g->plane(n, c + C);
        for (std::size_t i = 0; i < P; ++i) {
          const T r2 = re[i] * re[i] + im[i] * im[i];
          if (r2 == T(0)) continue;
          gre[i] += -im[i] / r2 * go[i];
          gim[i] += re[i] / r2 * go[i];
        }
      }
  });
}

/// (amplitude, phase) -> [amp cos(phase) | amp sin(phase)]. Accepts signed amplitudes.
template <typename T>
Var<T> polar_to_complex(const Var<T>& amp, const Var<T>& phase) {
  detail::require_same_shape(amp, phase, "polar_to_complex");
  const Shape s = amp.shape();
  Shape os = s;
  os.c = 2 * s.c;
  Tensor<T> out(os);
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* a = amp.value().plane(n, c);
      const T* p = phase.value().plane(n, c);
      T* re = out.plane(n, c);
      T* im = out.plane(n, c + s.c);
      for (std::size_t i = 0; i < P; ++i) {
        re[i] = a[i] * std::cos(p[i]);
        im[i] = a[i] * std::sin(p[i]);
      }
    }
  return make_result<T>(std::move(out), {amp, phase}, [s, P](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& pv = self.parents[1]->value;
    auto* ga = grad_sink(self, 0);
    auto* gp = grad_sink(self, 1);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* a = av.plane(n, c);
        const T* p = pv.plane(n, c);
        const T* gre = self.grad.plane(n, c);
        const T* gim = self.grad.plane(n, c + s.c);
        for (std::size_t i = 0; i < P; ++i) {
          const T cs = std::cos(p[i]);
          const T sn = std::sin(p[i]);
          if (ga) ga->plane(n, c)[i] += gre[i] * cs + gim[i] * sn;
          if (gp) gp->plane(n, c)[i] += a[i] * (gim[i] * cs - gre[i] * sn);
        }
      }
  });
}

/// Amplitude and phase planes of a half-plane spectrum, each (N, C, H, W/2+1).
template <typename T>
struct Spectrum {
  Var<T> amplitude;
  Var<T> phase;
  int source_width = 0;
};

/// Spatial feature map -> amplitude/phase spectrum. Differentiable in x.
template <typename T>
Spectrum<T> decompose(const Var<T>& x) {
  const Shape s = x.shape();
  if (s.h < 1 || s.w < 1 || s.c < 1 || s.n < 1) throw ShapeError("decompose: empty input " + s.str());
  if (!x.value().all_finite()) throw InvalidInputError("decompose: input contains non-finite values");
  Var<T> spec = rfft2(x);
  return Spectrum<T>{amplitude(spec), phase_angle(spec), s.w};
}

/// Amplitude/phase spectrum -> spatial feature map of width source_width.
template <typename T>
Var<T> recompose(const Spectrum<T>& s) {
  if (s.amplitude.shape() != s.phase.shape()) {
    throw ShapeError("recompose: amplitude " + s.amplitude.shape().str() + " vs phase " + s.phase.shape().str());
  }
  if (s.source_width < 1 || fft::half_width(s.source_width) != s.amplitude.shape().w) {
    throw ShapeError("recompose: source width " + std::to_string(s.source_width) +
                     " inconsistent with spectrum width " + std::to_string(s.amplitude.shape().w));
  }
  return irfft2(polar_to_complex(s.amplitude, s.phase), s.source_width);
}

/// Image whose amplitude comes from `amp_source` and phase from `phase_source`.
template <typename T>
Var<T> swap_components(const Var<T>& amp_source, const Var<T>& phase_source) {
  if (amp_source.shape() != phase_source.shape()) {
    throw ShapeError("swap_components: shape mismatch " + amp_source.shape().str() + " vs " +
                     phase_source.shape().str());
  }
  const Spectrum<T> a = decompose(amp_source);
  const Spectrum<T> p = decompose(phase_source);
  return recompose(Spectrum<T>{a.amplitude, p.phase, a.source_width});
}

}  // namespace fpanet
