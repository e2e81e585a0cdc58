#pragma once

// Image and video quality metrics. Images are (1, C, H, W) tensors in [0, 1].

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fpanet/frequency.hpp"
#include "fpanet/log.hpp"
#include "fpanet/losses.hpp"

namespace fpanet::metrics {

/// Returned for bit-identical inputs.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

namespace detail {

inline void same_shape(const Tensor<double>& a, const Tensor<double>& b, const char* what) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

/// A single H x W plane.
struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  Plane() = default;
  Plane(int h_, int w_, double fill = 0) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}
  double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  [[nodiscard]] double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

inline Plane channel(const Tensor<double>& t, int n, int c) {
  Plane p(t.h(), t.w());
  std::copy_n(t.plane(n, c), p.v.size(), p.v.begin());
  return p;
}

/// BT.601 luma with integer weights, Y = (299 R + 587 G + 114 B) / 1000.
inline Plane luma(const Tensor<double>& t, int n = 0) {
  if (t.c() != 3) throw ShapeError("luma needs 3 channels, got " + t.shape().str());
  Plane p(t.h(), t.w());
  const double *r = t.plane(n, 0), *g = t.plane(n, 1), *b = t.plane(n, 2);
  for (std::size_t i = 0; i < p.v.size(); ++i) p.v[i] = (299.0 * r[i] + 587.0 * g[i] + 114.0 * b[i]) / 1000.0;
  return p;
}

/// Full complex 2-D DFT in place (unnormalized forward, 1/(HW) inverse).
inline void fft2(std::vector<std::complex<double>>& d, int H, int W, bool inverse) {
  std::vector<std::complex<double>> in(std::max(H, W)), out(std::max(H, W));
  auto run = [&](int n) {
    if (inverse) fft::inv1d(out.data(), in.data(), n);
    else fft::fwd1d(out.data(), in.data(), n);
  };
  for (int y = 0; y < H; ++y) {
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(y) * W, W, in.begin());
    run(W);
    std::copy_n(out.begin(), W, d.begin() + static_cast<std::ptrdiff_t>(y) * W);
  }
  for (int x = 0; x < W; ++x) {
    for (int y = 0; y < H; ++y) in[y] = d[static_cast<std::size_t>(y) * W + x];
    run(H);
    for (int y = 0; y < H; ++y) d[static_cast<std::size_t>(y) * W + x] = out[y];
  }
  if (inverse) {
    const double s = 1.0 / (static_cast<double>(H) * W);
    for (auto& v : d) v *= s;
  }
}

/// 2-D 'same' correlation with zero padding and an odd k x k kernel.
inline Plane filter_same(const Plane& p, const std::vector<double>& k, int ks) {
  Plane out(p.h, p.w);
  const int r = ks / 2;
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      double acc = 0;
      for (int i = 0; i < ks; ++i)
        for (int j = 0; j < ks; ++j) {
          const int yy = y + i - r, xx = x + j - r;
          if (yy >= 0 && yy < p.h && xx >= 0 && xx < p.w) acc += k[i * ks + j] * p.at(yy, xx);
        }
      out.at(y, x) = acc;
    }
  return out;
}

/// 2-D 'valid' correlation.
inline Plane filter_valid(const Plane& p, const std::vector<double>& k, int ks) {
  Plane out(p.h - ks + 1, p.w - ks + 1);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double acc = 0;
      for (int i = 0; i < ks; ++i)
        for (int j = 0; j < ks; ++j) acc += k[i * ks + j] * p.at(y + i, x + j);
      out.at(y, x) = acc;
    }
  return out;
}

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size) * size);
  const double c = (size - 1) / 2.0;
  double s = 0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double v = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2 * sigma * sigma));
      k[i * size + j] = v;
      s += v;
    }
  for (auto& v : k) v /= s;
  return k;
}

}  // namespace detail

template <typename T>
Tensor<double> as_double(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, double>) return t;
  else return t.template cast<double>();
}

/// 10 log10(peak^2 / MSE); +inf when MSE is exactly 0.
inline double psnr(const Tensor<double>& a, const Tensor<double>& b, double peak = 1.0) {
  detail::same_shape(a, b, "psnr");
  if (!(peak > 0)) throw InvalidInputError("psnr peak must be positive");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  if (se == 0) return kInfinitePsnr;
  return 10.0 * std::log10(peak * peak / (se / static_cast<double>(a.size())));
}

/// PSNR of the BT.601 luma planes.
inline double y_psnr(const Tensor<double>& a, const Tensor<double>& b, double peak = 1.0) {
  detail::same_shape(a, b, "y_psnr");
  double se = 0;
  std::size_t n = 0;
  for (int i = 0; i < a.n(); ++i) {
    const auto ya = detail::luma(a, i), yb = detail::luma(b, i);
    for (std::size_t k = 0; k < ya.v.size(); ++k) se += (ya.v[k] - yb.v[k]) * (ya.v[k] - yb.v[k]);
    n += ya.v.size();
  }
  if (se == 0) return kInfinitePsnr;
  return 10.0 * std::log10(peak * peak / (se / static_cast<double>(n)));
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Mean SSIM over the valid region, averaged over channels.
inline double ssim(const Tensor<double>& a, const Tensor<double>& b, const SsimOptions& o = {}) {
  detail::same_shape(a, b, "ssim");
  if (a.h() < o.window || a.w() < o.window) {
    throw ShapeError("ssim: image " + a.shape().str() + " smaller than the " + std::to_string(o.window) + "px window");
  }
  const auto win = detail::gaussian_window(o.window, o.sigma);
  const double C1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
  const double C2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);
  double total = 0;
  int planes = 0;
  for (int n = 0; n < a.n(); ++n)
    for (int c = 0; c < a.c(); ++c) {
      const auto x = detail::channel(a, n, c), y = detail::channel(b, n, c);
      detail::Plane xx(x.h, x.w), yy(x.h, x.w), xy(x.h, x.w);
      for (std::size_t i = 0; i < x.v.size(); ++i) {
        xx.v[i] = x.v[i] * x.v[i];
        yy.v[i] = y.v[i] * y.v[i];
        xy.v[i] = x.v[i] * y.v[i];
      }
      const auto mx = detail::filter_valid(x, win, o.window), my = detail::filter_valid(y, win, o.window);
      const auto sxx = detail::filter_valid(xx, win, o.window), syy = detail::filter_valid(yy, win, o.window);
      const auto sxy = detail::filter_valid(xy, win, o.window);
      double acc = 0;
      for (std::size_t i = 0; i < mx.v.size(); ++i) {
        const double ux = mx.v[i], uy = my.v[i];
        const double vx = sxx.v[i] - ux * ux, vy = syy.v[i] - uy * uy, cxy = sxy.v[i] - ux * uy;
        acc += ((2 * ux * uy + C1) * (2 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
      }
      total += acc / static_cast<double>(mx.v.size());
      ++planes;
    }
  return total / planes;
}

// ---------------------------------------------------------------------------
// FSIM

struct PhaseCongruencyOptions {
  int nscale = 4;
  int norient = 4;
  double min_wavelength = 6;
  double mult = 2;
  double sigma_onf = 0.55;
  double dtheta_on_sigma = 1.2;
  double k = 2.0;
  double epsilon = 1e-4;
  double lowpass_cutoff = 0.45;
  int lowpass_order = 15;
  double noise_divisor = 1.7;
};

namespace detail {

// Frequency grid of the unshifted FFT layout: per-axis normalized frequencies as
// produced by ifftshift of a centred range (odd sizes divide by n-1).
inline std::vector<double> freq_axis(int n) {
  std::vector<double> centred(n);
  for (int i = 0; i < n; ++i) {
    centred[i] = n % 2 ? (i - (n - 1) / 2.0) / std::max(1, n - 1) : (i - n / 2.0) / n;
  }
  std::vector<double> out(n);
  // ifftshift: element at centred index (i + floor(n/2)) % n moves to i.
  for (int i = 0; i < n; ++i) out[i] = centred[(i + n / 2) % n];
  return out;
}

}  // namespace detail

/// Phase congruency of a single plane with log-Gabor filters (Kovesi's formulation).
inline detail::Plane phase_congruency(const detail::Plane& im, const PhaseCongruencyOptions& o = {}) {
  const int H = im.h, W = im.w;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  std::vector<std::complex<double>> imf(P);
  for (std::size_t i = 0; i < P; ++i) imf[i] = im.v[i];
  detail::fft2(imf, H, W, false);

  const auto fx = detail::freq_axis(W), fy = detail::freq_axis(H);
  std::vector<double> radius(P), sin_t(P), cos_t(P), lp(P);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      const double r = std::sqrt(fx[x] * fx[x] + fy[y] * fy[y]);
      const double th = std::atan2(-fy[y], fx[x]);
      radius[i] = r;
      sin_t[i] = std::sin(th);
      cos_t[i] = std::cos(th);
      lp[i] = 1.0 / (1.0 + std::pow(r / o.lowpass_cutoff, 2 * o.lowpass_order));
    }
  radius[0] = 1;

  std::vector<std::vector<double>> log_gabor(o.nscale, std::vector<double>(P));
  const double denom = 2 * std::log(o.sigma_onf) * std::log(o.sigma_onf);
  for (int s = 0; s < o.nscale; ++s) {
    const double fo = 1.0 / (o.min_wavelength * std::pow(o.mult, s));
    for (std::size_t i = 0; i < P; ++i) {
      const double l = std::log(radius[i] / fo);
      log_gabor[s][i] = std::exp(-(l * l) / denom) * lp[i];
    }
    log_gabor[s][0] = 0;
  }
  const double theta_sigma = std::numbers::pi / o.norient / o.dtheta_on_sigma;

  detail::Plane energy_all(H, W), an_all(H, W);
  std::vector<std::complex<double>> eo(P);
  std::vector<std::vector<std::complex<double>>> eos(o.nscale);
  std::vector<std::vector<double>> ifft_filters(o.nscale, std::vector<double>(P));
  for (int ori = 0; ori < o.norient; ++ori) {
    const double angl = ori * std::numbers::pi / o.norient;
    std::vector<double> spread(P);
    for (std::size_t i = 0; i < P; ++i) {
      const double ds = sin_t[i] * std::cos(angl) - cos_t[i] * std::sin(angl);
      const double dc = cos_t[i] * std::cos(angl) + sin_t[i] * std::sin(angl);
      const double dtheta = std::abs(std::atan2(ds, dc));
      spread[i] = std::exp(-(dtheta * dtheta) / (2 * theta_sigma * theta_sigma));
    }
    std::vector<double> sum_e(P, 0), sum_o(P, 0), sum_an(P, 0);
    double em_n = 0;
    for (int s = 0; s < o.nscale; ++s) {
      std::vector<std::complex<double>> filt(P);
      for (std::size_t i = 0; i < P; ++i) filt[i] = log_gabor[s][i] * spread[i];
      if (s == 0)
        for (std::size_t i = 0; i < P; ++i) em_n += filt[i].real() * filt[i].real();
      std::vector<std::complex<double>> spatial = filt;
      detail::fft2(spatial, H, W, true);
      const double sq = std::sqrt(static_cast<double>(P));
      for (std::size_t i = 0; i < P; ++i) ifft_filters[s][i] = spatial[i].real() * sq;
      for (std::size_t i = 0; i < P; ++i) eo[i] = imf[i] * filt[i];
      detail::fft2(eo, H, W, true);
      eos[s] = eo;
      for (std::size_t i = 0; i < P; ++i) {
        sum_an[i] += std::abs(eo[i]);
        sum_e[i] += eo[i].real();
        sum_o[i] += eo[i].imag();
      }
    }
    std::vector<double> energy(P, 0);
    for (std::size_t i = 0; i < P; ++i) {
      const double xe = std::sqrt(sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]) + o.epsilon;
      const double me = sum_e[i] / xe, mo = sum_o[i] / xe;
      for (int s = 0; s < o.nscale; ++s) {
        const double e = eos[s][i].real(), od = eos[s][i].imag();
        energy[i] += e * me + od * mo - std::abs(e * mo - od * me);
      }
    }
    std::vector<double> e2(P);
    for (std::size_t i = 0; i < P; ++i) e2[i] = std::norm(eos[0][i]);
    // MATLAB median: mean of the two middle values for even counts.
    std::vector<double> sorted = e2;
    std::sort(sorted.begin(), sorted.end());
    const double median = P % 2 ? sorted[P / 2] : 0.5 * (sorted[P / 2 - 1] + sorted[P / 2]);
    const double mean_e2n = -median / std::log(0.5);
    const double noise_power = mean_e2n / em_n;
    double sum_an2 = 0, sum_aiaj = 0;
    for (std::size_t i = 0; i < P; ++i) {
      for (int s = 0; s < o.nscale; ++s) sum_an2 += ifft_filters[s][i] * ifft_filters[s][i];
      for (int si = 0; si < o.nscale - 1; ++si)
        for (int sj = si + 1; sj < o.nscale; ++sj) sum_aiaj += ifft_filters[si][i] * ifft_filters[sj][i];
    }
    const double est_noise_energy2 = 2 * noise_power * sum_an2 + 4 * noise_power * sum_aiaj;
    const double tau = std::sqrt(est_noise_energy2 / 2);
    const double est_noise = tau * std::sqrt(std::numbers::pi / 2);
    const double est_sigma = std::sqrt((2 - std::numbers::pi / 2) * tau * tau);
    const double thr = (est_noise + o.k * est_sigma) / o.noise_divisor;
    for (std::size_t i = 0; i < P; ++i) {
      energy_all.v[i] += std::max(energy[i] - thr, 0.0);
      an_all.v[i] += sum_an[i];
    }
  }
  detail::Plane pc(H, W);
  for (std::size_t i = 0; i < P; ++i) pc.v[i] = an_all.v[i] > 0 ? energy_all.v[i] / an_all.v[i] : 0.0;
  return pc;
}

struct FsimOptions {
  double t1 = 0.85;
  double t2 = 160;
  PhaseCongruencyOptions pc;
};

/// FSIM on the luma channel (0..255 scale), after the reference downsampling by
/// F = max(1, round(min(H, W) / 256)).
inline double fsim(const Tensor<double>& a, const Tensor<double>& b, const FsimOptions& o = {}) {
  detail::same_shape(a, b, "fsim");
  auto prep = [&](const Tensor<double>& t, int n) {
    detail::Plane y = t.c() == 3 ? detail::luma(t, n) : detail::channel(t, n, 0);
    for (auto& v : y.v) v *= 255.0;
    const int F = std::max(1, static_cast<int>(std::lround(std::min(y.h, y.w) / 256.0)));
    if (F == 1) return y;
    std::vector<double> avg(static_cast<std::size_t>(F) * F, 1.0 / (F * F));
    // 'same' filtering with an even kernel anchors at floor((F-1)/2) like conv2.
    detail::Plane f(y.h, y.w);
    const int off = (F - 1) / 2;
    for (int r = 0; r < y.h; ++r)
      for (int c = 0; c < y.w; ++c) {
        double acc = 0;
        for (int i = 0; i < F; ++i)
          for (int j = 0; j < F; ++j) {
            const int rr = r + i - off, cc = c + j - off;
            if (rr >= 0 && rr < y.h && cc >= 0 && cc < y.w) acc += avg[i * F + j] * y.at(rr, cc);
          }
        f.at(r, c) = acc;
      }
    detail::Plane d((y.h + F - 1) / F, (y.w + F - 1) / F);
    for (int r = 0; r < d.h; ++r)
      for (int c = 0; c < d.w; ++c) d.at(r, c) = f.at(r * F, c * F);
    return d;
  };
  const std::vector<double> dx = {3 / 16.0, 0, -3 / 16.0, 10 / 16.0, 0, -10 / 16.0, 3 / 16.0, 0, -3 / 16.0};
  const std::vector<double> dy = {3 / 16.0, 10 / 16.0, 3 / 16.0, 0, 0, 0, -3 / 16.0, -10 / 16.0, -3 / 16.0};
  // conv2 flips the kernel; correlation with the flipped kernel is equivalent.
  auto flip = [](std::vector<double> k) {
    std::reverse(k.begin(), k.end());
    return k;
  };
  const auto dxf = flip(dx), dyf = flip(dy);
  double num = 0, den = 0;
  for (int n = 0; n < a.n(); ++n) {
    const auto y1 = prep(a, n), y2 = prep(b, n);
    const auto pc1 = phase_congruency(y1, o.pc), pc2 = phase_congruency(y2, o.pc);
    const auto gx1 = detail::filter_same(y1, dxf, 3), gy1 = detail::filter_same(y1, dyf, 3);
    const auto gx2 = detail::filter_same(y2, dxf, 3), gy2 = detail::filter_same(y2, dyf, 3);
    for (std::size_t i = 0; i < y1.v.size(); ++i) {
      const double g1 = std::hypot(gx1.v[i], gy1.v[i]), g2 = std::hypot(gx2.v[i], gy2.v[i]);
      const double p1 = pc1.v[i], p2 = pc2.v[i];
      const double spc = (2 * p1 * p2 + o.t1) / (p1 * p1 + p2 * p2 + o.t1);
      const double sg = (2 * g1 * g2 + o.t2) / (g1 * g1 + g2 * g2 + o.t2);
      const double pcm = std::max(p1, p2);
      num += spc * sg * pcm;
      den += pcm;
    }
  }
  return den > 0 ? num / den : 1.0;
}

// ---------------------------------------------------------------------------
// Histogram correlation

/// Mean over R, G, B of the Pearson correlation of 256-bin histograms; 0 for a
/// channel whose histogram has zero variance.
inline double color_histogram_correlation(const Tensor<double>& a, const Tensor<double>& b, int bins = 256) {
  detail::same_shape(a, b, "color_histogram_correlation");
  if (a.c() != 3) throw ShapeError("color histogram needs RGB input");
  auto hist = [bins](const Tensor<double>& t, int c) {
    std::vector<double> h(bins, 0);
    for (int n = 0; n < t.n(); ++n) {
      const double* p = t.plane(n, c);
      for (std::size_t i = 0; i < t.shape().plane(); ++i) {
        const int k = std::clamp(static_cast<int>(std::floor(p[i] * bins)), 0, bins - 1);
        h[k] += 1;
      }
    }
    return h;
  };
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    const auto ha = hist(a, c), hb = hist(b, c);
    double ma = 0, mb = 0;
    for (int i = 0; i < bins; ++i) {
      ma += ha[i];
      mb += hb[i];
    }
    ma /= bins;
    mb /= bins;
    double sab = 0, saa = 0, sbb = 0;
    for (int i = 0; i < bins; ++i) {
      sab += (ha[i] - ma) * (hb[i] - mb);
      saa += (ha[i] - ma) * (ha[i] - ma);
      sbb += (hb[i] - mb) * (hb[i] - mb);
    }
    if (saa == 0 || sbb == 0) {
      log::warn("histogram correlation: zero-variance histogram in channel " + std::to_string(c) + ", using 0");
      continue;
    }
    total += sab / std::sqrt(saa * sbb);
  }
  return total / 3.0;
}

// ---------------------------------------------------------------------------
// LPIPS

/// Learned-perceptual distance on a frozen backbone: per tap, channel-normalized
/// activations, squared difference weighted per channel (uniform by default),
/// spatial mean, summed over taps. Inputs are mapped from [0, 1] to [-1, 1].
class Lpips {
 public:
  explicit Lpips(std::shared_ptr<const FeatureExtractor<double>> backbone, bool pretrained = false)
      : backbone_(std::move(backbone)), pretrained_(pretrained) {
    if (!pretrained_) log::warn("lpips: random backbone, values are not comparable to published numbers");
  }

  void set_layer_weights(std::vector<std::vector<double>> w) { weights_ = std::move(w); }
  [[nodiscard]] bool pretrained() const { return pretrained_; }

  double operator()(const Tensor<double>& a, const Tensor<double>& b) const {
    detail::same_shape(a, b, "lpips");
    NoGradGuard ng;
    auto to_signed = [](Tensor<double> t) {
      for (auto& v : t.vec()) v = 2 * v - 1;
      return Var<double>(std::move(t));
    };
    const auto fa = backbone_->features(to_signed(a));
    const auto fb = backbone_->features(to_signed(b));
    double d = 0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
      const auto& ta = fa[l].value();
      const auto& tb = fb[l].value();
      const Shape s = ta.shape();
      double layer = 0;
      for (int n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
          double na = 0, nb = 0;
          for (int c = 0; c < s.c; ++c) {
            na += ta.plane(n, c)[i] * ta.plane(n, c)[i];
            nb += tb.plane(n, c)[i] * tb.plane(n, c)[i];
          }
          na = std::sqrt(na) + 1e-10;
          nb = std::sqrt(nb) + 1e-10;
          for (int c = 0; c < s.c; ++c) {
            const double diff = ta.plane(n, c)[i] / na - tb.plane(n, c)[i] / nb;
            const double w = weights_.empty() ? 1.0 : weights_[l][c];
            layer += w * diff * diff;
          }
        }
      d += layer / (static_cast<double>(s.n) * s.plane());
    }
    return d;
  }

 private:
  std::shared_ptr<const FeatureExtractor<double>> backbone_;
  bool pretrained_;
  std::vector<std::vector<double>> weights_;
};

// ---------------------------------------------------------------------------
// FVD

/// Frechet distance between Gaussian fits of two embedding sets (rows are samples).
inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps = 1e-6) {
  if (a.rows() < 2 || b.rows() < 2) throw InvalidInputError("frechet distance needs at least 2 samples per set");
  if (a.cols() != b.cols()) throw ShapeError("frechet distance: embedding dimensions differ");
  auto fit = [](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  };
  Eigen::VectorXd m1, m2;
  Eigen::MatrixXd s1, s2;
  fit(a, m1, s1);
  fit(b, m2, s2);
  auto singular = [](const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
    const double mx = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    return es.eigenvalues().minCoeff() <= 1e-12 * mx;
  };
  if (singular(s1) || singular(s2)) {
    log::warn("frechet distance: singular covariance, adding " + std::to_string(eps) + " to the diagonal");
    s1.diagonal().array() += eps;
    s2.diagonal().array() += eps;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
  const Eigen::VectorXd ev = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sq1 = e1.eigenvectors() * ev.asDiagonal() * e1.eigenvectors().transpose();
  const Eigen::MatrixXd mid = sq1 * s2 * sq1;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em((mid + mid.transpose()) / 2, Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2 * tr_sqrt;
  return std::max(d, 0.0);
}

/// Fallback clip embedding: frames bilinearly resized to 16x16, each window of three
/// consecutive frames projected by a fixed seeded Gaussian matrix, tanh, then
/// averaged over windows. Not comparable to published FVD numbers.
class RandomVideoEmbedding {
 public:
  static constexpr int kSide = 16;
  static constexpr int kWindow = 3;

  explicit RandomVideoEmbedding(int dim = 64, std::uint64_t seed = 0) : dim_(dim) {
    const int in = kWindow * 3 * kSide * kSide;
    proj_.resize(dim, in);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < in; ++j) proj_(i, j) = d(rng);
  }

  [[nodiscard]] int dim() const { return dim_; }

  /// clip: frames (T, 3, H, W), T >= 1 (short clips repeat their last frame).
  [[nodiscard]] Eigen::VectorXd operator()(const Tensor<double>& clip) const {
    if (clip.c() != 3 || clip.n() < 1) throw ShapeError("video embedding expects (T, 3, H, W)");
    NoGradGuard ng;
    const Tensor<double> small = resize_bilinear(Var<double>(clip), kSide, kSide).value();
    const int T = clip.n();
    const int frame = 3 * kSide * kSide;
    const int windows = std::max(1, T - kWindow + 1);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim_);
    Eigen::VectorXd z(kWindow * frame);
    for (int w = 0; w < windows; ++w) {
      for (int k = 0; k < kWindow; ++k) {
        const int t = std::min(w + k, T - 1);
        for (int i = 0; i < frame; ++i) z(k * frame + i) = 2 * small.data()[static_cast<std::size_t>(t) * frame + i] - 1;
      }
      acc += (proj_ * z).array().tanh().matrix();
    }
    return acc / windows;
  }

 private:
  int dim_;
  Eigen::MatrixXd proj_;
};

/// FVD between two sets of clips under the given embedding.
template <typename Embed>
double fvd(const std::vector<Tensor<double>>& set_a, const std::vector<Tensor<double>>& set_b, const Embed& embed) {
  auto stack = [&](const std::vector<Tensor<double>>& s) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(s.size()), embed.dim());
    for (std::size_t i = 0; i < s.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = embed(s[i]).transpose();
    return m;
  };
  return frechet_distance(stack(set_a), stack(set_b));
}

// ---------------------------------------------------------------------------
// Report

/// Per-frame metric names in report order.
inline const std::vector<std::string>& frame_metric_names() {
  static const std::vector<std::string> names = {"psnr", "ssim", "lpips", "fsim", "y_psnr", "hist_corr"};
  return names;
}

struct Summary {
  double mean = 0;
  double std = 0;
  std::size_t count = 0;
};

/// mean and population std; infinite entries (identical pairs) are excluded and counted apart.
inline Summary summarize(const std::vector<double>& v, std::size_t* infinite = nullptr) {
  Summary s;
  std::size_t inf = 0;
  for (double x : v) {
    if (std::isinf(x)) {
      ++inf;
      continue;
    }
    s.mean += x;
    ++s.count;
  }
  if (infinite) *infinite = inf;
  if (s.count == 0) {
    s.mean = inf ? kInfinitePsnr : 0;
    return s;
  }
  s.mean /= static_cast<double>(s.count);
  for (double x : v)
    if (!std::isinf(x)) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(s.count));
  return s;
}

struct FrameRecord {
  std::string sequence;
  int index = 0;
  std::map<std::string, double> values;
};

struct MetricsReport {
  std::vector<std::string> selected;
  std::vector<FrameRecord> frames;
  std::map<std::string, double> sequence_fvd;  // per sequence, over its 3-frame windows
  std::optional<double> fvd;                   // over whole sequences, when there are at least two
  std::vector<std::string> non_comparable;     // metrics computed with a random fallback backbone

  [[nodiscard]] bool has(const std::string& m) const {
    return std::find(selected.begin(), selected.end(), m) != selected.end();
  }

  [[nodiscard]] std::map<std::string, Summary> aggregate() const {
    std::map<std::string, Summary> out;
    for (const auto& name : selected) {
      if (name == "fvd") continue;
      std::vector<double> v;
      for (const auto& f : frames)
        if (auto it = f.values.find(name); it != f.values.end()) v.push_back(it->second);
      out[name] = summarize(v);
    }
    return out;
  }
};

}  // namespace fpanet::metrics
