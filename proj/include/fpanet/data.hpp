#pragma once

// Synthetic moire generation, the on-disk benchmark writer, and the dataset loader.
//
// Layout: <root>/<split>/<seq_id>/{moire,gt}/<%05d>.png, plus <root>/manifest.json
// for generated sets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpanet/image_io.hpp"
#include "fpanet/model.hpp"
#include "fpanet/tensor.hpp"

namespace fpanet {

/// splitmix64 finalizer; used to derive independent streams from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct MoireParams {
  double f1 = 0.3125;  // cycles / pixel
  double f2 = 0.3125;
  double theta = 0.05;  // rotation of the second grating relative to the first
  std::array<double, 3> gains{1.0, 0.6, 0.8};
  double contrast = 0.8;
  std::array<double, 3> tint{0.5, 0.5, 0.5};  // colour of the additive pattern term
  std::array<double, 2> drift{0.35, -0.2};  // (vx, vy) pixels / frame
  std::uint64_t seed = 0;                   // base orientation and grating phases

  void validate() const {
    auto in_open = [](double f) { return f > 0 && f < 0.5; };
    if (!in_open(f1) || !in_open(f2)) throw ConfigError("moire frequencies must lie in (0, 0.5)");
    if (!std::isfinite(theta)) throw ConfigError("moire theta must be finite");
    for (double g : gains)
      if (!(g >= 0) || !std::isfinite(g)) throw ConfigError("moire gains must be >= 0");
    if (!(contrast >= 0 && contrast <= 1)) throw ConfigError("moire contrast must lie in [0, 1]");
    for (double v : drift)
      if (!std::isfinite(v)) throw ConfigError("moire drift must be finite");
    for (double v : tint)
      if (!(v >= 0 && v <= 1)) throw ConfigError("moire tint must lie in [0, 1]");
  }

  /// Parameters drawn for one generated sequence.
  static MoireParams sample(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0, 1);
    MoireParams p;
    p.f1 = 0.18 + 0.2 * u(rng);
    p.f2 = p.f1 * (0.95 + 0.1 * u(rng));
    p.theta = 0.03 + 0.12 * u(rng);
    for (auto& g : p.gains) g = 0.5 + 0.5 * u(rng);
    p.contrast = 0.7 + 0.3 * u(rng);
    for (auto& v : p.tint) v = u(rng);
    for (auto& v : p.drift) v = -0.6 + 1.2 * u(rng);
    p.seed = rng();
    return p;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"f1", f1}, {"f2", f2}, {"theta", theta}, {"gains", gains},
            {"contrast", contrast}, {"tint", tint}, {"drift", drift}, {"seed", seed}};
  }
};

/// Moire layer m in [0, 1] for frame t: product of two drifting sinusoidal gratings.
inline Tensor<double> moire_layer(const MoireParams& p, int H, int W, int t) {
  p.validate();
  std::mt19937_64 rng(p.seed);
  std::uniform_real_distribution<double> u(0, 2 * std::numbers::pi);
  const double phi = u(rng), psi1 = u(rng), psi2 = u(rng);
  const double c1 = std::cos(phi), s1 = std::sin(phi);
  const double c2 = std::cos(phi + p.theta), s2 = std::sin(phi + p.theta);
  const double tau = 2 * std::numbers::pi;
  Tensor<double> m(Shape{1, 1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double xs = x - p.drift[0] * t, ys = y - p.drift[1] * t;
      const double g1 = 0.5 * (1 + std::cos(tau * p.f1 * (c1 * xs + s1 * ys) + psi1));
      const double g2 = 0.5 * (1 + std::cos(tau * p.f2 * (c2 * xs + s2 * ys) + psi2));
      m.at(0, 0, y, x) = g1 * g2;
    }
  return m;
}

/// Contaminates a clean clip (T, 3, H, W): out_c = clean_c (1 - k_c m) + k_c m tint_c with
/// k_c = contrast * gain_c, clamped to [0, 1]. Returns {moire, clean}.
inline std::pair<Tensor<double>, Tensor<double>> synthesize_moire(const Tensor<double>& clean, const MoireParams& p) {
  p.validate();
  if (clean.c() != 3) throw ShapeError("synthesize_moire expects (T, 3, H, W), got " + clean.shape().str());
  for (double v : clean.vec())
    if (!(v >= 0 && v <= 1)) throw InvalidInputError("clean clip values must lie in [0, 1]");
  Tensor<double> out(clean.shape());
  const std::size_t P = clean.shape().plane();
  for (int t = 0; t < clean.n(); ++t) {
    const auto m = moire_layer(p, clean.h(), clean.w(), t);
    for (int c = 0; c < 3; ++c) {
      const double k = p.contrast * p.gains[c], tint = p.tint[c];
      const double* src = clean.plane(t, c);
      double* dst = out.plane(t, c);
      for (std::size_t i = 0; i < P; ++i)
        dst[i] = std::clamp(src[i] * (1 - k * m[i]) + tint * k * m[i], 0.0, 1.0);
    }
  }
  return {std::move(out), clean};
}

namespace detail {

/// Clean screen-like content: a colour gradient with a checkerboard panel and lines of
/// blocky glyphs.
inline Tensor<double> render_content(int H, int W, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Tensor<double> img(Shape{1, 3, H, W});
  std::array<double, 3> c0{}, c1{};
  for (int c = 0; c < 3; ++c) {
    c0[c] = 0.15 + 0.7 * u(rng);
    c1[c] = 0.15 + 0.7 * u(rng);
  }
  const double ang = u(rng) * 2 * std::numbers::pi;
  const double gx = std::cos(ang), gy = std::sin(ang);
  const double norm = std::abs(gx) * W + std::abs(gy) * H;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = (gx * x + gy * y) / norm;
      s -= std::floor(s);
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = c0[c] + (c1[c] - c0[c]) * s;
    }

  auto rect = [&](int& y0, int& x0, int& h, int& w) {
    h = std::max(4, static_cast<int>(H * (0.25 + 0.35 * u(rng))));
    w = std::max(4, static_cast<int>(W * (0.25 + 0.35 * u(rng))));
    y0 = static_cast<int>(u(rng) * (H - h + 1));
    x0 = static_cast<int>(u(rng) * (W - w + 1));
  };
  int y0, x0, h, w;
  rect(y0, x0, h, w);
  const int cell = 3 + static_cast<int>(u(rng) * 10);
  std::array<double, 3> ca{}, cb{};
  for (int c = 0; c < 3; ++c) {
    ca[c] = 0.05 + 0.9 * u(rng);
    cb[c] = 0.05 + 0.9 * u(rng);
  }
  for (int y = y0; y < std::min(H, y0 + h); ++y)
    for (int x = x0; x < std::min(W, x0 + w); ++x) {
      const bool odd = (((y - y0) / cell) + ((x - x0) / cell)) % 2;
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = odd ? ca[c] : cb[c];
    }

  // Glyph lines: 5x7 random bitmaps (a fixed alphabet of 16 per image) at scale 1-2.
  std::vector<std::array<std::uint8_t, 35>> alphabet(16);
  for (auto& g : alphabet)
    for (auto& b : g) b = u(rng) < 0.45;
  const int scale = 1 + static_cast<int>(u(rng) * 2);
  const double ink = u(rng) < 0.5 ? 0.05 : 0.95;
  rect(y0, x0, h, w);
  for (int ly = y0; ly + 7 * scale <= std::min(H, y0 + h); ly += 9 * scale)
    for (int lx = x0; lx + 5 * scale <= std::min(W, x0 + w); lx += 6 * scale) {
      if (u(rng) < 0.15) continue;  // word gap
      const auto& g = alphabet[static_cast<std::size_t>(u(rng) * 16) % 16];
      for (int gy = 0; gy < 7 * scale; ++gy)
        for (int gx = 0; gx < 5 * scale; ++gx)
          if (g[(gy / scale) * 5 + gx / scale])
            for (int c = 0; c < 3; ++c) img.at(0, c, ly + gy, lx + gx) = ink;
    }
  return img;
}

inline std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d.png", i);
  return buf;
}

}  // namespace detail

struct BenchmarkOptions {
  int n_sequences = 8;
  int frames_per_sequence = 5;
  int height = 128;
  int width = 128;
  std::uint64_t seed = 0;
  std::string split = "train";
};

/// Clean clip of a generated sequence: static content repeated over the frames.
inline Tensor<double> render_clean_clip(int frames, int H, int W, std::mt19937_64& rng) {
  const auto img = detail::render_content(H, W, rng);
  Tensor<double> clip(Shape{frames, 3, H, W});
  for (int t = 0; t < frames; ++t) std::copy(img.vec().begin(), img.vec().end(), clip.vec().begin() + img.size() * t);
  return clip;
}

/// Writes a generated split under `root` and merges its entries into root/manifest.json.
inline void make_synthetic_benchmark(const std::filesystem::path& root, const BenchmarkOptions& opt) {
  if (opt.n_sequences < 1 || opt.frames_per_sequence < 1 || opt.height < 1 || opt.width < 1) {
    throw ConfigError("benchmark sizes must be positive");
  }
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / opt.split, ec);
  if (ec) throw Error("cannot create " + (root / opt.split).string() + ": " + ec.message());

  nlohmann::json manifest;
  const fs::path mpath = root / "manifest.json";
  if (fs::exists(mpath)) {
    std::ifstream in(mpath);
    manifest = nlohmann::json::parse(in, nullptr, false);
    if (manifest.is_discarded()) manifest = nlohmann::json::object();
  }
  manifest["format"] = "fpanet-moire-v1";
  manifest["layout"] = "<split>/<seq_id>/{moire,gt}/%05d.png";
  auto& seqs = manifest["sequences"];
  if (!seqs.is_array()) seqs = nlohmann::json::array();
  // Drop stale entries of this split before re-adding.
  nlohmann::json kept = nlohmann::json::array();
  for (const auto& s : seqs)
    if (s.value("split", "") != opt.split) kept.push_back(s);
  seqs = kept;

  for (int s = 0; s < opt.n_sequences; ++s) {
    std::mt19937_64 rng(mix_seed(opt.seed, static_cast<std::uint64_t>(s)));
    const auto clean = render_clean_clip(opt.frames_per_sequence, opt.height, opt.width, rng);
    const auto params = MoireParams::sample(rng);
    const auto [moire, gt] = synthesize_moire(clean, params);
    char id[16];
    std::snprintf(id, sizeof id, "seq%04d", s);
    const fs::path dir = root / opt.split / id;
    for (int t = 0; t < opt.frames_per_sequence; ++t) {
      write_png(dir / "moire" / detail::frame_name(t), moire, t);
      write_png(dir / "gt" / detail::frame_name(t), gt, t);
    }
    seqs.push_back({{"split", opt.split},
                    {"id", id},
                    {"frames", opt.frames_per_sequence},
                    {"height", opt.height},
                    {"width", opt.width},
                    {"generator_seed", opt.seed},
                    {"params", params.to_json()}});
  }
  std::ofstream out(mpath);
  if (!out) throw Error("cannot write " + mpath.string());
  out << manifest.dump(2) << '\n';
}

enum class FrameMode { triplet, single };

struct DatasetSpec {
  std::filesystem::path root;
  std::string split = "train";
  FrameMode mode = FrameMode::triplet;
  int crop = 384;  // 0 keeps full frames
  int batch = 8;
  std::uint64_t seed = 0;
  bool edge_padding = true;  // centers at t = 0 and T-1 replicate their nearest neighbor
  bool cache = true;
};

struct SequenceInfo {
  std::string id;
  std::filesystem::path dir;
  int frames = 0;
  int height = 0;
  int width = 0;
};

struct SampleRef {
  int sequence = 0;
  int center = 0;
};

/// One training batch: the three input frames, each (B, 3, crop, crop), and the target.
struct Batch {
  std::array<Tensor<double>, 3> moire;  // t-1, t, t+1
  Tensor<double> target;
  std::vector<SampleRef> samples;
  std::vector<std::array<int, 2>> origins;  // crop (y, x) per item

  [[nodiscard]] std::array<int, 5> shape5() const {
    const Shape s = target.shape();
    return {s.n, 3, s.c, s.h, s.w};
  }
};

class MoireDataset {
 public:
  explicit MoireDataset(DatasetSpec spec) : spec_(std::move(spec)) {
    if (spec_.batch < 1) throw ConfigError("batch must be >= 1");
    if (spec_.crop < 0) throw ConfigError("crop must be >= 0");
    scan();
  }

  [[nodiscard]] const DatasetSpec& spec() const { return spec_; }
  [[nodiscard]] const std::vector<SequenceInfo>& sequences() const { return seqs_; }
  [[nodiscard]] const std::vector<SampleRef>& samples() const { return samples_; }

  /// Frame indices used for the triplet centred at `center`.
  [[nodiscard]] std::array<int, 3> neighbors(const SampleRef& s) const {
    if (spec_.mode == FrameMode::single) return {s.center, s.center, s.center};
    const int last = seqs_[s.sequence].frames - 1;
    return {std::max(0, s.center - 1), s.center, std::min(last, s.center + 1)};
  }

  /// Full-frame (3, 3, H, W) triplet and its clean target.
  [[nodiscard]] FrameTriplet<double> triplet(const SampleRef& s) const {
    const auto idx = neighbors(s);
    const auto& info = seqs_[s.sequence];
    FrameTriplet<double> ft;
    ft.frames = Tensor<double>(Shape{3, 3, info.height, info.width});
    for (int k = 0; k < 3; ++k) {
      const auto& img = frame(s.sequence, idx[k]).first;
      std::copy(img.vec().begin(), img.vec().end(), ft.frames.vec().begin() + img.size() * k);
    }
    ft.target = frame(s.sequence, s.center).second;
    ft.sequence = info.id;
    ft.index = s.center;
    return ft;
  }

  [[nodiscard]] std::size_t batches_per_epoch() const {
    return (samples_.size() + spec_.batch - 1) / spec_.batch;
  }

  /// Batch `i` is a pure function of (spec, i): samples come from a per-epoch
  /// permutation and crop origins from a per-item stream.
  [[nodiscard]] Batch batch(std::uint64_t i) const {
    const std::size_t N = samples_.size();
    const int B = spec_.batch;
    const int ch = spec_.crop ? spec_.crop : min_h_, cw = spec_.crop ? spec_.crop : min_w_;
    if (!spec_.crop && (min_h_ != max_h_ || min_w_ != max_w_)) {
      throw ConfigError("crop = 0 needs equally sized frames for batching");
    }
    Batch b;
    for (auto& m : b.moire) m = Tensor<double>(Shape{B, 3, ch, cw});
    b.target = Tensor<double>(Shape{B, 3, ch, cw});
    std::uint64_t cached_epoch = ~0ULL;
    std::vector<std::size_t> perm;
    for (int k = 0; k < B; ++k) {
      const std::uint64_t p = i * static_cast<std::uint64_t>(B) + static_cast<std::uint64_t>(k);
      const std::uint64_t epoch = p / N;
      if (epoch != cached_epoch) {
        perm.resize(N);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::mt19937_64 rng(mix_seed(spec_.seed, epoch));
        std::shuffle(perm.begin(), perm.end(), rng);
        cached_epoch = epoch;
      }
      const SampleRef s = samples_[perm[p % N]];
      const auto& info = seqs_[s.sequence];
      std::mt19937_64 crng(mix_seed(spec_.seed ^ 0x5bd1e995ULL, p));
      const int oy = static_cast<int>(std::uniform_int_distribution<int>(0, info.height - ch)(crng));
      const int ox = static_cast<int>(std::uniform_int_distribution<int>(0, info.width - cw)(crng));
      const auto idx = neighbors(s);
      for (int f = 0; f < 3; ++f) copy_crop(frame(s.sequence, idx[f]).first, b.moire[f], k, oy, ox);
      copy_crop(frame(s.sequence, s.center).second, b.target, k, oy, ox);
      b.samples.push_back(s);
      b.origins.push_back({oy, ox});
    }
    return b;
  }

  /// (moire, gt) frame pair, cached in memory when enabled.
  [[nodiscard]] const std::pair<Tensor<double>, Tensor<double>>& frame(int seq, int index) const {
    std::lock_guard<std::mutex> lock(mu_);
    const auto key = std::make_pair(seq, index);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    if (!spec_.cache && !cache_.empty()) cache_.clear();
    const auto& info = seqs_[seq];
    auto m = read_png(info.dir / "moire" / detail::frame_name(index));
    auto g = read_png(info.dir / "gt" / detail::frame_name(index));
    if (m.shape() != g.shape() || m.h() != info.height || m.w() != info.width) {
      throw IngestionError("sequence " + info.id + ", frame " + std::to_string(index) +
                           ": moire/gt size mismatch " + m.shape().str() + " vs " + g.shape().str());
    }
    return cache_.emplace(key, std::make_pair(std::move(m), std::move(g))).first->second;
  }

 private:
  void copy_crop(const Tensor<double>& src, Tensor<double>& dst, int k, int oy, int ox) const {
    const int ch = dst.h(), cw = dst.w();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < ch; ++y) std::copy_n(&src.at(0, c, oy + y, ox), cw, &dst.at(k, c, y, 0));
  }

  static std::set<int> indices(const std::filesystem::path& dir, const std::string& seq) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IngestionError("sequence " + seq + ": missing directory " + dir.string());
    std::set<int> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (e.path().extension() != ".png") continue;
      const auto stem = e.path().stem().string();
      if (stem.empty() || !std::all_of(stem.begin(), stem.end(), ::isdigit)) {
        throw IngestionError("sequence " + seq + ": unexpected frame name " + name);
      }
      out.insert(std::stoi(stem));
    }
    return out;
  }

  void scan() {
    namespace fs = std::filesystem;
    const fs::path split_dir = spec_.root / spec_.split;
    if (!fs::is_directory(split_dir)) throw IngestionError("dataset split not found: " + split_dir.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(split_dir))
      if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const std::string id = d.filename().string();
      const auto mi = indices(d / "moire", id), gi = indices(d / "gt", id);
      for (int i : mi)
        if (!gi.count(i)) throw IngestionError("sequence " + id + ", frame " + std::to_string(i) + ": moire frame has no gt pair");
      for (int i : gi)
        if (!mi.count(i)) throw IngestionError("sequence " + id + ", frame " + std::to_string(i) + ": gt frame has no moire pair");
      if (mi.empty()) throw IngestionError("sequence " + id + ": no frames");
      int expect = 0;
      for (int i : mi) {
        if (i != expect) throw IngestionError("sequence " + id + ", frame " + std::to_string(expect) + ": missing from the index range");
        ++expect;
      }
      SequenceInfo info{id, d, static_cast<int>(mi.size()), 0, 0};
      const auto first = read_png(d / "moire" / detail::frame_name(0));
      info.height = first.h();
      info.width = first.w();
      if (spec_.crop > std::min(info.height, info.width)) {
        throw ConfigError("crop " + std::to_string(spec_.crop) + " exceeds frame size of sequence " + id);
      }
      const int seq = static_cast<int>(seqs_.size());
      seqs_.push_back(info);
      min_h_ = seq ? std::min(min_h_, info.height) : info.height;
      max_h_ = seq ? std::max(max_h_, info.height) : info.height;
      min_w_ = seq ? std::min(min_w_, info.width) : info.width;
      max_w_ = seq ? std::max(max_w_, info.width) : info.width;
      const bool pad = spec_.edge_padding || spec_.mode == FrameMode::single;
      const int lo = pad ? 0 : 1, hi = pad ? info.frames - 1 : info.frames - 2;
      for (int c = lo; c <= hi; ++c) samples_.push_back({seq, c});
    }
    if (seqs_.empty()) throw IngestionError("no sequences under " + split_dir.string());
    if (samples_.empty()) throw IngestionError("no valid triplet centers under " + split_dir.string());
  }

  DatasetSpec spec_;
  std::vector<SequenceInfo> seqs_;
  std::vector<SampleRef> samples_;
  int min_h_ = 0, max_h_ = 0, min_w_ = 0, max_w_ = 0;
  mutable std::mutex mu_;
  mutable std::map<std::pair<int, int>, std::pair<Tensor<double>, Tensor<double>>> cache_;
};

}  // namespace fpanet
