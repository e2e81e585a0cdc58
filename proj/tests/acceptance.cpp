// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any fails.
//
//   fpanet_acceptance [--work DIR] [--only 1,2,...] [--overfit-iters N] [--ablation-iters N]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "fpanet/fpanet.hpp"
#include "test_util.hpp"

using namespace fpanet;
using fpanet::testing::grad_check;
using fpanet::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

struct Settings {
  fs::path work;
  int overfit_iters = 2000;
  int ablation_iters = 2000;
};

// 1 -------------------------------------------------------------------------

Outcome fft_round_trip(const Settings&) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> ext(1, 64);
  double worst_f = 0, worst_d = 0;
  std::set<int> parities;
  for (int i = 0; i < 200; ++i) {
    // Alternate the width parity so both code paths are exercised.
    int h = ext(rng), w = ext(rng);
    if ((w % 2) != (i % 2)) w = w == 64 ? 63 : w + 1;
    parities.insert(w % 2);
    const auto xd = random_tensor<double>(Shape{1, 1, h, w}, rng);
    const auto xf = xd.cast<float>();
    worst_d = std::max(worst_d, max_abs_diff(recompose(decompose(Var<double>(xd))).value(), xd));
    worst_f = std::max(worst_f, static_cast<double>(max_abs_diff(recompose(decompose(Var<float>(xf))).value(), xf)));
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_f < 1e-5 && worst_d < 1e-10 && parities.size() == 2 && secs < 10;
  return {ok, "max err float " + fmt(worst_f) + " (< 1e-5), double " + fmt(worst_d) + " (< 1e-10), " +
                  fmt(secs, 3) + " s"};
}

// 2 -------------------------------------------------------------------------

Outcome gradient_suite(const Settings&) {
  const auto t0 = Clock::now();
  ParamStore<double> store;
  std::mt19937_64 rng(202);
  Builder<double> b{&store, &rng, ""};
  Fsm<double> fsm(b.sub("fsm"), 4, true);
  Sfeb<double> sfeb(b.sub("sfeb"), 4, 2);
  Csfm<double> csfm(b.sub("csfm"), 4, 2);
  PamStage<double> pam(b.sub("pam"), 4, 1, false, AlignTarget::neighbor);
  Var<double> x(random_tensor<double>(Shape{1, 4, 8, 8}, rng), true);
  Var<double> wt(random_tensor<double>(Shape{1, 4, 8, 8}, rng));
  Var<double> off(random_tensor<double>(Shape{1, 18, 8, 8}, rng, -1.4, 1.4), true);
  auto with_params = [&](std::vector<Var<double>> v, const std::string& prefix) {
    for (auto& p : store.params())
      if (p.name.rfind(prefix, 0) == 0) v.push_back(p.var);
    return v;
  };
  std::vector<std::pair<std::string, double>> errs;
  errs.emplace_back("fsm", grad_check([&] { return sum(mul(fsm(x), wt)); }, with_params({x}, "fsm"), 1e-6, 64).rel_error);
  errs.emplace_back("sfeb", grad_check([&] { return sum(mul(sfeb(x), wt)); }, with_params({x}, "sfeb"), 1e-6, 64).rel_error);
  errs.emplace_back("csfm", grad_check([&] { return sum(mul(csfm(x), wt)); }, with_params({x}, "csfm"), 1e-6, 64).rel_error);
  errs.emplace_back("deform_align", grad_check([&] { return sum(mul(pam.deform_align(x, off), wt)); },
                                               with_params({x, off}, "pam.dconv"), 1e-6, 64).rel_error);

  ModelOutput<double> out{Var<double>(random_tensor<double>(Shape{1, 3, 8, 8}, rng, 0, 1), true),
                          Var<double>(random_tensor<double>(Shape{1, 3, 4, 4}, rng, 0, 1), true),
                          Var<double>(random_tensor<double>(Shape{1, 3, 2, 2}, rng, 0, 1), true),
                          {}};
  Var<double> target(random_tensor<double>(Shape{1, 3, 8, 8}, rng, 0, 1));
  Vgg19Extractor<double> vgg(VggOptions{16, 2, true, 7});
  errs.emplace_back("total_loss", grad_check([&] { return total_loss(out, target, LossWeights{}, &vgg).total; },
                                             {out.pred, out.half, out.quarter})
                                      .rel_error);
  const double secs = seconds_since(t0);
  bool ok = secs < 120;
  std::string d;
  for (const auto& [name, e] : errs) {
    ok = ok && e < 1e-3;
    d += name + " " + fmt(e, 2) + ", ";
  }
  return {ok, "rel err " + d + fmt(secs, 3) + " s (< 1e-3, < 120 s)"};
}

// 3 -------------------------------------------------------------------------

Outcome normalization(const Settings&) {
  ParamStore<double> store;
  std::mt19937_64 rng(303);
  Builder<double> b{&store, &rng, ""};
  Fsm<double> fsm(b.sub("fsm"), 6, true);
  Csfm<double> csfm(b.sub("csfm"), 4, 2);
  double worst_fsm = 0, worst_csfm = 0;
  bool ranges = true;
  for (int trial = 0; trial < 100; ++trial) {
    FsfTrace<double> tf, tc;
    fsm(Var<double>(random_tensor<double>(Shape{1, 6, 8, 8}, rng, -3, 3)), &tf);
    for (std::size_t i = 0; i < tf.alpha.size(); ++i) {
      worst_fsm = std::max(worst_fsm, std::abs(tf.alpha[i] + tf.beta[i] - 1.0));
      ranges = ranges && tf.alpha[i] >= 0 && tf.beta[i] >= 0;
    }
    csfm(Var<double>(random_tensor<double>(Shape{1, 4, 12, 12}, rng, -3, 3)), &tc);
    const auto& w = tc.fusion_weights;
    for (int i = 0; i < w.h() * w.w(); ++i) {
      double s = 0;
      for (int br = 0; br < w.c(); ++br) {
        s += w.plane(0, br)[i];
        ranges = ranges && w.plane(0, br)[i] >= 0;
      }
      worst_csfm = std::max(worst_csfm, std::abs(s - 1.0));
    }
  }
  // Exact up to the rounding of one division and a three-term sum.
  const double tol = 4 * std::numeric_limits<double>::epsilon();
  return {worst_fsm <= tol && worst_csfm <= tol && ranges,
          "max |alpha+beta-1| " + fmt(worst_fsm, 3) + ", max |sum w - 1| " + fmt(worst_csfm, 3) + " over 100 inputs (<= 4 ulp)"};
}

// 4 -------------------------------------------------------------------------

Outcome deformable_oracle(const Settings&) {
  std::mt19937_64 rng(404);
  const int C = 3, H = 8, W = 8;
  Var<double> x(random_tensor<double>(Shape{1, C, H, W}, rng));
  Tensor<double> k(Shape{C, C, 3, 3});
  for (int i = 0; i < C; ++i) k.at(i, i, 1, 1) = 1.0;
  auto uniform = [&](double dy, double dx) {
    Tensor<double> o(Shape{1, 18, H, W});
    for (int c = 0; c < 18; ++c) std::fill(o.plane(0, c), o.plane(0, c) + H * W, c % 2 == 0 ? dy : dx);
    return Var<double>(o);
  };
  double worst = 0;
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      const auto y = deform_conv2d(x, uniform(dy, dx), Var<double>(k), Var<double>(), 1).value();
      for (int c = 0; c < C; ++c)
        for (int r = 0; r < H; ++r)
          for (int q = 0; q < W; ++q)
            worst = std::max(worst, std::abs(y.at(0, c, r, q) -
                                             x.value().at(0, c, std::clamp(r + dy, 0, H - 1), std::clamp(q + dx, 0, W - 1))));
    }
  double worst_half = 0;
  const auto y = deform_conv2d(x, uniform(0, 0.5), Var<double>(k), Var<double>(), 1).value();
  for (int c = 0; c < C; ++c)
    for (int r = 0; r < H; ++r)
      for (int q = 0; q < W; ++q) {
        const double e = 0.5 * (x.value().at(0, c, r, q) + x.value().at(0, c, r, std::min(q + 1, W - 1)));
        worst_half = std::max(worst_half, std::abs(y.at(0, c, r, q) - e));
      }
  return {worst <= 1e-12 && worst_half <= 1e-12,
          "integer shifts [-2,2]^2 max err " + fmt(worst, 3) + ", (0, 0.5) max err " + fmt(worst_half, 3) + " (<= 1e-12)"};
}

// 5 -------------------------------------------------------------------------

Outcome metric_oracles(const Settings&) {
  std::mt19937_64 rng(505);
  // Uniform 16/255 error: PSNR = 20 log10(255 / 16).
  auto a = random_tensor<double>(Shape{1, 3, 32, 32}, rng, 0.2, 0.8);
  auto b = a;
  for (auto& v : b.vec()) v += 16.0 / 255.0;
  const double p = metrics::psnr(a, b);
  const double closed = 20 * std::log10(255.0 / 16.0);
  const bool psnr_ok = std::abs(p - closed) < 1e-9 && std::abs(p - 24.048) < 0.01;

  double worst_id = 0;
  for (int i = 0; i < 20; ++i) {
    auto img = random_tensor<double>(Shape{1, 3, 40, 36}, rng, 0, 1);
    worst_id = std::max({worst_id, std::abs(metrics::ssim(img, img) - 1), std::abs(metrics::fsim(img, img) - 1)});
  }

  // Frechet distance: pure mean shift over identity-covariance sets gives |mu1 - mu2|^2;
  // 1-D sets {-s, s} give (s1 - s2)^2 under the unbiased estimate var = 2 s^2.
  const int D = 3;
  Eigen::MatrixXd base(2 * D, D);
  base.setZero();
  const double r = std::sqrt((2.0 * D - 1) / 2.0);
  for (int d = 0; d < D; ++d) {
    base(2 * d, d) = r;
    base(2 * d + 1, d) = -r;
  }
  Eigen::RowVectorXd shift(D);
  shift << 0.5, -1.25, 2.0;
  Eigen::MatrixXd moved = base.rowwise() + shift;
  const double fd_shift = metrics::frechet_distance(base, moved);
  const double want_shift = shift.squaredNorm();
  Eigen::MatrixXd s1(2, 1), s2(2, 1);
  s1 << -0.5, 0.5;
  s2 << -2.0, 2.0;
  const double fd_sigma = metrics::frechet_distance(s1, s2);
  const double want_sigma = std::pow(std::sqrt(0.5) - std::sqrt(8.0), 2);
  const double rel1 = std::abs(fd_shift - want_shift) / want_shift, rel2 = std::abs(fd_sigma - want_sigma) / want_sigma;
  const bool ok = psnr_ok && worst_id <= 1e-6 && rel1 < 1e-4 && rel2 < 1e-4;
  return {ok, "psnr(16/255) " + fmt(p, 7) + " dB vs 20log10(255/16) " + fmt(closed, 7) + "; ssim/fsim identity dev " +
                  fmt(worst_id, 2) + "; fvd d^2 rel " + fmt(rel1, 2) + ", (s1-s2)^2 rel " + fmt(rel2, 2)};
}

// 6 -------------------------------------------------------------------------

ModelConfig toy_model() {
  ModelConfig m;
  m.base_width = 16;
  m.encoder_blocks = {1, 1, 1};
  m.bottleneck_blocks = 2;
  return m;
}

template <typename T>
std::pair<double, double> mean_psnr(const FpaNet<T>& net, const MoireDataset& ds) {
  double pred = 0, raw = 0;
  for (const auto& s : ds.samples()) {
    const auto t = ds.triplet(s);
    const auto f = t.frames.template cast<T>();
    const auto p = net.infer(f.slice_batch(0, 1), f.slice_batch(1, 1), f.slice_batch(2, 1)).template cast<double>();
    pred += metrics::psnr(p, t.target);
    raw += metrics::psnr(t.frames.slice_batch(1, 1), t.target);
  }
  const double n = static_cast<double>(ds.samples().size());
  return {pred / n, raw / n};
}

Outcome overfit_smoke(const Settings& st) {
  const auto t0 = Clock::now();
  const fs::path root = st.work / "overfit_data";
  fs::remove_all(root);
  make_synthetic_benchmark(root, {8, 3, 96, 96, 2024, "train"});
  TrainConfig c;
  c.model = toy_model();
  c.data_root = root.string();
  c.crop = 96;
  c.batch = 1;
  c.edge_padding = false;  // one triplet per sequence: 8 triplets
  c.max_iters = st.overfit_iters;
  c.restart_period = st.overfit_iters;
  c.output_dir = (st.work / "overfit_run").string();
  c.checkpoint_every = 0;
  c.log_every = 250;
  fs::remove_all(c.output_dir);
  Trainer<float> tr(c);
  tr.run();
  MoireDataset ds({root, "train", FrameMode::triplet, 0, 1, 0, false});
  const auto [pred, raw] = mean_psnr(tr.model(), ds);
  const double secs = seconds_since(t0);
  const double gain = pred - raw;
  return {gain >= 6.0 && secs <= 1800 && st.overfit_iters <= 2000,
          std::to_string(st.overfit_iters) + " iters, PSNR moire " + fmt(raw, 5) + " -> restored " + fmt(pred, 5) +
              " dB, gain " + fmt(gain, 4) + " dB (>= 6), " + fmt(secs / 60, 3) + " min (<= 30)"};
}

// 7 -------------------------------------------------------------------------

Outcome ablation_direction(const Settings& st) {
  const auto t0 = Clock::now();
  const fs::path root = st.work / "ablation_data";
  fs::remove_all(root);
  make_synthetic_benchmark(root, {64, 5, 64, 64, 77, "train"});
  make_synthetic_benchmark(root, {4, 5, 64, 64, 78, "test"});
  TrainConfig base;
  base.model = toy_model();
  base.data_root = root.string();
  base.crop = 64;
  base.batch = 1;
  base.max_iters = st.ablation_iters;
  base.restart_period = st.ablation_iters;
  base.output_dir = (st.work / "ablation_runs").string();
  base.checkpoint_every = 0;
  base.log_every = 500;
  fs::remove_all(base.output_dir);
  std::array<double, 6> psnr{};
  double raw = 0;
  std::set<std::uint64_t> hashes;
  for (int id = 1; id <= 6; ++id) {
    const auto run = ablate(base, id, {"psnr"});
    psnr[id - 1] = run.report.aggregate().at("psnr").mean;
    hashes.insert(run.controlled_hash);
    std::cout << "  model " << id << ": mean PSNR " << fmt(psnr[id - 1], 5) << " dB\n" << std::flush;
  }
  {
    MoireDataset ds({root, "test", FrameMode::triplet, 0, 1, 0});
    for (const auto& s : ds.samples()) {
      const auto& [m, g] = ds.frame(s.sequence, s.center);
      raw += metrics::psnr(m, g);
    }
    raw /= static_cast<double>(ds.samples().size());
  }
  std::vector<int> order{1, 2, 3, 4, 5, 6};
  std::sort(order.begin(), order.end(), [&](int a, int b) { return psnr[a - 1] > psnr[b - 1]; });
  std::string ord;
  for (int id : order) ord += (ord.empty() ? "" : " > ") + ("M" + std::to_string(id));
  const double secs = seconds_since(t0);
  const double margin = psnr[5] - psnr[0];
  int beaten = 0;
  for (int i = 0; i < 5; ++i) beaten += psnr[5] >= psnr[i];
  return {margin >= 1.0 && secs <= 3 * 3600 && hashes.size() == 1,
          "M6 - M1 = " + fmt(margin, 4) + " dB (>= 1); M6 >= " + std::to_string(beaten) + "/5 others; ordering " + ord +
              "; raw moire " + fmt(raw, 5) + " dB; " + fmt(secs / 60, 4) + " min (<= 180)"};
}

// 8 -------------------------------------------------------------------------

Outcome temporal_plumbing(const Settings&) {
  std::mt19937_64 rng(808);
  ModelConfig on = toy_model();
  ModelConfig off = on;
  off.use_pam = false;
  FpaNet<double> net_on(on), net_off(off);
  const auto ref = random_tensor<double>(Shape{1, 3, 32, 32}, rng, 0, 1);
  const auto n1 = random_tensor<double>(Shape{1, 3, 32, 32}, rng, 0, 1);
  auto n2 = n1;
  for (auto& v : n2.vec()) v = std::clamp(v + 0.05 * std::sin(17 * v), 0.0, 1.0);
  const double sens_on =
      max_abs_diff(net_on.forward(n1, ref, n1).pred.value(), net_on.forward(n2, ref, n2).pred.value());
  const bool invariant =
      net_off.forward(n1, ref, n1).pred.value().vec() == net_off.forward(n2, ref, n2).pred.value().vec();
  return {sens_on > 0 && invariant,
          "pam on: max |dP| " + fmt(sens_on, 3) + " (> 0); pam off: bit-invariant " + (invariant ? "yes" : "no")};
}

// 9 -------------------------------------------------------------------------

Outcome resume_and_determinism(const Settings& st) {
  const fs::path root = st.work / "resume_data";
  fs::remove_all(root);
  make_synthetic_benchmark(root, {2, 4, 32, 32, 909, "train"});
  TrainConfig c;
  c.model.base_width = 8;
  c.model.encoder_blocks = {1, 1, 1};
  c.model.bottleneck_blocks = 1;
  c.data_root = root.string();
  c.crop = 32;
  c.batch = 2;
  c.max_iters = 8;
  c.restart_period = 4;
  c.vgg_width_divisor = 16;
  c.checkpoint_every = 0;
  c.log_every = 100;
  auto out = [&](const std::string& n) {
    fs::remove_all(st.work / n);
    return (st.work / n).string();
  };

  // Seed determinism: two float32 runs with the same seed agree bit for bit.
  auto a = c, b = c;
  a.output_dir = out("det_a");
  b.output_dir = out("det_b");
  const auto la = train(a).log, lb = train(b).log;
  bool same_losses = la.size() == lb.size();
  for (std::size_t i = 0; same_losses && i < la.size(); ++i) same_losses = la[i].total == lb[i].total;
  const auto ka = load_checkpoint(fs::path(a.output_dir) / kFinalCheckpoint);
  const auto kb = load_checkpoint(fs::path(b.output_dir) / kFinalCheckpoint);
  bool same_params = ka.tensors.size() == kb.tensors.size();
  for (const auto& [name, t] : ka.tensors) same_params = same_params && kb.tensors.count(name) && t.vec() == kb.tensors.at(name).vec();

  // Resume invariance: N steps == k steps + checkpoint + resume for N - k steps (float64).
  auto full = c;
  full.precision = "float64";
  full.output_dir = out("resume_full");
  Trainer<double> t_full(full);
  t_full.run();
  auto part = full;
  part.output_dir = out("resume_part");
  part.checkpoint_every = 3;
  Trainer<double>(part).run(3);
  auto rest = full;
  rest.output_dir = out("resume_rest");
  rest.resume = (fs::path(part.output_dir) / kLastCheckpoint).string();
  Trainer<double> t_rest(rest);
  t_rest.run();
  double worst = 0;
  const auto& pf = t_full.model().params().params();
  const auto& pr = t_rest.model().params().params();
  for (std::size_t i = 0; i < pf.size(); ++i) worst = std::max(worst, max_abs_diff(pf[i].var.value(), pr[i].var.value()));
  return {same_losses && same_params && worst == 0.0,
          std::string("seed-fixed float32 runs identical: ") + (same_losses && same_params ? "yes" : "no") +
              "; resume 3+5 vs 8 steps (float64) max param diff " + fmt(worst, 3)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  Settings st;
  st.work = fs::temp_directory_path() / "fpanet_acceptance";
  std::string only;
  bool verbose = false;
  app.add_option("--work", st.work, "scratch directory");
  app.add_option("--only", only, "comma list of criterion numbers");
  app.add_option("--overfit-iters", st.overfit_iters, "training iterations for criterion 6")->capture_default_str();
  app.add_option("--ablation-iters", st.ablation_iters, "training iterations per model for criterion 7")
      ->capture_default_str();
  app.add_flag("-v,--verbose", verbose, "show training logs");
  CLI11_PARSE(app, argc, argv);
  if (!verbose) log::threshold() = log::Level::error;
  fs::create_directories(st.work);

  const std::vector<std::pair<std::string, std::function<Outcome(const Settings&)>>> criteria{
      {"fft round trip", fft_round_trip},
      {"gradient suite", gradient_suite},
      {"normalization invariants", normalization},
      {"deformable oracle", deformable_oracle},
      {"metric oracles", metric_oracles},
      {"overfit smoke test", overfit_smoke},
      {"ablation direction", ablation_direction},
      {"temporal plumbing", temporal_plumbing},
      {"resume invariance and seed determinism", resume_and_determinism},
  };
  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
  }
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second(st);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
