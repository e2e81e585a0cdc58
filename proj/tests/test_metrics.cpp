#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fpanet/metrics.hpp"
#include "naive_vgg.hpp"
#include "test_util.hpp"

using namespace fpanet;
using namespace fpanet::metrics;
using fpanet::testing::NaiveVgg;
using fpanet::testing::random_tensor;

namespace {

Tensor<double> pattern(int C, int H, int W, double fx = 0.7, double fy = 0.45) {
  Tensor<double> t(Shape{1, C, H, W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) t.at(0, c, y, x) = 0.5 + 0.3 * std::sin(fx * x + c) * std::cos(fy * y);
  return t;
}

Tensor<double> box_blur(const Tensor<double>& t, int r) {
  Tensor<double> o(t.shape());
  for (int c = 0; c < t.c(); ++c)
    for (int y = 0; y < t.h(); ++y)
      for (int x = 0; x < t.w(); ++x) {
        double acc = 0;
        int n = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const int yy = std::clamp(y + dy, 0, t.h() - 1), xx = std::clamp(x + dx, 0, t.w() - 1);
            acc += t.at(0, c, yy, xx);
            ++n;
          }
        o.at(0, c, y, x) = acc / n;
      }
  return o;
}

Tensor<double> add_noise(Tensor<double> t, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, sigma);
  for (auto& v : t.vec()) v += d(rng);
  return t;
}

}  // namespace

TEST(Psnr, IdenticalIsInfinite) {
  std::mt19937_64 rng(1);
  const auto a = random_tensor<double>(Shape{1, 3, 8, 8}, rng, 0, 1);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
}

TEST(Psnr, UniformEightBitError) {
  std::mt19937_64 rng(2);
  auto a = random_tensor<double>(Shape{1, 3, 16, 16}, rng, 0, 0.5);
  auto b = a;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += (i % 2 ? 16.0 : -16.0) / 255.0;
  // 20 log10(255 / 16) = 24.048 dB.
  EXPECT_NEAR(psnr(a, b), 20 * std::log10(255.0 / 16.0), 1e-9);
  EXPECT_NEAR(psnr(a, b), 24.048, 0.001);
}

TEST(Psnr, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  const auto a = random_tensor<double>(Shape{1, 3, 9, 7}, rng, 0, 1);
  const auto b = random_tensor<double>(Shape{1, 3, 9, 7}, rng, 0, 1);
  double se = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 7; ++x) se += std::pow(a.at(0, c, y, x) - b.at(0, c, y, x), 2);
  EXPECT_NEAR(psnr(a, b), 10 * std::log10(1.0 / (se / (3 * 9 * 7))), 1e-10);
  EXPECT_NEAR(psnr(a, b, 2.0), 10 * std::log10(4.0 / (se / (3 * 9 * 7))), 1e-10);
}

TEST(Psnr, DecreasesWithNoise) {
  const auto a = pattern(3, 32, 32);
  const double p1 = psnr(a, add_noise(a, 0.01, 4)), p2 = psnr(a, add_noise(a, 0.05, 4)),
               p3 = psnr(a, add_noise(a, 0.1, 4));
  EXPECT_GT(p1, p2);
  EXPECT_GT(p2, p3);
}

TEST(Psnr, Errors) {
  Tensor<double> a(Shape{1, 3, 4, 4}), b(Shape{1, 3, 4, 5});
  EXPECT_THROW(psnr(a, b), ShapeError);
  EXPECT_THROW(psnr(a, a, 0.0), InvalidInputError);
}

TEST(Ssim, IdentityAndConstants) {
  const auto a = pattern(3, 20, 24);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  Tensor<double> c(Shape{1, 3, 16, 16}, 0.3);
  EXPECT_NEAR(ssim(c, c), 1.0, 1e-12);
}

TEST(Ssim, MatchesReferenceImplementation) {
  // Reference values from scikit-image structural_similarity(gaussian_weights=True,
  // sigma=1.5, use_sample_covariance=False, data_range=1) on the same patterns.
  const int H = 24, W = 20;
  Tensor<double> a(Shape{1, 1, H, W}), b(a.shape()), c(a.shape());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      a.at(0, 0, y, x) = 0.5 + 0.3 * std::sin(0.7 * x) * std::cos(0.45 * y);
      b.at(0, 0, y, x) = 1 - a.at(0, 0, y, x);
      c.at(0, 0, y, x) = 0.5 + 0.25 * std::sin(0.3 * x + 0.2 * y);
    }
  EXPECT_NEAR(ssim(a, b), -0.9168384113032961, 1e-9);
  EXPECT_LT(ssim(a, b), 0.5);
  EXPECT_NEAR(ssim(a, c), 0.17216538798574016, 1e-9);
}

TEST(Ssim, TooSmallIsError) {
  Tensor<double> a(Shape{1, 3, 10, 32});
  EXPECT_THROW(ssim(a, a), ShapeError);
}

TEST(Fsim, IdentityIsOne) {
  const auto a = pattern(3, 32, 40);
  EXPECT_NEAR(fsim(a, a), 1.0, 1e-12);
}

TEST(Fsim, CrossCheckAgainstIndependentPort) {
  // piq.fsim(chromatic=False, data_range=1) gives 0.952824; it adds a machine-epsilon
  // guard and takes the lower median, so agreement is expected to ~1e-3, not exactly.
  const int H = 32, W = 40;
  Tensor<double> a(Shape{1, 1, H, W}), b(a.shape());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      a.at(0, 0, y, x) = 0.5 + 0.3 * std::sin(0.7 * x) * std::cos(0.45 * y);
      b.at(0, 0, y, x) = std::clamp(a.at(0, 0, y, x) + 0.1 * std::cos(0.02 * x * y), 0.0, 1.0);
    }
  EXPECT_NEAR(fsim(a, b), 0.9528241445095489, 2e-3);
}

TEST(Fsim, DecreasesWithBlur) {
  const auto a = pattern(3, 40, 40);
  const double f1 = fsim(a, box_blur(a, 1)), f2 = fsim(a, box_blur(a, 2)), f3 = fsim(a, box_blur(a, 4));
  EXPECT_LT(f1, 1.0);
  EXPECT_GT(f1, f2);
  EXPECT_GT(f2, f3);
}

TEST(Fsim, TinyNoise) {
  const auto a = pattern(3, 40, 40);
  EXPECT_GE(fsim(a, add_noise(a, 1e-4, 7)), 0.999);
}

TEST(Fsim, DownsampleFactorPath) {
  // 640 px short side gives F = 3; identity must still be exact.
  std::mt19937_64 rng(8);
  const auto a = random_tensor<double>(Shape{1, 3, 640, 644}, rng, 0, 1);
  EXPECT_NEAR(fsim(a, a), 1.0, 1e-12);
}

TEST(Identity, HundredRandomImages) {
  auto vgg = std::make_shared<Vgg19Extractor<double>>(VggOptions{16, 2, false, 3});
  Lpips lp(vgg);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_tensor<double>(Shape{1, 3, 16, 16}, rng, 0, 1);
    ASSERT_NEAR(ssim(a, a), 1.0, 1e-12);
    ASSERT_NEAR(fsim(a, a), 1.0, 1e-12);
    ASSERT_EQ(lp(a, a), 0.0);
  }
}

TEST(Lpips, SymmetricAndPositive) {
  auto vgg = std::make_shared<Vgg19Extractor<double>>(VggOptions{16, 3, false, 4});
  Lpips lp(vgg);
  std::mt19937_64 rng(10);
  const auto a = random_tensor<double>(Shape{1, 3, 16, 16}, rng, 0, 1);
  const auto b = random_tensor<double>(Shape{1, 3, 16, 16}, rng, 0, 1);
  EXPECT_GT(lp(a, b), 0.0);
  EXPECT_DOUBLE_EQ(lp(a, b), lp(b, a));
  EXPECT_FALSE(lp.pretrained());
}

TEST(Lpips, MatchesDualImplementation) {
  auto vgg = std::make_shared<Vgg19Extractor<double>>(VggOptions{16, 3, false, 5});
  Lpips lp(vgg);
  std::mt19937_64 rng(11);
  const auto a = random_tensor<double>(Shape{1, 3, 16, 16}, rng, 0, 1);
  const auto b = random_tensor<double>(Shape{1, 3, 16, 16}, rng, 0, 1);
  NaiveVgg ref{vgg->params(), false, 3};
  auto to_signed = [](Tensor<double> t) {
    for (auto& v : t.vec()) v = 2 * v - 1;
    return t;
  };
  const auto fa = ref.run(to_signed(a)), fb = ref.run(to_signed(b));
  double expect = 0;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const int C = fa[l].c(), H = fa[l].h(), W = fa[l].w();
    double layer = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double na = 0, nb = 0;
        for (int c = 0; c < C; ++c) {
          na += fa[l].at(0, c, y, x) * fa[l].at(0, c, y, x);
          nb += fb[l].at(0, c, y, x) * fb[l].at(0, c, y, x);
        }
        na = std::sqrt(na) + 1e-10;
        nb = std::sqrt(nb) + 1e-10;
        for (int c = 0; c < C; ++c) layer += std::pow(fa[l].at(0, c, y, x) / na - fb[l].at(0, c, y, x) / nb, 2);
      }
    expect += layer / (H * W);
  }
  EXPECT_NEAR(lp(a, b), expect, 1e-12 * expect);
}

TEST(Fvd, IdenticalSetsAndSymmetry) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> d;
  Eigen::MatrixXd a(50, 4), b(50, 4);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 4; ++j) {
      a(i, j) = d(rng);
      b(i, j) = 2 * d(rng) + 1;
    }
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
  EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-9 * frechet_distance(a, b));
}

TEST(Fvd, MeanShiftClosedForm) {
  // Symmetric point set with identity sample covariance, shifted by d along one axis.
  const int D = 3;
  std::vector<Eigen::VectorXd> pts;
  for (int j = 0; j < D; ++j)
    for (double s : {-1.0, 1.0}) {
      Eigen::VectorXd p = Eigen::VectorXd::Zero(D);
      p(j) = s * std::sqrt((2.0 * D - 1) / 2.0);
      pts.push_back(p);
    }
  Eigen::MatrixXd a(pts.size(), D);
  for (std::size_t i = 0; i < pts.size(); ++i) a.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  const double dist = 2.5;
  Eigen::MatrixXd b = a;
  b.col(0).array() += dist;
  const double got = frechet_distance(a, b);
  EXPECT_NEAR(got, dist * dist, 1e-4 * dist * dist);
}

TEST(Fvd, OneDimensionalSigmaClosedForm) {
  // {-a, a} has unbiased variance 2 a^2, so sigma = sqrt(2) a.
  const double a1 = 0.7, a2 = 1.9;
  Eigen::MatrixXd x(2, 1), y(2, 1);
  x << -a1, a1;
  y << -a2, a2;
  const double s1 = std::sqrt(2.0) * a1, s2 = std::sqrt(2.0) * a2;
  EXPECT_NEAR(frechet_distance(x, y), (s1 - s2) * (s1 - s2), 1e-4 * (s1 - s2) * (s1 - s2));
}

TEST(Fvd, SingularCovarianceIsRegularized) {
  Eigen::MatrixXd a(3, 4), b(3, 4);
  a.setZero();
  b.setOnes();
  const double d = frechet_distance(a, b);
  EXPECT_TRUE(std::isfinite(d));
  EXPECT_NEAR(d, 4.0, 1e-4);
  EXPECT_THROW(frechet_distance(a.topRows(1), b), InvalidInputError);
}

TEST(Fvd, EmbeddingPipeline) {
  RandomVideoEmbedding emb(32, 1);
  std::mt19937_64 rng(13);
  std::vector<Tensor<double>> sa, sb;
  for (int i = 0; i < 6; ++i) {
    sa.push_back(random_tensor<double>(Shape{4, 3, 20, 24}, rng, 0, 1));
    sb.push_back(random_tensor<double>(Shape{4, 3, 20, 24}, rng, 0, 0.5));
  }
  EXPECT_NEAR(fvd(sa, sa, emb), 0.0, 1e-6);
  const double ab = fvd(sa, sb, emb);
  EXPECT_GT(ab, 0.0);
  EXPECT_NEAR(ab, fvd(sb, sa, emb), 1e-9 * ab);
  RandomVideoEmbedding emb2(32, 1);
  EXPECT_EQ(emb(sa[0]), emb2(sa[0]));
}

TEST(YPsnr, InfiniteCases) {
  const auto a = pattern(3, 8, 8);
  EXPECT_TRUE(std::isinf(y_psnr(a, a)));
  // Chroma change along (587, -299, 0) / 1024 leaves 299 R + 587 G unchanged; dyadic
  // pixels keep every product exact.
  Tensor<double> b(Shape{1, 3, 8, 8});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      b.at(0, 0, y, x) = (y * 8 + x) / 256.0;
      b.at(0, 1, y, x) = 0.5 + x / 64.0;
      b.at(0, 2, y, x) = y / 32.0;
    }
  auto c = b;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      c.at(0, 0, y, x) += 587.0 * 2 / 1024.0 / 16.0;
      c.at(0, 1, y, x) -= 299.0 * 2 / 1024.0 / 16.0;
    }
  EXPECT_GT(psnr(b, c), 0.0);
  EXPECT_FALSE(std::isinf(psnr(b, c)));
  EXPECT_TRUE(std::isinf(y_psnr(b, c)));
}

TEST(YPsnr, MatchesIndependentLumaPsnr) {
  std::mt19937_64 rng(14);
  const auto a = random_tensor<double>(Shape{1, 3, 7, 9}, rng, 0, 1);
  const auto b = random_tensor<double>(Shape{1, 3, 7, 9}, rng, 0, 1);
  Tensor<double> ya(Shape{1, 1, 7, 9}), yb(ya.shape());
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x) {
      ya.at(0, 0, y, x) = 0.299 * a.at(0, 0, y, x) + 0.587 * a.at(0, 1, y, x) + 0.114 * a.at(0, 2, y, x);
      yb.at(0, 0, y, x) = 0.299 * b.at(0, 0, y, x) + 0.587 * b.at(0, 1, y, x) + 0.114 * b.at(0, 2, y, x);
    }
  EXPECT_NEAR(y_psnr(a, b), psnr(ya, yb), 1e-9);
}

TEST(HistCorr, IdentityPermutationAndIndependence) {
  std::mt19937_64 rng(15);
  Tensor<double> a(Shape{1, 3, 64, 64});
  std::uniform_real_distribution<double> u(0, 1);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < a.shape().plane(); ++i) a.plane(0, c)[i] = std::pow(u(rng), 1.0 + 2.0 * c);
  EXPECT_NEAR(color_histogram_correlation(a, a), 1.0, 1e-12);
  Tensor<double> p(a.shape());
  for (int c = 0; c < 3; ++c) std::copy_n(a.plane(0, (c + 1) % 3), a.shape().plane(), p.plane(0, c));
  EXPECT_LT(color_histogram_correlation(a, p), 1.0);

  const auto n1 = random_tensor<double>(Shape{1, 3, 256, 256}, rng, 0, 1);
  const auto n2 = random_tensor<double>(Shape{1, 3, 256, 256}, rng, 0, 1);
  EXPECT_NEAR(color_histogram_correlation(n1, n2), 0.0, 0.1);
}

TEST(HistCorr, DegenerateIsZero) {
  // All values in one bin vs. a uniform spread: both histograms have zero variance only
  // for the flat one, which gives 0 for that channel.
  Tensor<double> flat(Shape{1, 3, 16, 16});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 256; ++i) flat.plane(0, c)[i] = (i + 0.5) / 256.0;
  Tensor<double> one(flat.shape(), 0.5);
  EXPECT_EQ(color_histogram_correlation(flat, one), 0.0);
}

TEST(Report, AggregateSkipsInfinite) {
  MetricsReport r;
  r.selected = {"psnr", "ssim", "fvd"};
  r.frames = {{"s", 0, {{"psnr", 20.0}, {"ssim", 0.5}}},
              {"s", 1, {{"psnr", 30.0}, {"ssim", 0.7}}},
              {"s", 2, {{"psnr", kInfinitePsnr}, {"ssim", 1.0}}}};
  const auto agg = r.aggregate();
  EXPECT_EQ(agg.count("fvd"), 0u);
  EXPECT_DOUBLE_EQ(agg.at("psnr").mean, 25.0);
  EXPECT_DOUBLE_EQ(agg.at("psnr").std, 5.0);
  EXPECT_EQ(agg.at("psnr").count, 2u);
  EXPECT_NEAR(agg.at("ssim").mean, 2.2 / 3, 1e-12);
}
