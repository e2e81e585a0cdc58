#include <gtest/gtest.h>

#include <random>

#include "fpanet/alignment.hpp"
#include "test_util.hpp"

using namespace fpanet;
using fpanet::testing::grad_check;
using fpanet::testing::random_tensor;

namespace {

// Per-channel identity kernel: centre tap 1, others 0.
Var<double> identity_kernel(int c) {
  Tensor<double> w(Shape{c, c, 3, 3});
  for (int i = 0; i < c; ++i) w.at(i, i, 1, 1) = 1.0;
  return Var<double>(w);
}

Var<double> uniform_offset(int n, int groups, int h, int w, double dy, double dx) {
  Tensor<double> o(Shape{n, 18 * groups, h, w});
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < o.c(); ++c)
      for (int i = 0; i < h * w; ++i) o.plane(b, c)[i] = c % 2 == 0 ? dy : dx;
  return Var<double>(o);
}

}  // namespace

TEST(DeformConv, ZeroOffsetIdentityKernel) {
  std::mt19937_64 rng(1);
  Var<double> x(random_tensor<double>(Shape{2, 4, 7, 9}, rng));
  auto y = deform_conv2d(x, uniform_offset(2, 2, 7, 9, 0, 0), identity_kernel(4), Var<double>(), 2);
  EXPECT_EQ(y.value().vec(), x.value().vec());
}

TEST(DeformConv, IntegerOffsetsMatchClampedShift) {
  std::mt19937_64 rng(2);
  const int H = 8, W = 8;
  Var<double> x(random_tensor<double>(Shape{1, 3, H, W}, rng));
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      auto y = deform_conv2d(x, uniform_offset(1, 1, H, W, dy, dx), identity_kernel(3), Var<double>(), 1);
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < H; ++r)
          for (int q = 0; q < W; ++q) {
            const int sr = std::clamp(r + dy, 0, H - 1), sq = std::clamp(q + dx, 0, W - 1);
            ASSERT_NEAR(y.value().at(0, c, r, q), x.value().at(0, c, sr, sq), 1e-12) << dy << "," << dx;
          }
    }
}

TEST(DeformConv, HalfPixelOffsetAveragesNeighbors) {
  std::mt19937_64 rng(3);
  Var<double> x(random_tensor<double>(Shape{1, 2, 8, 8}, rng));
  auto y = deform_conv2d(x, uniform_offset(1, 1, 8, 8, 0, 0.5), identity_kernel(2), Var<double>(), 1);
  for (int c = 0; c < 2; ++c)
    for (int r = 0; r < 8; ++r)
      for (int q = 0; q < 8; ++q) {
        const double expect = 0.5 * (x.value().at(0, c, r, q) + x.value().at(0, c, r, std::min(q + 1, 7)));
        EXPECT_NEAR(y.value().at(0, c, r, q), expect, 1e-12);
      }
}

TEST(DeformConv, InconsistentOffsetShapeThrows) {
  Var<double> x(Tensor<double>(Shape{1, 4, 6, 6}));
  EXPECT_THROW(deform_conv2d(x, uniform_offset(1, 1, 6, 6, 0, 0), identity_kernel(4), Var<double>(), 2), ShapeError);
  EXPECT_THROW(deform_conv2d(x, uniform_offset(1, 1, 6, 5, 0, 0), identity_kernel(4), Var<double>(), 1), ShapeError);
}

TEST(DeformConv, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  Var<double> x(random_tensor<double>(Shape{1, 4, 6, 6}, rng), true);
  Var<double> off(random_tensor<double>(Shape{1, 36, 6, 6}, rng, -1.4, 1.4), true);
  Var<double> w(random_tensor<double>(Shape{4, 4, 3, 3}, rng), true);
  Var<double> b(random_tensor<double>(Shape{1, 4, 1, 1}, rng), true);
  auto r = grad_check([&] { return mean(deform_conv2d(x, off, w, b, 2)); }, {off});
  EXPECT_LT(r.rel_error, 1e-3);
  EXPECT_GT(r.analytic_norm, 0.0);
  Var<double> wt(random_tensor<double>(Shape{1, 4, 6, 6}, rng));
  auto r2 = grad_check([&] { return sum(mul(deform_conv2d(x, off, w, b, 2), wt)); }, {x, off, w, b});
  EXPECT_LT(r2.rel_error, 1e-3);
}

TEST(UpscaleOffset, DoublesValuesAndMatchesBilinear) {
  // 2x2 pattern [[a, b], [c, d]] upscaled to 4x4 with half-pixel centres: rows/cols
  // sample at -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1).
  Tensor<double> t(Shape{1, 1, 2, 2});
  t.vec() = {1.0, 3.0, 5.0, 11.0};
  auto up = upscale_offset(Var<double>(t), 4, 4);
  const double wts[4] = {0.0, 0.25, 0.75, 1.0};
  for (int r = 0; r < 4; ++r)
    for (int q = 0; q < 4; ++q) {
      const double ly = wts[r], lx = wts[q];
      const double v = (1 - ly) * ((1 - lx) * 1.0 + lx * 3.0) + ly * ((1 - lx) * 5.0 + lx * 11.0);
      EXPECT_NEAR(up.value().at(0, 0, r, q), 2 * v, 1e-14);
    }
  Var<double> c(Tensor<double>(Shape{1, 18, 6, 6}, 0.7));
  auto uc = upscale_offset(c, 12, 12);
  EXPECT_EQ(uc.shape(), (Shape{1, 18, 12, 12}));
  for (double v : uc.value().vec()) EXPECT_NEAR(v, 1.4, 1e-14);
  EXPECT_THROW(upscale_offset(c, 12, 11), ShapeError);
}

TEST(PamStage, OffsetShapesAndZeroHead) {
  ParamStore<double> store;
  std::mt19937_64 rng(5);
  Builder<double> b{&store, &rng, ""};
  PamStage<double> coarse(b.sub("c"), 8, 2, false, AlignTarget::neighbor);
  PamStage<double> fine(b.sub("f"), 8, 2, true, AlignTarget::neighbor);
  Var<double> n(random_tensor<double>(Shape{1, 8, 6, 6}, rng)), r(random_tensor<double>(Shape{1, 8, 6, 6}, rng));
  auto o = coarse.compute_offset(n, r, std::nullopt);
  EXPECT_EQ(o.shape(), (Shape{1, 36, 6, 6}));
  for (double v : o.value().vec()) EXPECT_EQ(v, 0.0);
  Var<double> n2(random_tensor<double>(Shape{1, 8, 12, 12}, rng)), r2(random_tensor<double>(Shape{1, 8, 12, 12}, rng));
  auto o2 = fine.compute_offset(n2, r2, o);
  EXPECT_EQ(o2.shape(), (Shape{1, 36, 12, 12}));
  EXPECT_THROW(fine.compute_offset(n2, r2, std::nullopt), ShapeError);
  EXPECT_THROW(coarse.compute_offset(n, r2, std::nullopt), ShapeError);
  EXPECT_THROW(fine.compute_offset(n2, r2, Var<double>(Tensor<double>(Shape{1, 36, 5, 6}))), ShapeError);
}

TEST(PamStage, OffsetClampedToHalfExtent) {
  ParamStore<double> store;
  std::mt19937_64 rng(6);
  Builder<double> b{&store, &rng, ""};
  PamStage<double> st(b, 4, 1, false, AlignTarget::neighbor);
  st.off.bias.mutable_value().fill(100.0);
  Var<double> n(random_tensor<double>(Shape{1, 4, 6, 10}, rng));
  const auto off = st.compute_offset(n, n, std::nullopt);
  for (double v : off.value().vec()) EXPECT_EQ(v, 5.0);
}

TEST(PamStage, IdentityFusionPassesDecoderInput) {
  ParamStore<double> store;
  std::mt19937_64 rng(7);
  Builder<double> b{&store, &rng, ""};
  PamStage<double> st(b, 32, 4, false, AlignTarget::neighbor);
  st.set_identity_fusion();
  Var<double> d(random_tensor<double>(Shape{1, 32, 24, 24}, rng));
  Var<double> ap(random_tensor<double>(Shape{1, 32, 24, 24}, rng)), an(random_tensor<double>(Shape{1, 32, 24, 24}, rng));
  auto y = st.pam_fuse(d, ap, an);
  EXPECT_EQ(y.shape(), d.shape());
  EXPECT_LT(max_abs_diff(y.value(), d.value()), 1e-15);
  Var<double> z(Tensor<double>(d.shape()));
  EXPECT_LT(max_abs_diff(st.pam_fuse(d, z, z).value(), d.value()), 1e-15);
  EXPECT_THROW(st.pam_fuse(d, Var<double>(Tensor<double>(Shape{1, 32, 24, 23})), an), ShapeError);
}

TEST(PamStage, IdenticalFramesAlignToReferencePath) {
  ParamStore<double> store;
  std::mt19937_64 rng(8);
  Builder<double> b{&store, &rng, ""};
  PamStage<double> nb(b.sub("n"), 8, 2, false, AlignTarget::neighbor);
  PamStage<double> lit(b.sub("l"), 8, 2, false, AlignTarget::reference);
  lit.dconv.weight.mutable_value() = nb.dconv.weight.value();
  lit.dconv.bias.mutable_value() = nb.dconv.bias.value();
  lit.fuse.weight.mutable_value() = nb.fuse.weight.value();
  lit.fuse.bias.mutable_value() = nb.fuse.bias.value();
  Var<double> f(random_tensor<double>(Shape{1, 8, 8, 8}, rng));
  Var<double> d(random_tensor<double>(Shape{1, 8, 8, 8}, rng));
  auto r1 = nb(d, f, f, f, std::nullopt, std::nullopt);
  auto r2 = lit(d, f, f, f, std::nullopt, std::nullopt);
  EXPECT_EQ(r1.fused.value().vec(), r2.fused.value().vec());
  auto ref_path = nb.deform_align(f, r1.offset_prev);
  EXPECT_EQ(nb.deform_align(f, r1.offset_next).value().vec(), ref_path.value().vec());
}
