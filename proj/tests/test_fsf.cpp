#include <gtest/gtest.h>

#include <random>

#include "fpanet/fsf.hpp"
#include "test_util.hpp"

using namespace fpanet;
using fpanet::testing::grad_check;
using fpanet::testing::random_tensor;

namespace {

template <typename T>
struct Fixture {
  ParamStore<T> store;
  std::mt19937_64 rng{42};
  Builder<T> b{&store, &rng, ""};
};

}  // namespace

TEST(Fsm, PreservesShape) {
  Fixture<float> f;
  Fsm<float> fsm(f.b, 8, true);
  std::mt19937_64 rng(1);
  auto y = fsm(Var<float>(random_tensor<float>(Shape{1, 8, 16, 16}, rng)));
  EXPECT_EQ(y.shape(), (Shape{1, 8, 16, 16}));
}

TEST(Fsm, ZeroHeadGivesEvenConfidence) {
  Fixture<double> f;
  Fsm<double> fsm(f.b, 6, true);
  fsm.head.zero();
  std::mt19937_64 rng(2);
  FsfTrace<double> tr;
  fsm(Var<double>(random_tensor<double>(Shape{2, 6, 8, 10}, rng)), &tr);
  for (double a : tr.alpha.vec()) EXPECT_EQ(a, 0.5);
  for (double b : tr.beta.vec()) EXPECT_EQ(b, 0.5);
}

TEST(Fsm, ZeroInputWithZeroBiasesGivesZero) {
  Fixture<double> f;
  Fsm<double> fsm(f.b, 4, true);
  for (auto& p : f.store.params())
    if (!p.decay) p.var.mutable_value().fill(0.0);
  auto y = fsm(Var<double>(Tensor<double>(Shape{1, 4, 8, 8})));
  for (double v : y.value().vec()) EXPECT_EQ(v, 0.0);
}

TEST(Fsm, ConfidenceSumsToOne) {
  Fixture<double> f;
  Fsm<double> fsm(f.b, 5, true);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    FsfTrace<double> tr;
    fsm(Var<double>(random_tensor<double>(Shape{1, 5, 8, 8}, rng, -3, 3)), &tr);
    for (std::size_t i = 0; i < tr.alpha.size(); ++i) {
      EXPECT_NEAR(tr.alpha[i] + tr.beta[i], 1.0, 1e-15);
      EXPECT_GE(tr.alpha[i], 0.0);
      EXPECT_LE(tr.alpha[i], 1.0);
    }
  }
}

TEST(Fsm, ChannelMismatchThrows) {
  Fixture<float> f;
  Fsm<float> fsm(f.b, 8, true);
  EXPECT_THROW(fsm(Var<float>(Tensor<float>(Shape{1, 4, 8, 8}))), ShapeError);
}

TEST(SimpleGate, OnesHalfIsIdentity) {
  std::mt19937_64 rng(4);
  auto h = random_tensor<double>(Shape{1, 3, 5, 5}, rng);
  auto x = concat_channels<double>({Var<double>(h), Var<double>(Tensor<double>(h.shape(), 1.0))});
  EXPECT_EQ(simple_gate(x).value().vec(), h.vec());
}

TEST(Sfeb, PreservesShapeAndZeroInput) {
  Fixture<float> f;
  Sfeb<float> sfeb(f.b, 16, 2);
  std::mt19937_64 rng(5);
  EXPECT_EQ(sfeb(Var<float>(random_tensor<float>(Shape{1, 16, 32, 32}, rng))).shape(), (Shape{1, 16, 32, 32}));
  for (auto& p : f.store.params())
    if (!p.decay) p.var.mutable_value().fill(0.f);
  const auto zero_out = sfeb(Var<float>(Tensor<float>(Shape{1, 16, 8, 8})));
  for (float v : zero_out.value().vec()) EXPECT_EQ(v, 0.f);
}

TEST(Sfeb, OddInternalWidthIsConfigError) {
  Fixture<float> f;
  EXPECT_THROW(Sfeb<float>(f.b, 3, 1), ConfigError);
  EXPECT_NO_THROW(Sfeb<float>(f.b.sub("ok"), 3, 2));
}

TEST(Csfm, ShapeAndPadCrop) {
  Fixture<float> f;
  Csfm<float> csfm(f.b, 16, 2);
  std::mt19937_64 rng(6);
  EXPECT_EQ(csfm(Var<float>(random_tensor<float>(Shape{1, 16, 32, 32}, rng))).shape(), (Shape{1, 16, 32, 32}));
  EXPECT_EQ(csfm(Var<float>(random_tensor<float>(Shape{1, 16, 30, 30}, rng))).shape(), (Shape{1, 16, 30, 30}));
  EXPECT_EQ(csfm(Var<float>(random_tensor<float>(Shape{1, 16, 5, 7}, rng))).shape(), (Shape{1, 16, 5, 7}));
}

TEST(Csfm, OneHotFusionSelectsFullResolutionBranch) {
  Fixture<double> f;
  Csfm<double> csfm(f.b, 4, 2);
  csfm.fusion.weight.mutable_value().fill(0.0);
  auto& bias = csfm.fusion.bias.mutable_value();
  bias[0] = 1e3;
  bias[1] = -1e3;
  bias[2] = -1e3;
  std::mt19937_64 rng(7);
  Var<double> x(random_tensor<double>(Shape{1, 4, 16, 12}, rng));
  auto y = csfm(x);
  auto ref = csfm.branches[0](x);
  EXPECT_LT(max_abs_diff(y.value(), ref.value()), 1e-12);
}

TEST(Csfm, FusionWeightsSumToOne) {
  Fixture<double> f;
  Csfm<double> csfm(f.b, 4, 2);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    FsfTrace<double> tr;
    csfm(Var<double>(random_tensor<double>(Shape{1, 4, 12, 12}, rng, -2, 2)), &tr);
    const auto& w = tr.fusion_weights;
    for (int i = 0; i < w.h() * w.w(); ++i) {
      double s = 0;
      for (int b = 0; b < 3; ++b) {
        EXPECT_GE(w.plane(0, b)[i], 0.0);
        s += w.plane(0, b)[i];
      }
      EXPECT_NEAR(s, 1.0, 1e-15);
    }
  }
}

TEST(FsfBlock, ShapeContract) {
  Fixture<float> f;
  FsfBlock<float> blk(f.b, 32, FsfOptions{});
  std::mt19937_64 rng(9);
  EXPECT_EQ(blk(Var<float>(random_tensor<float>(Shape{1, 32, 48, 48}, rng))).shape(), (Shape{1, 32, 48, 48}));
  for (int h : {4, 5, 9}) {
    FsfBlock<float> small(f.b.sub("s" + std::to_string(h)), 4, FsfOptions{});
    EXPECT_EQ(small(Var<float>(random_tensor<float>(Shape{1, 4, h, 6}, rng))).shape(), (Shape{1, 4, h, 6}));
  }
}

TEST(FsfBlock, ZeroParametersPassThrough) {
  Fixture<double> f;
  FsfBlock<double> blk(f.b, 4, FsfOptions{});
  f.store.zero_values();
  std::mt19937_64 rng(10);
  auto x = random_tensor<double>(Shape{1, 4, 8, 8}, rng);
  EXPECT_EQ(blk(Var<double>(x)).value().vec(), x.vec());
}

TEST(FsfBlock, WithoutFsmEqualsCsfmResidual) {
  Fixture<double> f;
  FsfOptions o;
  o.use_amp_phase = false;
  o.use_fsm = false;
  FsfBlock<double> blk(f.b, 4, o);
  EXPECT_EQ(f.store.count("fsm"), 0u);
  std::mt19937_64 rng(11);
  Var<double> x(random_tensor<double>(Shape{1, 4, 8, 8}, rng));
  auto y = blk(x);
  auto ref = add(blk.csfm(x), x);
  EXPECT_EQ(y.value().vec(), ref.value().vec());
}

TEST(FsfBlock, FsmWithoutAmpPhaseIsConfigError) {
  Fixture<double> f;
  FsfOptions o;
  o.use_amp_phase = false;
  EXPECT_THROW(FsfBlock<double>(f.b, 4, o), ConfigError);
}

TEST(FsfBlock, EveryParameterReceivesGradient) {
  Fixture<double> f;
  FsfBlock<double> blk(f.b, 4, FsfOptions{});
  std::mt19937_64 rng(12);
  Var<double> x(random_tensor<double>(Shape{1, 4, 8, 8}, rng));
  Var<double> w(random_tensor<double>(Shape{1, 4, 8, 8}, rng));
  backward(sum(mul(blk(x), w)));
  for (auto& p : f.store.params()) {
    ASSERT_TRUE(p.var.has_grad()) << p.name;
    double n = 0;
    for (double g : p.var.grad().vec()) n += g * g;
    EXPECT_GT(n, 0.0) << p.name;
  }
}

TEST(Gradients, FsmSfebCsfmFsf) {
  Fixture<double> f;
  Fsm<double> fsm(f.b.sub("fsm"), 4, true);
  Sfeb<double> sfeb(f.b.sub("sfeb"), 4, 2);
  Csfm<double> csfm(f.b.sub("csfm"), 4, 2);
  FsfBlock<double> blk(f.b.sub("blk"), 4, FsfOptions{});
  std::mt19937_64 rng(13);
  Var<double> x(random_tensor<double>(Shape{1, 4, 8, 8}, rng), true);
  Var<double> w(random_tensor<double>(Shape{1, 4, 8, 8}, rng));
  std::vector<Var<double>> all{x};
  auto params_with = [&](const std::string& prefix) {
    std::vector<Var<double>> v{x};
    for (auto& p : f.store.params())
      if (p.name.rfind(prefix, 0) == 0) v.push_back(p.var);
    return v;
  };
  auto r1 = grad_check([&] { return sum(mul(fsm(x), w)); }, params_with("fsm"), 1e-6, 64);
  EXPECT_LT(r1.rel_error, 1e-3);
  auto r2 = grad_check([&] { return sum(mul(sfeb(x), w)); }, params_with("sfeb"), 1e-6, 64);
  EXPECT_LT(r2.rel_error, 1e-3);
  auto r3 = grad_check([&] { return sum(mul(csfm(x), w)); }, params_with("csfm"), 1e-6, 64);
  EXPECT_LT(r3.rel_error, 1e-3);
  auto r4 = grad_check([&] { return mean(blk(x)); }, {x});
  EXPECT_LT(r4.rel_error, 1e-3);
}
