#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "ivdseg/nn/adam.hpp"
#include "ivdseg/nn/gradcheck.hpp"
#include "ivdseg/nn/init.hpp"
#include "ivdseg/nn/loss.hpp"
#include "ivdseg/nn/network.hpp"

using namespace ivdseg;
using namespace ivdseg::nn;

namespace {

template <typename S = double>
Tensor<S> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(s));
  SplitMix64 rng(seed);
  for (auto& v : t.values()) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

NetworkSpec single(LayerSpec l, std::size_t in_channels, int dims = 3) {
  NetworkSpec s;
  s.dims = dims;
  s.in_channels = in_channels;
  s.layers = {l};
  return s;
}

// Direct-summation cross-correlation oracle with zero padding.
std::vector<double> conv_oracle(const Tensor<double>& x, const std::vector<double>& w, const std::vector<double>& b,
                                std::size_t oc, Grid3 k, Grid3 s, Grid3 pad, Grid3 out) {
  const std::size_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  std::vector<double> y(N * oc * out.volume());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < oc; ++o)
      for (std::size_t od = 0; od < out.d; ++od)
        for (std::size_t oh = 0; oh < out.h; ++oh)
          for (std::size_t ow = 0; ow < out.w; ++ow) {
            double acc = b[o];
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t a = 0; a < k.d; ++a)
                for (std::size_t bb = 0; bb < k.h; ++bb)
                  for (std::size_t cc = 0; cc < k.w; ++cc) {
                    const long id = long(od * s.d + a) - long(pad.d);
                    const long ih = long(oh * s.h + bb) - long(pad.h);
                    const long iw = long(ow * s.w + cc) - long(pad.w);
                    if (id < 0 || ih < 0 || iw < 0 || id >= long(D) || ih >= long(H) || iw >= long(W)) continue;
                    acc += w[(((o * C + c) * k.d + a) * k.h + bb) * k.w + cc] *
                           x[(((n * C + c) * D + id) * H + ih) * W + iw];
                  }
            y[(((n * oc + o) * out.d + od) * out.h + oh) * out.w + ow] = acc;
          }
  return y;
}

}  // namespace

TEST(Conv, PointwiseUnitKernelIsIdentity) {
  Network<double> net(single(LayerSpec::conv({1, 1, 1}, 1, 1), 1));
  auto ps = net.parameters();
  (*ps[0])[0] = 1.0;
  (*ps[1])[0] = 0.0;
  auto x = random_tensor({2, 1, 3, 4, 5}, 7);
  const auto& y = net.forward(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv, AveragingKernelOnConstantVolume) {
  Network<double> net(single(LayerSpec::conv({3, 3, 3}, 1, 1), 1));
  auto ps = net.parameters();
  for (auto& w : ps[0]->values()) w = 1.0 / 27.0;
  (*ps[1])[0] = 0.0;
  Tensor<double> x({1, 1, 5, 5, 5}, std::vector<double>(125, 2.0));
  const auto& y = net.forward(x);
  for (std::size_t z = 0; z < 5; ++z)
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 5; ++c) {
        auto inside = [](std::size_t i) { return (i > 0 && i < 4) ? 3.0 : 2.0; };
        const double expected = 2.0 * inside(z) * inside(r) * inside(c) / 27.0;
        EXPECT_NEAR(y[(z * 5 + r) * 5 + c], expected, 1e-12);
      }
}

TEST(Conv, MatchesNestedLoopOracle2D) {
  Network<double> net(single(LayerSpec::conv({1, 3, 3}, 1, 1), 1, 2));
  auto x = random_tensor({1, 1, 1, 5, 5}, 11);
  const auto& y = net.forward(x);
  auto ps = net.parameters();
  std::vector<double> w(ps[0]->values().begin(), ps[0]->values().end()), b{(*ps[1])[0]};
  const auto ref = conv_oracle(x, w, b, 1, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}, {1, 5, 5});
  ASSERT_EQ(y.size(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Conv, MatchesOracleStridedAndValid3D) {
  for (bool same : {true, false}) {
    auto l = LayerSpec::conv({3, 2, 3}, 2, 3, {2, 1, 2}, same);
    Network<double> net(single(l, 2));
    auto x = random_tensor({2, 2, 5, 4, 6}, 3);
    const auto& y = net.forward(x);
    auto ps = net.parameters();
    std::vector<double> w(ps[0]->values().begin(), ps[0]->values().end());
    std::vector<double> b(ps[1]->values().begin(), ps[1]->values().end());
    Grid3 out, pad{0, 0, 0};
    const Grid3 in{5, 4, 6};
    for (std::size_t a = 0; a < 3; ++a) {
      if (same) {
        out[a] = (in[a] + l.stride[a] - 1) / l.stride[a];
        const std::size_t need = (out[a] - 1) * l.stride[a] + l.kernel[a];
        pad[a] = need > in[a] ? (need - in[a]) / 2 : 0;
      } else {
        out[a] = (in[a] - l.kernel[a]) / l.stride[a] + 1;
      }
    }
    const auto ref = conv_oracle(x, w, b, 3, l.kernel, l.stride, pad, out);
    ASSERT_EQ(y.size(), ref.size()) << same;
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv, ChannelMismatchReportsBothShapes) {
  Network<double> net(single(LayerSpec::conv({3, 3, 3}, 2, 4), 2));
  Tensor<double> x({1, 3, 4, 4, 4});
  try {
    net.forward(x);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(1x3x4x4x4)"), std::string::npos);
  }
  ConvLayer<double> layer(LayerSpec::conv({3, 3, 3}, 2, 4), 1);
  try {
    std::vector<Shape> s{{1, 3, 4, 4, 4}};
    layer.output_shape(s);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1x3x4x4x4)"), std::string::npos);
    EXPECT_NE(msg.find("(4x2x3x3x3)"), std::string::npos);
  }
}

TEST(Conv, ZeroUpstreamGradientGivesZeroGradients) {
  Network<double> net(single(LayerSpec::conv({3, 3, 3}, 2, 2), 2));
  auto x = random_tensor({1, 2, 4, 4, 4}, 5);
  net.zero_grad();
  net.forward(x);
  std::vector<double> g(net.output_shape(x.dims()).size() ? shape_size(net.output_shape(x.dims())) : 0, 0.0);
  net.backward(g, true);
  for (auto* p : net.parameters())
    for (auto v : p->grad()) EXPECT_EQ(v, 0.0);
  for (auto v : net.input_grad()) EXPECT_EQ(v, 0.0);
}

TEST(Conv, BiasGradientIsChannelSumOfUpstream) {
  Network<double> net(single(LayerSpec::conv({3, 3, 3}, 2, 3), 2));
  auto x = random_tensor({2, 2, 4, 4, 4}, 8);
  net.zero_grad();
  const auto& y = net.forward(x);
  auto g = random_tensor(y.dims(), 9);
  net.backward(g.values());
  const std::size_t V = 64;
  for (std::size_t o = 0; o < 3; ++o) {
    double sum = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < V; ++i) sum += g[(n * 3 + o) * V + i];
    EXPECT_NEAR(net.parameters()[1]->grad()[o], sum, 1e-10);
  }
}

TEST(Conv, BackwardWithoutForwardIsStateError) {
  Network<double> net(single(LayerSpec::conv({1, 1, 1}, 1, 1), 1));
  std::vector<double> g(8, 1.0);
  EXPECT_THROW(net.backward(g), StateError);
}

TEST(TransposedConv, MatchesScatterOracle) {
  auto l = LayerSpec::tconv({2, 2, 2}, 2, 3, {2, 2, 2});
  Network<double> net(single(l, 2));
  auto x = random_tensor({1, 2, 2, 3, 2}, 21);
  const auto& y = net.forward(x);
  ASSERT_EQ(y.dims(), (Shape{1, 3, 4, 6, 4}));
  auto ps = net.parameters();
  const auto& w = *ps[0];
  const auto& b = *ps[1];
  std::vector<double> ref(y.size());
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 4 * 6 * 4; ++i) ref[o * 96 + i] = b[o];
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t ww = 0; ww < 2; ++ww)
          for (std::size_t o = 0; o < 3; ++o)
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t bb = 0; bb < 2; ++bb)
                for (std::size_t cc = 0; cc < 2; ++cc)
                  ref[o * 96 + ((2 * d + a) * 6 + 2 * h + bb) * 4 + 2 * ww + cc] +=
                      w[(((c * 3 + o) * 2 + a) * 2 + bb) * 2 + cc] * x[((c * 2 + d) * 3 + h) * 2 + ww];
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(TransposedConv, SameSemanticsDoubleSpatialSizeWithOverlappingKernel) {
  Network<double> net(single(LayerSpec::tconv({1, 3, 3}, 4, 2, {1, 2, 2}), 4, 2));
  Tensor<double> x({1, 4, 1, 8, 8});
  EXPECT_EQ(net.output_shape(x.dims()), (Shape{1, 2, 1, 16, 16}));
}

TEST(TransposedConv, HeFanInCountsOverlappingTaps) {
  EXPECT_EQ(TransposedConvLayer<float>::effective_fan_in(LayerSpec::tconv({2, 2, 2}, 64, 32, {2, 2, 2})), 64u);
  EXPECT_EQ(TransposedConvLayer<float>::effective_fan_in(LayerSpec::tconv({1, 3, 3}, 64, 32, {1, 2, 2})), 256u);
}

// ---------------------------------------------------------------------------
// Finite-difference agreement for every layer kind (double precision, h = 1e-5)

namespace {

void expect_gradients(NetworkSpec spec, Shape in, ForwardContext ctx = {}) {
  Network<double> net(spec, 99);
  auto x = random_tensor(in, 1234);
  GradCheckOptions opt;
  opt.ctx = ctx;
  opt.max_per_array = 256;
  const auto r = check_gradients(net, x, opt);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 0u);
}

}  // namespace

TEST(GradientCheck, Conv3D) { expect_gradients(single(LayerSpec::conv({3, 3, 3}, 2, 3), 2), {2, 2, 4, 4, 4}); }

TEST(GradientCheck, ConvStridedValid) {
  expect_gradients(single(LayerSpec::conv({2, 3, 2}, 2, 2, {2, 1, 2}, false), 2), {1, 2, 4, 4, 4});
}

TEST(GradientCheck, Conv2D) { expect_gradients(single(LayerSpec::conv({1, 3, 3}, 2, 2), 2, 2), {2, 2, 1, 4, 4}); }

TEST(GradientCheck, TransposedConv) {
  expect_gradients(single(LayerSpec::tconv({2, 2, 2}, 3, 2, {2, 2, 2}), 3), {1, 3, 2, 2, 2});
  expect_gradients(single(LayerSpec::tconv({1, 3, 3}, 2, 2, {1, 2, 2}), 2, 2), {1, 2, 1, 3, 3});
}

TEST(GradientCheck, ReluSigmoidMaxpoolUpsample) {
  NetworkSpec s;
  s.in_channels = 2;
  s.layers = {LayerSpec::simple(LayerKind::relu), LayerSpec::maxpool({2, 2, 2}),
              LayerSpec::upsample({2, 2, 2}), LayerSpec::simple(LayerKind::sigmoid)};
  expect_gradients(s, {1, 2, 4, 4, 4});
}

TEST(GradientCheck, DropoutFrozenMask) {
  NetworkSpec s;
  s.in_channels = 2;
  s.layers = {LayerSpec::dropout(0.3), LayerSpec::simple(LayerKind::sigmoid)};
  expect_gradients(s, {1, 2, 4, 4, 4}, ForwardContext{true, 77});
}

TEST(GradientCheck, BatchNormTrainAndInfer) {
  NetworkSpec s;
  s.in_channels = 3;
  s.layers = {LayerSpec::batchnorm(3), LayerSpec::simple(LayerKind::sigmoid)};
  expect_gradients(s, {2, 3, 2, 4, 4}, ForwardContext{true, 1});
  expect_gradients(s, {2, 3, 2, 4, 4}, ForwardContext{false, 1});
}

TEST(GradientCheck, ConcatSkip) {
  NetworkSpec s;
  s.in_channels = 2;
  s.layers = {LayerSpec::conv({3, 3, 3}, 2, 2), LayerSpec::simple(LayerKind::relu),
              LayerSpec::conv({1, 1, 1}, 2, 3), LayerSpec::concat(1), LayerSpec::conv({1, 1, 1}, 5, 1),
              LayerSpec::simple(LayerKind::sigmoid)};
  expect_gradients(s, {1, 2, 4, 4, 4});
}

// ---------------------------------------------------------------------------

TEST(MaxPool, ConstantInputRoutesGradientToFirstVoxelOfEachWindow) {
  NetworkSpec s = single(LayerSpec::maxpool({2, 2, 2}), 1);
  Network<double> net(s);
  Tensor<double> x({1, 1, 4, 4, 4}, std::vector<double>(64, 3.5));
  const auto& y = net.forward(x);
  ASSERT_EQ(y.size(), 8u);
  for (auto v : y.values()) EXPECT_EQ(v, 3.5);
  std::vector<double> g(8, 1.0);
  net.backward(g, true);
  const auto gx = net.input_grad();
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c)
        EXPECT_EQ(gx[(z * 4 + r) * 4 + c], (z % 2 == 0 && r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0);
}

TEST(MaxPool, MatchesWindowLoopOracle) {
  Network<double> net(single(LayerSpec::maxpool({2, 2, 2}), 2));
  auto x = random_tensor({1, 2, 4, 6, 2}, 31);
  const auto& y = net.forward(x);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t h = 0; h < 3; ++h) {
        double m = -1e9;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t w = 0; w < 2; ++w) m = std::max(m, x[((c * 4 + 2 * d + a) * 6 + 2 * h + b) * 2 + w]);
        EXPECT_EQ(y[(c * 2 + d) * 3 + h], m);
      }
}

TEST(MaxPool, OddSpatialDimIsContractError) {
  MaxPoolLayer<double> pool({2, 2, 2});
  std::vector<Shape> s{{1, 1, 4, 5, 4}};
  EXPECT_THROW(pool.output_shape(s), ContractError);
}

TEST(Upsample, ThenMaxPoolIsIdentity) {
  NetworkSpec s;
  s.in_channels = 2;
  s.layers = {LayerSpec::upsample({2, 2, 2}), LayerSpec::maxpool({2, 2, 2})};
  Network<double> net(s);
  auto x = random_tensor({2, 2, 4, 2, 6}, 41);
  const auto& y = net.forward(x);
  ASSERT_EQ(y.dims(), x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Dropout, RateZeroIsIdentityInBothModes) {
  Network<double> net(single(LayerSpec::dropout(0.0), 1));
  auto x = random_tensor({1, 1, 2, 2, 2}, 3);
  for (bool train : {false, true}) {
    const auto& y = net.forward(x, {train, 5});
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
  }
}

TEST(Dropout, InferenceIsIdentity) {
  Network<double> net(single(LayerSpec::dropout(0.5), 1));
  auto x = random_tensor({1, 1, 2, 2, 2}, 3);
  const auto& y = net.forward(x, {false, 5});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Dropout, InvertedScalingPreservesExpectation) {
  Network<double> net(single(LayerSpec::dropout(0.2), 1));
  Tensor<double> x({1, 1, 4, 4, 4}, std::vector<double>(64, 1.0));
  double total = 0;
  const int seeds = 2000;
  for (int s = 0; s < seeds; ++s) {
    const auto& y = net.forward(x, {true, static_cast<std::uint64_t>(s)});
    for (auto v : y.values()) {
      EXPECT_TRUE(v == 0.0 || std::abs(v - 1.25) < 1e-12);
      total += v;
    }
  }
  EXPECT_NEAR(total / (64.0 * seeds), 1.0, 0.02);
}

TEST(BatchNorm, TrainModeUpdatesRunningStatistics) {
  Network<double> net(single(LayerSpec::batchnorm(1, 1e-3, 0.9), 1));
  Tensor<double> x({2, 1, 1, 1, 2}, {1.0, 2.0, 3.0, 6.0});
  const auto& y = net.forward(x, {true, 0});
  const double mean = 3.0, var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], (x[i] - mean) / std::sqrt(var + 1e-3), 1e-12);
  auto bufs = net.buffers();
  EXPECT_NEAR((*bufs[0])[0], 0.1 * mean, 1e-12);
  EXPECT_NEAR((*bufs[1])[0], 0.9 + 0.1 * var, 1e-12);
  EXPECT_EQ(net.param_count(), 0u);
}

TEST(Sigmoid, OutputsStrictlyInsideUnitInterval) {
  Network<double> net(single(LayerSpec::simple(LayerKind::sigmoid), 1));
  Tensor<double> x({1, 1, 1, 1, 4}, {-30.0, -1.0, 2.0, 30.0});
  const auto& y = net.forward(x);
  for (auto v : y.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Network, ForwardIsBitDeterministic) {
  NetworkSpec s;
  s.in_channels = 2;
  s.layers = {LayerSpec::conv({3, 3, 3}, 2, 4), LayerSpec::simple(LayerKind::relu),
              LayerSpec::conv({1, 1, 1}, 4, 1), LayerSpec::simple(LayerKind::sigmoid)};
  Network<float> a(s, 3), b(s, 3);
  auto x = random_tensor<float>({1, 2, 8, 8, 8}, 4);
  const auto ya = a.forward(x);
  const auto yb = b.forward(x);
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

TEST(Network, ValidateRejectsBadWiring) {
  NetworkSpec s;
  s.in_channels = 2;
  s.layers = {LayerSpec::conv({3, 3, 3}, 3, 4)};
  EXPECT_THROW(validate(s), ContractError);
  s.layers = {LayerSpec::concat(0)};
  EXPECT_THROW(validate(s), ContractError);
}

TEST(Network, SpecTextRoundTrip) {
  NetworkSpec s;
  s.in_channels = 3;
  s.base_channels = 8;
  s.depth = 3;
  s.layers = {LayerSpec::conv({3, 3, 3}, 3, 8), LayerSpec::simple(LayerKind::relu), LayerSpec::dropout(0.2),
              LayerSpec::maxpool({2, 2, 2}), LayerSpec::upsample({1, 2, 2}), LayerSpec::tconv({2, 2, 2}, 8, 4, {2, 2, 2}),
              LayerSpec::concat(1), LayerSpec::batchnorm(12, 1e-3, 0.99), LayerSpec::simple(LayerKind::sigmoid)};
  EXPECT_EQ(spec_from_text(to_text(s)), s);
  EXPECT_THROW(spec_from_text("bogus"), FormatError);
}

TEST(Checkpoint, RoundTripRestoresWeightsAndAdamState) {
  NetworkSpec s;
  s.in_channels = 1;
  s.layers = {LayerSpec::conv({3, 3, 3}, 1, 2), LayerSpec::batchnorm(2), LayerSpec::conv({1, 1, 1}, 2, 1),
              LayerSpec::simple(LayerKind::sigmoid)};
  Network<float> net(s, 5);
  auto x = random_tensor<float>({1, 1, 4, 4, 4}, 6);
  net.zero_grad();
  const auto& y = net.forward(x, {true, 1});
  std::vector<float> g(y.size(), 0.5f);
  net.backward(g);
  AdamState<float> adam;
  adam_step(net.parameters(), adam);
  const auto path = std::filesystem::temp_directory_path() / "ivdseg_ckpt_test.mck";
  save_checkpoint(path, make_checkpoint(net, &adam, "epoch=3\n"));
  const auto c = load_checkpoint(path);
  EXPECT_EQ(c.extra, "epoch=3\n");
  ASSERT_TRUE(c.adam.has_value());
  EXPECT_EQ(*c.adam, adam);
  auto restored = network_from_checkpoint(c);
  const auto a = net.forward(x);
  const auto b = restored.forward(x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  auto bytes = encode_checkpoint(c);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  bytes = encode_checkpoint(c);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------

TEST(DiceLoss, PerfectPredictionGivesOne) {
  std::vector<double> t{1, 1, 0, 0, 1, 0};
  EXPECT_DOUBLE_EQ(dice_coefficient<double>(t, t).coefficient, 1.0);
  EXPECT_DOUBLE_EQ(dice_loss<double>(t, t).coefficient, 0.0);
}

TEST(DiceLoss, ZeroPredictionGivesReciprocal) {
  std::vector<double> p(10, 0.0), t(10, 0.0);
  for (int i = 0; i < 4; ++i) t[i] = 1.0;
  EXPECT_DOUBLE_EQ(dice_coefficient<double>(p, t).coefficient, 1.0 / 5.0);
}

TEST(DiceLoss, GradientMatchesFiniteDifferences) {
  auto p = random_tensor({64}, 17, 0.05, 0.95);
  auto tt = random_tensor({64}, 18, 0.0, 1.0);
  for (auto& v : tt.values()) v = v > 0.6 ? 1.0 : 0.0;
  const auto r = dice_loss<double>(p.values(), tt.values());
  EXPECT_GT(1.0 - r.coefficient, 0.0);
  EXPECT_LE(1.0 - r.coefficient, 1.0);
  const double h = 1e-5;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto q = p;
    q[i] += h;
    const double lp = dice_loss<double>(q.values(), tt.values()).coefficient;
    q[i] -= 2 * h;
    const double lm = dice_loss<double>(q.values(), tt.values()).coefficient;
    const double num = (lp - lm) / (2 * h);
    EXPECT_LT(std::abs(num - r.grad[i]) / std::max({std::abs(num), std::abs(r.grad[i]), 1e-6}), 1e-4);
  }
}

TEST(DiceLoss, ShapeMismatchThrows) {
  std::vector<double> a(3), b(4);
  EXPECT_THROW(dice_loss<double>(a, b), ShapeError);
}

TEST(HeInit, SampleStandardDeviationNearTarget) {
  for (std::size_t fan_in : {2u, 864u}) {
    const auto w = he_init<double>({20000}, fan_in, 42);
    double mean = std::accumulate(w.begin(), w.end(), 0.0) / w.size();
    double ss = 0;
    for (auto v : w) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / w.size());
    const double target = std::sqrt(2.0 / fan_in);
    EXPECT_NEAR(sd / target, 1.0, 0.1);
  }
  EXPECT_DOUBLE_EQ(std::sqrt(2.0 / 2.0), 1.0);
  EXPECT_EQ(3u * 3u * 3u * 32u, 864u);
}

TEST(HeInit, SameSeedSameArray) {
  EXPECT_EQ(he_init<float>({100}, 10, 9), he_init<float>({100}, 10, 9));
  EXPECT_NE(he_init<float>({100}, 10, 9), he_init<float>({100}, 10, 10));
  EXPECT_THROW(he_init<float>({10}, 0, 1), DomainError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor<double> p({4}, {1.0, -2.0, 3.0, 0.5});
  p.enable_grad();
  const auto before = std::vector<double>(p.values().begin(), p.values().end());
  AdamState<double> st;
  adam_step<double>({&p}, st);
  EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()), before);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> p({2}, {1.0, 1.0});
  p.enable_grad();
  p.grad()[0] = 0.3;
  p.grad()[1] = -7.0;
  AdamState<double> st;
  adam_step<double>({&p}, st);
  // m_hat = g, v_hat = g^2 after bias correction
  EXPECT_NEAR(p[0], 1.0 - 1e-5 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p[1], 1.0 + 1e-5 * 7.0 / (7.0 + 1e-8), 1e-15);
}

TEST(Adam, NonFiniteGradientFailsFast) {
  Tensor<double> p({2}, {1.0, 1.0});
  p.enable_grad();
  p.grad()[1] = std::nan("");
  AdamState<double> st;
  EXPECT_THROW(adam_step<double>({&p}, st), OptimizerError);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(st.t, 0u);
}

TEST(Adam, FirstStepIsBoundedByLearningRate) {
  auto p = random_tensor({50}, 3);
  p.enable_grad();
  auto g = random_tensor({50}, 100, -5.0, 5.0);
  std::copy(g.values().begin(), g.values().end(), p.grad().begin());
  const auto prev = std::vector<double>(p.values().begin(), p.values().end());
  AdamState<double> st;
  st.lr = 1e-9;
  adam_step<double>({&p}, st);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_LE(std::abs(p[i] - prev[i]), st.lr * (1 + 1e-8) + 1e-15);
}
