#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "sgdph/errors.hpp"
#include "sgdph/nn.hpp"
#include "sgdph/rng.hpp"

namespace sgdph::nn {
namespace {

std::vector<double> bn_single_channel(double gamma, double beta) {
  BatchNorm<double> bn("bn", 1, 0.0);
  bn.gamma().value()[0] = gamma;
  bn.beta().value()[0] = beta;
  ad::Graph<double> g;
  auto y = bn.forward(g, g.constant(Tensor<double>({3, 1}, std::vector<double>{1, 2, 3})), Mode::kTrain);
  return y.value().values();
}

TEST(BatchNormTest, UnitAffine) {
  const auto y = bn_single_channel(1, 0);
  EXPECT_NEAR(y[0], -std::sqrt(1.5), 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], std::sqrt(1.5), 1e-12);
  EXPECT_NEAR(y[0], -1.2247, 1e-4);
}

TEST(BatchNormTest, ScaledAndShifted) {
  const auto y = bn_single_channel(2, 1);
  EXPECT_NEAR(y[0], -1.4494, 1e-4);
  EXPECT_NEAR(y[1], 1.0, 1e-12);
  EXPECT_NEAR(y[2], 3.4494, 1e-4);
}

TEST(BatchNormTest, ConstantChannelGivesBeta) {
  BatchNorm<double> bn("bn", 2);
  bn.beta().value() = Tensor<double>::vector({0.25, -1});
  bn.gamma().value() = Tensor<double>::vector({3, 3});
  ad::Graph<double> g;
  Tensor<double> x({2, 2, 2, 2}, 7.5);
  auto y = bn.forward(g, g.constant(x), Mode::kTrain);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        EXPECT_NEAR(y.value().at({n, 0, i, j}), 0.25, 1e-12);
        EXPECT_NEAR(y.value().at({n, 1, i, j}), -1.0, 1e-12);
      }
}

TEST(BatchNormTest, TrainOutputStatistics) {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    BatchNorm<double> bn("bn", 3);
    for (double& v : bn.gamma().value().data()) v = rng.uniform(0.2, 3.0) * (rng.uniform() < 0.5 ? -1 : 1);
    for (double& v : bn.beta().value().data()) v = rng.normal();
    Tensor<double> x({8, 3, 2, 2});
    for (double& v : x.data()) v = rng.normal() * 2 + 1;
    ad::Graph<double> g;
    auto y = bn.forward(g, g.constant(x), Mode::kTrain);
    const auto m = moments(y.value(), {0, 2, 3});
    for (std::size_t c = 0; c < 3; ++c) {
      const double gamma = bn.gamma().value()[c];
      EXPECT_NEAR(m.mean[c], bn.beta().value()[c], 1e-6);
      EXPECT_LE(m.var[c], gamma * gamma * (1 + 1e-12));
      EXPECT_GE(m.var[c], gamma * gamma * (1 - 5e-3));
    }
  }
}

TEST(BatchNormTest, RunningStatisticsByMode) {
  BatchNorm<double> bn("bn", 1);
  Tensor<double> x({4, 1}, std::vector<double>{1, 2, 3, 6});  // mean 3, var 3.5
  {
    ad::Graph<double> g;
    bn.forward(g, g.constant(x), Mode::kProbe);
  }
  EXPECT_EQ(bn.running_mean()[0], 0.0);
  EXPECT_EQ(bn.running_var()[0], 1.0);
  {
    ad::Graph<double> g;
    bn.forward(g, g.constant(x), Mode::kTrain);
  }
  EXPECT_NEAR(bn.running_mean()[0], 0.3, 1e-15);
  EXPECT_NEAR(bn.running_var()[0], 0.9 + 0.35, 1e-15);

  ad::Graph<double> g;
  auto y = bn.forward(g, g.constant(Tensor<double>({1, 1}, std::vector<double>{0.3})), Mode::kEval);
  EXPECT_NEAR(y.value()[0], 0.0, 1e-12);
}

TEST(BatchNormTest, ChannelMismatch) {
  BatchNorm<double> bn("bn", 3);
  ad::Graph<double> g;
  EXPECT_THROW(bn.forward(g, g.constant(Tensor<double>({2, 4})), Mode::kTrain), ShapeError);
}

TEST(BatchNormTest, ParametersAreChannelWise) {
  BatchNorm<double> bn("bn1", 4);
  EXPECT_EQ(bn.gamma().name(), "bn1.gamma");
  EXPECT_TRUE(bn.gamma().is_channelwise());
  EXPECT_TRUE(bn.beta().is_channelwise());
  EXPECT_EQ(bn.gamma().value().values(), std::vector<double>(4, 1.0));
  EXPECT_EQ(bn.beta().value().values(), std::vector<double>(4, 0.0));
}

TEST(WeightNormTest, ScalesDirection) {
  WNConv2d<double> wn("wn", Tensor<double>({1, 1, 1, 2}, std::vector<double>{3, 4}),
                      Tensor<double>::vector({2}), std::nullopt, Padding::kValid);
  ad::Graph<double> g;
  const auto w = wn_reparam(wn, g).value();
  EXPECT_NEAR(w[0], 1.2, 1e-15);
  EXPECT_NEAR(w[1], 1.6, 1e-15);
}

TEST(WeightNormTest, IdentityWhenGammaIsNorm) {
  Tensor<double> v({2, 1, 1, 2}, std::vector<double>{3, 4, 5, 12});
  WNConv2d<double> wn("wn", v, Tensor<double>::vector({5, 13}), std::nullopt, Padding::kValid);
  ad::Graph<double> g;
  const auto w = wn_reparam(wn, g).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], v[i], 1e-15);
}

template <class T>
void check_norm_equals_gamma(std::uint64_t seed) {
  Rng rng(seed);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<T> v({4, 3, 3, 3});
    for (T& x : v.data()) x = static_cast<T>(rng.normal());
    Tensor<T> gamma({4});
    for (T& x : gamma.data()) x = static_cast<T>(rng.normal() * 2);
    WNConv2d<T> wn("wn", v, gamma, std::nullopt, Padding::kSame);
    ad::Graph<T> g;
    const auto w = wn_reparam(wn, g).value();
    const std::size_t per = 27;
    for (std::size_t c = 0; c < 4; ++c) {
      double s = 0;
      for (std::size_t k = 0; k < per; ++k) s += double(w[c * per + k]) * double(w[c * per + k]);
      const T norm = static_cast<T>(std::sqrt(s));
      const T target = std::abs(gamma[c]);
      EXPECT_LE(std::abs(norm - target), 4 * std::numeric_limits<T>::epsilon() * target) << c;
    }
  }
}

TEST(WeightNormTest, NormEqualsAbsGammaDouble) { check_norm_equals_gamma<double>(17); }
TEST(WeightNormTest, NormEqualsAbsGammaFloat) { check_norm_equals_gamma<float>(18); }

TEST(WeightNormTest, ScaleInvariantInV) {
  Rng rng(6);
  Tensor<double> v({2, 1, 3, 3});
  for (double& x : v.data()) x = rng.normal();
  const auto gamma = Tensor<double>::vector({0.7, -1.3});
  WNConv2d<double> a("a", v, gamma, std::nullopt, Padding::kSame);
  WNConv2d<double> b("b", scale(v, 5.5), gamma, std::nullopt, Padding::kSame);
  ad::Graph<double> g;
  const auto wa = wn_reparam(a, g).value();
  const auto wb = wn_reparam(b, g).value();
  for (std::size_t i = 0; i < wa.size(); ++i) EXPECT_NEAR(wa[i], wb[i], 1e-14);
}

TEST(WeightNormTest, MatchesPlainConv) {
  Rng rng(23);
  Rng init(24);
  Conv2d<double> conv("c", 2, 3, 3, Padding::kSame, true, ParamKind::kChannelWise1D, init);
  for (double& x : conv.bias()->value().data()) x = rng.normal();
  const auto& w = conv.weight().value();
  Tensor<double> norms({3});
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t k = 0; k < 18; ++k) s += w[c * 18 + k] * w[c * 18 + k];
    norms[c] = std::sqrt(s);
  }
  WNConv2d<double> wn("wn", w, norms, conv.bias()->value(), Padding::kSame);
  Tensor<double> x({2, 2, 5, 5});
  for (double& v : x.data()) v = rng.normal();
  ad::Graph<double> g;
  const auto y1 = conv.forward(g, g.constant(x), Mode::kTrain).value();
  const auto y2 = wn.forward(g, g.constant(x), Mode::kTrain).value();
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_NEAR(y1[i], y2[i], 1e-12);
}

TEST(WeightNormTest, InitialKernelEqualsPlainInit) {
  Rng a(5), b(5);
  Conv2d<double> conv("c", 2, 3, 3, Padding::kValid, false, ParamKind::kDense, a);
  WNConv2d<double> wn("c", 2, 3, 3, Padding::kValid, false, ParamKind::kDense, b);
  ad::Graph<double> g;
  const auto w = wn_reparam(wn, g).value();
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], conv.weight().value()[i], 1e-14);
}

TEST(WeightNormTest, DegenerateDirection) {
  Tensor<double> v({2, 1, 1, 1}, std::vector<double>{1, 0});
  WNConv2d<double> wn("wn", v, Tensor<double>::vector({1, 1}), std::nullopt, Padding::kValid);
  ad::Graph<double> g;
  EXPECT_THROW(wn_reparam(wn, g), DegenerateNormError);
}

TEST(WeightNormTest, ParameterKinds) {
  Rng rng(1);
  WNConv2d<double> wn("conv1", 1, 4, 3, Padding::kValid, true, ParamKind::kChannelWise1D, rng);
  const auto params = wn.parameters();
  ASSERT_EQ(params.size(), 3u);
  EXPECT_EQ(params[0]->name(), "conv1.v");
  EXPECT_EQ(params[0]->kind(), ParamKind::kDense);
  EXPECT_TRUE(params[1]->is_channelwise());
  EXPECT_TRUE(params[2]->is_channelwise());
}

TEST(ParameterTest, ChannelWiseMustBeOneDimensional) {
  EXPECT_THROW(Parameter<double>("p", Tensor<double>({2, 2}), ParamKind::kChannelWise1D), ParameterKindError);
  EXPECT_NO_THROW(Parameter<double>("p", Tensor<double>({2, 2}), ParamKind::kDense));
}

TEST(LossTest, UniformLogitsGiveLogK) {
  ad::Graph<double> g;
  std::vector<std::int32_t> labels{0, 3};
  auto loss = softmax_cross_entropy(g.constant(Tensor<double>({2, 4}, 0.37)), labels);
  EXPECT_NEAR(loss.value().item(), std::log(4.0), 1e-14);
  EXPECT_NEAR(loss.value().item(), 1.3863, 1e-4);
}

TEST(LossTest, LargeMarginApproachesZero) {
  double previous = std::numeric_limits<double>::infinity();
  for (double margin : {1.0, 10.0, 100.0, 700.0}) {
    ad::Graph<double> g;
    std::vector<std::int32_t> labels{1};
    auto loss = softmax_cross_entropy(g.constant(Tensor<double>({1, 3}, std::vector<double>{0, margin, 0})), labels);
    const double v = loss.value().item();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, previous);
    previous = v;
  }
  EXPECT_LT(previous, 1e-40);
}

TEST(LossTest, MatchesExplicitSoftmax) {
  Rng rng(77);
  Tensor<double> logits({3, 5});
  for (double& v : logits.data()) v = rng.normal() * 3;
  std::vector<std::int32_t> labels{4, 0, 2};
  double ref = 0;
  for (std::size_t n = 0; n < 3; ++n) {
    double z = 0;
    for (std::size_t k = 0; k < 5; ++k) z += std::exp(logits.at({n, k}));
    ref -= std::log(std::exp(logits.at({n, static_cast<std::size_t>(labels[n])})) / z);
  }
  ref /= 3;
  ad::Graph<double> g;
  EXPECT_NEAR(softmax_cross_entropy(g.constant(logits), labels).value().item(), ref, 1e-13);
}

TEST(LossTest, CrossEntropyErrors) {
  ad::Graph<double> g;
  std::vector<std::int32_t> bad{0, 5};
  EXPECT_THROW(softmax_cross_entropy(g.constant(Tensor<double>({2, 4})), bad), std::out_of_range);
  std::vector<std::int32_t> short_labels{0};
  EXPECT_THROW(softmax_cross_entropy(g.constant(Tensor<double>({2, 4})), short_labels), ShapeError);
}

TEST(LossTest, SumOfSquares) {
  ad::Graph<double> g;
  EXPECT_EQ(sum_of_squares(g.constant(Tensor<double>::vector({0, 0}))).value().item(), 0.0);
  EXPECT_EQ(sum_of_squares(g.constant(Tensor<double>::vector({1, 2}))).value().item(), 2.5);
}

TEST(LossTest, CountCorrect) {
  Tensor<double> logits({3, 2}, std::vector<double>{1, 0, 0, 1, 5, -1});
  std::vector<std::int32_t> labels{0, 0, 0};
  EXPECT_EQ(count_correct(logits, labels), 2u);
}

class BuildModelTest : public ::testing::TestWithParam<std::string> {};

TEST_P(BuildModelTest, RegistryIsUniqueAndOrdered) {
  const std::string name = GetParam();
  const bool image = name.rfind("cnn", 0) == 0;
  const Shape sample = image ? Shape{1, 6, 6} : Shape{5};
  auto m = build_model<double>(name, sample, 3, ModelOptions{}, 9);
  std::set<std::string> names;
  for (auto* p : m.parameters()) EXPECT_TRUE(names.insert(p->name()).second) << p->name();
  const auto again = build_model<double>(name, sample, 3, ModelOptions{}, 9);
  auto copy = again;
  const auto a = m.parameters();
  const auto b = copy.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name(), b[i]->name());
    EXPECT_EQ(a[i]->value(), b[i]->value());
  }
  for (auto* p : m.channelwise_parameters()) EXPECT_TRUE(p->is_channelwise());

  Tensor<double> x(image ? Shape{4, 1, 6, 6} : Shape{4, 5}, 0.5);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(double(i));
  ad::Graph<double> g;
  auto y = m.forward(g, x, Mode::kTrain);
  EXPECT_EQ(y.shape(), (Shape{4, 3}));
}

INSTANTIATE_TEST_SUITE_P(AllModels, BuildModelTest, ::testing::ValuesIn(model_names()),
                         [](const auto& info) {
                           std::string s = info.param;
                           for (char& c : s)
                             if (c == '-') c = '_';
                           return s;
                         });

TEST(ModelTest, ChannelWiseCounts) {
  ModelOptions opts;
  EXPECT_EQ(build_model<double>("mlp", {4}, 2, opts, 1).channelwise_parameters().size(), 0u);
  EXPECT_EQ(build_model<double>("mlp-bn", {4}, 2, opts, 1).channelwise_parameters().size(), 4u);
  EXPECT_EQ(build_model<double>("bn-terminal", {4}, 2, opts, 1).channelwise_parameters().size(), 2u);
  EXPECT_EQ(build_model<double>("cnn-wn", {1, 6, 6}, 2, opts, 1).channelwise_parameters().size(), 4u);
  opts.bias_second_order = false;
  EXPECT_EQ(build_model<double>("cnn-wn", {1, 6, 6}, 2, opts, 1).channelwise_parameters().size(), 2u);
}

TEST(ModelTest, UnknownNameAndDuplicateParameters) {
  EXPECT_THROW(build_model<double>("resnet", {4}, 2, ModelOptions{}, 1), std::invalid_argument);
  Model<double> m("dup");
  Rng rng(1);
  m.add(std::make_unique<Linear<double>>("fc", 2, 2, true, rng));
  EXPECT_THROW(m.add(std::make_unique<Linear<double>>("fc", 2, 2, true, rng)), std::invalid_argument);
  EXPECT_THROW(m.parameter("nope"), std::out_of_range);
}

TEST(ModelTest, CopyIsDeep) {
  auto m = build_model<double>("mlp-bn", {4}, 2, ModelOptions{}, 3);
  auto copy = m;
  copy.parameter("bn1.gamma").value()[0] = 42;
  EXPECT_EQ(m.parameter("bn1.gamma").value()[0], 1.0);
}

TEST(ModelTest, SeedDeterminesWeights) {
  auto a = build_model<float>("cnn-bn", {1, 6, 6}, 3, ModelOptions{}, 11);
  auto b = build_model<float>("cnn-bn", {1, 6, 6}, 3, ModelOptions{}, 11);
  auto c = build_model<float>("cnn-bn", {1, 6, 6}, 3, ModelOptions{}, 12);
  EXPECT_EQ(a.parameter("conv1.weight").value(), b.parameter("conv1.weight").value());
  EXPECT_NE(a.parameter("conv1.weight").value(), c.parameter("conv1.weight").value());
}

}  // namespace
}  // namespace sgdph::nn
