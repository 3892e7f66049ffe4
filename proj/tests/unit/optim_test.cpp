#include <gtest/gtest.h>

#include <cmath>

#include "sgdph/autodiff.hpp"
#include "sgdph/errors.hpp"
#include "sgdph/nn.hpp"
#include "sgdph/optim.hpp"
#include "sgdph/rng.hpp"

namespace sgdph::optim {
namespace {

using Vec = Tensor<double>;

Parameter<double> channelwise(std::initializer_list<double> v) {
  return Parameter<double>("gamma", Vec::vector(v), ParamKind::kChannelWise1D);
}

TEST(RectifyTest, Examples) {
  EXPECT_NEAR(rectify(Vec::vector({-0.5}), 1e-4)[0], 0.5001, 1e-15);
  EXPECT_EQ(rectify(Vec::vector({0}), 1e-4)[0], 1e-4);
  const auto r = rectify(Vec::vector({2, -3}), 0.0001);
  EXPECT_NEAR(r[0], 2.0001, 1e-15);
  EXPECT_NEAR(r[1], 3.0001, 1e-15);
}

TEST(MomentumTest, HessianMomentumExamples) {
  ParamState<double> s;
  s.m_h = Vec::vector({0});
  EXPECT_NEAR(update_hessian_momentum(s, Vec::vector({1}), 0.9)[0], 0.9, 1e-15);
  for (double alpha : {0.1, 0.5, 0.9}) {
    s.m_h = Vec::vector({1});
    EXPECT_EQ(update_hessian_momentum(s, Vec::vector({1}), alpha)[0], 1.0);
  }
  s.m_h = Vec::vector({1});
  EXPECT_NEAR(update_hessian_momentum(s, Vec::vector({2}), 0.9)[0], 1.9, 1e-15);
}

TEST(MomentumTest, GradMomentumExamples) {
  ParamState<double> s;
  s.m_g = Vec::vector({0});
  EXPECT_NEAR(update_grad_momentum(s, Vec::vector({1}), 0.9)[0], 0.9, 1e-15);
  s.m_g = Vec::vector({0.37, -2});
  EXPECT_EQ(update_grad_momentum(s, Vec::vector({0.37, -2}), 0.9).values(), (std::vector<double>{0.37, -2}));
  s.m_g = Vec::vector({2});
  EXPECT_NEAR(update_grad_momentum(s, Vec::vector({0}), 0.9)[0], 0.2, 1e-15);
}

TEST(MomentumTest, ClassicalConvention) {
  ParamState<double> s;
  s.m_g = Vec::vector({0});
  EXPECT_NEAR(update_grad_momentum(s, Vec::vector({1}), 0.9, MomentumConvention::kClassical)[0], 0.1, 1e-15);
  s.m_h = Vec::vector({1});
  EXPECT_NEAR(update_hessian_momentum(s, Vec::vector({2}), 0.9, MomentumConvention::kClassical)[0], 1.1, 1e-15);
}

TEST(DirectionTest, FirstStepCancelsMomentumFactors) {
  SgdPhConfig cfg;
  cfg.eps = 1e-4;
  for (double a : {-3.0, 0.0, 0.5, 7.0}) {
    for (double m : {0.3, 0.9}) {
      cfg.alpha = cfg.beta_m = m;
      auto p = channelwise({1});
      OptState<double> st;
      const double g = 1.7;
      const auto d = direction_1d(st.state_for(p), Vec::vector({g}), Vec::vector({a}), cfg);
      EXPECT_NEAR(d[0], cfg.tau_so * g / (std::abs(a) + cfg.eps), 1e-15 * std::abs(d[0]) + 1e-18);
    }
  }
}

TEST(DirectionTest, StationaryGivesZero) {
  SgdPhConfig cfg;
  auto p = channelwise({1, 2});
  OptState<double> st;
  const auto d = direction_1d(st.state_for(p), Vec::vector({0, 0}), Vec::vector({3, -1}), cfg);
  EXPECT_EQ(d.values(), (std::vector<double>{0, 0}));
}

TEST(DirectionTest, NewtonScalingExample) {
  SgdPhConfig cfg;
  cfg.eps = 0;
  auto p = channelwise({1, 1});
  OptState<double> st;
  const auto d = direction_1d(st.state_for(p), Vec::vector({1, 1}), Vec::vector({1, 4}), cfg);
  EXPECT_NEAR(d[0], cfg.tau_so * 1.0, 1e-18);
  EXPECT_NEAR(d[1], cfg.tau_so * 0.25, 1e-18);
}

TEST(DirectionTest, NonPositiveMomentumIsInvariantViolation) {
  SgdPhConfig cfg;
  auto p = channelwise({1});
  OptState<double> st;
  auto& s = st.state_for(p);
  s.m_h = Vec::vector({-100});
  EXPECT_THROW(direction_1d(s, Vec::vector({1}), Vec::vector({0}), cfg), InvariantViolation);

  cfg.eps = 0;
  OptState<double> fresh;
  EXPECT_THROW(direction_1d(fresh.state_for(p), Vec::vector({1}), Vec::vector({0}), cfg), InvariantViolation);
}

TEST(DirectionTest, DenseFreshAndDecay) {
  SgdPhConfig cfg;
  Parameter<double> w("w", Vec::vector({0, 0}), ParamKind::kDense);
  OptState<double> st;
  auto& s = st.state_for(w);
  EXPECT_FALSE(s.m_h.has_value());
  auto d = direction_dense(s, Vec::vector({2, -4}), cfg);
  EXPECT_NEAR(d[0], 1.8, 1e-15);
  EXPECT_NEAR(d[1], -3.6, 1e-15);
  for (int i = 0; i < 5; ++i) {
    const auto next = direction_dense(s, Vec::vector({0, 0}), cfg);
    EXPECT_NEAR(next[0], d[0] * (1 - cfg.beta_m), 1e-15);
    d = next;
  }
}

TEST(StepTest, DirectUpdate) {
  SgdPhConfig cfg;
  cfg.tau = 0.01;
  Parameter<double> w("w", Vec::vector({1}), ParamKind::kDense);
  std::vector<Parameter<double>*> params{&w};
  OptState<double> st;
  st.state_for(w).m_g = Vec::vector({0.5});
  step<double>(params, {{"w", Vec::vector({0.5})}}, {}, cfg, st);  // M_G stays 0.5
  EXPECT_NEAR(w.value()[0], 0.995, 1e-15);
}

TEST(StepTest, PureDecayBothOptimizers) {
  SgdPhConfig cfg;
  cfg.tau = 0.01;
  cfg.eta = 0.5;
  for (bool sgdm : {false, true}) {
    Parameter<double> w("w", Vec::vector({2, -4}), ParamKind::kDense);
    std::vector<Parameter<double>*> params{&w};
    OptState<double> st;
    const TensorMap<double> grads{{"w", Vec::vector({0, 0})}};
    if (sgdm) {
      sgdm_step<double>(params, grads, cfg, st);
    } else {
      step<double>(params, grads, {}, cfg, st);
    }
    EXPECT_NEAR(w.value()[0], (1 - cfg.tau * cfg.eta) * 2, 1e-15);
    EXPECT_NEAR(w.value()[1], (1 - cfg.tau * cfg.eta) * -4, 1e-15);
  }
}

TEST(StepTest, ChannelWiseQuadraticClosedForm) {
  SgdPhConfig cfg;
  cfg.tau = 0.05;
  cfg.eta = 0.01;
  cfg.eps = 1e-4;
  const double a = 2.5, gamma = 0.8;
  auto p = channelwise({gamma});
  std::vector<Parameter<double>*> params{&p};
  OptState<double> st;
  step<double>(params, {{"gamma", Vec::vector({a * gamma})}}, {{"gamma", Vec::vector({a})}}, cfg, st);
  const double expected = gamma - cfg.tau * (cfg.tau_so * a * gamma / (a + cfg.eps) + cfg.eta * gamma);
  EXPECT_NEAR(p.value()[0], expected, 1e-15);
}

TEST(StepTest, MissingInputsAndShapes) {
  SgdPhConfig cfg;
  auto p = channelwise({1, 2});
  Parameter<double> w("w", Vec::vector({1}), ParamKind::kDense);
  std::vector<Parameter<double>*> params{&p, &w};
  OptState<double> st;
  const TensorMap<double> grads{{"gamma", Vec::vector({1, 1})}, {"w", Vec::vector({1})}};
  EXPECT_THROW(step<double>(params, {{"gamma", Vec::vector({1, 1})}}, {{"gamma", Vec::vector({1, 1})}}, cfg, st),
               std::invalid_argument);
  EXPECT_THROW(step<double>(params, grads, {}, cfg, st), std::invalid_argument);
  EXPECT_THROW(step<double>(params, grads, {{"gamma", Vec::vector({1})}}, cfg, st), ShapeError);
  // Nothing was touched by the failed calls.
  EXPECT_EQ(p.value().values(), (std::vector<double>{1, 2}));
  EXPECT_EQ(st.steps(), 0u);
  EXPECT_NO_THROW(step<double>(params, grads, {{"gamma", Vec::vector({1, 1})}}, cfg, st));
}

TEST(StepTest, PositivityAfterFirstUpdate) {
  SgdPhConfig cfg;
  Rng rng(3);
  auto p = channelwise({1, 1, 1, 1, 1, 1});
  std::vector<Parameter<double>*> params{&p};
  OptState<double> st;
  for (int t = 0; t < 50; ++t) {
    Vec g({6}), h({6});
    for (double& v : g.data()) v = rng.normal();
    for (std::size_t i = 0; i < 6; ++i) h[i] = i == 0 ? 0.0 : rng.normal() * (i % 2 ? 1e3 : 1e-9);
    step<double>(params, {{"gamma", g}}, {{"gamma", h}}, cfg, st);
    for (double m : st.find("gamma")->m_h->data()) {
      EXPECT_GT(m, 0.0);
      EXPECT_GE(m, cfg.alpha * cfg.eps);
    }
  }
  EXPECT_EQ(st.find("gamma")->hessian_updates, 50u);
  EXPECT_EQ(st.find("gamma")->grad_updates, 50u);
  EXPECT_EQ(st.steps(), 50u);
}

TEST(StepTest, BitwiseDeterministic) {
  SgdPhConfig cfg;
  cfg.eta = 0.003;
  auto run = [&] {
    Rng rng(8);
    auto p = channelwise({0.3, -0.2, 1.1});
    Parameter<double> w("w", Vec({2, 2}, 0.7), ParamKind::kDense);
    std::vector<Parameter<double>*> params{&p, &w};
    OptState<double> st;
    for (int t = 0; t < 20; ++t) {
      Vec g1({3}), h1({3}), g2({2, 2});
      for (double& v : g1.data()) v = rng.normal();
      for (double& v : h1.data()) v = rng.normal();
      for (double& v : g2.data()) v = rng.normal();
      step<double>(params, {{"gamma", g1}, {"w", g2}}, {{"gamma", h1}}, cfg, st);
    }
    return std::make_pair(p.value(), w.value());
  };
  EXPECT_EQ(run(), run());
}

TEST(StepTest, DegeneratesToSgdmOnDenseModel) {
  auto a = nn::build_model<double>("mlp", {4}, 3, nn::ModelOptions{}, 5);
  auto b = a;
  ASSERT_TRUE(a.channelwise_parameters().empty());
  SgdPhConfig cfg;
  cfg.tau = 0.05;
  cfg.eta = 0.001;
  OptState<double> sa, sb;
  Rng rng(10);
  Tensor<double> x({8, 4});
  for (double& v : x.data()) v = rng.normal();
  std::vector<std::int32_t> labels{0, 1, 2, 0, 1, 2, 0, 1};
  auto grads_of = [&](nn::Model<double>& m) {
    ad::Graph<double> g;
    auto loss = nn::softmax_cross_entropy(m.forward(g, x, nn::Mode::kTrain), labels);
    g.backward(loss);
    return g.parameter_gradients();
  };
  for (int t = 0; t < 30; ++t) {
    auto pa = a.parameters();
    auto pb = b.parameters();
    step<double>(pa, grads_of(a), {}, cfg, sa);
    sgdm_step<double>(pb, grads_of(b), cfg, sb);
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value(), pb[i]->value());
  }
}

TEST(StepTest, LinearRegressionReachesLeastSquares) {
  Rng rng(21);
  const std::size_t n = 40;
  Tensor<double> x({n, 2});
  Tensor<double> y({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    x.at({i, 0}) = rng.normal();
    x.at({i, 1}) = rng.normal();
    y.at({i, 0}) = 1.5 * x.at({i, 0}) - 0.7 * x.at({i, 1}) + 0.3 + 0.1 * rng.normal();
  }
  // Normal equations for [w0, w1, b] by Cramer's rule.
  double s[3][3] = {}, r[3] = {};
  for (std::size_t i = 0; i < n; ++i) {
    const double f[3] = {x.at({i, 0}), x.at({i, 1}), 1.0};
    for (int u = 0; u < 3; ++u) {
      r[u] += f[u] * y.at({i, 0});
      for (int v = 0; v < 3; ++v) s[u][v] += f[u] * f[v];
    }
  }
  auto det3 = [](double m[3][3]) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  };
  const double d = det3(s);
  double sol[3];
  for (int c = 0; c < 3; ++c) {
    double m[3][3];
    for (int u = 0; u < 3; ++u)
      for (int v = 0; v < 3; ++v) m[u][v] = v == c ? r[u] : s[u][v];
    sol[c] = det3(m) / d;
  }

  Parameter<double> w("w", Tensor<double>({2, 1}), ParamKind::kDense);
  Parameter<double> b("b", Tensor<double>({1}), ParamKind::kDense);
  std::vector<Parameter<double>*> params{&w, &b};
  SgdPhConfig cfg;
  OptState<double> st;
  for (std::size_t t = 0; t < 3000; ++t) {
    cfg.tau = scheduled_lr(0.5, 0.5, 1000, t);
    ad::Graph<double> g;
    auto pred = ad::add(ad::matmul(g.constant(x), g.bind(w)), ad::broadcast_to(g.bind(b), {n, 1}));
    auto resid = ad::sub(pred, y);
    auto loss = ad::scale(ad::sum_all(ad::mul(resid, resid)), 0.5 / double(n));
    g.backward(loss);
    sgdm_step<double>(params, g.parameter_gradients(), cfg, st);
  }
  EXPECT_NEAR(w.value()[0], sol[0], 1e-8);
  EXPECT_NEAR(w.value()[1], sol[1], 1e-8);
  EXPECT_NEAR(b.value()[0], sol[2], 1e-8);
}

TEST(ConfigTest, Validation) {
  SgdPhConfig ok;
  EXPECT_NO_THROW(ok.validate());
  EXPECT_EQ(ok.alpha, 0.9);
  EXPECT_EQ(ok.beta_m, 0.9);
  EXPECT_EQ(ok.tau_so, 0.001);
  EXPECT_EQ(ok.eps, 0.0001);
  auto bad = [](auto mutate) {
    SgdPhConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](auto& c) { c.tau = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.tau_so = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.alpha = 1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.beta_m = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.eta = -1e-3; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.eps = -1e-3; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.tau = std::nan(""); }).validate(), ConfigError);
}

TEST(ScheduleTest, StepDecay) {
  EXPECT_DOUBLE_EQ(scheduled_lr(0.1, 0.1, 60, 0), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_lr(0.1, 0.1, 60, 59), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_lr(0.1, 0.1, 60, 60), 0.01);
  EXPECT_NEAR(scheduled_lr(0.1, 0.1, 60, 125), 0.001, 1e-18);
  EXPECT_EQ(default_decay_interval(200), 60u);
  EXPECT_EQ(default_decay_interval(10), 3u);
  EXPECT_EQ(default_decay_interval(1), 1u);
}

TEST(StatsTest, HessianStatsSummarizeMomentum) {
  OptState<double> st;
  auto p = channelwise({1, 1, 1});
  st.state_for(p).m_h = Vec::vector({1, 2, 6});
  Parameter<double> w("w", Vec::vector({1}), ParamKind::kDense);
  st.state_for(w);
  const auto stats = hessian_stats(st);
  ASSERT_EQ(stats.size(), 1u);
  EXPECT_EQ(stats[0].name, "gamma");
  EXPECT_EQ(stats[0].min, 1);
  EXPECT_EQ(stats[0].mean, 3);
  EXPECT_EQ(stats[0].max, 6);
}

}  // namespace
}  // namespace sgdph::optim
