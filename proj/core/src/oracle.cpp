#include "sgdph/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <memory>

#include "sgdph/errors.hpp"
#include "sgdph/optim.hpp"
#include "sgdph/rng.hpp"

namespace sgdph::oracle {

namespace {

constexpr std::size_t kMaxBlockChannels = 64;
constexpr double kTiny = 1e-30;
constexpr std::size_t kMaxDraws = 10000;

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Runs f with p[i] temporarily set to p[i] + delta.
template <class F>
auto with_offset(Parameter<double>& p, std::size_t i, double delta, F&& f) {
  double& slot = p.value()[i];
  const double saved = slot;
  slot = saved + delta;
  struct Restore {
    double& s;
    double v;
    ~Restore() { s = v; }
  } restore{slot, saved};
  return f();
}

// sum_k w_k * v_k for scalars or same-shape tensors.
double combine(std::initializer_list<std::pair<double, double>> terms) {
  double out = 0;
  for (const auto& [w, v] : terms) out += w * v;
  return out;
}

Tensor<double> combine(std::initializer_list<std::pair<double, Tensor<double>>> terms) {
  Tensor<double> out(terms.begin()->second.shape());
  for (const auto& [w, v] : terms) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += w * v[k];
  }
  return out;
}

// Derivative along coordinate i of whatever f returns (double or Tensor).
template <class F>
auto stencil_derivative(Parameter<double>& p, std::size_t i, double h, Stencil stencil, F&& f) {
  using R = decltype(f());
  auto at = [&](double delta) { return with_offset(p, i, delta, f); };
  if (stencil == Stencil::kCentral2) {
    const double w = 1.0 / (2 * h);
    return combine(std::initializer_list<std::pair<double, R>>{{w, at(h)}, {-w, at(-h)}});
  }
  const double w = 1.0 / (12 * h);
  return combine(std::initializer_list<std::pair<double, R>>{
      {-w, at(2 * h)}, {8 * w, at(h)}, {-8 * w, at(-h)}, {w, at(-2 * h)}});
}

Tensor<double> fd_gradient_one(const LossBuilder& loss, Parameter<double>& p, double h, Stencil stencil) {
  Tensor<double> g(p.value().shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = stencil_derivative(p, i, h, stencil, [&] { return evaluate(loss); });
  }
  return g;
}

}  // namespace

void FdSpec::validate() const {
  if (!(h > 0) || !(h_hessian > 0)) throw ConfigError("finite-difference steps must be > 0");
}

double FdSpec::hessian_reach() const {
  return (hessian_stencil == Stencil::kCentral4 ? 4.0 : 2.0) * h_hessian;
}

double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor) {
  if (a.shape() != b.shape()) {
    throw ShapeError("cannot compare " + to_string(a.shape()) + " with " + to_string(b.shape()));
  }
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

double evaluate(const LossBuilder& loss) {
  ad::Graph<double> graph;
  const double value = loss(graph).value().item();
  if (!std::isfinite(value)) throw DomainError("loss is not finite");
  return value;
}

TensorMap fd_gradient(const LossBuilder& loss, std::span<Parameter<double>* const> params,
                      const FdSpec& spec) {
  spec.validate();
  TensorMap out;
  for (Parameter<double>* p : params) out.emplace(p->name(), fd_gradient_one(loss, *p, spec.h, spec.gradient_stencil));
  return out;
}

TensorMap autodiff_gradient(const LossBuilder& loss) {
  ad::Graph<double> graph;
  const ad::Var<double> l = loss(graph);
  graph.backward(l);
  return graph.parameter_gradients();
}

Tensor<double> fd_hessian_block_1d(const LossBuilder& loss, Parameter<double>& p, const FdSpec& spec) {
  spec.validate();
  if (!p.is_channelwise()) {
    throw ParameterKindError("Hessian block needs a channel-wise parameter; '" + p.name() + "' is dense");
  }
  const std::size_t c = p.value().size();
  if (c > kMaxBlockChannels) {
    throw DomainError("Hessian block limited to " + std::to_string(kMaxBlockChannels) +
                      " channels, '" + p.name() + "' has " + std::to_string(c));
  }
  const double h = spec.h_hessian;
  // Row i: d/d p_i of the FD gradient.
  Tensor<double> raw({c, c});
  for (std::size_t i = 0; i < c; ++i) {
    const Tensor<double> row = stencil_derivative(
        p, i, h, spec.hessian_stencil, [&] { return fd_gradient_one(loss, p, h, spec.hessian_stencil); });
    for (std::size_t j = 0; j < c; ++j) raw[i * c + j] = row[j];
  }

  double scale = 0;
  double asym = 0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      if (!std::isfinite(raw[i * c + j])) throw DomainError("non-finite Hessian block entry");
      scale = std::max(scale, std::abs(raw[i * c + j]));
      asym = std::max(asym, std::abs(raw[i * c + j] - raw[j * c + i]));
    }
  }
  if (asym > 1e-6 * std::max(scale, 1.0)) {
    throw InvariantViolation("FD Hessian block for '" + p.name() + "' is asymmetric by " +
                             std::to_string(asym));
  }
  Tensor<double> sym({c, c});
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) sym[i * c + j] = 0.5 * (raw[i * c + j] + raw[j * c + i]);
  }
  return sym;
}

Tensor<double> row_sums(const Tensor<double>& block) {
  if (block.rank() != 2 || block.extent(0) != block.extent(1)) {
    throw ShapeError("row_sums needs a square matrix, got " + to_string(block.shape()));
  }
  return sum(block, {1}, false);
}

Tensor<double> extract_hessian_diag(const LossBuilder& loss, const Parameter<double>& p) {
  ad::Graph<double> graph;
  const ad::Var<double> l = loss(graph);
  graph.backward(l, true);
  return ad::hessian_diag_1d(l, p);
}

DiagonalityReport diagonality_report(const LossBuilder& loss, Parameter<double>& p, const FdSpec& spec) {
  const Tensor<double> block = fd_hessian_block_1d(loss, p, spec);
  const Tensor<double> extracted = extract_hessian_diag(loss, p);
  const std::size_t c = p.value().size();

  DiagonalityReport r;
  r.name = p.name();
  r.channels = c;
  double diag_mass = 0;
  double off_mass = 0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double v = std::abs(block[i * c + j]);
      if (i == j) {
        r.max_abs_diag = std::max(r.max_abs_diag, v);
        diag_mass += v;
      } else {
        r.max_abs_offdiag = std::max(r.max_abs_offdiag, v);
        off_mass += v;
      }
    }
  }
  r.offdiag_mass_ratio = off_mass / (diag_mass + kTiny);
  r.extracted_vs_rowsum_relerr = max_relative_error(extracted, row_sums(block));
  return r;
}

NewtonResult newton_step_check(const NewtonCase& c, double tolerance) {
  Parameter<double> gamma("gamma", Tensor<double>::vector({c.gamma}), ParamKind::kChannelWise1D);

  ad::Graph<double> graph;
  const ad::Var<double> v = graph.bind(gamma);
  const ad::Var<double> loss = ad::sum_all(ad::scale(ad::mul(v, v), 0.5 * c.a));
  graph.backward(loss, true);
  const Tensor<double> h = ad::hessian_diag_1d(loss, gamma);

  optim::SgdPhConfig cfg;
  cfg.tau = c.tau;
  cfg.tau_so = c.tau_so;
  cfg.alpha = c.momentum;
  cfg.beta_m = c.momentum;
  cfg.eta = c.eta;
  cfg.eps = c.eps;
  optim::TensorMap<double> grads{{"gamma", graph.parameter_gradients().at("gamma")}};
  optim::TensorMap<double> hdiags{{"gamma", h}};
  optim::OptState<double> state;
  Parameter<double>* params[] = {&gamma};
  optim::step<double>(params, grads, hdiags, cfg, state);

  NewtonResult r;
  r.applied = gamma.value()[0] - c.gamma;
  const double g = c.a * c.gamma;
  r.expected = -c.tau * (c.tau_so * g / (std::abs(c.a) + c.eps) + c.eta * c.gamma);
  r.residual = std::abs(r.applied - r.expected);
  r.pass = r.residual <= tolerance;
  return r;
}

namespace {

// One randomized instance: the parameters to check (input included) and the
// loss. Everything the builder captures is owned here.
struct Instance {
  std::unique_ptr<nn::Layer<double>> layer;
  std::unique_ptr<Parameter<double>> input;
  Tensor<double> weighting;
  std::vector<std::int32_t> labels;
  enum class Kind { kLayer, kCrossEntropy, kSumOfSquares } kind = Kind::kLayer;

  std::vector<Parameter<double>*> params() {
    std::vector<Parameter<double>*> out;
    if (layer) out = layer->parameters();
    out.push_back(input.get());
    return out;
  }

  LossBuilder loss() {
    return [this](ad::Graph<double>& g) {
      const ad::Var<double> x = g.bind(*input);
      switch (kind) {
        case Kind::kCrossEntropy:
          return nn::softmax_cross_entropy<double>(x, labels);
        case Kind::kSumOfSquares:
          return nn::sum_of_squares(x);
        case Kind::kLayer:
          break;
      }
      const ad::Var<double> y = layer->forward(g, x, nn::Mode::kProbe);
      return ad::sum_all(ad::mul(y, weighting));
    };
  }
};

Tensor<double> away_from_zero(const Shape& shape, Rng& rng, double margin) {
  Tensor<double> t(shape);
  for (double& v : t.data()) {
    do {
      v = rng.normal();
    } while (std::abs(v) < margin);
  }
  return t;
}

Instance make_instance(const std::string& type, std::size_t index, Rng& rng) {
  Instance inst;
  Shape in_shape;
  const Padding pad = index % 2 == 0 ? Padding::kValid : Padding::kSame;
  if (type == "Linear") {
    inst.layer = std::make_unique<nn::Linear<double>>("fc", 4, 3, true, rng);
    in_shape = {5, 4};
  } else if (type == "Conv2d") {
    inst.layer = std::make_unique<nn::Conv2d<double>>("conv", 2, 3, 3, pad, true,
                                                      ParamKind::kChannelWise1D, rng);
    in_shape = {2, 2, 5, 5};
  } else if (type == "WNConv2d") {
    inst.layer = std::make_unique<nn::WNConv2d<double>>("wn", 2, 3, 3, pad, true,
                                                        ParamKind::kChannelWise1D, rng);
    in_shape = {2, 2, 5, 5};
  } else if (type == "BatchNorm") {
    auto bn = std::make_unique<nn::BatchNorm<double>>("bn", 3);
    for (double& v : bn->gamma().value().data()) v = 0.5 + rng.uniform();
    for (double& v : bn->beta().value().data()) v = rng.normal();
    inst.layer = std::move(bn);
    in_shape = index % 2 == 0 ? Shape{6, 3} : Shape{3, 3, 2, 2};
  } else if (type == "ReLU") {
    inst.layer = std::make_unique<nn::ReLU<double>>();
    in_shape = {4, 5};
  } else if (type == "Flatten") {
    inst.layer = std::make_unique<nn::Flatten<double>>();
    in_shape = {2, 3, 2, 2};
  } else if (type == "SoftmaxCrossEntropy") {
    inst.kind = Instance::Kind::kCrossEntropy;
    in_shape = {5, 4};
    for (std::size_t i = 0; i < 5; ++i) inst.labels.push_back(static_cast<std::int32_t>(rng.below(4)));
  } else if (type == "SumOfSquares") {
    inst.kind = Instance::Kind::kSumOfSquares;
    in_shape = {3, 4};
  } else {
    throw std::invalid_argument("no gradcheck recipe for layer type '" + type + "'");
  }

  Tensor<double> x = type == "ReLU" ? away_from_zero(in_shape, rng, 0.05) : random_tensor(in_shape, rng);
  inst.input = std::make_unique<Parameter<double>>("input", std::move(x), ParamKind::kDense);
  if (inst.kind == Instance::Kind::kLayer) {
    ad::Graph<double> probe;
    const Shape out_shape =
        inst.layer->forward(probe, probe.constant(inst.input->value()), nn::Mode::kProbe).shape();
    inst.weighting = random_tensor(out_shape, rng);
  }
  return inst;
}

}  // namespace

std::vector<std::string> gradcheck_layer_types() {
  return {"Linear", "Conv2d", "WNConv2d", "BatchNorm", "ReLU", "Flatten", "SoftmaxCrossEntropy",
          "SumOfSquares"};
}

std::vector<GradcheckEntry> gradcheck_layer(const std::string& type, std::size_t instances,
                                            std::uint64_t seed, const FdSpec& spec) {
  std::map<std::string, GradcheckEntry> by_param;
  std::vector<std::string> order;
  for (std::size_t k = 0; k < instances; ++k) {
    Rng rng(seed + 7919 * k);
    Instance inst = make_instance(type, k, rng);
    const LossBuilder loss = inst.loss();
    const auto params = inst.params();
    const TensorMap fd = fd_gradient(loss, params, spec);
    const TensorMap ad = autodiff_gradient(loss);
    for (Parameter<double>* p : params) {
      auto [it, fresh] = by_param.try_emplace(p->name(), GradcheckEntry{type, p->name(), 0, 0.0});
      if (fresh) order.push_back(p->name());
      it->second.instances += 1;
      it->second.max_rel_err =
          std::max(it->second.max_rel_err, max_relative_error(ad.at(p->name()), fd.at(p->name())));
    }
  }
  std::vector<GradcheckEntry> out;
  for (const auto& name : order) out.push_back(by_param.at(name));
  return out;
}

std::vector<GradcheckEntry> gradcheck_suite(std::size_t instances, std::uint64_t seed, const FdSpec& spec) {
  std::vector<GradcheckEntry> out;
  for (const auto& type : gradcheck_layer_types()) {
    auto entries = gradcheck_layer(type, instances, seed, spec);
    out.insert(out.end(), entries.begin(), entries.end());
  }
  return out;
}

LossBuilder TinyProblem::loss() {
  return [this](ad::Graph<double>& g) {
    const ad::Var<double> y = model.forward(g, inputs, nn::Mode::kProbe);
    return sum_of_squares ? nn::sum_of_squares(y) : nn::softmax_cross_entropy<double>(y, labels);
  };
}

double relu_margin(nn::Model<double>& model, const Tensor<double>& inputs) {
  ad::Graph<double> graph;
  ad::Var<double> v = graph.constant(inputs);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    nn::Layer<double>& layer = model.layer(i);
    if (layer.type() == "ReLU") {
      for (double z : v.value().data()) margin = std::min(margin, std::abs(z));
    }
    v = layer.forward(graph, v, nn::Mode::kProbe);
  }
  return margin;
}

TinyProblem make_tiny_problem(const std::string& model_name, std::uint64_t seed, std::size_t channels,
                              double margin) {
  constexpr std::size_t kClasses = 3;
  const bool image = model_name.rfind("cnn", 0) == 0;
  const Shape sample = image ? Shape{1, 6, 6} : Shape{6};
  const std::size_t batch = image ? 4 : 8;

  nn::ModelOptions options;
  options.hidden = channels;
  options.channels = channels;
  TinyProblem tp;
  tp.sum_of_squares = model_name == "bn-terminal";
  const std::size_t outputs = tp.sum_of_squares ? channels : kClasses;
  tp.model = nn::build_model<double>(model_name, sample, outputs, options, seed);

  for (std::size_t i = 0; i < batch; ++i) tp.labels.push_back(static_cast<std::int32_t>(i % kClasses));

  Rng rng(seed ^ 0x5eed5eedULL);
  Shape in_shape{batch};
  in_shape.insert(in_shape.end(), sample.begin(), sample.end());
  const std::vector<Parameter<double>*> channelwise = tp.model.channelwise_parameters();
  std::vector<Tensor<double>> initial;
  for (Parameter<double>* p : channelwise) initial.push_back(p->value());
  // Redraw until the loss is smooth over the whole finite-difference stencil.
  for (std::size_t attempt = 0; attempt < kMaxDraws; ++attempt) {
    tp.inputs = random_tensor(in_shape, rng);
    for (std::size_t k = 0; k < channelwise.size(); ++k) {
      Parameter<double>* p = channelwise[k];
      const bool is_gamma = p->name().ends_with(".gamma");
      const bool is_bn = p->name().rfind("bn", 0) == 0;
      auto v = p->value().data();
      // BN gamma leaves 1, WN gamma is scaled around ||V||, shifts leave 0.
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (!is_gamma) {
          v[i] = 0.2 * rng.normal();
        } else {
          v[i] = is_bn ? 0.5 + rng.uniform() : initial[k][i] * (0.8 + 0.4 * rng.uniform());
        }
      }
    }
    if (relu_margin(tp.model, tp.inputs) >= margin) return tp;
  }
  throw InvariantViolation("could not draw a kink-free tiny problem for '" + model_name + "'");
}

VerifyResult verify_model(const std::string& model_name, std::uint64_t seed, const FdSpec& spec) {
  VerifyResult r;
  r.model = model_name;
  r.seed = seed;
  TinyProblem tp = make_tiny_problem(model_name, seed);
  const LossBuilder loss = tp.loss();

  const auto params = tp.model.parameters();
  const TensorMap fd = fd_gradient(loss, params, spec);
  const TensorMap ad = autodiff_gradient(loss);
  for (Parameter<double>* p : params) {
    r.gradient_max_rel_err =
        std::max(r.gradient_max_rel_err, max_relative_error(ad.at(p->name()), fd.at(p->name())));
  }
  if (r.gradient_max_rel_err > 1e-5) {
    r.failures.push_back("gradient relative error " + std::to_string(r.gradient_max_rel_err) + " > 1e-5");
  }

  for (Parameter<double>* p : tp.model.channelwise_parameters()) {
    DiagonalityReport rep = diagonality_report(loss, *p, spec);
    if (rep.extracted_vs_rowsum_relerr > 1e-5) {
      r.failures.push_back(rep.name + ": extracted vs row sums " +
                           std::to_string(rep.extracted_vs_rowsum_relerr) + " > 1e-5");
    }
    if (tp.sum_of_squares && rep.offdiag_mass_ratio > 1e-6) {
      r.failures.push_back(rep.name + ": off-diagonal mass ratio " +
                           std::to_string(rep.offdiag_mass_ratio) + " > 1e-6");
    }
    r.reports.push_back(std::move(rep));
  }
  return r;
}

}  // namespace sgdph::oracle
