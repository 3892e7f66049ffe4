#include "sgdph/nn.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "sgdph/errors.hpp"

namespace sgdph::nn {

namespace {

// Kaiming-uniform, fan-in mode with the ReLU gain: U(-sqrt(6/fan_in), +).
template <class T>
Tensor<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Tensor<T> channel_norms(const Tensor<T>& v) {
  const std::size_t c_out = v.extent(0);
  const std::size_t per = v.size() / c_out;
  Tensor<T> out(Shape{c_out});
  for (std::size_t i = 0; i < c_out; ++i) {
    T acc = 0;
    for (std::size_t k = 0; k < per; ++k) acc += v[i * per + k] * v[i * per + k];
    out[i] = std::sqrt(acc);
  }
  return out;
}

template <class T>
ad::Var<T> add_channel_bias(const ad::Var<T>& y, ad::Graph<T>& graph, const Parameter<T>& bias) {
  const std::size_t c = bias.value().size();
  return ad::add(y, ad::reshape(graph.bind(bias), Shape{1, c, 1, 1}));
}

}  // namespace

template <class T>
Linear<T>::Linear(const std::string& name, std::size_t in, std::size_t out, bool bias, Rng& rng)
    : weight_(name + ".weight", kaiming_uniform<T>(Shape{in, out}, in, rng), ParamKind::kDense) {
  if (bias) bias_.emplace(name + ".bias", Tensor<T>(Shape{out}), ParamKind::kDense);
}

template <class T>
ad::Var<T> Linear<T>::forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode) {
  if (x.value().rank() != 2) {
    throw ShapeError("Linear expects [N, features], got " + to_string(x.shape()));
  }
  ad::Var<T> y = ad::matmul(x, graph.bind(weight_));
  if (bias_) y = ad::add(y, graph.bind(*bias_));
  return y;
}

template <class T>
std::vector<Parameter<T>*> Linear<T>::parameters() {
  std::vector<Parameter<T>*> out{&weight_};
  if (bias_) out.push_back(&*bias_);
  return out;
}

template <class T>
Conv2d<T>::Conv2d(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
                  Padding padding, bool bias, ParamKind bias_kind, Rng& rng)
    : weight_(name + ".weight",
              kaiming_uniform<T>(Shape{c_out, c_in, kernel, kernel}, c_in * kernel * kernel, rng),
              ParamKind::kDense),
      padding_(padding) {
  if (bias) bias_.emplace(name + ".bias", Tensor<T>(Shape{c_out}), bias_kind);
}

template <class T>
ad::Var<T> Conv2d<T>::forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode) {
  ad::Var<T> y = ad::conv2d(x, graph.bind(weight_), padding_);
  if (bias_) y = add_channel_bias(y, graph, *bias_);
  return y;
}

template <class T>
std::vector<Parameter<T>*> Conv2d<T>::parameters() {
  std::vector<Parameter<T>*> out{&weight_};
  if (bias_) out.push_back(&*bias_);
  return out;
}

template <class T>
WNConv2d<T>::WNConv2d(const std::string& name, std::size_t c_in, std::size_t c_out,
                      std::size_t kernel, Padding padding, bool bias, ParamKind bias_kind, Rng& rng)
    : v_(name + ".v",
         kaiming_uniform<T>(Shape{c_out, c_in, kernel, kernel}, c_in * kernel * kernel, rng),
         ParamKind::kDense),
      gamma_(name + ".gamma", channel_norms(v_.value()), ParamKind::kChannelWise1D),
      padding_(padding) {
  for (T n : gamma_.value().data()) {
    if (!(n >= T(kWeightNormFloor))) {
      throw DegenerateNormError("initial weight-norm direction of '" + name + "' has zero norm");
    }
  }
  if (bias) bias_.emplace(name + ".bias", Tensor<T>(Shape{c_out}), bias_kind);
}

template <class T>
WNConv2d<T>::WNConv2d(const std::string& name, Tensor<T> v, Tensor<T> gamma,
                      std::optional<Tensor<T>> bias, Padding padding, ParamKind bias_kind)
    : v_(name + ".v", std::move(v), ParamKind::kDense),
      gamma_(name + ".gamma", std::move(gamma), ParamKind::kChannelWise1D),
      padding_(padding) {
  if (v_.value().rank() != 4 || gamma_.value().size() != v_.value().extent(0)) {
    throw ShapeError("WNConv2d: V " + to_string(v_.value().shape()) + " and gamma " +
                     to_string(gamma_.value().shape()) + " disagree");
  }
  if (bias) bias_.emplace(name + ".bias", std::move(*bias), bias_kind);
}

template <class T>
ad::Var<T> WNConv2d<T>::forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode) {
  ad::Var<T> y = ad::conv2d(x, wn_reparam(*this, graph), padding_);
  if (bias_) y = add_channel_bias(y, graph, *bias_);
  return y;
}

template <class T>
std::vector<Parameter<T>*> WNConv2d<T>::parameters() {
  std::vector<Parameter<T>*> out{&v_, &gamma_};
  if (bias_) out.push_back(&*bias_);
  return out;
}

template <class T>
ad::Var<T> wn_reparam(WNConv2d<T>& layer, ad::Graph<T>& graph) {
  const Tensor<T>& v_value = layer.v().value();
  const Tensor<T> norms = channel_norms(v_value);
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (!(norms[i] >= T(kWeightNormFloor))) {
      throw DegenerateNormError("'" + layer.v().name() + "' channel " + std::to_string(i) +
                                " has norm below the floor");
    }
  }
  const std::size_t c_out = v_value.extent(0);
  ad::Var<T> v = graph.bind(layer.v());
  ad::Var<T> gamma = graph.bind(layer.gamma());
  ad::Var<T> norm = ad::sqrt(ad::sum(ad::mul(v, v), Axes{1, 2, 3}, true));
  return ad::mul(ad::div(v, norm), ad::reshape(gamma, Shape{c_out, 1, 1, 1}));
}

template <class T>
BatchNorm<T>::BatchNorm(const std::string& name, std::size_t channels, T eps, T stat_momentum)
    : name_(name),
      gamma_(name + ".gamma", Tensor<T>(Shape{channels}, T(1)), ParamKind::kChannelWise1D),
      beta_(name + ".beta", Tensor<T>(Shape{channels}, T(0)), ParamKind::kChannelWise1D),
      eps_(eps),
      stat_momentum_(stat_momentum),
      running_mean_(Shape{channels}, T(0)),
      running_var_(Shape{channels}, T(1)) {}

template <class T>
void BatchNorm<T>::update_running_stats(const Tensor<T>& batch_mean, const Tensor<T>& batch_var) {
  const Shape flat{channels()};
  running_mean_ = add(scale(running_mean_, T(1) - stat_momentum_),
                      scale(batch_mean.reshaped(flat), stat_momentum_));
  running_var_ = add(scale(running_var_, T(1) - stat_momentum_),
                     scale(batch_var.reshaped(flat), stat_momentum_));
}

template <class T>
ad::Var<T> BatchNorm<T>::forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) {
  return bn_forward(*this, graph, x, mode);
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> BatchNorm<T>::buffers() {
  return {{name_ + ".running_mean", &running_mean_}, {name_ + ".running_var", &running_var_}};
}

template <class T>
ad::Var<T> bn_forward(BatchNorm<T>& layer, ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) {
  const Shape& xs = x.shape();
  const std::size_t c = layer.channels();
  if ((xs.size() != 2 && xs.size() != 4) || xs[1] != c) {
    throw ShapeError("BatchNorm over " + std::to_string(c) + " channels got input " + to_string(xs));
  }
  const Axes axes = xs.size() == 2 ? Axes{0} : Axes{0, 2, 3};
  const Shape pshape = xs.size() == 2 ? Shape{1, c} : Shape{1, c, 1, 1};

  ad::Var<T> gamma = ad::reshape(graph.bind(layer.gamma()), pshape);
  ad::Var<T> beta = ad::reshape(graph.bind(layer.beta()), pshape);

  ad::Var<T> xhat;
  if (mode == Mode::kEval) {
    const Tensor<T> mean = layer.running_mean().reshaped(pshape);
    const Tensor<T> inv = recip(sqrt(add_scalar(layer.running_var(), layer.eps()))).reshaped(pshape);
    xhat = ad::mul(ad::sub(x, mean), inv);
  } else {
    std::size_t m = 1;
    for (auto ax : axes) m *= xs[ax];
    const T inv_m = T(1) / static_cast<T>(m);
    ad::Var<T> mean = ad::scale(ad::sum(x, axes, true), inv_m);
    ad::Var<T> centered = ad::sub(x, mean);
    ad::Var<T> var = ad::scale(ad::sum(ad::mul(centered, centered), axes, true), inv_m);
    ad::Var<T> inv_std = ad::recip(ad::sqrt(ad::add_scalar(var, layer.eps())));
    xhat = ad::mul(centered, inv_std);
    if (mode == Mode::kTrain) layer.update_running_stats(mean.value(), var.value());
  }
  return ad::add(ad::mul(xhat, gamma), beta);
}

template <class T>
ad::Var<T> Flatten<T>::forward(ad::Graph<T>&, const ad::Var<T>& x, Mode) {
  const Shape& s = x.shape();
  if (s.size() == 2) return x;
  return ad::reshape(x, Shape{s[0], element_count(s) / s[0]});
}

template <class T>
ad::Var<T> softmax_cross_entropy(const ad::Var<T>& logits, std::span<const std::int32_t> labels) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 2) throw ShapeError("logits must be [N, K], got " + to_string(z.shape()));
  const std::size_t n = z.extent(0), k = z.extent(1);
  if (labels.size() != n) {
    throw ShapeError("got " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " logit rows");
  }
  Tensor<T> row_max(Shape{n, 1});
  Tensor<T> one_hot(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(k) + ")");
    }
    T mx = z[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[i * k + j]);
    row_max[i] = mx;
    one_hot[i * k + static_cast<std::size_t>(labels[i])] = T(1);
  }
  // The shift is a constant: softmax is invariant to it.
  ad::Var<T> shifted = ad::sub(logits, row_max);
  ad::Var<T> lse = ad::log(ad::sum(ad::exp(shifted), Axes{1}, true));
  ad::Var<T> log_prob = ad::sub(shifted, lse);
  ad::Var<T> picked = ad::sum_all(ad::mul(log_prob, one_hot));
  return ad::scale(picked, T(-1) / static_cast<T>(n));
}

template <class T>
ad::Var<T> sum_of_squares(const ad::Var<T>& y) {
  return ad::scale(ad::sum_all(ad::mul(y, y)), T(0.5));
}

template <class T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    }
    if (static_cast<std::int32_t>(best) == labels[i]) ++correct;
  }
  return correct;
}

template <class T>
Model<T>::Model(const Model& other) : name_(other.name_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <class T>
Model<T>& Model<T>::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <class T>
void Model<T>::add(std::unique_ptr<Layer<T>> layer) {
  std::set<std::string> names;
  for (auto* p : parameters()) names.insert(p->name());
  for (auto* p : layer->parameters()) {
    if (!names.insert(p->name()).second) {
      throw std::invalid_argument("duplicate parameter name '" + p->name() + "'");
    }
  }
  layers_.push_back(std::move(layer));
}

template <class T>
ad::Var<T> Model<T>::forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) {
  ad::Var<T> h = x;
  for (auto& l : layers_) h = l->forward(graph, h, mode);
  return h;
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& l : layers_) {
    for (auto* p : l->parameters()) out.push_back(p);
  }
  return out;
}

template <class T>
std::vector<Parameter<T>*> Model<T>::channelwise_parameters() {
  std::vector<Parameter<T>*> out;
  for (auto* p : parameters()) {
    if (p->is_channelwise()) out.push_back(p);
  }
  return out;
}

template <class T>
Parameter<T>& Model<T>::parameter(const std::string& name) {
  for (auto* p : parameters()) {
    if (p->name() == name) return *p;
  }
  throw std::out_of_range("model has no parameter '" + name + "'");
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::buffers() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (auto& l : layers_) {
    for (auto& b : l->buffers()) out.push_back(b);
  }
  return out;
}

std::vector<std::string> model_names() { return {"mlp", "mlp-bn", "cnn-bn", "cnn-wn", "bn-terminal"}; }

template <class T>
Model<T> build_model(const std::string& name, const Shape& sample_shape, std::size_t outputs,
                     const ModelOptions& options, std::uint64_t seed) {
  Rng rng(seed);
  Model<T> model(name);
  const std::size_t features = element_count(sample_shape);
  const std::size_t h = options.hidden;
  const ParamKind bias_kind =
      options.bias_second_order ? ParamKind::kChannelWise1D : ParamKind::kDense;

  if (name == "mlp" || name == "mlp-bn" || name == "bn-terminal") {
    const bool bn = name == "mlp-bn";
    model.add(std::make_unique<Flatten<T>>());
    if (name == "bn-terminal") {
      model.add(std::make_unique<Linear<T>>("fc1", features, h, true, rng));
      model.add(std::make_unique<ReLU<T>>());
      model.add(std::make_unique<Linear<T>>("fc2", h, outputs, false, rng));
      model.add(std::make_unique<BatchNorm<T>>("bn", outputs));
      return model;
    }
    model.add(std::make_unique<Linear<T>>("fc1", features, h, !bn, rng));
    if (bn) model.add(std::make_unique<BatchNorm<T>>("bn1", h));
    model.add(std::make_unique<ReLU<T>>());
    model.add(std::make_unique<Linear<T>>("fc2", h, h, !bn, rng));
    if (bn) model.add(std::make_unique<BatchNorm<T>>("bn2", h));
    model.add(std::make_unique<ReLU<T>>());
    model.add(std::make_unique<Linear<T>>("fc3", h, outputs, true, rng));
    return model;
  }

  if (name == "cnn-bn" || name == "cnn-wn") {
    if (sample_shape.size() != 3) {
      throw ConfigError("model '" + name + "' needs [C, H, W] samples, got " +
                        to_string(sample_shape));
    }
    const std::size_t k = options.kernel;
    const std::size_t c = options.channels;
    if (sample_shape[1] < 2 * k - 1 || sample_shape[2] < 2 * k - 1) {
      throw ConfigError("input " + to_string(sample_shape) + " too small for two " +
                        std::to_string(k) + "x" + std::to_string(k) + " valid convolutions");
    }
    const std::size_t oh = sample_shape[1] - 2 * (k - 1);
    const std::size_t ow = sample_shape[2] - 2 * (k - 1);
    std::size_t c_in = sample_shape[0];
    for (int block = 1; block <= 2; ++block) {
      const std::string id = std::to_string(block);
      if (name == "cnn-bn") {
        model.add(std::make_unique<Conv2d<T>>("conv" + id, c_in, c, k, Padding::kValid, false,
                                              bias_kind, rng));
        model.add(std::make_unique<BatchNorm<T>>("bn" + id, c));
      } else {
        model.add(std::make_unique<WNConv2d<T>>("conv" + id, c_in, c, k, Padding::kValid, true,
                                                bias_kind, rng));
      }
      model.add(std::make_unique<ReLU<T>>());
      c_in = c;
    }
    model.add(std::make_unique<Flatten<T>>());
    model.add(std::make_unique<Linear<T>>("fc", c * oh * ow, outputs, true, rng));
    return model;
  }

  throw ConfigError("unknown model '" + name + "'");
}

#define SGDPH_INSTANTIATE(T)                                                                  \
  template class Linear<T>;                                                                   \
  template class Conv2d<T>;                                                                   \
  template class WNConv2d<T>;                                                                 \
  template class BatchNorm<T>;                                                                \
  template class Flatten<T>;                                                                  \
  template class Model<T>;                                                                    \
  template ad::Var<T> bn_forward(BatchNorm<T>&, ad::Graph<T>&, const ad::Var<T>&, Mode);      \
  template ad::Var<T> wn_reparam(WNConv2d<T>&, ad::Graph<T>&);                                \
  template ad::Var<T> softmax_cross_entropy(const ad::Var<T>&, std::span<const std::int32_t>); \
  template ad::Var<T> sum_of_squares(const ad::Var<T>&);                                      \
  template std::size_t count_correct(const Tensor<T>&, std::span<const std::int32_t>);        \
  template Model<T> build_model(const std::string&, const Shape&, std::size_t,                \
                                const ModelOptions&, std::uint64_t);

SGDPH_INSTANTIATE(float)
SGDPH_INSTANTIATE(double)

#undef SGDPH_INSTANTIATE

}  // namespace sgdph::nn
