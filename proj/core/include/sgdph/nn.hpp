#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sgdph/autodiff.hpp"
#include "sgdph/parameter.hpp"
#include "sgdph/rng.hpp"
#include "sgdph/tensor.hpp"

namespace sgdph::nn {

// kTrain uses batch statistics and updates BN running statistics; kProbe
// uses batch statistics without touching any state (finite-difference
// oracles evaluate the loss this way); kEval uses running statistics.
enum class Mode { kTrain, kProbe, kEval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormStatMomentum = 0.1;
inline constexpr double kWeightNormFloor = 1e-12;

template <class T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string type() const = 0;
  virtual ad::Var<T> forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) = 0;
  virtual std::unique_ptr<Layer<T>> clone() const = 0;

  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  // Non-trainable state (BN running statistics), by qualified name.
  virtual std::vector<std::pair<std::string, Tensor<T>*>> buffers() { return {}; }
};

// y = x W + b, W stored [in, out].
template <class T>
class Linear final : public Layer<T> {
 public:
  Linear(const std::string& name, std::size_t in, std::size_t out, bool bias, Rng& rng);

  std::string type() const override { return "Linear"; }
  ad::Var<T> forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Linear>(*this); }
  std::vector<Parameter<T>*> parameters() override;

  Parameter<T>& weight() { return weight_; }
  std::optional<Parameter<T>>& bias() { return bias_; }

 private:
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
};

template <class T>
class Conv2d final : public Layer<T> {
 public:
  // bias_kind decides whether the bias joins the second-order update.
  Conv2d(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
         Padding padding, bool bias, ParamKind bias_kind, Rng& rng);

  std::string type() const override { return "Conv2d"; }
  ad::Var<T> forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }
  std::vector<Parameter<T>*> parameters() override;

  Parameter<T>& weight() { return weight_; }
  std::optional<Parameter<T>>& bias() { return bias_; }
  Padding padding() const { return padding_; }

 private:
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
  Padding padding_;
};

// Convolution with kernel W_i = gamma_i * V_i / ||V_i||_2 per output channel.
// gamma (and the optional bias) are channel-wise; V is dense.
template <class T>
class WNConv2d final : public Layer<T> {
 public:
  // Draws V like a Conv2d kernel, then sets gamma_i = ||V_i|| so the initial
  // effective kernel equals the plain initialization.
  WNConv2d(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
           Padding padding, bool bias, ParamKind bias_kind, Rng& rng);
  // From explicit values (tests, equivalence checks).
  WNConv2d(const std::string& name, Tensor<T> v, Tensor<T> gamma, std::optional<Tensor<T>> bias,
           Padding padding, ParamKind bias_kind = ParamKind::kChannelWise1D);

  std::string type() const override { return "WNConv2d"; }
  ad::Var<T> forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<WNConv2d>(*this); }
  std::vector<Parameter<T>*> parameters() override;

  Parameter<T>& v() { return v_; }
  Parameter<T>& gamma() { return gamma_; }
  std::optional<Parameter<T>>& bias() { return bias_; }
  Padding padding() const { return padding_; }

 private:
  Parameter<T> v_;
  Parameter<T> gamma_;
  std::optional<Parameter<T>> bias_;
  Padding padding_;
};

// Per-channel normalize, scale and shift over [N, C] or [N, C, H, W] input
// with population batch statistics.
template <class T>
class BatchNorm final : public Layer<T> {
 public:
  BatchNorm(const std::string& name, std::size_t channels, T eps = T(kBatchNormEps),
            T stat_momentum = T(kBatchNormStatMomentum));

  std::string type() const override { return "BatchNorm"; }
  ad::Var<T> forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }
  std::vector<Parameter<T>*> parameters() override { return {&gamma_, &beta_}; }
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() override;

  std::size_t channels() const { return gamma_.value().size(); }
  T eps() const { return eps_; }
  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }

  // r <- (1 - stat_momentum) r + stat_momentum * batch statistic.
  void update_running_stats(const Tensor<T>& batch_mean, const Tensor<T>& batch_var);

 private:
  std::string name_;
  Parameter<T> gamma_;
  Parameter<T> beta_;
  T eps_;
  T stat_momentum_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

template <class T>
class ReLU final : public Layer<T> {
 public:
  std::string type() const override { return "ReLU"; }
  ad::Var<T> forward(ad::Graph<T>&, const ad::Var<T>& x, Mode) override { return ad::relu(x); }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(*this); }
};

// [N, ...] -> [N, prod(...)].
template <class T>
class Flatten final : public Layer<T> {
 public:
  std::string type() const override { return "Flatten"; }
  ad::Var<T> forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten>(*this); }
};

template <class T>
ad::Var<T> bn_forward(BatchNorm<T>& layer, ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode);

// Effective kernel of a weight-normalized convolution, recorded on the tape
// so that gradients reach both gamma and V. Throws DegenerateNormError when
// some ||V_i|| < kWeightNormFloor.
template <class T>
ad::Var<T> wn_reparam(WNConv2d<T>& layer, ad::Graph<T>& graph);

// Mean over the batch of -log softmax(logits)[label].
template <class T>
ad::Var<T> softmax_cross_entropy(const ad::Var<T>& logits, std::span<const std::int32_t> labels);

// 0.5 * sum(y^2).
template <class T>
ad::Var<T> sum_of_squares(const ad::Var<T>& y);

template <class T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const std::int32_t> labels);

struct ModelOptions {
  std::size_t hidden = 32;         // MLP width
  std::size_t channels = 8;        // conv channels per block
  std::size_t kernel = 3;          // conv kernel extent
  bool bias_second_order = true;   // conv biases tagged channel-wise
};

template <class T>
class Model {
 public:
  Model() = default;
  explicit Model(std::string name) : name_(std::move(name)) {}
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const std::string& name() const { return name_; }

  // Appends a layer; throws if one of its parameter names is already taken.
  void add(std::unique_ptr<Layer<T>> layer);

  ad::Var<T> forward(ad::Graph<T>& graph, const ad::Var<T>& x, Mode mode);
  ad::Var<T> forward(ad::Graph<T>& graph, const Tensor<T>& x, Mode mode) {
    return forward(graph, graph.constant(x), mode);
  }

  // Every parameter exactly once, in layer order.
  std::vector<Parameter<T>*> parameters();
  std::vector<Parameter<T>*> channelwise_parameters();
  Parameter<T>& parameter(const std::string& name);
  std::vector<std::pair<std::string, Tensor<T>*>> buffers();

  std::size_t layer_count() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }

 private:
  std::string name_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// Architectures by name:
//   mlp        Linear-ReLU-Linear-ReLU-Linear, no channel-wise parameters
//   mlp-bn     Linear-BN-ReLU-Linear-BN-ReLU-Linear
//   cnn-bn     [Conv-BN-ReLU] x2, Flatten, Linear
//   cnn-wn     [WNConv-ReLU] x2, Flatten, Linear
//   bn-terminal Linear-ReLU-Linear-BN (BN output is the model output)
// sample_shape excludes the batch axis: [D] for vectors, [C, H, W] for images.
template <class T>
Model<T> build_model(const std::string& name, const Shape& sample_shape, std::size_t outputs,
                     const ModelOptions& options, std::uint64_t seed);

std::vector<std::string> model_names();

}  // namespace sgdph::nn
