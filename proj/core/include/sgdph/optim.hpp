#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sgdph/parameter.hpp"
#include "sgdph/tensor.hpp"

namespace sgdph::optim {

// kEma puts the momentum factor on the NEW term, M <- (1 - a) M + a X,
// which is how the SGD-PH update is written. kClassical keeps the factor on
// the old term, M <- a M + (1 - a) X.
enum class MomentumConvention { kEma, kClassical };

struct SgdPhConfig {
  double tau = 0.01;      // global learning rate
  double tau_so = 1e-3;   // second-order learning rate (not scheduled)
  double alpha = 0.9;     // Hessian momentum factor
  double beta_m = 0.9;    // gradient momentum factor
  double eta = 0.0;       // weight decay
  double eps = 1e-4;      // rectification floor
  MomentumConvention convention = MomentumConvention::kEma;

  // Throws ConfigError on out-of-range values.
  void validate() const;
};

template <class T>
struct ParamState {
  Tensor<T> m_g;                 // gradient momentum, parameter shape
  std::optional<Tensor<T>> m_h;  // Hessian momentum, channel-wise parameters only
  std::size_t grad_updates = 0;
  std::size_t hessian_updates = 0;
};

template <class T>
class OptState {
 public:
  // Zero-initialized on first use.
  ParamState<T>& state_for(const Parameter<T>& p);
  const ParamState<T>* find(const std::string& name) const;
  const std::map<std::string, ParamState<T>>& entries() const { return states_; }
  std::size_t steps() const { return steps_; }
  void count_step() { ++steps_; }

 private:
  std::map<std::string, ParamState<T>> states_;
  std::size_t steps_ = 0;
};

template <class T>
using TensorMap = std::map<std::string, Tensor<T>>;

// |h| + eps per entry: the absolute value of a diagonal block plus eps I.
template <class T>
Tensor<T> rectify(const Tensor<T>& h, T eps);

template <class T>
const Tensor<T>& update_hessian_momentum(ParamState<T>& state, const Tensor<T>& h_tilde, T alpha,
                                         MomentumConvention convention = MomentumConvention::kEma);

template <class T>
const Tensor<T>& update_grad_momentum(ParamState<T>& state, const Tensor<T>& g, T beta_m,
                                      MomentumConvention convention = MomentumConvention::kEma);

// Second-order direction of a channel-wise parameter, in order: rectify h,
// update M_H, D_SO = 1 / M_H, update M_G, return tau_so * D_SO * M_G.
// Throws InvariantViolation if some M_H entry is not positive.
template <class T>
Tensor<T> direction_1d(ParamState<T>& state, const Tensor<T>& g, const Tensor<T>& h,
                       const SgdPhConfig& cfg);

// Updates M_G and returns it.
template <class T>
Tensor<T> direction_dense(ParamState<T>& state, const Tensor<T>& g, const SgdPhConfig& cfg);

// One SGD-PH step: per parameter pick the direction by kind, add eta * W,
// then W -= tau * direction. hdiags must cover every channel-wise parameter.
template <class T>
void step(std::span<Parameter<T>* const> params, const TensorMap<T>& grads,
          const TensorMap<T>& hdiags, const SgdPhConfig& cfg, OptState<T>& state);

// SGDM baseline: the dense branch for every parameter.
template <class T>
void sgdm_step(std::span<Parameter<T>* const> params, const TensorMap<T>& grads,
               const SgdPhConfig& cfg, OptState<T>& state);

struct HessianStats {
  std::string name;
  double min = 0;
  double mean = 0;
  double max = 0;
};

// Summary of every stored M_H, in parameter-name order.
template <class T>
std::vector<HessianStats> hessian_stats(const OptState<T>& state);

// base * factor^(epoch / every).
double scheduled_lr(double base, double factor, std::size_t every, std::size_t epoch);

// Step-decay interval used when none is configured: 3/10 of the run, >= 1.
std::size_t default_decay_interval(std::size_t epochs);

}  // namespace sgdph::optim
