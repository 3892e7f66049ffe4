#include "sgdph/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sgdph/errors.hpp"

namespace sgdph::optim {

void SgdPhConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(tau > 0, "tau must be > 0");
  require(tau_so > 0, "tau_so must be > 0");
  require(alpha > 0 && alpha < 1, "alpha must lie in (0, 1)");
  require(beta_m > 0 && beta_m < 1, "beta_m must lie in (0, 1)");
  require(eta >= 0, "eta must be >= 0");
  require(eps >= 0, "eps must be >= 0");
}

template <class T>
ParamState<T>& OptState<T>::state_for(const Parameter<T>& p) {
  auto it = states_.find(p.name());
  if (it == states_.end()) {
    ParamState<T> s;
    s.m_g = Tensor<T>(p.value().shape());
    if (p.is_channelwise()) s.m_h = Tensor<T>(p.value().shape());
    it = states_.emplace(p.name(), std::move(s)).first;
  }
  return it->second;
}

template <class T>
const ParamState<T>* OptState<T>::find(const std::string& name) const {
  auto it = states_.find(name);
  return it == states_.end() ? nullptr : &it->second;
}

namespace {

template <class T>
void blend_into(Tensor<T>& memory, const Tensor<T>& fresh, T factor, MomentumConvention convention,
                const char* what) {
  if (memory.shape() != fresh.shape()) {
    throw ShapeError(std::string(what) + " shape " + to_string(fresh.shape()) +
                     " does not match momentum " + to_string(memory.shape()));
  }
  // Weight on the new term.
  const T w_new = convention == MomentumConvention::kEma ? factor : T(1) - factor;
  const T w_old = T(1) - w_new;
  auto m = memory.data();
  auto x = fresh.data();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = w_old * m[i] + w_new * x[i];
}

template <class T>
const Tensor<T>& lookup(const TensorMap<T>& map, const Parameter<T>& p, const char* what) {
  auto it = map.find(p.name());
  if (it == map.end()) throw std::invalid_argument(std::string("missing ") + what + " for '" + p.name() + "'");
  if (it->second.shape() != p.value().shape()) {
    throw ShapeError(std::string(what) + " for '" + p.name() + "' has shape " +
                     to_string(it->second.shape()) + ", parameter " + to_string(p.value().shape()));
  }
  return it->second;
}

template <class T>
void apply_update(Parameter<T>& p, const Tensor<T>& direction, const SgdPhConfig& cfg) {
  const T tau = static_cast<T>(cfg.tau);
  const T eta = static_cast<T>(cfg.eta);
  auto w = p.value().data();
  auto d = direction.data();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= tau * (d[i] + eta * w[i]);
}

}  // namespace

template <class T>
Tensor<T> rectify(const Tensor<T>& h, T eps) {
  Tensor<T> out(h.shape());
  auto o = out.data();
  auto x = h.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(x[i]) + eps;
  return out;
}

template <class T>
const Tensor<T>& update_hessian_momentum(ParamState<T>& state, const Tensor<T>& h_tilde, T alpha,
                                         MomentumConvention convention) {
  if (!state.m_h) state.m_h = Tensor<T>(h_tilde.shape());
  blend_into(*state.m_h, h_tilde, alpha, convention, "rectified Hessian diagonal");
  ++state.hessian_updates;
  return *state.m_h;
}

template <class T>
const Tensor<T>& update_grad_momentum(ParamState<T>& state, const Tensor<T>& g, T beta_m,
                                      MomentumConvention convention) {
  blend_into(state.m_g, g, beta_m, convention, "gradient");
  ++state.grad_updates;
  return state.m_g;
}

template <class T>
Tensor<T> direction_1d(ParamState<T>& state, const Tensor<T>& g, const Tensor<T>& h,
                       const SgdPhConfig& cfg) {
  if (g.rank() != 1 || h.shape() != g.shape()) {
    throw ShapeError("channel-wise direction needs matching 1-D gradient and Hessian diagonal, got " +
                     to_string(g.shape()) + " and " + to_string(h.shape()));
  }
  const Tensor<T> h_tilde = rectify(h, static_cast<T>(cfg.eps));
  const Tensor<T>& m_h = update_hessian_momentum(state, h_tilde, static_cast<T>(cfg.alpha), cfg.convention);
  Tensor<T> d_so(m_h.shape());
  for (std::size_t i = 0; i < d_so.size(); ++i) {
    if (!(m_h[i] > T(0))) {
      throw InvariantViolation("Hessian momentum entry " + std::to_string(i) +
                               " is not positive; step abandoned");
    }
    d_so[i] = T(1) / m_h[i];
  }
  const Tensor<T>& m_g = update_grad_momentum(state, g, static_cast<T>(cfg.beta_m), cfg.convention);
  const T tau_so = static_cast<T>(cfg.tau_so);
  Tensor<T> out(g.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = tau_so * d_so[i] * m_g[i];
  return out;
}

template <class T>
Tensor<T> direction_dense(ParamState<T>& state, const Tensor<T>& g, const SgdPhConfig& cfg) {
  return update_grad_momentum(state, g, static_cast<T>(cfg.beta_m), cfg.convention);
}

template <class T>
void step(std::span<Parameter<T>* const> params, const TensorMap<T>& grads,
          const TensorMap<T>& hdiags, const SgdPhConfig& cfg, OptState<T>& state) {
  // Validate everything before touching any weight.
  for (Parameter<T>* p : params) {
    lookup(grads, *p, "gradient");
    if (p->is_channelwise()) lookup(hdiags, *p, "Hessian diagonal");
  }
  for (Parameter<T>* p : params) {
    ParamState<T>& s = state.state_for(*p);
    const Tensor<T>& g = grads.at(p->name());
    const Tensor<T> d = p->is_channelwise() ? direction_1d(s, g, hdiags.at(p->name()), cfg)
                                            : direction_dense(s, g, cfg);
    apply_update(*p, d, cfg);
  }
  state.count_step();
}

template <class T>
void sgdm_step(std::span<Parameter<T>* const> params, const TensorMap<T>& grads,
               const SgdPhConfig& cfg, OptState<T>& state) {
  for (Parameter<T>* p : params) lookup(grads, *p, "gradient");
  for (Parameter<T>* p : params) {
    ParamState<T>& s = state.state_for(*p);
    const Tensor<T> d = direction_dense(s, grads.at(p->name()), cfg);
    apply_update(*p, d, cfg);
  }
  state.count_step();
}

template <class T>
std::vector<HessianStats> hessian_stats(const OptState<T>& state) {
  std::vector<HessianStats> out;
  for (const auto& [name, s] : state.entries()) {
    if (!s.m_h) continue;
    HessianStats st{name, std::numeric_limits<double>::infinity(), 0.0,
                    -std::numeric_limits<double>::infinity()};
    double total = 0;
    for (T v : s.m_h->data()) {
      st.min = std::min(st.min, static_cast<double>(v));
      st.max = std::max(st.max, static_cast<double>(v));
      total += static_cast<double>(v);
    }
    st.mean = total / static_cast<double>(s.m_h->size());
    out.push_back(std::move(st));
  }
  return out;
}

double scheduled_lr(double base, double factor, std::size_t every, std::size_t epoch) {
  if (every == 0) return base;
  return base * std::pow(factor, static_cast<double>(epoch / every));
}

std::size_t default_decay_interval(std::size_t epochs) { return std::max<std::size_t>(1, epochs * 3 / 10); }

#define SGDPH_INSTANTIATE(T)                                                                       \
  template class OptState<T>;                                                                      \
  template Tensor<T> rectify(const Tensor<T>&, T);                                                 \
  template const Tensor<T>& update_hessian_momentum(ParamState<T>&, const Tensor<T>&, T,           \
                                                    MomentumConvention);                           \
  template const Tensor<T>& update_grad_momentum(ParamState<T>&, const Tensor<T>&, T,              \
                                                 MomentumConvention);                              \
  template Tensor<T> direction_1d(ParamState<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                  const SgdPhConfig&);                                             \
  template Tensor<T> direction_dense(ParamState<T>&, const Tensor<T>&, const SgdPhConfig&);        \
  template void step(std::span<Parameter<T>* const>, const TensorMap<T>&, const TensorMap<T>&,     \
                     const SgdPhConfig&, OptState<T>&);                                            \
  template void sgdm_step(std::span<Parameter<T>* const>, const TensorMap<T>&, const SgdPhConfig&, \
                          OptState<T>&);                                                           \
  template std::vector<HessianStats> hessian_stats(const OptState<T>&);

SGDPH_INSTANTIATE(float)
SGDPH_INSTANTIATE(double)

#undef SGDPH_INSTANTIATE

}  // namespace sgdph::optim
