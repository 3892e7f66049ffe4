#include "sgdph/autodiff.hpp"

#include <cassert>

#include "sgdph/errors.hpp"

namespace sgdph::ad {

const char* to_string(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kSqrt: return "sqrt";
    case Op::kRecip: return "recip";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kRelu: return "relu";
    case Op::kAbs: return "abs";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kConv2d: return "conv2d";
    case Op::kConv2dGradInput: return "conv2d_grad_input";
    case Op::kConv2dGradWeight: return "conv2d_grad_weight";
    case Op::kSum: return "sum";
    case Op::kBroadcastTo: return "broadcast_to";
    case Op::kSumTo: return "sum_to";
    case Op::kReshape: return "reshape";
  }
  return "unknown";
}

template <class T>
const Tensor<T>& Var<T>::value() const {
  return graph_->node(id_).value;
}

template <class T>
bool Var<T>::requires_grad() const {
  return graph_->node(id_).requires_grad;
}

template <class T>
Var<T> Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node<T> n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node<T> n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Graph<T>::record(Op op, std::vector<NodeId> inputs, Tensor<T> value, Attr attr) {
  Node<T> n;
  n.op = op;
  for (NodeId in : inputs) {
    assert(in < nodes_.size());
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.attr = std::move(attr);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Graph<T>::bind(const Parameter<T>& p) {
  if (bindings_.contains(p.name())) {
    throw std::invalid_argument("parameter '" + p.name() + "' bound twice on one graph");
  }
  Var<T> v = leaf(p.value(), true);
  bindings_.emplace(p.name(), v.id());
  return v;
}

template <class T>
std::optional<NodeId> Graph<T>::binding(const std::string& name) const {
  auto it = bindings_.find(name);
  if (it == bindings_.end()) return std::nullopt;
  return it->second;
}

namespace {

template <class T>
struct TensorBackend {
  using Value = Tensor<T>;
  Graph<T>& graph;

  const Tensor<T>& input(const Node<T>& n, std::size_t k) const {
    return graph.node(n.inputs[k]).value;
  }
  const Tensor<T>& output(NodeId id) const { return graph.node(id).value; }
  Tensor<T> constant(Tensor<T> t) const { return t; }
  Tensor<T> filled(const Shape& s, T v) const { return Tensor<T>(s, v); }
  Tensor<T> accumulate(const Tensor<T>& a, const Tensor<T>& b) const { return add(a, b); }
};

template <class T>
struct VarBackend {
  using Value = Var<T>;
  Graph<T>& graph;

  Var<T> input(const Node<T>& n, std::size_t k) const { return Var<T>(&graph, n.inputs[k]); }
  Var<T> output(NodeId id) const { return Var<T>(&graph, id); }
  Var<T> constant(Tensor<T> t) const { return graph.constant(std::move(t)); }
  Var<T> filled(const Shape& s, T v) const { return graph.constant(Tensor<T>(s, v)); }
  Var<T> accumulate(const Var<T>& a, const Var<T>& b) const { return add(a, b); }
};

Shape kept_shape(const Shape& in, const Axes& axes) {
  Shape kept = in;
  for (auto ax : axes) kept[ax] = 1;
  return kept;
}

// Vector-Jacobian product of one node, written once for both backends.
// want(k) says whether input k needs an adjoint; acc(k, v) accumulates it.
template <class T, class B, class Want, class Acc>
void vjp(Graph<T>& graph, NodeId id, const typename B::Value& g, const B& be, Want&& want,
         Acc&& acc) {
  const Node<T>& node = graph.node(id);
  auto in_shape = [&](std::size_t k) -> const Shape& {
    return graph.node(node.inputs[k]).value.shape();
  };
  auto in_value = [&](std::size_t k) -> const Tensor<T>& { return graph.node(node.inputs[k]).value; };
  const Padding pad = node.attr.padding;

  switch (node.op) {
    case Op::kLeaf:
    case Op::kConstant:
      return;
    case Op::kAdd:
      if (want(0)) acc(0, sum_to(g, in_shape(0)));
      if (want(1)) acc(1, sum_to(g, in_shape(1)));
      return;
    case Op::kSub:
      if (want(0)) acc(0, sum_to(g, in_shape(0)));
      if (want(1)) acc(1, neg(sum_to(g, in_shape(1))));
      return;
    case Op::kMul:
      if (want(0)) acc(0, sum_to(mul(g, be.input(node, 1)), in_shape(0)));
      if (want(1)) acc(1, sum_to(mul(g, be.input(node, 0)), in_shape(1)));
      return;
    case Op::kDiv:
      if (want(0)) acc(0, sum_to(div(g, be.input(node, 1)), in_shape(0)));
      if (want(1)) {
        acc(1, sum_to(neg(div(mul(g, be.output(id)), be.input(node, 1))), in_shape(1)));
      }
      return;
    case Op::kNeg:
      if (want(0)) acc(0, neg(g));
      return;
    case Op::kScale:
      if (want(0)) acc(0, scale(g, static_cast<T>(node.attr.scalar)));
      return;
    case Op::kAddScalar:
      if (want(0)) acc(0, typename B::Value(g));
      return;
    case Op::kSqrt:
      if (want(0)) acc(0, div(scale(g, T(0.5)), be.output(id)));
      return;
    case Op::kRecip:
      if (want(0)) acc(0, neg(mul(g, mul(be.output(id), be.output(id)))));
      return;
    case Op::kExp:
      if (want(0)) acc(0, mul(g, be.output(id)));
      return;
    case Op::kLog:
      if (want(0)) acc(0, div(g, be.input(node, 0)));
      return;
    case Op::kRelu:
      // The mask is a constant: second derivative of relu is zero everywhere.
      if (want(0)) acc(0, mul(g, be.constant(positive_mask(in_value(0)))));
      return;
    case Op::kAbs:
      if (want(0)) acc(0, mul(g, be.constant(sign(in_value(0)))));
      return;
    case Op::kMatmul:
      if (want(0)) acc(0, matmul(g, transpose(be.input(node, 1))));
      if (want(1)) acc(1, matmul(transpose(be.input(node, 0)), g));
      return;
    case Op::kTranspose:
      if (want(0)) acc(0, transpose(g));
      return;
    case Op::kConv2d:
      if (want(0)) acc(0, conv2d_backward_input(g, be.input(node, 1), in_shape(0), pad));
      if (want(1)) acc(1, conv2d_backward_weight(be.input(node, 0), g, in_shape(1), pad));
      return;
    case Op::kConv2dGradInput:
      // inputs: (grad_out, w); value has the conv input's shape.
      if (want(0)) acc(0, conv2d(g, be.input(node, 1), pad));
      if (want(1)) acc(1, conv2d_backward_weight(g, be.input(node, 0), in_shape(1), pad));
      return;
    case Op::kConv2dGradWeight:
      // inputs: (x, grad_out); value has the kernel's shape.
      if (want(0)) acc(0, conv2d_backward_input(be.input(node, 1), g, in_shape(0), pad));
      if (want(1)) acc(1, conv2d(be.input(node, 0), g, pad));
      return;
    case Op::kSum:
      if (want(0)) {
        const Shape kept = kept_shape(in_shape(0), node.attr.axes);
        acc(0, broadcast_to(reshape(g, kept), in_shape(0)));
      }
      return;
    case Op::kBroadcastTo:
      if (want(0)) acc(0, sum_to(g, in_shape(0)));
      return;
    case Op::kSumTo:
      if (want(0)) acc(0, broadcast_to(g, in_shape(0)));
      return;
    case Op::kReshape:
      if (want(0)) acc(0, reshape(g, in_shape(0)));
      return;
  }
  throw std::logic_error(std::string("no vjp rule for op ") + to_string(node.op));
}

// Reverse sweep from `root` over the nodes that are both ancestors of root
// and descendants of a target. Nodes are visited in strictly decreasing id
// order; each relevant edge receives exactly one accumulation.
template <class T, class B>
std::vector<typename B::Value> run_backward(Graph<T>& graph, NodeId root,
                                            std::span<const NodeId> wrt, const B& be) {
  using Value = typename B::Value;
  const std::size_t n = root + 1;

  std::vector<char> depends(n, 0);
  std::vector<char> target(n, 0);
  for (NodeId w : wrt) {
    if (w < n) depends[w] = target[w] = 1;
  }
  for (NodeId id = 0; id < n; ++id) {
    if (depends[id]) continue;
    for (NodeId in : graph.node(id).inputs) {
      if (depends[in]) {
        depends[id] = 1;
        break;
      }
    }
  }
  std::vector<char> relevant(n, 0);
  relevant[root] = depends[root];
  for (NodeId id = n; id-- > 0;) {
    if (!relevant[id]) continue;
    for (NodeId in : graph.node(id).inputs) {
      if (depends[in]) relevant[in] = 1;
    }
  }

  std::vector<std::optional<Value>> adj(n);
  if (relevant[root]) adj[root] = be.filled(graph.node(root).value.shape(), T(1));

  for (NodeId id = n; id-- > 0;) {
    if (!relevant[id] || !adj[id]) continue;
    Value g = target[id] ? *adj[id] : std::move(*adj[id]);
    if (!target[id]) adj[id].reset();
    const auto& inputs = graph.node(id).inputs;
    vjp<T>(
        graph, id, g, be, [&](std::size_t k) { return relevant[inputs[k]] != 0; },
        [&](std::size_t k, Value v) {
          const NodeId in = inputs[k];
          if (adj[in]) {
            adj[in] = be.accumulate(*adj[in], v);
          } else {
            adj[in] = std::move(v);
          }
          graph.count_accumulation();
        });
  }

  std::vector<Value> out;
  out.reserve(wrt.size());
  for (NodeId w : wrt) {
    if (w < n && adj[w]) {
      out.push_back(*adj[w]);
    } else {
      out.push_back(be.filled(graph.node(w).value.shape(), T(0)));
    }
  }
  return out;
}

template <class T>
void check_scalar(const Var<T>& output) {
  if (output.value().size() != 1) {
    throw BackwardError("backward needs a scalar loss, got shape " + sgdph::to_string(output.shape()));
  }
}

}  // namespace

template <class T>
std::vector<Tensor<T>> gradients(const Var<T>& output, std::span<const NodeId> wrt) {
  check_scalar(output);
  TensorBackend<T> be{output.graph()};
  return run_backward<T>(output.graph(), output.id(), wrt, be);
}

template <class T>
std::vector<Var<T>> gradients_differentiable(const Var<T>& output, std::span<const NodeId> wrt) {
  check_scalar(output);
  VarBackend<T> be{output.graph()};
  return run_backward<T>(output.graph(), output.id(), wrt, be);
}

template <class T>
GradientMap<T> Graph<T>::backward(const Var<T>& loss, bool retain_differentiable) {
  if (&loss.graph() != this) throw BackwardError("loss belongs to a different graph");
  check_scalar(loss);
  if (consumed_) {
    throw BackwardError(
        "second backward on a tape whose previous pass was not retain_differentiable; "
        "call zero_adjoints() first");
  }
  std::vector<NodeId> leaves;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op == Op::kLeaf && nodes_[id].requires_grad) leaves.push_back(id);
  }

  if (retain_differentiable) {
    auto grads = gradients_differentiable(loss, std::span<const NodeId>(leaves));
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      Node<T>& leaf_node = nodes_[leaves[i]];
      Var<T> g = grads[i];
      if (leaf_node.adjoint_node) g = add(Var<T>(this, *leaf_node.adjoint_node), g);
      leaf_node.adjoint_node = g.id();
      leaf_node.adjoint = g.value();
    }
    differentiable_ = true;
  } else {
    auto grads = gradients(loss, std::span<const NodeId>(leaves));
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      Node<T>& leaf_node = nodes_[leaves[i]];
      leaf_node.adjoint =
          leaf_node.adjoint ? add(*leaf_node.adjoint, grads[i]) : std::move(grads[i]);
    }
    consumed_ = true;
  }

  GradientMap<T> out;
  for (NodeId id : leaves) out.emplace(id, *nodes_[id].adjoint);
  return out;
}

template <class T>
std::map<std::string, Tensor<T>> Graph<T>::parameter_gradients() const {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, id] : bindings_) {
    const auto& n = nodes_[id];
    out.emplace(name, n.adjoint ? *n.adjoint : Tensor<T>(n.value.shape()));
  }
  return out;
}

template <class T>
Var<T> Graph<T>::gradient_var(NodeId leaf_id) {
  const auto& n = nodes_.at(leaf_id);
  if (!differentiable_ || !n.adjoint_node) {
    throw BackwardError("no differentiable gradient recorded; run backward(loss, true) first");
  }
  return Var<T>(this, *n.adjoint_node);
}

template <class T>
void Graph<T>::zero_adjoints() {
  for (auto& n : nodes_) {
    n.adjoint.reset();
    n.adjoint_node.reset();
  }
  consumed_ = false;
  differentiable_ = false;
}

template <class T>
Tensor<T> hessian_diag_1d(const Var<T>& loss, const Parameter<T>& p) {
  if (!p.is_channelwise()) {
    throw ParameterKindError("hessian_diag_1d needs a channel-wise 1-D parameter; '" + p.name() +
                             "' is dense");
  }
  Graph<T>& graph = loss.graph();
  const auto leaf_id = graph.binding(p.name());
  if (!leaf_id) throw BackwardError("parameter '" + p.name() + "' is not bound on this graph");
  // g^T e_p is the sum of p's own gradient entries; e_p is never materialized.
  const Var<T> masked = sum_all(graph.gradient_var(*leaf_id));
  auto h = gradients(masked, std::span<const NodeId>(&*leaf_id, 1));
  graph.count_hessian_extraction();
  return std::move(h.front());
}

namespace {

template <class T>
Graph<T>& same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument("operands live on different graphs");
  return a.graph();
}

template <class T>
Var<T> unary_node(Op op, const Var<T>& a, Tensor<T> value, Attr attr = {}) {
  return a.graph().record(op, {a.id()}, std::move(value), std::move(attr));
}

template <class T>
Var<T> binary_node(Op op, const Var<T>& a, const Var<T>& b, Tensor<T> value, Attr attr = {}) {
  return same_graph(a, b).record(op, {a.id(), b.id()}, std::move(value), std::move(attr));
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary_node(Op::kAdd, a, b, sgdph::add(a.value(), b.value()));
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary_node(Op::kSub, a, b, sgdph::sub(a.value(), b.value()));
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary_node(Op::kMul, a, b, sgdph::mul(a.value(), b.value()));
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary_node(Op::kDiv, a, b, sgdph::div(a.value(), b.value()));
}

template <class T>
Var<T> add(const Var<T>& a, const Tensor<T>& b) {
  return add(a, a.graph().constant(b));
}

template <class T>
Var<T> sub(const Var<T>& a, const Tensor<T>& b) {
  return sub(a, a.graph().constant(b));
}

template <class T>
Var<T> mul(const Var<T>& a, const Tensor<T>& b) {
  return mul(a, a.graph().constant(b));
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return unary_node(Op::kNeg, a, sgdph::neg(a.value()));
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Attr attr;
  attr.scalar = factor;
  return unary_node(Op::kScale, a, sgdph::scale(a.value(), factor), attr);
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  Attr attr;
  attr.scalar = offset;
  return unary_node(Op::kAddScalar, a, sgdph::add_scalar(a.value(), offset), attr);
}

template <class T>
Var<T> sqrt(const Var<T>& a) {
  return unary_node(Op::kSqrt, a, sgdph::sqrt(a.value()));
}

template <class T>
Var<T> recip(const Var<T>& a) {
  return unary_node(Op::kRecip, a, sgdph::recip(a.value()));
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return unary_node(Op::kExp, a, sgdph::exp(a.value()));
}

template <class T>
Var<T> log(const Var<T>& a) {
  return unary_node(Op::kLog, a, sgdph::log(a.value()));
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary_node(Op::kRelu, a, sgdph::relu(a.value()));
}

template <class T>
Var<T> abs(const Var<T>& a) {
  return unary_node(Op::kAbs, a, sgdph::abs(a.value()));
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return binary_node(Op::kMatmul, a, b, sgdph::matmul(a.value(), b.value()));
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  return unary_node(Op::kTranspose, a, sgdph::transpose(a.value()));
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Padding padding) {
  Attr attr;
  attr.padding = padding;
  return binary_node(Op::kConv2d, x, w, sgdph::conv2d(x.value(), w.value(), padding), attr);
}

template <class T>
Var<T> conv2d_backward_input(const Var<T>& grad_out, const Var<T>& w, const Shape& input_shape,
                             Padding padding) {
  Attr attr;
  attr.padding = padding;
  attr.shape = input_shape;
  return binary_node(
      Op::kConv2dGradInput, grad_out, w,
      sgdph::conv2d_backward_input(grad_out.value(), w.value(), input_shape, padding), attr);
}

template <class T>
Var<T> conv2d_backward_weight(const Var<T>& x, const Var<T>& grad_out, const Shape& weight_shape,
                              Padding padding) {
  Attr attr;
  attr.padding = padding;
  attr.shape = weight_shape;
  return binary_node(
      Op::kConv2dGradWeight, x, grad_out,
      sgdph::conv2d_backward_weight(x.value(), grad_out.value(), weight_shape, padding), attr);
}

template <class T>
Var<T> sum(const Var<T>& a, const Axes& axes, bool keepdims) {
  Attr attr;
  attr.axes = axes;
  attr.keepdims = keepdims;
  return unary_node(Op::kSum, a, sgdph::sum(a.value(), axes, keepdims), attr);
}

template <class T>
Var<T> sum_all(const Var<T>& a) {
  Axes all(a.value().rank());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return sum(a, all, false);
}

template <class T>
Var<T> broadcast_to(const Var<T>& a, const Shape& shape) {
  Attr attr;
  attr.shape = shape;
  return unary_node(Op::kBroadcastTo, a, sgdph::broadcast_to(a.value(), shape), attr);
}

template <class T>
Var<T> sum_to(const Var<T>& a, const Shape& shape) {
  Attr attr;
  attr.shape = shape;
  return unary_node(Op::kSumTo, a, sgdph::sum_to(a.value(), shape), attr);
}

template <class T>
Var<T> reshape(const Var<T>& a, const Shape& shape) {
  Attr attr;
  attr.shape = shape;
  return unary_node(Op::kReshape, a, sgdph::reshape(a.value(), shape), attr);
}

#define SGDPH_INSTANTIATE(T)                                                                    \
  template class Var<T>;                                                                        \
  template class Graph<T>;                                                                      \
  template std::vector<Tensor<T>> gradients(const Var<T>&, std::span<const NodeId>);            \
  template std::vector<Var<T>> gradients_differentiable(const Var<T>&, std::span<const NodeId>); \
  template Tensor<T> hessian_diag_1d(const Var<T>&, const Parameter<T>&);                       \
  template Var<T> add(const Var<T>&, const Var<T>&);                                            \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                            \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                            \
  template Var<T> div(const Var<T>&, const Var<T>&);                                            \
  template Var<T> add(const Var<T>&, const Tensor<T>&);                                         \
  template Var<T> sub(const Var<T>&, const Tensor<T>&);                                         \
  template Var<T> mul(const Var<T>&, const Tensor<T>&);                                         \
  template Var<T> neg(const Var<T>&);                                                           \
  template Var<T> scale(const Var<T>&, T);                                                      \
  template Var<T> add_scalar(const Var<T>&, T);                                                 \
  template Var<T> sqrt(const Var<T>&);                                                          \
  template Var<T> recip(const Var<T>&);                                                         \
  template Var<T> exp(const Var<T>&);                                                           \
  template Var<T> log(const Var<T>&);                                                           \
  template Var<T> relu(const Var<T>&);                                                          \
  template Var<T> abs(const Var<T>&);                                                           \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                         \
  template Var<T> transpose(const Var<T>&);                                                     \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, Padding);                                \
  template Var<T> conv2d_backward_input(const Var<T>&, const Var<T>&, const Shape&, Padding);   \
  template Var<T> conv2d_backward_weight(const Var<T>&, const Var<T>&, const Shape&, Padding);  \
  template Var<T> sum(const Var<T>&, const Axes&, bool);                                        \
  template Var<T> sum_all(const Var<T>&);                                                       \
  template Var<T> broadcast_to(const Var<T>&, const Shape&);                                    \
  template Var<T> sum_to(const Var<T>&, const Shape&);                                          \
  template Var<T> reshape(const Var<T>&, const Shape&);

SGDPH_INSTANTIATE(float)
SGDPH_INSTANTIATE(double)

#undef SGDPH_INSTANTIATE

}  // namespace sgdph::ad
