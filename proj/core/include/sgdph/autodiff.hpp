#pragma once

#include <cstddef>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sgdph/parameter.hpp"
#include "sgdph/tensor.hpp"

// Define-by-run reverse-mode tape. A backward pass can record its own
// computation onto the tape (retain_differentiable), which makes the
// resulting gradients ordinary differentiable values: back-propagating
// through them is the Hessian-vector product used by hessian_diag_1d.
namespace sgdph::ad {

using NodeId = std::size_t;

enum class Op {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,
  kAddScalar,
  kSqrt,
  kRecip,
  kExp,
  kLog,
  kRelu,
  kAbs,
  kMatmul,
  kTranspose,
  kConv2d,
  kConv2dGradInput,
  kConv2dGradWeight,
  kSum,
  kBroadcastTo,
  kSumTo,
  kReshape,
};

const char* to_string(Op op);

struct Attr {
  Shape shape;  // target shape (reshape/broadcast/sum_to) or conv operand shape
  Axes axes;
  bool keepdims = true;
  double scalar = 0.0;
  Padding padding = Padding::kValid;
};

template <class T>
struct Node {
  Op op = Op::kConstant;
  std::vector<NodeId> inputs;
  Tensor<T> value;
  bool requires_grad = false;
  Attr attr;
  // Written by Graph::backward for leaves that require grad.
  std::optional<Tensor<T>> adjoint;
  std::optional<NodeId> adjoint_node;
};

template <class T>
class Graph;

// Handle to a node on a Graph. The graph must outlive its Vars.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, NodeId id) : graph_(graph), id_(id) {}

  NodeId id() const noexcept { return id_; }
  Graph<T>& graph() const { return *graph_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  NodeId id_ = 0;
};

template <class T>
using GradientMap = std::map<NodeId, Tensor<T>>;

template <class T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  Var<T> constant(Tensor<T> value);
  Var<T> record(Op op, std::vector<NodeId> inputs, Tensor<T> value, Attr attr = {});

  // Creates a requires-grad leaf holding a copy of the parameter's value and
  // remembers the parameter name. Names must be unique per graph.
  Var<T> bind(const Parameter<T>& p);
  std::optional<NodeId> binding(const std::string& name) const;
  const std::map<std::string, NodeId>& bindings() const noexcept { return bindings_; }

  const Node<T>& node(NodeId id) const { return nodes_.at(id); }
  Node<T>& node(NodeId id) { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient of a scalar loss for every requires-grad leaf. With
  // retain_differentiable the gradients are recorded as tape nodes (see
  // gradient_var) so a second backward through them is valid.
  GradientMap<T> backward(const Var<T>& loss, bool retain_differentiable = false);

  // Gradients keyed by bound parameter name (after backward).
  std::map<std::string, Tensor<T>> parameter_gradients() const;

  // Differentiable gradient of a leaf from a retained backward.
  Var<T> gradient_var(NodeId leaf);

  void zero_adjoints();

  bool differentiable() const noexcept { return differentiable_; }

  // Instrumentation: adjoint accumulations along tape edges summed over all
  // passes, and the number of hessian_diag_1d extractions.
  std::size_t adjoint_accumulations() const noexcept { return accumulations_; }
  std::size_t hessian_extractions() const noexcept { return hessian_extractions_; }

  // Internal: used by the backward engine.
  void count_accumulation() noexcept { ++accumulations_; }
  void count_hessian_extraction() noexcept { ++hessian_extractions_; }

 private:
  std::deque<Node<T>> nodes_;
  std::map<std::string, NodeId> bindings_;
  bool consumed_ = false;
  bool differentiable_ = false;
  std::size_t accumulations_ = 0;
  std::size_t hessian_extractions_ = 0;
};

// Gradients of a single-element `output` with respect to the listed nodes,
// computed on plain tensors without recording. Unreachable nodes get zeros.
template <class T>
std::vector<Tensor<T>> gradients(const Var<T>& output, std::span<const NodeId> wrt);

// Same, but recording the backward computation so the results are Vars.
template <class T>
std::vector<Var<T>> gradients_differentiable(const Var<T>& output, std::span<const NodeId> wrt);

// H_pp * 1 for a channel-wise parameter p: back-propagates the sum of p's
// own gradient entries (gradient masked by the indicator of p) and keeps the
// entries at p's positions. Equals diag(H_pp) whenever that block is
// diagonal. Requires a prior backward with retain_differentiable.
template <class T>
Tensor<T> hessian_diag_1d(const Var<T>& loss, const Parameter<T>& p);

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> add(const Var<T>& a, const Tensor<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Tensor<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Tensor<T>& b);
template <class T> Var<T> neg(const Var<T>& a);
template <class T> Var<T> scale(const Var<T>& a, T factor);
template <class T> Var<T> add_scalar(const Var<T>& a, T offset);
template <class T> Var<T> sqrt(const Var<T>& a);
template <class T> Var<T> recip(const Var<T>& a);
template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> log(const Var<T>& a);
template <class T> Var<T> relu(const Var<T>& a);
template <class T> Var<T> abs(const Var<T>& a);
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> transpose(const Var<T>& a);
template <class T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, Padding padding);
template <class T>
Var<T> conv2d_backward_input(const Var<T>& grad_out, const Var<T>& w, const Shape& input_shape,
                             Padding padding);
template <class T>
Var<T> conv2d_backward_weight(const Var<T>& x, const Var<T>& grad_out, const Shape& weight_shape,
                              Padding padding);
template <class T> Var<T> sum(const Var<T>& a, const Axes& axes, bool keepdims = true);
// Sum of every element, shape {1}.
template <class T> Var<T> sum_all(const Var<T>& a);
template <class T> Var<T> broadcast_to(const Var<T>& a, const Shape& shape);
template <class T> Var<T> sum_to(const Var<T>& a, const Shape& shape);
template <class T> Var<T> reshape(const Var<T>& a, const Shape& shape);

template <class T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <class T> Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <class T> Var<T> operator-(const Var<T>& a) { return neg(a); }

}  // namespace sgdph::ad
