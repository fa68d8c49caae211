// flexit/graph.h
//
// Reverse-mode automatic differentiation over a recorded operation graph.
//
// Nodes are appended in construction order, which is also a topological
// order: every node's inputs already exist when it is created. Shapes are
// checked when a node is added. Values are computed lazily by Forward(), which
// only evaluates nodes added (or invalidated) since the previous call, so
// model code may interleave construction and evaluation. Backward() seeds one
// output and accumulates gradients into every node that requires them.
//
// The primitive set is closed: matmul, add, multiply, tanh, sigmoid, relu,
// softmax, log-softmax, layer-norm, concat, slice and row gather (embedding
// lookup). Everything else in the library is composed from these.

#ifndef FLEXIT_GRAPH_H_
#define FLEXIT_GRAPH_H_

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexit/tensor.h"

namespace flexit {

// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
};

enum class Op {
  kLeaf,
  kMatMul,
  kAdd,
  kMul,
  kTanh,
  kSigmoid,
  kRelu,
  kSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kConcat,
  kSlice,
  kGather,
};

const char* OpName(Op op);

// Raised when a node's inputs violate its shape contract. The message names
// the offending node index and operation.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::size_t node, Op op, const std::string& what);
  std::size_t node() const { return node_; }

 private:
  std::size_t node_;
};

inline constexpr double kLayerNormEpsilon = 1e-5;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaves.
  Var Input(Tensor value, bool requires_grad = false, std::string name = {});
  Var Constant(Tensor value) { return Input(std::move(value), false); }
  // References caller-owned storage, which must outlive the graph and stay
  // unchanged until Backward() returns. Always requires a gradient.
  Var Parameter(const Tensor& value, std::string name = {});

  // C = op(A) * op(B), op = optional transpose.
  Var MatMul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
  // Elementwise; b may equal a's shape, be a single row (broadcast over rows)
  // or a single element (scalar broadcast).
  Var Add(Var a, Var b);
  Var Mul(Var a, Var b);
  Var Tanh(Var a);
  Var Sigmoid(Var a);
  Var Relu(Var a);
  // Row-wise over the last dimension.
  Var Softmax(Var a);
  Var LogSoftmax(Var a);
  // Pre-affine normalization of each row to zero mean and unit variance.
  Var LayerNorm(Var a, double epsilon = kLayerNormEpsilon);
  // axis 0 stacks rows, axis 1 stacks columns.
  Var Concat(std::span<const Var> parts, int axis);
  Var Slice(Var a, int axis, std::size_t begin, std::size_t end);
  // Row i of the result is row indices[i] of table.
  Var Gather(Var table, std::vector<std::size_t> indices);

  // Convenience compositions.
  Var Scale(Var a, double s) { return Mul(a, Constant(Tensor::Scalar(s))); }
  Var Square(Var a) { return Mul(a, a); }

  // Evaluates every node not yet evaluated.
  void Forward();
  // Replaces a leaf's value (same shape) and invalidates all derived nodes.
  void SetInput(Var leaf, Tensor value);

  const Tensor& value(Var v) const;
  const std::vector<std::size_t>& shape(Var v) const { return node(v).shape; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Propagates seed (shape of `output`) back through the graph. Gradients
  // from earlier calls are discarded first.
  void Backward(Var output, const Tensor& seed);
  // Gradient of a node after Backward(); nullptr if the node does not require
  // a gradient or received none.
  const Tensor* grad(Var v) const;

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::size_t> inputs;
    std::vector<std::size_t> shape;
    bool transpose_a = false;
    bool transpose_b = false;
    int axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    double epsilon = 0.0;
    std::vector<std::size_t> indices;
    Tensor value;
    const Tensor* external = nullptr;
    Tensor aux;
    Tensor grad;
    bool requires_grad = false;
    bool evaluated = false;
    bool has_grad = false;
    std::string name;
  };

  const Node& node(Var v) const;
  const Tensor& val(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  Var Push(Node n);
  Var Unary(Op op, Var a);
  Var Binary(Op op, Var a, Var b);
  void Evaluate(Node& n);
  void Propagate(std::size_t id);
  Tensor& GradOf(std::size_t id);

  std::vector<Node> nodes_;
};

}  // namespace flexit

#endif  // FLEXIT_GRAPH_H_
