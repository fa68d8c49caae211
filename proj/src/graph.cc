// flexit/graph.cc

#include "flexit/graph.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace flexit {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap View(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap View(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

std::size_t Rows(const std::vector<std::size_t>& shape) {
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}

std::size_t Cols(const std::vector<std::size_t>& shape) { return shape.back(); }

std::size_t Numel(const std::vector<std::size_t>& shape) { return Rows(shape) * Cols(shape); }

// Broadcast modes for Add/Mul, stored in Node::axis.
constexpr int kSameShape = 0;
constexpr int kRowBroadcast = 1;
constexpr int kScalarBroadcast = 2;

double Logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const char* OpName(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kMul: return "multiply";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kGather: return "gather";
  }
  return "?";
}

ShapeError::ShapeError(std::size_t node, Op op, const std::string& what)
    : std::invalid_argument("node " + std::to_string(node) + " (" + OpName(op) +
                            "): " + what),
      node_(node) {}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("Graph: unknown node");
  return nodes_[v.id];
}

Var Graph::Push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::Input(Tensor value, bool requires_grad, std::string name) {
  Node n;
  n.shape = value.shape();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.evaluated = true;
  n.name = std::move(name);
  return Push(std::move(n));
}

Var Graph::Parameter(const Tensor& value, std::string name) {
  Node n;
  n.shape = value.shape();
  n.external = &value;
  n.requires_grad = true;
  n.evaluated = true;
  n.name = std::move(name);
  return Push(std::move(n));
}

Var Graph::MatMul(Var a, Var b, bool transpose_a, bool transpose_b) {
  const auto& sa = node(a).shape;
  const auto& sb = node(b).shape;
  const std::size_t ar = transpose_a ? Cols(sa) : Rows(sa);
  const std::size_t ac = transpose_a ? Rows(sa) : Cols(sa);
  const std::size_t br = transpose_b ? Cols(sb) : Rows(sb);
  const std::size_t bc = transpose_b ? Rows(sb) : Cols(sb);
  if (ac != br) {
    throw ShapeError(nodes_.size(), Op::kMatMul,
                     "inner dimensions differ: " + ShapeString(sa) + " x " + ShapeString(sb));
  }
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a.id, b.id};
  n.shape = {ar, bc};
  n.transpose_a = transpose_a;
  n.transpose_b = transpose_b;
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return Push(std::move(n));
}

Var Graph::Binary(Op op, Var a, Var b) {
  const auto& sa = node(a).shape;
  const auto& sb = node(b).shape;
  Node n;
  n.op = op;
  n.inputs = {a.id, b.id};
  n.shape = sa;
  if (Rows(sa) == Rows(sb) && Cols(sa) == Cols(sb)) {
    n.axis = kSameShape;
  } else if (Rows(sb) == 1 && Cols(sb) == Cols(sa)) {
    n.axis = kRowBroadcast;
  } else if (Numel(sb) == 1) {
    n.axis = kScalarBroadcast;
  } else {
    throw ShapeError(nodes_.size(), op,
                     "cannot broadcast " + ShapeString(sb) + " onto " + ShapeString(sa));
  }
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return Push(std::move(n));
}

Var Graph::Add(Var a, Var b) { return Binary(Op::kAdd, a, b); }
Var Graph::Mul(Var a, Var b) { return Binary(Op::kMul, a, b); }

Var Graph::Unary(Op op, Var a) {
  Node n;
  n.op = op;
  n.inputs = {a.id};
  n.shape = node(a).shape;
  n.requires_grad = node(a).requires_grad;
  return Push(std::move(n));
}

Var Graph::Tanh(Var a) { return Unary(Op::kTanh, a); }
Var Graph::Sigmoid(Var a) { return Unary(Op::kSigmoid, a); }
Var Graph::Relu(Var a) { return Unary(Op::kRelu, a); }
Var Graph::Softmax(Var a) { return Unary(Op::kSoftmax, a); }
Var Graph::LogSoftmax(Var a) { return Unary(Op::kLogSoftmax, a); }

Var Graph::LayerNorm(Var a, double epsilon) {
  Var v = Unary(Op::kLayerNorm, a);
  nodes_[v.id].epsilon = epsilon;
  return v;
}

Var Graph::Concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError(nodes_.size(), Op::kConcat, "no inputs");
  if (axis != 0 && axis != 1) throw ShapeError(nodes_.size(), Op::kConcat, "axis must be 0 or 1");
  Node n;
  n.op = Op::kConcat;
  n.axis = axis;
  std::size_t rows = Rows(node(parts[0]).shape);
  std::size_t cols = Cols(node(parts[0]).shape);
  std::size_t total = 0;
  for (Var p : parts) {
    const auto& s = node(p).shape;
    if (axis == 0 && Cols(s) != cols) {
      throw ShapeError(nodes_.size(), Op::kConcat, "column count differs: " + ShapeString(s));
    }
    if (axis == 1 && Rows(s) != rows) {
      throw ShapeError(nodes_.size(), Op::kConcat, "row count differs: " + ShapeString(s));
    }
    total += axis == 0 ? Rows(s) : Cols(s);
    n.inputs.push_back(p.id);
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.shape = axis == 0 ? std::vector<std::size_t>{total, cols}
                      : std::vector<std::size_t>{rows, total};
  return Push(std::move(n));
}

Var Graph::Slice(Var a, int axis, std::size_t begin, std::size_t end) {
  const auto& s = node(a).shape;
  if (axis != 0 && axis != 1) throw ShapeError(nodes_.size(), Op::kSlice, "axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? Rows(s) : Cols(s);
  if (begin > end || end > extent) {
    throw ShapeError(nodes_.size(), Op::kSlice,
                     "range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside extent " + std::to_string(extent));
  }
  Node n;
  n.op = Op::kSlice;
  n.inputs = {a.id};
  n.axis = axis;
  n.begin = begin;
  n.end = end;
  n.shape = axis == 0 ? std::vector<std::size_t>{end - begin, Cols(s)}
                      : std::vector<std::size_t>{Rows(s), end - begin};
  n.requires_grad = node(a).requires_grad;
  return Push(std::move(n));
}

Var Graph::Gather(Var table, std::vector<std::size_t> indices) {
  const auto& s = node(table).shape;
  const std::size_t rows = Rows(s);
  for (std::size_t i : indices) {
    if (i >= rows) {
      throw ShapeError(nodes_.size(), Op::kGather,
                       "index " + std::to_string(i) + " >= table rows " + std::to_string(rows));
    }
  }
  Node n;
  n.op = Op::kGather;
  n.inputs = {table.id};
  n.shape = {indices.size(), Cols(s)};
  n.indices = std::move(indices);
  n.requires_grad = node(table).requires_grad;
  return Push(std::move(n));
}

void Graph::SetInput(Var leaf, Tensor value) {
  Node& n = nodes_.at(leaf.id);
  if (n.op != Op::kLeaf || n.external) {
    throw std::invalid_argument("Graph::SetInput: node " + std::to_string(leaf.id) +
                                " is not an input leaf");
  }
  if (value.shape() != n.shape) {
    throw ShapeError(leaf.id, Op::kLeaf,
                     "input shape " + ShapeString(value.shape()) + " != declared " +
                         ShapeString(n.shape));
  }
  n.value = std::move(value);
  for (Node& other : nodes_) {
    if (other.op != Op::kLeaf) other.evaluated = false;
    other.has_grad = false;
  }
}

void Graph::Forward() {
  for (Node& n : nodes_) {
    if (!n.evaluated) {
      Evaluate(n);
      n.evaluated = true;
    }
  }
}

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  if (!n.evaluated) {
    throw std::logic_error("Graph::value: node " + std::to_string(v.id) + " not evaluated");
  }
  return val(v.id);
}

void Graph::Evaluate(Node& n) {
  switch (n.op) {
    case Op::kLeaf:
      return;
    case Op::kMatMul: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      n.value = Tensor(n.shape);
      auto out = View(n.value);
      auto A = View(a);
      auto B = View(b);
      if (!n.transpose_a && !n.transpose_b) out.noalias() = A * B;
      else if (n.transpose_a && !n.transpose_b) out.noalias() = A.transpose() * B;
      else if (!n.transpose_a && n.transpose_b) out.noalias() = A * B.transpose();
      else out.noalias() = A.transpose() * B.transpose();
      return;
    }
    case Op::kAdd:
    case Op::kMul: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      n.value = Tensor(n.shape);
      const std::size_t cols = a.cols();
      const bool add = n.op == Op::kAdd;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double bv = n.axis == kSameShape ? b[i] : n.axis == kRowBroadcast ? b[i % cols] : b[0];
        n.value[i] = add ? a[i] + bv : a[i] * bv;
      }
      return;
    }
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kRelu: {
      const Tensor& a = val(n.inputs[0]);
      n.value = Tensor(n.shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        n.value[i] = n.op == Op::kTanh ? std::tanh(x) : n.op == Op::kSigmoid ? Logistic(x)
                                                                              : (x > 0 ? x : 0.0);
      }
      return;
    }
    case Op::kSoftmax:
    case Op::kLogSoftmax: {
      const Tensor& a = val(n.inputs[0]);
      n.value = Tensor(n.shape);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto in = a.row(r);
        auto out = n.value.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (double x : in) sum += std::exp(x - mx);
        if (n.op == Op::kSoftmax) {
          for (std::size_t c = 0; c < in.size(); ++c) out[c] = std::exp(in[c] - mx) / sum;
        } else {
          const double lse = mx + std::log(sum);
          for (std::size_t c = 0; c < in.size(); ++c) out[c] = in[c] - lse;
        }
      }
      return;
    }
    case Op::kLayerNorm: {
      const Tensor& a = val(n.inputs[0]);
      n.value = Tensor(n.shape);
      n.aux = Tensor({a.rows()});
      const double width = static_cast<double>(a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto in = a.row(r);
        auto out = n.value.row(r);
        double mean = 0.0;
        for (double x : in) mean += x;
        mean /= width;
        double var = 0.0;
        for (double x : in) var += (x - mean) * (x - mean);
        var /= width;
        const double inv = 1.0 / std::sqrt(var + n.epsilon);
        n.aux[r] = inv;
        for (std::size_t c = 0; c < in.size(); ++c) out[c] = (in[c] - mean) * inv;
      }
      return;
    }
    case Op::kConcat: {
      n.value = Tensor(n.shape);
      const std::size_t cols = n.value.cols();
      std::size_t offset = 0;
      for (std::size_t id : n.inputs) {
        const Tensor& p = val(id);
        if (n.axis == 0) {
          std::copy(p.data().begin(), p.data().end(), n.value.data().begin() + offset * cols);
          offset += p.rows();
        } else {
          for (std::size_t r = 0; r < p.rows(); ++r) {
            auto src = p.row(r);
            std::copy(src.begin(), src.end(), n.value.row(r).begin() + offset);
          }
          offset += p.cols();
        }
      }
      return;
    }
    case Op::kSlice: {
      const Tensor& a = val(n.inputs[0]);
      n.value = Tensor(n.shape);
      if (n.axis == 0) {
        std::copy(a.data().begin() + n.begin * a.cols(), a.data().begin() + n.end * a.cols(),
                  n.value.data().begin());
      } else {
        for (std::size_t r = 0; r < a.rows(); ++r) {
          auto src = a.row(r);
          std::copy(src.begin() + n.begin, src.begin() + n.end, n.value.row(r).begin());
        }
      }
      return;
    }
    case Op::kGather: {
      const Tensor& a = val(n.inputs[0]);
      n.value = Tensor(n.shape);
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        auto src = a.row(n.indices[i]);
        std::copy(src.begin(), src.end(), n.value.row(i).begin());
      }
      return;
    }
  }
}

Tensor& Graph::GradOf(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.shape);
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::Backward(Var output, const Tensor& seed) {
  if (output.id >= nodes_.size()) throw std::out_of_range("Graph::Backward: unknown node");
  for (std::size_t i = 0; i <= output.id; ++i) {
    if (!nodes_[i].evaluated) {
      throw std::logic_error("Graph::Backward: node " + std::to_string(i) +
                             " has not been evaluated; call Forward() first");
    }
  }
  if (Numel(seed.shape()) != Numel(nodes_[output.id].shape) ||
      seed.cols() != Cols(nodes_[output.id].shape)) {
    throw ShapeError(output.id, nodes_[output.id].op,
                     "seed shape " + ShapeString(seed.shape()) + " != output shape " +
                         ShapeString(nodes_[output.id].shape));
  }
  for (Node& n : nodes_) n.has_grad = false;
  if (!nodes_[output.id].requires_grad) return;
  GradOf(output.id).storage() = seed.storage();
  for (std::size_t i = output.id + 1; i-- > 0;) {
    if (nodes_[i].has_grad && nodes_[i].op != Op::kLeaf) Propagate(i);
  }
}

void Graph::Propagate(std::size_t id) {
  // GradOf() never reallocates nodes_, so these references stay valid. An
  // input may appear twice (Mul(a, a)); both branches accumulate.
  Node& n = nodes_[id];
  const Tensor& dy = n.grad;
  switch (n.op) {
    case Op::kLeaf:
      return;
    case Op::kMatMul: {
      const std::size_t ia = n.inputs[0];
      const std::size_t ib = n.inputs[1];
      const Tensor& a = val(ia);
      const Tensor& b = val(ib);
      auto dC = View(dy);
      auto A = View(a);
      auto B = View(b);
      if (nodes_[ia].requires_grad) {
        auto dA = View(GradOf(ia));
        if (!n.transpose_a && !n.transpose_b) dA.noalias() += dC * B.transpose();
        else if (n.transpose_a && !n.transpose_b) dA.noalias() += B * dC.transpose();
        else if (!n.transpose_a && n.transpose_b) dA.noalias() += dC * B;
        else dA.noalias() += B.transpose() * dC.transpose();
      }
      if (nodes_[ib].requires_grad) {
        auto dB = View(GradOf(ib));
        if (!n.transpose_a && !n.transpose_b) dB.noalias() += A.transpose() * dC;
        else if (n.transpose_a && !n.transpose_b) dB.noalias() += A * dC;
        else if (!n.transpose_a && n.transpose_b) dB.noalias() += dC.transpose() * A;
        else dB.noalias() += dC.transpose() * A.transpose();
      }
      return;
    }
    case Op::kAdd:
    case Op::kMul: {
      const std::size_t ia = n.inputs[0];
      const std::size_t ib = n.inputs[1];
      const Tensor& a = val(ia);
      const Tensor& b = val(ib);
      const std::size_t cols = a.cols();
      const bool add = n.op == Op::kAdd;
      auto b_at = [&](std::size_t i) {
        return n.axis == kSameShape ? i : n.axis == kRowBroadcast ? i % cols : 0;
      };
      if (nodes_[ia].requires_grad) {
        Tensor& da = GradOf(ia);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += add ? dy[i] : dy[i] * b[b_at(i)];
      }
      if (nodes_[ib].requires_grad) {
        Tensor& db = GradOf(ib);
        for (std::size_t i = 0; i < dy.size(); ++i) db[b_at(i)] += add ? dy[i] : dy[i] * a[i];
      }
      return;
    }
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kRelu: {
      const std::size_t ia = n.inputs[0];
      if (!nodes_[ia].requires_grad) return;
      Tensor& da = GradOf(ia);
      const Tensor& y = n.value;
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const double d = n.op == Op::kTanh      ? 1.0 - y[i] * y[i]
                         : n.op == Op::kSigmoid ? y[i] * (1.0 - y[i])
                                                : (y[i] > 0 ? 1.0 : 0.0);
        da[i] += dy[i] * d;
      }
      return;
    }
    case Op::kSoftmax: {
      const std::size_t ia = n.inputs[0];
      if (!nodes_[ia].requires_grad) return;
      Tensor& da = GradOf(ia);
      const Tensor& y = n.value;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = dy.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
        auto out = da.row(r);
        for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - dot);
      }
      return;
    }
    case Op::kLogSoftmax: {
      const std::size_t ia = n.inputs[0];
      if (!nodes_[ia].requires_grad) return;
      Tensor& da = GradOf(ia);
      const Tensor& y = n.value;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = dy.row(r);
        double sum = 0.0;
        for (double g : gr) sum += g;
        auto out = da.row(r);
        for (std::size_t c = 0; c < yr.size(); ++c) out[c] += gr[c] - std::exp(yr[c]) * sum;
      }
      return;
    }
    case Op::kLayerNorm: {
      const std::size_t ia = n.inputs[0];
      if (!nodes_[ia].requires_grad) return;
      Tensor& da = GradOf(ia);
      const Tensor& y = n.value;
      const double width = static_cast<double>(y.cols());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = dy.row(r);
        double mean_g = 0.0;
        double mean_gy = 0.0;
        for (std::size_t c = 0; c < yr.size(); ++c) {
          mean_g += gr[c];
          mean_gy += gr[c] * yr[c];
        }
        mean_g /= width;
        mean_gy /= width;
        auto out = da.row(r);
        const double inv = n.aux[r];
        for (std::size_t c = 0; c < yr.size(); ++c) {
          out[c] += inv * (gr[c] - mean_g - yr[c] * mean_gy);
        }
      }
      return;
    }
    case Op::kConcat: {
      const std::size_t cols = Cols(n.shape);
      std::size_t offset = 0;
      for (std::size_t id_in : n.inputs) {
        const auto& s = nodes_[id_in].shape;
        if (nodes_[id_in].requires_grad) {
          Tensor& dp = GradOf(id_in);
          if (n.axis == 0) {
            for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += dy[offset * cols + i];
          } else {
            for (std::size_t r = 0; r < dp.rows(); ++r) {
              auto src = dy.row(r);
              auto dst = dp.row(r);
              for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[offset + c];
            }
          }
        }
        offset += n.axis == 0 ? Rows(s) : Cols(s);
      }
      return;
    }
    case Op::kSlice: {
      const std::size_t ia = n.inputs[0];
      if (!nodes_[ia].requires_grad) return;
      Tensor& da = GradOf(ia);
      if (n.axis == 0) {
        const std::size_t cols = da.cols();
        for (std::size_t i = 0; i < dy.size(); ++i) da[n.begin * cols + i] += dy[i];
      } else {
        for (std::size_t r = 0; r < dy.rows(); ++r) {
          auto src = dy.row(r);
          auto dst = da.row(r);
          for (std::size_t c = 0; c < src.size(); ++c) dst[n.begin + c] += src[c];
        }
      }
      return;
    }
    case Op::kGather: {
      const std::size_t ia = n.inputs[0];
      if (!nodes_[ia].requires_grad) return;
      Tensor& da = GradOf(ia);
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        auto src = dy.row(i);
        auto dst = da.row(n.indices[i]);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
      return;
    }
  }
}

const Tensor* Graph::grad(Var v) const {
  const Node& n = node(v);
  return n.has_grad ? &n.grad : nullptr;
}

}  // namespace flexit
