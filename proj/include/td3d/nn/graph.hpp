#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "td3d/nn/kernel_map.hpp"
#include "td3d/nn/parameters.hpp"
#include "td3d/nn/tensor.hpp"

namespace td3d::nn {

// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
// creation order is a valid topological order for backpropagation. Parameter
// gradients are accumulated into Parameter::grad.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var parameter(Parameter& p);

  const Matrix& value(Var v) const;
  // Upstream gradient of a node; zero-initialized on first access.
  Matrix& grad(Var v);
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  bool grad_enabled() const { return grad_enabled_; }

  // Appends an op result. `backward` runs once during backward() when the node
  // received a gradient; it is dropped when no input needs a gradient.
  Var add_node(Matrix value, std::span<const Var> inputs, std::function<void(Graph&, Var self)> backward);
  Var add_node(Matrix value, std::initializer_list<Var> inputs, std::function<void(Graph&, Var self)> backward) {
    return add_node(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  // Seeds d(root)/d(root) = scale; root must be 1x1.
  void backward(Var root, double scale = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    bool needs_grad = false;
    std::function<void(Graph&, Var)> backward;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

// y = x W
Var matmul(Graph& g, Var x, Var w);
// y = x + b (b is 1 x C, broadcast over rows)
Var add_bias(Graph& g, Var x, Var b);
Var linear(Graph& g, Var x, Var w, Var b);
Var relu(Graph& g, Var x);
Var add(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double factor);
Var concat_cols(Graph& g, Var a, Var b);
Var concat_rows(Graph& g, std::span<const Var> parts);
Var gather_rows(Graph& g, Var x, std::vector<int> rows);
// Sparse convolution over a kernel map; w is (K * Cin) x Cout, b is 1 x Cout.
Var sparse_conv(Graph& g, Var x, std::shared_ptr<const KernelMap> map, Var w, Var b);
// 1x1 node with a precomputed value and gradient w.r.t. `input`.
Var scalar_with_grad(Graph& g, Var input, double value, Matrix d_input);
// Sum of 1x1 nodes in the given order.
Var sum_scalars(Graph& g, std::span<const Var> terms);

}  // namespace td3d::nn
