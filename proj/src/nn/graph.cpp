#include "td3d/nn/graph.hpp"

#include <algorithm>
#include <stdexcept>

namespace td3d::nn {

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(Parameter& p) {
  Node n;
  n.param = &p;
  n.needs_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::value(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.param ? n.param->value : n.value;
}

Matrix& Graph::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) {
    const Matrix& val = n.param ? n.param->value : n.value;
    n.grad = Matrix::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

Var Graph::add_node(Matrix value, std::span<const Var> inputs, std::function<void(Graph&, Var)> backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (Var in : inputs) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(in.id)].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

void Graph::backward(Var root, double scale) {
  if (value(root).size() != 1) throw std::logic_error("backward() needs a scalar root");
  if (!needs_grad(root)) return;
  grad(root)(0, 0) += scale;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.param) {
      n.param->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, Var{id});
    }
  }
}

Var matmul(Graph& g, Var x, Var w) {
  Matrix y = g.value(x) * g.value(w);
  return g.add_node(std::move(y), {x, w}, [x, w](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    if (g.needs_grad(x)) g.grad(x).noalias() += dy * g.value(w).transpose();
    if (g.needs_grad(w)) g.grad(w).noalias() += g.value(x).transpose() * dy;
  });
}

Var add_bias(Graph& g, Var x, Var b) {
  Matrix y = g.value(x);
  y.rowwise() += g.value(b).row(0);
  return g.add_node(std::move(y), {x, b}, [x, b](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    if (g.needs_grad(x)) g.grad(x) += dy;
    if (g.needs_grad(b)) g.grad(b) += dy.colwise().sum();
  });
}

Var linear(Graph& g, Var x, Var w, Var b) { return add_bias(g, matmul(g, x, w), b); }

Var relu(Graph& g, Var x) {
  Matrix y = g.value(x).cwiseMax(0.0);
  return g.add_node(std::move(y), {x}, [x](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    g.grad(x).array() += (g.value(self).array() > 0.0).select(dy.array(), 0.0);
  });
}

Var add(Graph& g, Var a, Var b) {
  Matrix y = g.value(a) + g.value(b);
  return g.add_node(std::move(y), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    if (g.needs_grad(a)) g.grad(a) += dy;
    if (g.needs_grad(b)) g.grad(b) += dy;
  });
}

Var scale(Graph& g, Var x, double factor) {
  Matrix y = g.value(x) * factor;
  return g.add_node(std::move(y), {x}, [x, factor](Graph& g, Var self) { g.grad(x) += g.grad(self) * factor; });
}

Var concat_cols(Graph& g, Var a, Var b) {
  const Matrix& va = g.value(a);
  const Matrix& vb = g.value(b);
  if (va.rows() != vb.rows()) throw std::invalid_argument("concat_cols: row count mismatch");
  Matrix y(va.rows(), va.cols() + vb.cols());
  y << va, vb;
  const auto ca = va.cols();
  const auto cb = vb.cols();
  return g.add_node(std::move(y), {a, b}, [a, b, ca, cb](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    if (g.needs_grad(a)) g.grad(a) += dy.leftCols(ca);
    if (g.needs_grad(b)) g.grad(b) += dy.rightCols(cb);
  });
}

Var concat_rows(Graph& g, std::span<const Var> parts) {
  Eigen::Index rows = 0, cols = -1;
  for (Var p : parts) {
    rows += g.value(p).rows();
    if (cols < 0) cols = g.value(p).cols();
    if (g.value(p).cols() != cols) throw std::invalid_argument("concat_rows: column count mismatch");
  }
  Matrix y(rows, std::max<Eigen::Index>(cols, 0));
  Eigen::Index r = 0;
  for (Var p : parts) {
    y.middleRows(r, g.value(p).rows()) = g.value(p);
    r += g.value(p).rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return g.add_node(std::move(y), ps, [ps](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    Eigen::Index r = 0;
    for (Var p : ps) {
      const Eigen::Index n = g.value(p).rows();
      if (g.needs_grad(p)) g.grad(p) += dy.middleRows(r, n);
      r += n;
    }
  });
}

Var gather_rows(Graph& g, Var x, std::vector<int> rows) {
  const Matrix& vx = g.value(x);
  Matrix y(static_cast<Eigen::Index>(rows.size()), vx.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = vx.row(rows[i]);
  return g.add_node(std::move(y), {x}, [x, rows = std::move(rows)](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    Matrix& dx = g.grad(x);
    for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += dy.row(static_cast<Eigen::Index>(i));
  });
}

namespace {

void gather(const Matrix& src, const std::vector<int>& rows, Matrix& dst) {
  dst.resize(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) dst.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
}

void scatter_add(const Matrix& src, const std::vector<int>& rows, Matrix& dst) {
  for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) += src.row(static_cast<Eigen::Index>(i));
}

}  // namespace

Var sparse_conv(Graph& g, Var x, std::shared_ptr<const KernelMap> map, Var w, Var b) {
  const Matrix& vx = g.value(x);
  const Matrix& vw = g.value(w);
  const Eigen::Index cin = vx.cols();
  const Eigen::Index cout = vw.cols();
  if (vw.rows() != cin * map->num_offsets() || vx.rows() != map->num_in) {
    throw std::invalid_argument("sparse_conv: shape mismatch");
  }
  Matrix y = Matrix::Zero(map->num_out, cout);
  y.rowwise() += g.value(b).row(0);
  Matrix gathered, product;
  for (int k = 0; k < map->num_offsets(); ++k) {
    const auto& in = map->in[static_cast<std::size_t>(k)];
    if (in.empty()) continue;
    const auto wk = vw.middleRows(k * cin, cin);
    if (map->identity[static_cast<std::size_t>(k)]) {
      y.noalias() += vx * wk;
      continue;
    }
    gather(vx, in, gathered);
    product.noalias() = gathered * wk;
    scatter_add(product, map->out[static_cast<std::size_t>(k)], y);
  }
  return g.add_node(std::move(y), {x, w, b}, [x, w, b, map, cin](Graph& g, Var self) {
    const Matrix& dy = g.grad(self);
    const bool need_x = g.needs_grad(x);
    const bool need_w = g.needs_grad(w);
    if (g.needs_grad(b)) g.grad(b) += dy.colwise().sum();
    const Matrix& vx = g.value(x);
    const Matrix& vw = g.value(w);
    Matrix gx, gy, product;
    for (int k = 0; k < map->num_offsets(); ++k) {
      const auto& in = map->in[static_cast<std::size_t>(k)];
      if (in.empty()) continue;
      const auto wk = vw.middleRows(k * cin, cin);
      if (map->identity[static_cast<std::size_t>(k)]) {
        if (need_x) g.grad(x).noalias() += dy * wk.transpose();
        if (need_w) g.grad(w).middleRows(k * cin, cin).noalias() += vx.transpose() * dy;
        continue;
      }
      gather(dy, map->out[static_cast<std::size_t>(k)], gy);
      if (need_x) {
        product.noalias() = gy * wk.transpose();
        scatter_add(product, in, g.grad(x));
      }
      if (need_w) {
        gather(vx, in, gx);
        g.grad(w).middleRows(k * cin, cin).noalias() += gx.transpose() * gy;
      }
    }
  });
}

Var scalar_with_grad(Graph& g, Var input, double value, Matrix d_input) {
  Matrix y(1, 1);
  y(0, 0) = value;
  return g.add_node(std::move(y), {input}, [input, d = std::move(d_input)](Graph& g, Var self) {
    g.grad(input) += g.grad(self)(0, 0) * d;
  });
}

Var sum_scalars(Graph& g, std::span<const Var> terms) {
  Matrix y = Matrix::Zero(1, 1);
  for (Var t : terms) y(0, 0) += g.value(t)(0, 0);
  std::vector<Var> ts(terms.begin(), terms.end());
  return g.add_node(std::move(y), ts, [ts](Graph& g, Var self) {
    const double dy = g.grad(self)(0, 0);
    for (Var t : ts) {
      if (g.needs_grad(t)) g.grad(t)(0, 0) += dy;
    }
  });
}

}  // namespace td3d::nn
