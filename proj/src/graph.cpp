#include "kpnerf/graph.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cmath>
#include <memory>

namespace kpnerf {

Graph::Graph(ParamStore* params, bool recording)
    : params_(params), cparams_(params), recording_(recording) {
  nodes_.reserve(64);
}

Graph::Graph(const ParamStore* params) : params_(nullptr), cparams_(params), recording_(false) {
  nodes_.reserve(64);
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = recording_;
  return push(std::move(n));
}

Var Graph::param(int block) {
  if (cparams_ == nullptr) throw std::logic_error("graph has no parameter store");
  const ParamBlock& b = (*cparams_)[block];
  Node n;
  n.value = b.value;
  n.param = block;
  n.needs_grad = recording_ && params_ != nullptr && b.trainable;
  return push(std::move(n));
}

Var Graph::param(std::string_view name) {
  if (cparams_ == nullptr) throw std::logic_error("graph has no parameter store");
  return param(cparams_->id(name));
}

Var Graph::record(Matrix value, std::span<const Var> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    n.parents.reserve(parents.size());
    for (const Var& p : parents) {
      n.parents.push_back(p.id);
      n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
  }
  return push(std::move(n));
}

void Graph::accumulate(int node, const Matrix& delta) { accumulate_expr(node, delta); }

void tune_allocator() {
#if defined(__GLIBC__)
  // Keep large activation buffers on the heap instead of fresh mmap pages;
  // page faults otherwise dominate the backward pass.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

void Graph::backward(Var loss) {
  if (!recording_) throw std::logic_error("backward() on a graph built without recording");
  if (loss.graph != this) throw std::invalid_argument("loss belongs to a different graph");
  const Matrix& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(lv));
  }
  if (!nodes_[loss.id].needs_grad) return;
  nodes_[loss.id].grad = Matrix::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.param >= 0) {
      (*params_)[n.param].grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

namespace {

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Graph& g = *a.graph;
  return g.record(a.value() + b.value(), {a, b}, [](Graph& g, int n) {
    g.accumulate(g.parent(n, 0), g.grad(n));
    g.accumulate(g.parent(n, 1), g.grad(n));
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Graph& g = *a.graph;
  return g.record(a.value() - b.value(), {a, b}, [](Graph& g, int n) {
    g.accumulate(g.parent(n, 0), g.grad(n));
    g.accumulate_expr(g.parent(n, 1), -g.grad(n));
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Graph& g = *a.graph;
  return g.record(a.value().cwiseProduct(b.value()), {a, b}, [](Graph& g, int n) {
    const int pa = g.parent(n, 0);
    const int pb = g.parent(n, 1);
    if (g.needs_grad(pa)) g.accumulate_expr(pa, g.grad(n).cwiseProduct(g.value(pb)));
    if (g.needs_grad(pb)) g.accumulate_expr(pb, g.grad(n).cwiseProduct(g.value(pa)));
  });
}

Var scale(Var a, double s) {
  Graph& g = *a.graph;
  return g.record(a.value() * s, {a}, [s](Graph& g, int n) {
    g.accumulate_expr(g.parent(n, 0), g.grad(n) * s);
  });
}

Var add_scalar(Var a, double s) {
  Graph& g = *a.graph;
  return g.record(a.value().array() + s, {a}, [](Graph& g, int n) {
    g.accumulate(g.parent(n, 0), g.grad(n));
  });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.value()) + " * " +
                     shape_str(b.value()));
  }
  Graph& g = *a.graph;
  Matrix out;
  out.noalias() = a.value() * b.value();
  return g.record(std::move(out), {a, b}, [](Graph& g, int n) {
    const int pa = g.parent(n, 0);
    const int pb = g.parent(n, 1);
    if (g.needs_grad(pa)) g.accumulate_expr(pa, g.grad(n) * g.value(pb).transpose());
    if (g.needs_grad(pb)) g.accumulate_expr(pb, g.value(pa).transpose() * g.grad(n));
  });
}

Var affine(Var x, Var w, Var b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("affine: cannot apply " + shape_str(w.value()) + " + " +
                     shape_str(b.value()) + " to " + shape_str(x.value()));
  }
  Graph& g = *x.graph;
  Matrix out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return g.record(std::move(out), {x, w, b}, [](Graph& g, int n) {
    const int px = g.parent(n, 0);
    const int pw = g.parent(n, 1);
    const int pb = g.parent(n, 2);
    const Matrix& go = g.grad(n);
    if (g.needs_grad(px)) g.accumulate_expr(px, go * g.value(pw).transpose());
    if (g.needs_grad(pw)) g.accumulate_expr(pw, g.value(px).transpose() * go);
    if (g.needs_grad(pb)) g.accumulate_expr(pb, go.colwise().sum());
  });
}

Var affine_relu(Var x, Var w, Var b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("affine: cannot apply " + shape_str(w.value()) + " + " +
                     shape_str(b.value()) + " to " + shape_str(x.value()));
  }
  Graph& g = *x.graph;
  Matrix out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  out = out.cwiseMax(0.0);
  return g.record(std::move(out), {x, w, b}, [](Graph& g, int n) {
    const int px = g.parent(n, 0);
    const int pw = g.parent(n, 1);
    const int pb = g.parent(n, 2);
    const Matrix gpre = (g.value(n).array() > 0.0).select(g.grad(n).array(), 0.0).matrix();
    if (g.needs_grad(px)) g.accumulate_expr(px, gpre * g.value(pw).transpose());
    if (g.needs_grad(pw)) g.accumulate_expr(pw, g.value(px).transpose() * gpre);
    if (g.needs_grad(pb)) g.accumulate_expr(pb, gpre.colwise().sum());
  });
}

Var relu(Var a) {
  Graph& g = *a.graph;
  return g.record(a.value().cwiseMax(0.0), {a}, [](Graph& g, int n) {
    const int p = g.parent(n, 0);
    g.accumulate_expr(p, (g.value(p).array() > 0.0).select(g.grad(n).array(), 0.0).matrix());
  });
}

Var exp(Var a) {
  Graph& g = *a.graph;
  return g.record(a.value().array().exp().matrix(), {a}, [](Graph& g, int n) {
    g.accumulate_expr(g.parent(n, 0), g.grad(n).cwiseProduct(g.value(n)));
  });
}

Var sin(Var a) {
  Graph& g = *a.graph;
  return g.record(a.value().array().sin().matrix(), {a}, [](Graph& g, int n) {
    const int p = g.parent(n, 0);
    g.accumulate_expr(p, g.grad(n).cwiseProduct(g.value(p).array().cos().matrix()));
  });
}

Var cos(Var a) {
  Graph& g = *a.graph;
  return g.record(a.value().array().cos().matrix(), {a}, [](Graph& g, int n) {
    const int p = g.parent(n, 0);
    g.accumulate_expr(p, -g.grad(n).cwiseProduct(g.value(p).array().sin().matrix()));
  });
}

Var softplus(Var a) {
  Graph& g = *a.graph;
  // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
  Matrix out = a.value().unaryExpr(
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return g.record(std::move(out), {a}, [](Graph& g, int n) {
    const int p = g.parent(n, 0);
    Matrix s = g.value(p).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    g.accumulate_expr(p, g.grad(n).cwiseProduct(s));
  });
}

Var sigmoid(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return g.record(std::move(out), {a}, [](Graph& g, int n) {
    const Matrix& y = g.value(n);
    g.accumulate_expr(g.parent(n, 0),
                      g.grad(n).cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

Var square(Var a) {
  Graph& g = *a.graph;
  return g.record(a.value().cwiseAbs2(), {a}, [](Graph& g, int n) {
    const int p = g.parent(n, 0);
    g.accumulate_expr(p, 2.0 * g.grad(n).cwiseProduct(g.value(p)));
  });
}

Var sum(Var a) {
  Graph& g = *a.graph;
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), {a}, [](Graph& g, int n) {
    const int p = g.parent(n, 0);
    const Matrix& v = g.value(p);
    g.accumulate_expr(p, Matrix::Constant(v.rows(), v.cols(), g.grad(n)(0, 0)));
  });
}

Var mean(Var a) {
  Graph& g = *a.graph;
  if (a.value().size() == 0) throw ShapeError("mean of an empty matrix");
  Matrix out(1, 1);
  out(0, 0) = a.value().mean();
  return g.record(std::move(out), {a}, [](Graph& g, int n) {
    const int p = g.parent(n, 0);
    const Matrix& v = g.value(p);
    const double s = g.grad(n)(0, 0) / static_cast<double>(v.size());
    g.accumulate_expr(p, Matrix::Constant(v.rows(), v.cols(), s));
  });
}

Var softmax(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return g.record(std::move(out), {a}, [](Graph& g, int n) {
    const Matrix& y = g.value(n);
    const Matrix& go = g.grad(n);
    // dx = y * (go - <go, y>)
    Eigen::VectorXd dot = go.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct(go - dot.replicate(1, go.cols()));
    g.accumulate(g.parent(n, 0), dx);
  });
}

Var squared_norm(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().rowwise().squaredNorm();
  return g.record(std::move(out), {a}, [](Graph& g, int n) {
    const int p = g.parent(n, 0);
    const Matrix& x = g.value(p);
    g.accumulate_expr(p, 2.0 * x.cwiseProduct(g.grad(n).replicate(1, x.cols())));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Graph& g = *parts.front().graph;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row count " + std::to_string(p.rows()) + " vs " +
                       std::to_string(rows));
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return g.record(std::move(out), parts, [offsets](Graph& g, int n) {
    const Matrix& go = g.grad(n);
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      const int p = g.parent(n, static_cast<int>(k));
      if (!g.needs_grad(p)) continue;
      g.accumulate_expr(p, go.middleCols(offsets[k], g.value(p).cols()));
    }
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_cols(Var a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + shape_str(a.value()));
  }
  Graph& g = *a.graph;
  Matrix out = a.value().middleCols(start, count);
  return g.record(std::move(out), {a}, [start, count](Graph& g, int n) {
    const int p = g.parent(n, 0);
    const Matrix& v = g.value(p);
    Matrix d = Matrix::Zero(v.rows(), v.cols());
    d.middleCols(start, count) = g.grad(n);
    g.accumulate(p, d);
  });
}

Var gather_rows(Var table, std::vector<int> index) {
  Graph& g = *table.graph;
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), t.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= t.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(index[r]) + " out of " +
                       shape_str(t));
    }
    out.row(static_cast<Eigen::Index>(r)) = t.row(index[r]);
  }
  auto idx = std::make_shared<std::vector<int>>(std::move(index));
  return g.record(std::move(out), {table}, [idx](Graph& g, int n) {
    const int p = g.parent(n, 0);
    const Matrix& go = g.grad(n);
    Matrix d = Matrix::Zero(g.value(p).rows(), g.value(p).cols());
    for (std::size_t r = 0; r < idx->size(); ++r) {
      d.row((*idx)[r]) += go.row(static_cast<Eigen::Index>(r));
    }
    g.accumulate(p, d);
  });
}

}  // namespace kpnerf
