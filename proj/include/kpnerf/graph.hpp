#pragma once

#include "kpnerf/param_store.hpp"

#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace kpnerf {

class Graph;

/// Handle to a recorded node. Cheap to copy; valid while its Graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return graph != nullptr && id >= 0; }
};

/// Backward rule of a recorded op. Receives the graph and the node index; reads
/// the node's gradient and accumulates into parents via Graph::accumulate.
using BackwardFn = std::function<void(Graph&, int)>;

/// Reverse-mode tape over batched matrices. Nodes are appended in execution
/// order, so reverse index order is a reverse topological order.
/// Process-wide allocator settings for large training batches (glibc only).
void tune_allocator();

class Graph {
 public:
  explicit Graph(ParamStore* params = nullptr, bool recording = true);
  /// Inference-only graph over a read-only store.
  explicit Graph(const ParamStore* params);

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix value);
  /// Leaf whose gradient is kept on the tape and readable after backward().
  Var variable(Matrix value);
  /// Leaf bound to a parameter block; backward() accumulates into block.grad.
  Var param(int block);
  Var param(std::string_view name);

  /// Appends an op result. `fn` is dropped when no parent needs a gradient or
  /// the graph is not recording.
  Var record(Matrix value, std::span<const Var> parents, BackwardFn fn);
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(fn));
  }

  const Matrix& value(int node) const { return nodes_[node].value; }
  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient accumulated on a node; zero-sized if the node was not reached.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  const Matrix& grad(int node) const { return nodes_[node].grad; }
  bool needs_grad(int node) const { return nodes_[node].needs_grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  int parent(int node, int k) const { return nodes_[node].parents[k]; }

  /// grad[node] += delta (allocating on first use). No-op when the node does
  /// not need a gradient.
  void accumulate(int node, const Matrix& delta);
  template <typename Expr>
  void accumulate_expr(int node, const Expr& delta) {
    Node& n = nodes_[node];
    if (!n.needs_grad) return;
    // parents never alias their child's gradient, so products skip the temporary
    if (n.grad.size() == 0) {
      n.grad.noalias() = delta;
    } else {
      n.grad.noalias() += delta;
    }
  }

  bool recording() const { return recording_; }
  const ParamStore* params() const { return cparams_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Seeds d(loss)/d(loss) = 1 and runs every reachable backward rule once.
  /// Throws if the loss is not 1x1 or the graph was built without recording.
  void backward(Var loss);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<int> parents;
    BackwardFn backward;
    int param = -1;
    bool needs_grad = false;
  };

  Var push(Node node);

  ParamStore* params_;
  const ParamStore* cparams_;
  bool recording_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return graph->value(id); }

// Primitive ops. Shapes are checked; mismatches throw ShapeError.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var matmul(Var a, Var b);
/// x * W + b with b a 1 x out row broadcast over rows.
Var affine(Var x, Var w, Var b);
Var relu(Var a);
/// relu(x W + b) in one node.
Var affine_relu(Var x, Var w, Var b);
Var exp(Var a);
Var sin(Var a);
Var cos(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var square(Var a);
/// Sum of all entries, 1x1.
Var sum(Var a);
/// Mean of all entries, 1x1.
Var mean(Var a);
/// Row-wise softmax.
Var softmax(Var a);
/// Row-wise squared Euclidean norm, rows x 1.
Var squared_norm(Var a);
Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(Var a, int start, int count);
/// Output row r is table row index[r]; backward scatter-adds.
Var gather_rows(Var table, std::vector<int> index);

}  // namespace kpnerf
