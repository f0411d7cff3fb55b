#pragma once
// Central finite-difference oracle for reverse-mode gradients. Test-only.

#include "kpnerf/graph.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace kpnerf::testing {

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  int checked = 0;
};

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of a scalar function at 0; the five-point stencil has O(h^4) error.
inline double central_difference(const std::function<double(double)>& f, double h, bool five_point) {
  if (!five_point) return (f(h) - f(-h)) / (2.0 * h);
  return (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
}

/// Compares d(loss)/d(block) from backward() against central differences for
/// every trainable scalar in `store`.
inline GradCheck check_param_gradients(ParamStore& store, const std::function<Var(Graph&)>& f,
                                       double h = 1e-4, double floor = 1e-6, bool five_point = false) {
  store.zero_grad();
  {
    Graph g(&store);
    Var loss = f(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph g(&store, false);
    return f(g).value()(0, 0);
  };
  GradCheck out;
  for (ParamBlock& b : store) {
    if (!b.trainable) continue;
    for (Eigen::Index k = 0; k < b.value.size(); ++k) {
      double& w = b.value.data()[k];
      const double saved = w;
      const double numeric = central_difference([&](double d) {
        w = saved + d;
        return eval();
      }, h, five_point);
      w = saved;
      const double analytic = b.grad.data()[k];
      const double rel = relative_error(analytic, numeric, floor);
      ++out.checked;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = b.name + "[" + std::to_string(k) + "] analytic=" + std::to_string(analytic) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return out;
}

/// Same check for the gradient of a graph input created with Graph::variable.
inline GradCheck check_input_gradient(const Matrix& x0,
                                      const std::function<Var(Graph&, Var)>& f,
                                      double h = 1e-4, double floor = 1e-6) {
  Matrix analytic;
  {
    Graph g(static_cast<ParamStore*>(nullptr));
    Var x = g.variable(x0);
    Var loss = f(g, x);
    g.backward(loss);
    analytic = g.grad(x);
    if (analytic.size() == 0) analytic = Matrix::Zero(x0.rows(), x0.cols());
  }
  auto eval = [&](const Matrix& x) {
    Graph g(static_cast<ParamStore*>(nullptr), false);
    return f(g, g.constant(x)).value()(0, 0);
  };
  GradCheck out;
  Matrix x = x0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double saved = x.data()[k];
    x.data()[k] = saved + h;
    const double fp = eval(x);
    x.data()[k] = saved - h;
    const double fm = eval(x);
    x.data()[k] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel = relative_error(analytic.data()[k], numeric, floor);
    ++out.checked;
    if (rel > out.max_rel) {
      out.max_rel = rel;
      out.worst = "x[" + std::to_string(k) + "] analytic=" + std::to_string(analytic.data()[k]) +
                  " numeric=" + std::to_string(numeric);
    }
  }
  return out;
}

}  // namespace kpnerf::testing
