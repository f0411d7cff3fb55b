#include "kpnerf/encoding.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace kpnerf {

double PositionalEncoder::band_weight(int band) const {
  if (!window) return 1.0;
  const double a = std::clamp(*window - band, 0.0, 1.0);
  return 0.5 * (1.0 - std::cos(std::numbers::pi * a));
}

Matrix encode(const Matrix& x, const PositionalEncoder& enc) {
  const Eigen::Index d = x.cols();
  Matrix out(x.rows(), enc.output_dim(static_cast<int>(d)));
  Eigen::Index at = 0;
  if (enc.include_identity) {
    out.leftCols(d) = x;
    at = d;
  }
  for (int l = 0; l < enc.bands; ++l) {
    const double freq = std::ldexp(std::numbers::pi, l);
    const double w = enc.band_weight(l);
    auto scaled = (x.array() * freq);
    out.middleCols(at, d) = (scaled.sin() * w).matrix();
    out.middleCols(at + d, d) = (scaled.cos() * w).matrix();
    at += 2 * d;
  }
  return out;
}

Vector encode(const Vector& x, const PositionalEncoder& enc) {
  Matrix row = x.transpose();
  return encode(row, enc).row(0).transpose();
}

Var encode(Var x, const PositionalEncoder& enc) {
  Graph& g = *x.graph;
  Matrix out = encode(x.value(), enc);
  return g.record(std::move(out), {x}, [enc](Graph& g, int n) {
    const int p = g.parent(n, 0);
    const Matrix& xv = g.value(p);
    const Matrix& y = g.value(n);
    const Matrix& go = g.grad(n);
    const Eigen::Index d = xv.cols();
    Matrix dx = Matrix::Zero(xv.rows(), d);
    Eigen::Index at = 0;
    if (enc.include_identity) {
      dx += go.leftCols(d);
      at = d;
    }
    for (int l = 0; l < enc.bands; ++l) {
      const double freq = std::ldexp(std::numbers::pi, l);
      // d/dx [w sin(fx)] = f * (w cos(fx)); d/dx [w cos(fx)] = -f * (w sin(fx))
      dx.array() += freq * (go.middleCols(at, d).array() * y.middleCols(at + d, d).array() -
                            go.middleCols(at + d, d).array() * y.middleCols(at, d).array());
      at += 2 * d;
    }
    g.accumulate(p, dx);
  });
}

}  // namespace kpnerf
