#include "kpnerf/adam.hpp"

#include <cmath>

namespace kpnerf {

Adam::Adam(const ParamStore& params, AdamConfig config) : config_(config) {
  for (const ParamBlock& b : params) {
    state_.first_moment.push_back(Matrix::Zero(b.value.rows(), b.value.cols()));
    state_.second_moment.push_back(Matrix::Zero(b.value.rows(), b.value.cols()));
  }
}

double Adam::learning_rate() const {
  return config_.base_rate *
         std::pow(config_.decay_factor, static_cast<double>(state_.step) / config_.decay_interval);
}

void Adam::step(ParamStore& params) {
  if (params.size() != static_cast<int>(state_.first_moment.size())) {
    throw std::logic_error("optimizer state does not match the parameter store");
  }
  for (const ParamBlock& b : params) {
    if (b.trainable && !b.grad.allFinite()) {
      throw NonFiniteError("non-finite gradient in block '" + b.name + "'");
    }
  }
  const double rate = learning_rate();
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (int i = 0; i < params.size(); ++i) {
    ParamBlock& b = params[i];
    Matrix& m = state_.first_moment[i];
    Matrix& v = state_.second_moment[i];
    m = config_.beta1 * m + (1.0 - config_.beta1) * b.grad;
    v = config_.beta2 * v + (1.0 - config_.beta2) * b.grad.cwiseAbs2();
    if (!b.trainable) continue;
    const double r = rate * b.lr_scale;
    b.value.array() -= r * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.eps);
  }
}

}  // namespace kpnerf
