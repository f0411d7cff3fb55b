#pragma once

#include "kpnerf/param_store.hpp"

#include <cstdint>
#include <vector>

namespace kpnerf {

/// Learning rate = base_rate * decay_factor^(step / decay_interval).
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_rate = 1e-3;
  double decay_factor = 0.1;
  double decay_interval = 1e5;
};

struct OptState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::int64_t step = 0;
};

class Adam {
 public:
  Adam(const ParamStore& params, AdamConfig config = {});

  /// Rate used by the next call to step().
  double learning_rate() const;

  /// Bias-corrected adaptive-moment update of every trainable block. Throws
  /// NonFiniteError naming the first block with a non-finite gradient, before
  /// touching any parameter.
  void step(ParamStore& params);

  const OptState& state() const { return state_; }
  OptState& state() { return state_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  OptState state_;
};

}  // namespace kpnerf
