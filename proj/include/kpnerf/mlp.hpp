#pragma once

#include "kpnerf/graph.hpp"

#include <random>
#include <string>
#include <vector>

namespace kpnerf {

enum class Activation { relu, softplus, none };

Activation activation_from_name(const std::string& name);
std::string activation_name(Activation a);

struct MlpConfig {
  int input_dim = 0;
  int width = 64;
  /// Number of hidden layers.
  int depth = 4;
  int output_dim = 1;
  /// Hidden-layer indices (1..depth-1) whose input is concat(previous, network input).
  std::vector<int> skips;
  Activation activation = Activation::relu;
  bool zero_init_output = false;
  double output_bias = 0.0;
};

/// Affine + activation stack whose weights live in a ParamStore as
/// "<name>.w<k>" / "<name>.b<k>" blocks.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string name, MlpConfig config, ParamStore& store, std::mt19937_64& rng);
  /// Binds to blocks that already exist in `store` (checkpoint loading).
  static Mlp bind(std::string name, MlpConfig config, const ParamStore& store);

  /// Throws ShapeError naming the offending layer when shapes do not chain.
  Var forward(Graph& g, Var input) const;

  const MlpConfig& config() const { return config_; }
  const std::string& name() const { return name_; }
  int layer_count() const { return static_cast<int>(weights_.size()); }
  int layer_input_dim(int layer) const;
  std::vector<int> block_ids() const;

 private:
  bool is_skip(int layer) const;

  std::string name_;
  MlpConfig config_;
  std::vector<int> weights_;
  std::vector<int> biases_;
};

}  // namespace kpnerf
