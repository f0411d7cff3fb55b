#include "kpnerf/mlp.hpp"

#include <algorithm>
#include <cmath>

namespace kpnerf {

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "softplus") return Activation::softplus;
  if (name == "none" || name == "linear") return Activation::none;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
    case Activation::none: return "none";
  }
  return "relu";
}

bool Mlp::is_skip(int layer) const {
  return std::find(config_.skips.begin(), config_.skips.end(), layer) != config_.skips.end();
}

int Mlp::layer_input_dim(int layer) const {
  if (layer == 0) return config_.input_dim;
  return config_.width + (is_skip(layer) && layer < config_.depth ? config_.input_dim : 0);
}

Mlp::Mlp(std::string name, MlpConfig config, ParamStore& store, std::mt19937_64& rng)
    : name_(std::move(name)), config_(std::move(config)) {
  for (int s : config_.skips) {
    if (s <= 0 || s >= config_.depth) {
      throw std::invalid_argument(name_ + ": skip index " + std::to_string(s) + " invalid");
    }
  }
  const int layers = config_.depth + 1;
  for (int k = 0; k < layers; ++k) {
    const bool out = k == config_.depth;
    const int fan_in = layer_input_dim(k);
    const int fan_out = out ? config_.output_dim : config_.width;
    Matrix w(fan_in, fan_out);
    Matrix b = Matrix::Zero(1, fan_out);
    if (out && config_.zero_init_output) {
      w.setZero();
    } else {
      // He-uniform for rectifier stacks, Glorot-uniform for the linear head.
      const double limit = out ? std::sqrt(6.0 / (fan_in + fan_out)) : std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    }
    if (out) b.setConstant(config_.output_bias);
    weights_.push_back(store.add(name_ + ".w" + std::to_string(k), std::move(w)));
    biases_.push_back(store.add(name_ + ".b" + std::to_string(k), std::move(b)));
  }
}

Mlp Mlp::bind(std::string name, MlpConfig config, const ParamStore& store) {
  Mlp m;
  m.name_ = std::move(name);
  m.config_ = std::move(config);
  for (int k = 0; k <= m.config_.depth; ++k) {
    const int w = store.id(m.name_ + ".w" + std::to_string(k));
    const int b = store.id(m.name_ + ".b" + std::to_string(k));
    const int fan_out = k == m.config_.depth ? m.config_.output_dim : m.config_.width;
    if (store[w].value.rows() != m.layer_input_dim(k) || store[w].value.cols() != fan_out) {
      throw ShapeError(m.name_ + " layer " + std::to_string(k) + ": stored weight " +
                       shape_str(store[w].value) + " does not match the configuration");
    }
    m.weights_.push_back(w);
    m.biases_.push_back(b);
  }
  return m;
}

std::vector<int> Mlp::block_ids() const {
  std::vector<int> ids;
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    ids.push_back(weights_[k]);
    ids.push_back(biases_[k]);
  }
  return ids;
}

Var Mlp::forward(Graph& g, Var input) const {
  if (input.cols() != config_.input_dim) {
    throw ShapeError(name_ + " layer 0: expects " + std::to_string(config_.input_dim) +
                     " input features, got " + std::to_string(input.cols()));
  }
  Var h = input;
  for (int k = 0; k <= config_.depth; ++k) {
    if (k > 0 && k < config_.depth && is_skip(k)) h = concat_cols({h, input});
    Var w = g.param(weights_[k]);
    if (w.rows() != h.cols()) {
      throw ShapeError(name_ + " layer " + std::to_string(k) + ": weight " +
                       shape_str(w.value()) + " cannot take " + std::to_string(h.cols()) +
                       " features");
    }
    if (k < config_.depth && config_.activation == Activation::relu) {
      h = affine_relu(h, w, g.param(biases_[k]));
      continue;
    }
    h = affine(h, w, g.param(biases_[k]));
    if (k == config_.depth) break;
    switch (config_.activation) {
      case Activation::relu: h = relu(h); break;
      case Activation::softplus: h = softplus(h); break;
      case Activation::none: break;
    }
  }
  return h;
}

}  // namespace kpnerf
