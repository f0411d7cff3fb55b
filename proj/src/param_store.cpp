#include "kpnerf/param_store.hpp"

namespace kpnerf {

int ParamStore::add(std::string name, Matrix init, bool trainable, double lr_scale) {
  if (index_.count(name) != 0) {
    throw std::invalid_argument("duplicate parameter block '" + name + "'");
  }
  const int id = size();
  ParamBlock block;
  block.grad = Matrix::Zero(init.rows(), init.cols());
  block.value = std::move(init);
  block.name = name;
  block.trainable = trainable;
  block.lr_scale = lr_scale;
  blocks_.push_back(std::move(block));
  index_.emplace(std::move(name), id);
  return id;
}

int ParamStore::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? -1 : it->second;
}

int ParamStore::id(std::string_view name) const {
  const int i = find(name);
  if (i < 0) throw std::out_of_range("no parameter block '" + std::string(name) + "'");
  return i;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += static_cast<std::size_t>(b.value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& b : blocks_) b.grad.setZero(b.value.rows(), b.value.cols());
}

}  // namespace kpnerf
