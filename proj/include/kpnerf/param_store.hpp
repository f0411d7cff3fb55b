#pragma once

#include "kpnerf/tensor.hpp"

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kpnerf {

struct ParamBlock {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;
  // Multiplier on the optimizer's learning rate for this block.
  double lr_scale = 1.0;
};

/// Named parameter blocks of 64-bit reals. Block ids are stable indices in
/// insertion order; names are unique.
class ParamStore {
 public:
  int add(std::string name, Matrix init, bool trainable = true, double lr_scale = 1.0);

  /// Index of a block, or -1 when absent.
  int find(std::string_view name) const;
  /// Index of a block; throws std::out_of_range when absent.
  int id(std::string_view name) const;

  ParamBlock& operator[](int id) { return blocks_.at(id); }
  const ParamBlock& operator[](int id) const { return blocks_.at(id); }
  ParamBlock& at(std::string_view name) { return blocks_[id(name)]; }
  const ParamBlock& at(std::string_view name) const { return blocks_[id(name)]; }

  int size() const { return static_cast<int>(blocks_.size()); }
  std::size_t num_scalars() const;
  void zero_grad();

  auto begin() { return blocks_.begin(); }
  auto end() { return blocks_.end(); }
  auto begin() const { return blocks_.begin(); }
  auto end() const { return blocks_.end(); }

 private:
  std::vector<ParamBlock> blocks_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace kpnerf
