#pragma once

#include <unordered_map>
#include <vector>

#include "mrdrive/core/tensor.hpp"

namespace mrdrive::core {

// SGD with momentum. Parameters whose requires_grad is off, or that carry no
// gradient after backward, are left untouched.
class SgdOptimizer {
 public:
  SgdOptimizer(float learning_rate, float momentum)
      : lr_(learning_rate), momentum_(momentum) {}

  void step(std::vector<Tensor>& params);
  void zero_grad(std::vector<Tensor>& params);

  float learning_rate() const { return lr_; }
  void set_learning_rate(float lr) { lr_ = lr; }

 private:
  float lr_;
  float momentum_;
  std::unordered_map<const void*, std::vector<float>> velocity_;
};

}  // namespace mrdrive::core
