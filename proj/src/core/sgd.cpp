#include "mrdrive/core/sgd.hpp"

namespace mrdrive::core {

void SgdOptimizer::step(std::vector<Tensor>& params) {
  for (auto& p : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto& vel = velocity_[p.storage_id()];
    const auto& g = p.grad_vec();
    if (vel.size() != g.size()) vel.assign(g.size(), 0.0f);
    float* data = p.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      data[i] -= lr_ * vel[i];
    }
  }
}

void SgdOptimizer::zero_grad(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace mrdrive::core
