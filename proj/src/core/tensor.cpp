#include "mrdrive/core/tensor.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "mrdrive/core/rng.hpp"

namespace mrdrive::core {

namespace {

thread_local bool g_grad_enabled = true;

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) shape_error("non-positive dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void shape_error(const std::string& message) {
  throw std::invalid_argument(message);
}

void check_finite(const char* what, const float* values, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(values[i])) {
      throw std::runtime_error(std::string(what) +
                               ": non-finite value at index " +
                               std::to_string(i));
    }
  }
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  const std::int64_t n = shape_numel(shape);
  node->shape = std::move(shape);
  node->data.assign(static_cast<std::size_t>(n), 0.0f);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data,
                         bool requires_grad) {
  const std::int64_t n = shape_numel(shape);
  if (n != static_cast<std::int64_t>(data.size())) {
    shape_error("from_data: shape " + shape_string(shape) + " expects " +
                std::to_string(n) + " values, got " +
                std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev,
                     bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.node_->data) {
    v = static_cast<float>(rng.normal(0.0, stddev));
  }
  return t;
}

float Tensor::item() const {
  if (!node_ || node_->numel() != 1) {
    shape_error("item(): tensor is not a scalar");
  }
  return node_->data[0];
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = node_->requires_grad;
  return wrap(std::move(node));
}

void Tensor::backward() const {
  if (!node_ || node_->numel() != 1) {
    shape_error("backward(): loss must be a scalar tensor");
  }
  if (!node_->recorded() && !node_->requires_grad) {
    throw std::runtime_error(
        "backward(): tensor is not part of a recorded computation graph");
  }

  // Topological order by DFS, then sweep in reverse.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate grads are scratch for this sweep; only leaves accumulate
  // across repeated backward calls.
  for (detail::Node* node : order) {
    if (node->recorded()) node->grad.clear();
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
  }
  for (detail::Node* node : order) {
    if (node->requires_grad && !node->grad.empty()) {
      check_finite("backward gradient", node->grad.data(),
                   static_cast<std::int64_t>(node->grad.size()));
    }
  }
}

}  // namespace mrdrive::core
