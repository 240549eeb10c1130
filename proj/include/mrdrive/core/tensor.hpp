#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mrdrive::core {

class Rng;

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Pushes this node's grad into the parents' grads. Null for leaves.
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
  bool recorded() const { return backward_fn != nullptr; }
};

}  // namespace detail

// Thread-local switch for graph recording. Forwards executed while recording
// is off (eval/inference) build no graph and allocate no closures.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense float32 tensor, row-major, with optional gradient buffer. A Tensor is
// a cheap handle onto a shared node; ops create new nodes and record the
// backward closure when grad mode is on. Values are immutable after an op
// creates them; only leaf parameters are mutated in place (optimizer updates)
// and only between graphs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return node_->numel(); }

  float* data() { return node_->data.data(); }
  const float* data() const { return node_->data.data(); }
  std::vector<float>& data_vec() { return node_->data; }
  const std::vector<float>& data_vec() const { return node_->data; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  float* grad() {
    node_->ensure_grad();
    return node_->grad.data();
  }
  const std::vector<float>& grad_vec() const { return node_->grad; }
  void zero_grad() {
    if (node_) node_->grad.clear();
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Scalar access; requires numel() == 1.
  float item() const;

  // Deep copy of data (grad not copied).
  Tensor clone() const;

  // Reverse-mode accumulation from this scalar. Repeated calls without
  // zeroing accumulate. Errors if this tensor is not a recorded scalar.
  void backward() const;

  // Identity of the underlying storage, for shared-weight checks.
  const void* storage_id() const { return node_.get(); }

  std::shared_ptr<detail::Node>& node() { return node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Hard error on non-finite values; every op forward runs its output through
// this, so NaN/Inf cannot propagate silently.
void check_finite(const char* what, const float* values, std::int64_t n);

std::string shape_string(const std::vector<int>& shape);

[[noreturn]] void shape_error(const std::string& message);

}  // namespace mrdrive::core
