#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gabformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Raised when an op produces NaN or Inf while finite checking is enabled.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Finite checking is a process-wide toggle; tests keep it on.
void set_check_finite(bool enabled);
bool check_finite_enabled();

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

// Dense fp64 array in row-major order (images are B x C x H x W).
//
// Tensor is a shared handle: copies alias the same storage. Ops never modify
// their inputs; only the optimizer writes parameter data in place.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  // Allocates a zero gradient buffer on first use.
  std::span<double> grad_buffer() const;
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy without gradient tracking.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

// Ordered record of differentiable ops. Nodes are appended in execution
// order, so walking the record backwards visits every op after all of its
// consumers.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  void record(const Tensor& output, BackwardFn fn);
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  // Populates grad on every requires_grad tensor reachable from loss.
  // A tape can be walked once; call reset() before reusing it.
  void backward(const Tensor& loss);
  void reset();

 private:
  struct Node {
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Makes a tape the recording target for ops on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Runs backward on the active tape.
void backward(const Tensor& loss);

}  // namespace gabformer
