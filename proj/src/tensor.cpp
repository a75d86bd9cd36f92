#include "gabformer/tensor.hpp"

#include <atomic>
#include <bit>
#include <cstdint>
#include <sstream>
#include <utility>

namespace gabformer {

namespace {
std::atomic<bool> g_check_finite{true};
thread_local Tape* t_active_tape = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

void set_check_finite(bool enabled) { g_check_finite = enabled; }
bool check_finite_enabled() { return g_check_finite; }

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor shape " + shape_to_string(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " +
                            shape_to_string(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(da[i]) != std::bit_cast<std::uint64_t>(db[i])) return false;
  }
  return true;
}

void Tape::record(const Tensor& output, BackwardFn fn) {
  if (consumed_) throw std::logic_error("recording onto a tape that was already walked; call reset()");
  nodes_.push_back(Node{output, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward called twice on the same tape without reset()");
  if (nodes_.empty()) throw std::logic_error("backward on an empty tape");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw std::invalid_argument("loss does not depend on any tracked tensor");
  consumed_ = true;

  Tensor root = loss;
  root.grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->fn(it->output.grad());
  }
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = previous_; }

Tape* active_tape() { return t_active_tape; }

void backward(const Tensor& loss) {
  if (!t_active_tape) throw std::logic_error("backward without an active tape");
  t_active_tape->backward(loss);
}

}  // namespace gabformer
