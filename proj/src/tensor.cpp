#include "varformer/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "varformer/errors.hpp"

namespace varformer {

namespace {

std::atomic<std::uint64_t> next_id{1};
thread_local Tape* current_tape = nullptr;

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : Tensor(shape, std::vector<double>(shape_size(shape), fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->id = next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.impl_->requires_grad = true;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() needs a matrix, got " + shape_str(shape()));
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() needs a matrix, got " + shape_str(shape()));
  return impl_->shape[1];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<double> Tensor::grad_mut() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
                  std::function<void()> backward) {
  records_.push_back(Record{std::string(op), std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined tensor")));
  }
  Tensor seed = loss;
  seed.grad_mut()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not reachable from the loss
    it->backward();
  }
}

std::optional<std::string> Tape::first_nonfinite() const {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    for (double v : r.output.data()) {
      if (!std::isfinite(v)) {
        return "record " + std::to_string(i) + " (" + r.op + ", shape " + shape_str(r.output.shape()) +
               ")";
      }
    }
  }
  return std::nullopt;
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }

TapeScope::~TapeScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

}  // namespace varformer
