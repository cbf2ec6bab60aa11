#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace varformer {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::uint64_t id = 0;
};

/// Dense row-major float64 array with an optional gradient slot.
///
/// Copies share storage. Values are treated as immutable once an op has
/// produced them; only parameters are updated in place (by the optimizer).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  /// Leaf that receives gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Allocates a zero gradient if none exists yet.
  std::span<double> grad_mut() const;
  void zero_grad() const;

  std::uint64_t id() const { return impl_->id; }

  /// Fresh leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations (a tape).
class Tape {
 public:
  struct Record {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and replays the records in reverse.
  /// Throws ContractError unless `loss` holds exactly one value.
  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Describes the first recorded output containing NaN/Inf, if any.
  std::optional<std::string> first_nonfinite() const;

 private:
  std::vector<Record> records_;
};

/// Makes `tape` the active tape for the current thread for the scope's lifetime.
/// Ops record only while a tape is active and some input requires a gradient.
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

}  // namespace varformer
