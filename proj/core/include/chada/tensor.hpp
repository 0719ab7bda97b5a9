#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace chada {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces or consumes non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;

  std::span<T> ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};
}  // namespace detail

/// Dense row-major array with an optional gradient buffer.
///
/// Tensor is a shared handle: copies refer to the same storage, which is what
/// lets the tape route gradients back into parameters. Use clone() for an
/// independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Extent of a dimension; negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> values() const { return node_->data; }
  std::span<T> mutable_values() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  /// Gradient buffer, allocated as zeros on first access.
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }
  void zero_grad();

  /// Deep copy without gradient history.
  Tensor clone() const;
  bool shares_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode<T>> node_;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

/// Ordered log of differentiable operations executed while recording.
///
/// Recording is scoped per thread: construct a Tape::Recording on the stack
/// and every op whose inputs require gradients appends its backward closure.
/// One tape must not be mutated from several threads.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  class Recording {
   public:
    explicit Recording(Tape& tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// The tape recording on this thread, or nullptr.
  static Tape* active();

  void record(BackwardFn fn) { records_.push_back(std::move(fn)); }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays records in reverse order.
  void backward(Tensor<T>& loss);

 private:
  std::vector<BackwardFn> records_;
};

/// True when an op on these inputs must be recorded.
template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Copies parameter values into an independent list (same names, no grads).
template <typename T>
ParamList<T> clone_params(const ParamList<T>& params) {
  ParamList<T> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.tensor.clone()});
  return out;
}

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
std::size_t count_elements(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

/// FNV-1a over the raw bytes of every parameter; used to prove weights are frozen.
template <typename T>
std::uint64_t checksum(const ParamList<T>& params);

}  // namespace chada
