#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kromhc {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl;
}  // namespace detail

// Dense row-major f64 array. Copies are shallow: two Tensor handles may refer
// to the same storage, which is how the tape links values to gradients.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor eye(std::size_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  // Leaf tensor whose gradient is accumulated by backward().
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t extent(std::size_t axis) const;

  std::span<const double> data() const;
  // Direct write access. Mutating a tensor that has been recorded on a live
  // tape invalidates that tape's backward pass.
  std::span<double> mutable_data();

  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  double operator()(std::size_t i, std::size_t j) const;
  double operator()(std::size_t b, std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  // Empty span until a backward pass has reached this tensor.
  std::span<const double> grad() const;
  void zero_grad();

  // A fresh leaf with a copy of the data and no tape history.
  Tensor detach() const;
  bool is(const Tensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& handle() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const Tape* tape = nullptr;
  std::size_t node = 0;
};

// Called during backward: receives the gradient flowing into the op's output.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

// True when an op on these inputs must be recorded on the active tape.
bool needs_recording(std::initializer_list<const Tensor*> inputs);
// Appends a node producing `out` to the active tape.
void record(const Tensor& out, BackwardFn fn);
// Gradient buffer of a tracked tensor, allocated on first use; empty span for
// tensors that do not participate in differentiation.
std::span<double> grad_sink(const Tensor& t);

}  // namespace detail

// Append-only record of the differentiable operations executed while it is
// the active tape of the calling thread. Constructing a Tape activates it;
// destruction restores the previously active tape. One tape per forward pass.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss recorded on this tape. Leaf gradients
  // accumulate; call zero_grad() on parameters between steps.
  void backward(const Tensor& loss);

  static Tape* active();

 private:
  friend void detail::record(const Tensor&, detail::BackwardFn);

  struct Node {
    std::shared_ptr<detail::TensorImpl> output;
    detail::BackwardFn backward;
  };
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
};

// backward() on the thread's active tape.
void backward(const Tensor& loss);

}  // namespace kromhc
