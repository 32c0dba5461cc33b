#include "kromhc/tensor.hpp"

#include <cmath>
#include <sstream>

#include "kromhc/error.hpp"

namespace kromhc {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (data.size() != shape_size(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor::Tensor(Shape shape, double fill)
    : Tensor(shape, std::vector<double>(shape_size(shape), fill)) {}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::eye(std::size_t n) {
  Tensor t({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({m, n}, std::move(data));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  t.impl_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::extent(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(s));
  }
  return s[axis];
}

std::span<const double> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

double Tensor::operator()(std::size_t i, std::size_t j) const {
  return impl_->data[i * impl_->shape.back() + j];
}

double Tensor::operator()(std::size_t b, std::size_t i, std::size_t j) const {
  const auto& s = impl_->shape;
  return impl_->data[(b * s[s.size() - 2] + i) * s.back() + j];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!impl_) throw UsageError("set_requires_grad on an undefined tensor");
  impl_->requires_grad = on;
}

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

namespace detail {

bool needs_recording(std::initializer_list<const Tensor*> inputs) {
  const Tape* tape = g_active_tape;
  if (!tape) return false;
  for (const Tensor* t : inputs) {
    if (!t || !t->defined()) continue;
    const auto* impl = t->impl();
    if (impl->requires_grad || impl->tape == tape) return true;
  }
  return false;
}

void record(const Tensor& out, BackwardFn fn) {
  Tape* tape = g_active_tape;
  if (!tape) throw UsageError("record() without an active tape");
  auto* impl = out.impl();
  impl->tape = tape;
  impl->node = tape->nodes_.size();
  tape->nodes_.push_back({out.handle(), std::move(fn)});
}

std::span<double> grad_sink(const Tensor& t) {
  auto* impl = t.impl();
  if (!impl) return {};
  const bool tracked = impl->requires_grad || (impl->tape != nullptr && impl->tape == g_active_tape);
  if (!tracked) return {};
  if (impl->grad.size() != impl->data.size()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

}  // namespace detail

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  // Intermediate results may outlive the tape; detach them so they never point
  // at a dead tape.
  for (auto& node : nodes_) {
    if (node.output && node.output->tape == this) node.output->tape = nullptr;
  }
  g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  auto* impl = loss.impl();
  if (impl->tape != this || impl->node >= nodes_.size() || nodes_[impl->node].output.get() != impl) {
    throw UsageError("loss was not recorded on this tape");
  }
  if (g_active_tape != this) throw UsageError("backward must run on the active tape");

  impl->grad.assign(1, 1.0);
  for (std::size_t i = impl->node + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.output->grad.empty()) continue;
    node.backward(node.output->grad);
  }
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw UsageError("backward called with no active tape");
  tape->backward(loss);
}

}  // namespace kromhc
