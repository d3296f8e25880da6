#include "chag/tensor/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "chag/tensor/resources.hpp"

namespace chag {

namespace {

thread_local bool t_grad_enabled = true;

void check_finite(std::span<const double> values, std::string_view what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(what));
    }
  }
}

std::shared_ptr<detail::Storage> make_storage(std::vector<double> values,
                                              std::string tag) {
  return std::make_shared<detail::Storage>(std::move(values), std::move(tag));
}

const detail::TensorImpl& checked(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!impl) throw EngineError("use of an undefined tensor");
  return *impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

Storage::Storage(std::vector<double> v, std::string t)
    : values(std::move(v)), tag(std::move(t)), tracker(current_tracker()) {
  bytes = values.size() * sizeof(double);
  tracker->on_alloc(tag, bytes);
}

Storage::~Storage() { tracker->on_free(tag, bytes); }

void TensorImpl::accumulate_grad(std::span<const double> g) {
  if (g.size() != data->values.size()) {
    throw DimensionError("gradient of size " + std::to_string(g.size()) +
                         " for tensor of shape " + shape_str(shape));
  }
  check_finite(g, "backward");
  if (!grad) {
    grad = make_storage(std::vector<double>(g.begin(), g.end()), data->tag);
    return;
  }
  auto& acc = grad->values;
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_vector(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = make_storage(std::move(values), current_tag());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_vector({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(impl_).data->values.size(); }

std::span<const double> Tensor::data() const { return checked(impl_).data->values; }

std::span<double> Tensor::mutable_data() {
  checked(impl_);
  return impl_->data->values;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return data()[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return data()[flat];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  checked(impl_);
  if (impl_->grad_fn) throw EngineError("requires_grad can only be set on leaves");
  impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return checked(impl_).grad_fn == nullptr; }

void Tensor::retain_grad() {
  checked(impl_);
  impl_->retain_grad = true;
}

bool Tensor::has_grad() const { return checked(impl_).grad != nullptr; }

std::span<const double> Tensor::grad() const {
  const auto& impl = checked(impl_);
  if (!impl.grad) throw EngineError("tensor has no gradient");
  return impl.grad->values;
}

Tensor Tensor::grad_tensor() const {
  auto g = grad();
  return from_vector(shape(), std::vector<double>(g.begin(), g.end()));
}

void Tensor::set_grad(std::span<const double> g) {
  checked(impl_);
  auto& impl = *impl_;
  if (g.size() != impl.data->values.size())
    throw DimensionError("set_grad: " + std::to_string(g.size()) + " values for shape " +
                         shape_str(impl.shape));
  check_finite(g, "set_grad");
  impl.grad = make_storage(std::vector<double>(g.begin(), g.end()), impl.data->tag);
}

void Tensor::zero_grad() {
  checked(impl_);
  impl_->grad.reset();
}

const std::string& Tensor::alloc_tag() const { return checked(impl_).data->tag; }

Tensor Tensor::detach_copy(bool requires_grad) const {
  auto d = data();
  auto out = from_vector(shape(), std::vector<double>(d.begin(), d.end()), requires_grad);
  return out;
}

void Tensor::backward() const {
  const auto& root = checked(impl_);
  if (root.data->values.size() != 1) {
    throw EngineError("backward() requires a scalar loss, got shape " +
                      shape_str(root.shape));
  }
  if (!root.requires_grad) {
    throw EngineError("backward() on a tensor that does not require grad");
  }

  // Post-order DFS: every tensor appears after all of its inputs.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<const detail::TensorImpl*> visited;
  struct Frame {
    std::shared_ptr<detail::TensorImpl> impl;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_, 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    const auto& fn = top.impl->grad_fn;
    if (fn && top.next_input < fn->inputs.size()) {
      auto child = fn->inputs[top.next_input++];
      if (child->requires_grad && visited.insert(child.get()).second) {
        stack.push_back({std::move(child), 0});
      }
      continue;
    }
    order.push_back(std::move(top.impl));
    stack.pop_back();
  }

  impl_->accumulate_grad(std::vector<double>{1.0});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto impl = std::move(*it);
    if (!impl->grad_fn) continue;
    auto node = std::move(impl->grad_fn);
    if (impl->grad) {
      auto grad = impl->grad;
      if (!impl->retain_grad) impl->grad.reset();
      node->backward(grad->values, BackwardContext(*node));
    }
  }
}

std::size_t BackwardContext::num_inputs() const { return node_.inputs.size(); }

bool BackwardContext::needs_grad(std::size_t input) const {
  return node_.inputs.at(input)->requires_grad;
}

std::span<const double> BackwardContext::input_data(std::size_t input) const {
  return node_.inputs.at(input)->data->values;
}

const Shape& BackwardContext::input_shape(std::size_t input) const {
  return node_.inputs.at(input)->shape;
}

std::span<const double> BackwardContext::output_data() const {
  return node_.output->values;
}

void BackwardContext::add_grad(std::size_t input, std::span<const double> g) const {
  auto& impl = node_.inputs.at(input);
  if (impl->requires_grad) impl->accumulate_grad(g);
}

namespace {

Tensor attach(std::string_view name, std::shared_ptr<detail::TensorImpl> out,
              const std::vector<Tensor>& inputs, BackwardFn backward) {
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || checked(in.impl()).requires_grad;
  }
  if (needs) {
    auto node = std::make_shared<detail::Node>();
    node->name = std::string(name);
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->output = out->data;
    node->backward = std::move(backward);
    out->grad_fn = std::move(node);
    out->requires_grad = true;
  }
  return Tensor(std::move(out));
}

}  // namespace

Tensor record_op(std::string_view name, Shape shape, std::vector<double> values,
                 const std::vector<Tensor>& inputs, BackwardFn backward) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError(std::string(name) + ": result shape " + shape_str(shape) +
                         " does not match " + std::to_string(values.size()) +
                         " values");
  }
  check_finite(values, name);
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = std::move(shape);
  out->data = make_storage(std::move(values), current_tag());
  return attach(name, std::move(out), inputs, std::move(backward));
}

Tensor record_view(std::string_view name, const Tensor& source, Shape shape,
                   BackwardFn backward) {
  if (shape_numel(shape) != source.numel()) {
    throw DimensionError(std::string(name) + ": cannot view " +
                         shape_str(source.shape()) + " as " + shape_str(shape));
  }
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = std::move(shape);
  out->data = source.impl()->data;
  return attach(name, std::move(out), {source}, std::move(backward));
}

Tensor record_adopt(std::string_view name, const Tensor& values, const std::vector<Tensor>& inputs,
                    BackwardFn backward) {
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = values.shape();
  out->data = values.impl()->data;
  return attach(name, std::move(out), inputs, std::move(backward));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace chag
