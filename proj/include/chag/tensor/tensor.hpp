#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace chag {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Base for every error raised by the tensor engine.
class EngineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible operand shapes.
class DimensionError : public EngineError {
 public:
  using EngineError::EngineError;
};

/// A forward or backward pass produced NaN/Inf.
class NumericError : public EngineError {
 public:
  using EngineError::EngineError;
};

/// Invalid model or parallel configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ResourceTracker;

namespace detail {

/// Flat buffer whose lifetime is reported to the tracker that was current
/// on the allocating thread.
struct Storage {
  Storage(std::vector<double> values, std::string tag);
  ~Storage();
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  std::vector<double> values;
  std::string tag;
  std::shared_ptr<ResourceTracker> tracker;
  std::size_t bytes = 0;
};

struct Node;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<Storage> data;
  std::shared_ptr<Storage> grad;
  bool requires_grad = false;
  bool retain_grad = false;
  std::shared_ptr<Node> grad_fn;

  void accumulate_grad(std::span<const double> g);
};

}  // namespace detail

/// Handle to a dense row-major double tensor. Copies share the underlying
/// buffer and autograd history.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Mutating a buffer that is part of a recorded graph invalidates it; meant
  // for optimizers and finite-difference probes on leaf parameters.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  void retain_grad();
  bool has_grad() const;
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();
  /// Replaces the gradient buffer (used after gradient synchronisation).
  void set_grad(std::span<const double> g);

  /// Reverse-mode sweep from this scalar. Intermediate gradients and saved
  /// activations are released as soon as they have been consumed.
  void backward() const;

  /// New leaf with copied data and no history.
  Tensor detach_copy(bool requires_grad = false) const;
  const std::string& alloc_tag() const;

  // Engine-internal access for op implementations.
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Handed to a backward closure: read the recorded inputs and push gradient
/// contributions into them.
class BackwardContext {
 public:
  explicit BackwardContext(detail::Node& node) : node_(node) {}
  std::size_t num_inputs() const;
  bool needs_grad(std::size_t input) const;
  std::span<const double> input_data(std::size_t input) const;
  const Shape& input_shape(std::size_t input) const;
  std::span<const double> output_data() const;
  void add_grad(std::size_t input, std::span<const double> g) const;

 private:
  detail::Node& node_;
};

using BackwardFn =
    std::function<void(std::span<const double> grad_out, const BackwardContext& ctx)>;

/// Creates the result of a differentiable op. A graph node is recorded only
/// when gradient mode is on and some input requires a gradient.
Tensor record_op(std::string_view name, Shape shape, std::vector<double> values,
                 const std::vector<Tensor>& inputs, BackwardFn backward);

/// Result that shares `source`'s buffer under a new shape (no allocation).
Tensor record_view(std::string_view name, const Tensor& source, Shape shape,
                   BackwardFn backward);

/// Result that takes over the buffer of `values` (computed outside the graph,
/// e.g. by a collective) as the output of an op over `inputs`.
Tensor record_adopt(std::string_view name, const Tensor& values, const std::vector<Tensor>& inputs,
                    BackwardFn backward);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

struct Node {
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<Storage> output;
  BackwardFn backward;
};

}  // namespace detail

}  // namespace chag
