#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace peftcap {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

// Storage behind a Tensor handle. Handles are cheap to copy and alias the
// same storage, which is how the model registry and the tape share weights.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::shared_ptr<Node> node;  // producing op; null for leaves
};

/// Dense row-major float64 array with an optional gradient slot.
///
/// Tensors produced by ops on inputs that require gradients are recorded on
/// an implicit tape (the graph reachable from the result). Leaves are the
/// only tensors whose data may be mutated, and only between forward passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  std::uint64_t id() const { return impl_->id; }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return impl_->data[flat]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return impl_->has_grad; }
  std::span<const double> grad() const;
  void zero_grad();

  // Fresh leaf holding a copy of the data.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using GradBuffers = std::vector<std::vector<double>>;

// Called once during backward. `out` is the op's forward output, `gout` the
// incoming gradient; gin[i] is zero-filled for inputs that need a gradient and
// empty otherwise. Implementations accumulate into gin.
using BackwardFn = std::function<void(std::span<const double> out,
                                      std::span<const double> gout,
                                      GradBuffers& gin)>;

struct Node {
  const char* op = "";
  std::vector<Tensor> inputs;
  BackwardFn backward;
  bool consumed = false;
};

// Builds an op result, attaching a tape node only when gradient mode is on and
// some input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> inputs, BackwardFn backward);

bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct TapeEntry {
  const char* op;
  std::vector<std::uint64_t> input_ids;
  std::uint64_t output_id;
};

// Recorded primitive applications reachable from `loss`, in topological order
// (every input precedes its consumer).
struct Tape {
  std::vector<TapeEntry> entries;
};

Tape build_tape(const Tensor& loss);

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls on distinct graphs; a graph can be swept once.
void backward(const Tensor& loss);

}  // namespace peftcap
