#include "peftcap/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "peftcap/errors.hpp"

namespace peftcap {

namespace {

std::atomic<std::uint64_t> next_id{1};
thread_local bool grad_mode = true;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data,
                                     bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  impl->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return impl;
}

// Post-order DFS over nodes that require gradients. Owning pointers, since
// the sweep releases each node's inputs as it goes.
std::vector<std::shared_ptr<TensorImpl>> topo_order(const Tensor& loss) {
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    std::shared_ptr<TensorImpl> impl;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  if (loss.impl()->node) {
    stack.push_back({loss.impl(), 0});
    visited.insert(loss.impl().get());
  }
  while (!stack.empty()) {
    Frame& top = stack.back();
    Node& node = *top.impl->node;
    if (top.next_input < node.inputs.size()) {
      const auto& in = node.inputs[top.next_input++].impl();
      if (in->requires_grad && in->node && !visited.contains(in.get())) {
        visited.insert(in.get());
        stack.push_back({in, 0});
      }
    } else {
      order.push_back(std::move(top.impl));
      stack.pop_back();
    }
  }
  return order;
}

void accumulate(std::vector<double>& into, const std::vector<double>& from) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_impl({}, {value}, requires_grad));
}

std::span<double> Tensor::mutable_data() {
  if (impl_->node) {
    throw GraphError("in-place mutation of a recorded op result is not allowed");
  }
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw RankError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool flag) {
  if (impl_->node) throw GraphError("requires_grad can only be set on leaves");
  impl_->requires_grad = flag;
}

std::span<const double> Tensor::grad() const {
  if (!impl_->has_grad) throw GraphError("gradient is absent");
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->has_grad = false;
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const {
  return Tensor(new_impl(impl_->shape, impl_->data, false));
}

bool grad_enabled() { return grad_mode; }

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  bool needs = false;
  if (grad_mode) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto impl = new_impl(std::move(shape), std::move(data), needs);
  if (needs) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

Tape build_tape(const Tensor& loss) {
  Tape tape;
  for (const auto& impl : topo_order(loss)) {
    TapeEntry e{impl->node->op, {}, impl->id};
    for (const auto& in : impl->node->inputs) e.input_ids.push_back(in.id());
    tape.entries.push_back(std::move(e));
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw RankError("backward needs a scalar loss, got shape " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  auto* root = loss.impl().get();
  if (!root->requires_grad) {
    throw GraphError("loss is not on the tape (no input requires a gradient)");
  }
  if (!root->node) {
    if (!root->has_grad) {
      root->grad.assign(1, 0.0);
      root->has_grad = true;
    }
    root->grad[0] += 1.0;
    return;
  }
  if (root->node->consumed) {
    throw GraphError("backward already ran on this graph; run a new forward pass");
  }

  auto order = topo_order(loss);
  for (const auto& impl : order) {
    if (impl->node->consumed) {
      throw GraphError("graph shares nodes with an already-swept graph");
    }
  }

  std::unordered_map<TensorImpl*, std::vector<double>> pending;
  pending[root] = {1.0};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* out = it->get();
    Node& node = *out->node;
    auto found = pending.find(out);
    std::vector<double> gout = std::move(found->second);
    pending.erase(found);

    GradBuffers gin(node.inputs.size());
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (node.inputs[i].requires_grad()) gin[i].assign(node.inputs[i].numel(), 0.0);
    }
    node.backward(out->data, gout, gin);

    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (gin[i].empty()) continue;
      TensorImpl* in = node.inputs[i].impl().get();
      if (!in->node) {
        if (!in->has_grad) {
          in->grad = std::move(gin[i]);
          in->has_grad = true;
        } else {
          accumulate(in->grad, gin[i]);
        }
      } else {
        auto slot = pending.find(in);
        if (slot == pending.end()) {
          pending.emplace(in, std::move(gin[i]));
        } else {
          accumulate(slot->second, gin[i]);
        }
      }
    }
    node.consumed = true;
    node.backward = nullptr;
    node.inputs.clear();
  }
}

}  // namespace peftcap
