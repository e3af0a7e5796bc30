#include "prorseg/tensor.hpp"

#include <chrono>
#include <cstdlib>
#include <map>
#include <sstream>

namespace prorseg {

namespace {
thread_local bool g_grad_enabled = true;

// Opt-in op timing (PRORSEG_PROFILE=1). Forward time of an op is the wall time
// since the previous recorded op, so it includes caller glue.
struct OpProfile {
  std::map<std::string, OpTiming> ops;
  std::chrono::steady_clock::time_point last = std::chrono::steady_clock::now();
};

OpProfile& profile_state() {
  thread_local OpProfile p;
  return p;
}

bool profile_enabled() {
  static const bool on = [] {
    const char* v = std::getenv("PRORSEG_PROFILE");
    return v && *v && std::string(v) != "0";
  }();
  return on;
}

void profile_forward(const char* op) {
  auto& p = profile_state();
  const auto now = std::chrono::steady_clock::now();
  if (op) {
    auto& t = p.ops[op];
    t.forward_seconds += std::chrono::duration<double>(now - p.last).count();
    ++t.calls;
  }
  p.last = now;
}

void profile_backward(const char* op, double seconds) { profile_state().ops[op].backward_seconds += seconds; }
}  // namespace

std::map<std::string, OpTiming> op_profile() { return profile_state().ops; }

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
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

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (static_cast<Index>(data.size()) != shape_numel(shape)) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::from_node(detail::NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) throw std::logic_error("only leaf tensors may be mutated");
  return node_->data;
}

double Tensor::item() const {
  if (node_->data.size() != 1) {
    throw ShapeError("item() requires a single element, shape is " + shape_str(node_->shape));
  }
  return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw std::logic_error("requires_grad can only be set on leaves");
  node_->requires_grad = on;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(detail::NodePtr out, BackwardFn fn, const char* op) {
  if (profile_enabled()) profile_forward(op);
  entries_.push_back(Entry{std::move(out), std::move(fn), op});
}

void Tape::backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ShapeError("backward requires a scalar, got shape " +
                     (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  }
  if (entries_.empty()) throw std::logic_error("backward called with an empty tape");
  if (!root.requires_grad()) throw std::logic_error("backward root does not require grad");

  root.node()->grad_buffer()[0] += 1.0;
  const bool prof = profile_enabled();
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // not on a path to root
    if (prof) {
      const auto t0 = std::chrono::steady_clock::now();
      it->fn(*it->out);
      profile_backward(it->op, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    } else {
      it->fn(*it->out);
    }
  }
  if (prof) profile_forward(nullptr);
  clear();
}

void backward(const Tensor& root) { Tape::current().backward(root); }

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace prorseg
