#include "attgf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "attgf/errors.hpp"
#include "attgf/ops.hpp"

namespace attgf {

namespace {

thread_local bool t_grad_enabled = true;
thread_local int t_creation_depth = 0;
thread_local AutodiffStats t_stats;

class GradModeScope {
 public:
  GradModeScope(bool enabled, int depth)
      : prev_enabled_(t_grad_enabled), prev_depth_(t_creation_depth) {
    t_grad_enabled = enabled;
    t_creation_depth = depth;
  }
  ~GradModeScope() {
    t_grad_enabled = prev_enabled_;
    t_creation_depth = prev_depth_;
  }

 private:
  bool prev_enabled_;
  int prev_depth_;
};

}  // namespace

int Shape::operator[](int axis) const {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
  }
  throw ShapeError("axis out of range: " + std::to_string(axis));
}

int& Shape::operator[](int axis) {
  switch (axis) {
    case 0: return n;
    case 1: return c;
    case 2: return h;
    case 3: return w;
  }
  throw ShapeError("axis out of range: " + std::to_string(axis));
}

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(shape, 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  return from_data(shape, std::vector<double>(shape.size(), value));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
  }
  if (values.size() != shape.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape.str());
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->data = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data(Shape{}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = from_data(shape, std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values,
                           std::vector<Tensor> parents,
                           detail::BackwardFn backward, const char* op) {
  Tensor t = from_data(shape, std::move(values));
  t.node_->op = op;
  if (!t_grad_enabled) return t;
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const Tensor& p) { return p.requires_grad(); });
  if (!any) return t;
  t.node_->requires_grad = true;
  t.node_->depth = t_creation_depth;
  t.node_->parents = std::move(parents);
  t.node_->backward = std::move(backward);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() {
  if (node_->backward) {
    throw PreconditionError("mutable_data() on a non-leaf tensor");
  }
  return node_->data;
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape().str());
  }
  return node_->data[0];
}

double Tensor::at(int n, int c, int h, int w) const {
  const Shape& s = node_->shape;
  return node_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const char* Tensor::op() const { return node_->op; }

Tensor Tensor::detach() const { return from_data(shape(), node_->data); }

Tensor Tensor::detach_parameter() const { return parameter(shape(), node_->data); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs,
                         GradOptions options) {
  if (!output.defined() || output.size() != 1) {
    throw PreconditionError("grad() requires a single-element output");
  }
  std::vector<Tensor> result;
  result.reserve(inputs.size());
  if (!output.requires_grad()) {
    for (const auto& in : inputs) result.push_back(Tensor::zeros(in.shape()));
    return result;
  }

  // Iterative post-order DFS; `order` ends with the output.
  std::vector<const detail::Node*> order;
  std::unordered_map<const detail::Node*, Tensor> handles;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<Tensor, std::size_t>> stack;
  stack.emplace_back(output, 0);
  visited.insert(output.node());
  int max_depth = 0;
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const detail::Node* node = t.node();
    if (next < node->parents.size()) {
      const Tensor& p = node->parents[next++];
      if (p.requires_grad() && visited.insert(p.node()).second) {
        stack.emplace_back(p, 0);
      }
      continue;
    }
    max_depth = std::max(max_depth, node->depth);
    handles.emplace(node, t);
    order.push_back(node);
    stack.pop_back();
  }

  const int pass_depth = max_depth + 1;
  t_stats.max_backward_depth = std::max(t_stats.max_backward_depth, pass_depth);
  ++t_stats.backward_passes;

  std::unordered_set<const detail::Node*> wanted;
  for (const auto& in : inputs) {
    if (in.defined()) wanted.insert(in.node());
  }

  GradModeScope scope(options.create_graph, options.create_graph ? pass_depth : 0);
  std::unordered_map<const detail::Node*, Tensor> grads;
  grads.emplace(output.node(), Tensor::full(output.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const detail::Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->backward) continue;
    Tensor g = found->second;
    if (!wanted.count(node)) grads.erase(found);
    std::vector<Tensor> parent_grads = node->backward(g);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Tensor& p = node->parents[i];
      if (!p.requires_grad() || i >= parent_grads.size() ||
          !parent_grads[i].defined()) {
        continue;
      }
      auto [slot, inserted] = grads.try_emplace(p.node(), parent_grads[i]);
      if (!inserted) slot->second = ops::add(slot->second, parent_grads[i]);
    }
  }

  for (const auto& in : inputs) {
    auto found = in.defined() ? grads.find(in.node()) : grads.end();
    if (found != grads.end()) {
      result.push_back(found->second);
    } else {
      result.push_back(Tensor::zeros(in.shape()));
    }
  }
  return result;
}

AutodiffStats autodiff_stats() { return t_stats; }

void reset_autodiff_stats() { t_stats = AutodiffStats{}; }

bool all_finite(const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace attgf
