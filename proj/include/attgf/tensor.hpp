#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace attgf {

// NCHW extent. Every tensor in the toolkit is rank 4; vectors and scalars
// use trailing unit dimensions.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  int operator[](int axis) const;
  int& operator[](int axis);
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Tensor;

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  // 0 for nodes recorded by a forward pass; k for nodes recorded while
  // running a k-th order backward pass with create_graph.
  int depth = 0;
  std::vector<Tensor> parents;
  BackwardFn backward;
  const char* op = "leaf";
};

}  // namespace detail

// Reference-counted handle to an immutable value plus its place on the
// autodiff tape. Copies share the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // A leaf that gradients can be taken with respect to.
  static Tensor parameter(Shape shape, std::vector<double> values);

  // Used by op implementations. Records parents and the backward closure only
  // when grad mode is on and some parent requires grad.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> parents,
                            detail::BackwardFn backward, const char* op);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const { return shape().size(); }
  std::span<const double> data() const;
  // Writable view; only legal on leaves (parameters and constants).
  std::span<double> mutable_data();
  double item() const;
  double at(int n, int c, int h, int w) const;
  bool requires_grad() const;
  const char* op() const;

  // Fresh leaf holding a copy of the values; cut from the tape.
  Tensor detach() const;
  Tensor detach_parameter() const;

  const detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

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

struct GradOptions {
  // Record the backward computation itself so the returned gradients can be
  // differentiated again.
  bool create_graph = false;
};

// Reverse-mode gradients of a single-element `output` with respect to each of
// `inputs`. Inputs that do not influence the output receive zeros.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs,
                         GradOptions options = {});

// Per-thread instrumentation of backward passes. A first-order pass has
// depth 1; differentiating a graph that contains gradient nodes gives 2.
struct AutodiffStats {
  int max_backward_depth = 0;
  std::size_t backward_passes = 0;
};
AutodiffStats autodiff_stats();
void reset_autodiff_stats();

bool all_finite(const Tensor& t);

}  // namespace attgf
