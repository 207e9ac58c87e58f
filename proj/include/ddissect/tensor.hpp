#pragma once

// Dense 4-D (batch, channel, height, width) tensors plus a reverse-mode tape.
// Scalar type is a template parameter: float is the working precision, double
// is used by the gradient-check suites.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ddissect/common.hpp"

namespace ddissect {

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  long long size() const {
    return static_cast<long long>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const { return msg("(", n, ",", c, ",", h, ",", w, ")"); }
};

template <class S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    TensorT t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = shape;
    t.st_->data.assign(static_cast<std::size_t>(shape.size()), S(0));
    t.st_->requires_grad = requires_grad;
    return t;
  }

  static TensorT full(Shape shape, S value, bool requires_grad = false) {
    TensorT t = zeros(shape, requires_grad);
    for (auto& v : t.st_->data) v = value;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    expect(static_cast<long long>(data.size()) == shape.size(),
           msg("tensor data length ", data.size(), " does not match shape ", shape.str()));
    TensorT t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = shape;
    t.st_->data = std::move(data);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  long long size() const { return st_->shape.size(); }

  std::span<S> data() { return st_->data; }
  std::span<const S> data() const { return st_->data; }

  long long index(int n, int c, int y, int x) const {
    const Shape& s = st_->shape;
    return ((static_cast<long long>(n) * s.c + c) * s.h + y) * s.w + x;
  }
  S& at(int n, int c, int y, int x) { return st_->data[static_cast<std::size_t>(index(n, c, y, x))]; }
  S at(int n, int c, int y, int x) const { return st_->data[static_cast<std::size_t>(index(n, c, y, x))]; }

  bool requires_grad() const { return st_->requires_grad; }
  void set_requires_grad(bool v) { st_->requires_grad = v; }

  bool has_grad() const { return !st_->grad.empty(); }
  std::span<S> grad() {
    expect(has_grad(), "tensor has no gradient buffer");
    return st_->grad;
  }
  std::span<const S> grad() const {
    expect(has_grad(), "tensor has no gradient buffer");
    return st_->grad;
  }
  // Allocates (zero-filled) on first use; grad always matches data shape.
  std::span<S> grad_buffer() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), S(0));
    return st_->grad;
  }
  void zero_grad() {
    for (auto& g : st_->grad) g = S(0);
  }

  TensorT clone() const {
    TensorT t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = st_->shape;
    t.st_->data = st_->data;
    t.st_->requires_grad = st_->requires_grad;
    return t;
  }

  bool same_storage(const TensorT& o) const { return st_ == o.st_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> st_;
};

template <class S>
void check_finite(const TensorT<S>& t, const char* where) {
  for (S v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      fail(msg(where, ": non-finite value encountered"));
  }
}

// Ordered list of recorded ops. Nodes are appended in execution order, which
// is topological by construction; backward replays them exactly once in
// reverse. One tape belongs to one execution context.
template <class S>
class TapeT {
 public:
  void record(const char* op, TensorT<S> output, std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(output), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards, visiting each
  // node exactly once in reverse recording order. Node outputs (the
  // intermediates) are reset per sweep; leaf gradients accumulate across
  // repeated calls.
  void backward(TensorT<S>& loss) {
    expect(loss.defined() && loss.shape() == Shape{1, 1, 1, 1},
           "backward: loss must be a scalar tensor");
    for (auto& n : nodes_)
      if (n.output.defined()) n.output.zero_grad();
    loss.grad_buffer()[0] += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    const char* op;
    TensorT<S> output;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace ddissect
