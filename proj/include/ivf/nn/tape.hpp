#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "ivf/nn/tensor.hpp"

namespace ivf::nn {

template <class T>
class Tape;

// Handle to a value recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Tensor<T>& grad() const { return tape_->grad(id_); }
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records a computation graph in execution order; nodes are appended only after their
// inputs, so reverse index order is a reverse topological order. Single use: backward()
// may be called once.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, {}); }

  // Records an op output. The closure runs during backward only if some parent needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    return record(std::move(value), std::vector<Var<T>>(parents), std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
    bool needs = false;
    for (const auto& p : parents) {
      if (&p.tape() != this) throw InvalidArgument("Tape: operand recorded on a different tape");
      needs = needs || requires_grad(p.id());
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  // Gradient buffer, allocated as zeros on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
    return n.grad;
  }
  const Tensor<T>& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) throw InvalidArgument("Tape: no gradient recorded for node");
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Var<T>& loss) {
    if (consumed_) throw InvalidArgument("Tape: backward already called; record a new tape");
    if (&loss.tape() != this) throw InvalidArgument("Tape: loss recorded on a different tape");
    if (loss.value().numel() != 1) throw InvalidArgument("Tape: loss must be a scalar");
    consumed_ = true;
    if (!requires_grad(loss.id())) return;
    grad(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace ivf::nn
