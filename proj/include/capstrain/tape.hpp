#ifndef CAPSTRAIN_TAPE_HPP
#define CAPSTRAIN_TAPE_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "capstrain/errors.hpp"
#include "capstrain/tensor.hpp"

namespace capstrain {

template <typename Scalar>
class Tape;

/// Handle to a tensor recorded on a Tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;

  Tape<Scalar>& tape() const {
    if (tape_ == nullptr) throw TapeError("use of an unbound Var");
    return *tape_;
  }
  std::size_t id() const { return id_; }
  std::uint64_t generation() const { return generation_; }

  const Tensor<Scalar>& value() const { return tape().value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index i) const { return value().dim(i); }
  bool requires_grad() const { return tape().requires_grad(*this); }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, std::size_t id, std::uint64_t generation)
      : tape_(tape), id_(id), generation_(generation) {}

  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Reverse-mode recording of tensor operations.
///
/// Nodes are appended in execution order, so the tape is topologically sorted
/// by construction. Leaves come in three kinds: constants (no gradient),
/// variables (owned, gradient readable through grad()), and parameters (an
/// external Tensor whose grad buffer receives dloss/dparam after backward()).
/// Handles are invalidated by reset().
template <typename Scalar>
class Tape {
 public:
  using Vector = typename Tensor<Scalar>::Vector;
  /// Receives the adjoint of the node's output; accumulates into input adjoints.
  using BackwardFn = std::function<void(const Vector& out_grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), nullptr, false, {}, {}); }

  Var<Scalar> variable(Tensor<Scalar> value) { return push(std::move(value), nullptr, true, {}, {}); }

  /// Trainable leaf referencing caller-owned storage; the tensor must outlive the tape.
  Var<Scalar> parameter(Tensor<Scalar>& tensor) { return push({}, &tensor, true, {}, {}); }

  /// Read-only view of caller-owned storage that takes no gradient.
  Var<Scalar> constant_ref(const Tensor<Scalar>& tensor) {
    return push({}, const_cast<Tensor<Scalar>*>(&tensor), false, {}, {});
  }

  /// Appends an operation result. The backward rule is kept only if some input needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, std::vector<std::size_t> inputs, BackwardFn backward) {
    if (backward_done_) throw TapeError("cannot record on a tape after backward(); call reset()");
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
    if (!needs) backward = nullptr;
    return push(std::move(value), nullptr, needs, std::move(inputs), std::move(backward));
  }

  /// Throws unless v was produced by this tape since the last reset().
  void check(const Var<Scalar>& v) const {
    if (&v.tape() != this || v.generation() != generation_ || v.id() >= nodes_.size()) {
      throw TapeError("tensor handle was not created on this tape");
    }
  }

  const Tensor<Scalar>& value(const Var<Scalar>& v) const {
    check(v);
    const Node& n = nodes_[v.id()];
    return n.external ? *n.external : n.value;
  }

  /// Unchecked access by node id, for backward rules.
  const Tensor<Scalar>& value(std::size_t id) const { return value_of(nodes_[id]); }

  bool requires_grad(const Var<Scalar>& v) const {
    check(v);
    return nodes_[v.id()].requires_grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adjoint buffer of node id, zero-initialised on first access.
  Vector& adjoint(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.adjoint) n.adjoint = Vector::Zero(value_of(n).size());
    return *n.adjoint;
  }

  /// Gradient of the loss w.r.t. v after backward(); zeros if v did not influence the loss.
  Vector grad(const Var<Scalar>& v) {
    check(v);
    if (!backward_done_) throw TapeError("grad() before backward()");
    Node& n = nodes_[v.id()];
    return n.adjoint ? *n.adjoint : Vector::Zero(value_of(n).size());
  }

  /// Populates gradients of all trainable leaves w.r.t. a scalar loss.
  void backward(const Var<Scalar>& loss) {
    check(loss);
    if (backward_done_) throw TapeError("backward() called twice without reset()");
    if (value(loss).size() != 1) {
      throw TapeError("backward() needs a scalar loss, got shape " + to_string(value(loss).shape()));
    }
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    adjoint(loss.id()).setConstant(Scalar(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.adjoint || !n.backward) continue;
      n.backward(*n.adjoint, *this);
    }
    for (Node& n : nodes_) {
      if (n.external && n.requires_grad) {
        n.external->set_grad(n.adjoint ? *n.adjoint : Vector::Zero(n.external->size()));
      }
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
    ++generation_;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar>* external = nullptr;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::optional<Vector> adjoint;
  };

  static const Tensor<Scalar>& value_of(const Node& n) { return n.external ? *n.external : n.value; }

  Var<Scalar> push(Tensor<Scalar> value, Tensor<Scalar>* external, bool requires_grad,
                   std::vector<std::size_t> inputs, BackwardFn backward) {
    if (backward_done_) throw TapeError("cannot record on a tape after backward(); call reset()");
    nodes_.push_back(Node{std::move(value), external, requires_grad, std::move(inputs), std::move(backward), {}});
    return Var<Scalar>(this, nodes_.size() - 1, generation_);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::uint64_t generation_ = 0;
};

}  // namespace capstrain

#endif  // CAPSTRAIN_TAPE_HPP
