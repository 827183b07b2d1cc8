// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "psb/errors.hpp"
#include "psb/tensor.hpp"

namespace psb {

/// Index of a parameter inside a ParamStore.
struct ParamId {
  std::size_t index = 0;
  friend bool operator==(ParamId, ParamId) = default;
};

template <class Real>
struct Param {
  std::string name;
  Tensor<Real> value;
  Tensor<Real> grad;
  bool decay = true;  // participates in decoupled weight decay
};

/// Named, ordered collection of trainable tensors. Names are unique.
template <class Real>
class ParamStore {
 public:
  ParamId add(std::string name, Tensor<Real> value, bool decay = true) {
    if (index_.count(name)) {
      throw std::invalid_argument("duplicate parameter name: " + name);
    }
    ParamId id{params_.size()};
    index_.emplace(name, id.index);
    Tensor<Real> grad(value.shape());
    params_.push_back({std::move(name), std::move(value), std::move(grad), decay});
    return id;
  }

  Param<Real>& operator[](ParamId id) { return params_.at(id.index); }
  const Param<Real>& operator[](ParamId id) const { return params_.at(id.index); }
  Param<Real>& at(std::size_t i) { return params_.at(i); }
  const Param<Real>& at(std::size_t i) const { return params_.at(i); }

  std::optional<ParamId> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return ParamId{it->second};
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(Real(0));
  }

  /// Fresh zero gradient buffers, one per parameter, in store order.
  std::vector<Tensor<Real>> zero_grads() const {
    std::vector<Tensor<Real>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.emplace_back(p.value.shape());
    return out;
  }

 private:
  std::vector<Param<Real>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class Real>
class Tape;

/// Handle to a value recorded on a Tape.
template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Real>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t size() const { return value().size(); }
};

/// Define-by-run reverse-mode tape. Nodes are appended in execution order;
/// backward walks them in exact reverse order.
template <class Real>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(const ParamStore<Real>* store = nullptr) : store_(store) {
    if (store_) param_nodes_.assign(store_->size(), std::nullopt);
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(Tensor<Real> value) {
    return push(std::move(value), false, nullptr, "constant");
  }

  /// Free leaf that receives a gradient but is not bound to a ParamStore.
  Var<Real> variable(Tensor<Real> value) {
    return push(std::move(value), true, nullptr, "variable");
  }

  /// Leaf bound to store entry `id`; repeated calls return the same node.
  Var<Real> param(ParamId id) {
    if (!store_) throw std::logic_error("Tape::param without a ParamStore");
    auto& slot = param_nodes_.at(id.index);
    if (!slot) {
      Var<Real> v = push((*store_)[id].value, true, nullptr, "param");
      nodes_[v.id].param = id.index;
      slot = v.id;
    }
    return {this, *slot};
  }

  /// Appends the result of an operation. `fn` runs during backward only when
  /// some input requires a gradient.
  Var<Real> record(std::string_view op, Tensor<Real> value,
                   std::initializer_list<Var<Real>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, op);
  }

  Var<Real> record(std::string_view op, Tensor<Real> value,
                   const std::vector<Var<Real>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, op);
  }

  const Tensor<Real>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Adjoint of node `id` (zeros if nothing flowed into it).
  const Tensor<Real>& grad(std::size_t id) {
    auto& node = nodes_.at(id);
    if (node.grad.empty()) node.grad = Tensor<Real>(node.value.shape());
    return node.grad;
  }

  /// Accumulation target for the adjoint of `id`, or nullptr when the node
  /// does not require a gradient.
  Tensor<Real>* grad_sink(std::size_t id) {
    auto& node = nodes_.at(id);
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty()) node.grad = Tensor<Real>(node.value.shape());
    return &node.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }

  /// Reverse sweep from a scalar `loss`, adding `scale * dloss/dparam` into
  /// `grads` (indexed like the ParamStore).
  void backward(Var<Real> loss, std::vector<Tensor<Real>>& grads,
                Real scale = Real(1)) {
    if (loss.value().size() != 1) throw ShapeError("backward: loss must be scalar");
    if (store_ && grads.size() != store_->size()) {
      throw ShapeError("backward: gradient buffer count mismatch");
    }
    for (auto& node : nodes_) node.grad = Tensor<Real>();
    if (!nodes_.at(loss.id).requires_grad) return;
    nodes_[loss.id].grad = Tensor<Real>(loss.shape(), scale);
    visit_order_.clear();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty()) continue;
      visit_order_.push_back(i);
      if (node.backward) node.backward(*this, i);
      if (node.param) {
        auto& dst = grads.at(*node.param);
        const auto& src = nodes_[i].grad;
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
      }
    }
  }

  /// Backward into the `grad` fields of the bound store.
  void backward(Var<Real> loss, ParamStore<Real>& store, Real scale = Real(1)) {
    if (&store != store_) throw std::logic_error("backward: foreign ParamStore");
    std::vector<Tensor<Real>> grads;
    grads.reserve(store.size());
    for (auto& p : store) grads.push_back(std::move(p.grad));
    backward(loss, grads, scale);
    std::size_t i = 0;
    for (auto& p : store) p.grad = std::move(grads[i++]);
  }

  /// Node ids visited by the last backward call, in visit order.
  const std::vector<std::size_t>& visit_order() const { return visit_order_; }

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::optional<std::size_t> param;
    std::string_view op;
  };

  Var<Real> push(Tensor<Real> value, bool requires_grad, BackwardFn fn,
                 std::string_view op) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
    }
    nodes_.push_back({std::move(value), Tensor<Real>(), requires_grad,
                      std::move(fn), std::nullopt, op});
    return {this, nodes_.size() - 1};
  }

  const ParamStore<Real>* store_ = nullptr;
  std::deque<Node> nodes_;
  std::vector<std::optional<std::size_t>> param_nodes_;
  std::vector<std::size_t> visit_order_;
};

}  // namespace psb
