#pragma once

// Tape-based reverse-mode differentiation over NCHW tensors.
//
// A Tape owns every node created during one forward pass. Nodes are appended
// in evaluation order, so walking the tape backwards is a valid topological
// order for the adjoint sweep. Parameters live outside the tape and receive
// their gradients when Tape::backward finishes.

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdhvae/core/error.hpp"
#include "cdhvae/core/tensor.hpp"

namespace cdhvae::ad {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Named parameters in registration order. Addresses are stable.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(init.shape());
    p->value = std::move(init);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T(0));
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
class Tape;

template <typename T>
struct Node {
  Tape<T>* tape = nullptr;
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  Parameter<T>* param = nullptr;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a tape node. Cheap to copy.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Node<T>* node) : node_(node) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Tape<T>& tape() const { return *node_->tape; }
  Node<T>* node() const { return node_; }
  bool requires_grad() const { return node_->requires_grad; }
  explicit operator bool() const { return node_ != nullptr; }

  /// Add `g` into this node's adjoint.
  void accumulate(const Tensor<T>& g) const {
    auto& buf = node_->grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }
  Tensor<T>& grad() const { return node_->grad_buffer(); }

 private:
  Node<T>* node_ = nullptr;
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> constant(Tensor<T> value) {
    auto& n = push(std::move(value));
    return Var<T>(&n);
  }

  /// Leaf for a parameter; repeated calls reuse one node per parameter.
  Var<T> parameter(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(it->second);
    auto& n = push(p.value);
    n.requires_grad = record_;
    n.param = &p;
    param_nodes_[&p] = &n;
    return Var<T>(&n);
  }

  template <typename F>
  Var<T> emit(Tensor<T> value, std::initializer_list<Var<T>> parents, F&& backward) {
    auto& n = push(std::move(value));
    if (record_) {
      for (const auto& p : parents) {
        if (p && p.requires_grad()) {
          n.requires_grad = true;
          break;
        }
      }
      if (n.requires_grad) n.backward = std::forward<F>(backward);
    }
    return Var<T>(&n);
  }

  /// Seeds d(sum(root))/d(root) = 1 and sweeps the tape in reverse.
  /// Parameter gradients are added to Parameter::grad.
  void backward(const Var<T>& root) {
    if (!record_) throw InputError("backward on a non-recording tape");
    if (!root.requires_grad()) return;
    root.grad().fill(T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = *it;
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(n);
    }
    for (auto& [param, node] : param_nodes_) {
      if (node->grad.empty()) continue;
      for (std::size_t i = 0; i < param->grad.size(); ++i) param->grad[i] += node->grad[i];
    }
  }

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  Node<T>& push(Tensor<T> value) {
    nodes_.emplace_back();
    Node<T>& n = nodes_.back();
    n.tape = this;
    n.value = std::move(value);
    return n;
  }

  std::deque<Node<T>> nodes_;
  std::unordered_map<Parameter<T>*, Node<T>*> param_nodes_;
  bool record_;
};

}  // namespace cdhvae::ad
