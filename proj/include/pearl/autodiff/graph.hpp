#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pearl/core/error.hpp"
#include "pearl/core/tensor.hpp"

namespace pearl::ad {

/// A named trainable tensor with its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor<T>(value.shape());
    grad.fill(T{0});
  }
};

/// Ordered parameter container. Layers refer to entries by index so that
/// models stay copyable.
template <class T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> init) {
    for (const auto& p : params_) {
      PEARL_REQUIRE(p.name != name, ConfigError, "duplicate parameter name " + name);
    }
    Tensor<T> grad(init.shape());
    params_.push_back(Parameter<T>{std::move(name), std::move(init), std::move(grad)});
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const noexcept { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  Parameter<T>* find(std::string_view name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
};

template <class T>
class Graph;

/// Handle to a node recorded on a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return graph->value(*this).shape(); }
};

/// Define-by-run tape. Recording an op evaluates it immediately (the forward
/// pass); backward() walks the tape in reverse exactly once.
template <class T>
class Graph {
 public:
  /// Receives the node's output gradient and output value and accumulates
  /// into the gradient buffers of its inputs.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& grad, const Tensor<T>& value)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false, nullptr); }

  /// Leaf whose gradient is retained, e.g. for checks against finite differences.
  Var<T> input(Tensor<T> value) { return leaf(std::move(value), true, nullptr); }

  /// Leaf bound to a parameter. With track = false the parameter enters as a
  /// constant and receives no gradient.
  Var<T> param(Parameter<T>& p, bool track = true) {
    return leaf(p.value, track, track ? &p : nullptr);
  }

  Var<T> record(std::string_view op, Tensor<T> value,
                std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    check_open();
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
    }
    Node node;
    node.op = op;
    node.value = std::move(value);
    for (const Var<T>& in : inputs) {
      check_owned(in);
      node.inputs.push_back(in.id);
      node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient of the last backward() seed with respect to v. Zero if v did not
  /// influence the output.
  const Tensor<T>& grad(Var<T> v) {
    check_owned(v);
    PEARL_REQUIRE(consumed_, Error, "grad() requested before backward()");
    Node& n = nodes_[v.id];
    if (!sized(n.grad, n.value)) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Accumulates g into the gradient buffer of v (no-op when v needs no gradient).
  void accumulate(Var<T> v, const Tensor<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    Tensor<T>& buf = grad_buffer(v);
    PEARL_REQUIRE(buf.size() == g.size(), ShapeError,
                  "gradient shape mismatch in op '" + std::string(n.op) + "'");
    T* dst = buf.data();
    const T* src = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  /// Direct access to the (zero-initialised) gradient buffer of v.
  Tensor<T>& grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id];
    if (!sized(n.grad, n.value)) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool needs_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Backward pass from a scalar output (seed 1).
  void backward(Var<T> out) {
    check_owned(out);
    PEARL_REQUIRE(nodes_[out.id].value.size() == 1, ShapeError,
                  "backward() without seed needs a scalar output");
    backward(out, Tensor<T>(nodes_[out.id].value.shape(), T{1}));
  }

  /// Backward pass with an explicit seed; parameter gradients are added into
  /// Parameter::grad.
  void backward(Var<T> out, const Tensor<T>& seed) {
    PEARL_REQUIRE(!nodes_.empty(), Error, "backward() called before any forward op");
    check_owned(out);
    PEARL_REQUIRE(!consumed_, Error, "backward() called twice on the same graph");
    PEARL_REQUIRE(seed.shape() == nodes_[out.id].value.shape(), ShapeError,
                  "seed shape " + to_string(seed.shape()) + " does not match output " +
                      to_string(nodes_[out.id].value.shape()));
    consumed_ = true;
    grad_buffer(out) = seed;
    for (std::size_t id = out.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !sized(n.grad, n.value)) continue;
      if (!n.grad.all_finite()) {
        throw NumericError("non-finite gradient at op '" + std::string(n.op) + "'");
      }
      // Closures only write to gradient buffers of earlier nodes.
      if (n.backward) n.backward(*this, n.grad, n.value);
      if (n.param != nullptr) {
        Tensor<T>& pg = n.param->grad;
        if (!sized(pg, n.value)) pg = Tensor<T>(n.value.shape());
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(Var<T> v) const { return nodes_[v.id].op; }
  const std::vector<std::size_t>& inputs_of(Var<T> v) const { return nodes_[v.id].inputs; }

 private:
  struct Node {
    std::string_view op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  // A default tensor has the scalar shape but no storage.
  static bool sized(const Tensor<T>& buf, const Tensor<T>& like) {
    return buf.shape() == like.shape() && buf.size() == like.size();
  }

  Var<T> leaf(Tensor<T> value, bool requires_grad, Parameter<T>* p) {
    check_open();
    if (!value.all_finite()) throw NumericError("non-finite leaf value");
    Node node;
    node.op = p ? std::string_view("param") : std::string_view("leaf");
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.param = p;
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owned(Var<T> v) const {
    PEARL_REQUIRE(v.graph == this && v.id < nodes_.size(), Error,
                  "variable does not belong to this graph");
  }

  void check_open() const {
    PEARL_REQUIRE(!consumed_, Error, "graph already consumed by backward()");
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Binds a ParameterSet to a Graph, creating one leaf per parameter on first
/// use. `track` decides whether the parameters receive gradients.
template <class T>
class Scope {
 public:
  Scope(Graph<T>& graph, ParameterSet<T>& params, bool track)
      : graph_(graph), params_(params), track_(track) {}

  Var<T> operator()(std::size_t index) {
    auto it = cache_.find(index);
    if (it != cache_.end()) return it->second;
    Var<T> v = graph_.param(params_[index], track_);
    cache_.emplace(index, v);
    return v;
  }

  Graph<T>& graph() { return graph_; }
  ParameterSet<T>& params() { return params_; }
  bool tracking() const { return track_; }

 private:
  Graph<T>& graph_;
  ParameterSet<T>& params_;
  bool track_;
  std::unordered_map<std::size_t, Var<T>> cache_;
};

}  // namespace pearl::ad
