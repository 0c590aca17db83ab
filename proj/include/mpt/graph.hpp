// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Operator chains (model network followed by loss network) and the set of
// tensors that arise in one gradient computation over them.
//
// Activations are numbered x_i; x_i and its gradient dx_i always travel
// together. Parameterized operators own a weight tensor theta_j and its
// gradient dtheta_j. Sizes are per example: the batch dimension is not part
// of any tensor size.

#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mpt/errors.hpp"

namespace mpt {

using Shape = std::vector<int>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) {
                           return a * static_cast<std::size_t>(d);
                         });
}

enum class OpKind {
  dense,
  conv2d,
  relu,
  global_avg_pool,
  softmax_cross_entropy,
  split,
  add,
  scale,
  l1_loss,
};

inline std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::dense: return "dense";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::softmax_cross_entropy: return "softmax_ce";
    case OpKind::split: return "split";
    case OpKind::add: return "add";
    case OpKind::scale: return "scale";
    case OpKind::l1_loss: return "l1_loss";
  }
  return "?";
}

constexpr bool is_gemm(OpKind kind) {
  return kind == OpKind::dense || kind == OpKind::conv2d;
}

constexpr bool is_loss(OpKind kind) {
  return kind == OpKind::softmax_cross_entropy || kind == OpKind::l1_loss;
}

enum class TensorKind { fwd_activation, fwd_weight, bwd_activation, bwd_weight };

constexpr bool is_forward(TensorKind kind) {
  return kind == TensorKind::fwd_activation || kind == TensorKind::fwd_weight;
}

struct TensorId {
  TensorKind kind = TensorKind::fwd_activation;
  int index = 0;

  friend constexpr auto operator<=>(const TensorId&, const TensorId&) = default;

  /// Forward/backward partner of this tensor.
  constexpr TensorId partner() const {
    switch (kind) {
      case TensorKind::fwd_activation: return {TensorKind::bwd_activation, index};
      case TensorKind::bwd_activation: return {TensorKind::fwd_activation, index};
      case TensorKind::fwd_weight: return {TensorKind::bwd_weight, index};
      case TensorKind::bwd_weight: return {TensorKind::fwd_weight, index};
    }
    return *this;
  }

  std::string name() const {
    static constexpr const char* kPrefix[] = {"x", "theta", "dx", "dtheta"};
    return kPrefix[static_cast<int>(kind)] + std::to_string(index);
  }
};

inline constexpr TensorId x_(int i) { return {TensorKind::fwd_activation, i}; }
inline constexpr TensorId dx_(int i) { return {TensorKind::bwd_activation, i}; }
inline constexpr TensorId theta_(int j) { return {TensorKind::fwd_weight, j}; }
inline constexpr TensorId dtheta_(int j) { return {TensorKind::bwd_weight, j}; }

inline std::string_view to_string(TensorKind kind) {
  switch (kind) {
    case TensorKind::fwd_activation: return "fwd_activation";
    case TensorKind::fwd_weight: return "fwd_weight";
    case TensorKind::bwd_activation: return "bwd_activation";
    case TensorKind::bwd_weight: return "bwd_weight";
  }
  return "?";
}

struct TensorMeta {
  TensorId id;
  std::size_t size = 0;
  int owner_op = 0;
  Shape shape;
};

/// One primitive operator. `inputs`/`outputs` are activation indices.
///
/// Semantics of the less common kinds:
///   split   - copies consecutive chunks of its input into each output.
///   add     - sums every element of every input into one scalar.
///   scale   - with parameters: broadcasts a scalar input over theta and
///             multiplies elementwise; without: multiplies by `factor`.
///   l1_loss - factor * |x - y| against a real-valued target y.
struct OpNode {
  int index = 0;
  OpKind kind = OpKind::relu;
  bool is_gemm = false;
  bool has_params = false;
  Shape param_shape;
  int param = 0;  // j of theta_j when has_params
  std::vector<int> inputs;
  std::vector<int> outputs;

  int kernel = 0;
  int stride = 1;
  int padding = 0;
  double factor = 1.0;
};

class Graph {
 public:
  const std::vector<OpNode>& ops() const noexcept { return ops_; }
  /// Number of model operators n; ops n+1..m form the loss network.
  int model_op_count() const noexcept { return model_ops_; }
  int op_count() const noexcept { return static_cast<int>(ops_.size()); }
  const OpNode& op(int index) const { return ops_.at(index - 1); }

  /// The tensor set TS, in canonical order: x_i, dx_i by ascending i, then
  /// theta_j, dtheta_j by ascending j.
  const std::vector<TensorMeta>& tensors() const noexcept { return tensors_; }
  std::size_t tensor_count() const noexcept { return tensors_.size(); }

  bool contains(TensorId id) const { return position_.contains(id); }
  std::size_t position(TensorId id) const {
    auto it = position_.find(id);
    if (it == position_.end()) {
      throw LookupError("tensor " + id.name() + " is not in the graph");
    }
    return it->second;
  }
  const TensorMeta& meta(TensorId id) const { return tensors_[position(id)]; }

  const Shape& activation_shape(int i) const { return meta(x_(i)).shape; }
  int input_activation() const noexcept { return input_; }
  int output_activation() const noexcept { return output_; }
  const std::vector<int>& activations() const noexcept { return activations_; }
  const std::vector<int>& params() const noexcept { return params_; }
  /// Position of theta_j in params().
  std::size_t param_slot(int j) const {
    auto it = std::find(params_.begin(), params_.end(), j);
    if (it == params_.end()) {
      throw LookupError("parameter theta" + std::to_string(j) + " not found");
    }
    return static_cast<std::size_t>(it - params_.begin());
  }

  std::size_t total_size() const noexcept { return total_size_; }

 private:
  friend class GraphBuilder;

  std::vector<OpNode> ops_;
  int model_ops_ = 0;
  std::vector<TensorMeta> tensors_;
  std::map<TensorId, std::size_t> position_;
  std::vector<int> activations_;
  std::vector<int> params_;
  int input_ = 0;
  int output_ = 0;
  std::size_t total_size_ = 0;
};

/// Assembles a Graph op by op. Activations get consecutive indices starting
/// at `first_index`. Every activation except the input must be produced by
/// exactly one op and consumed by at most one op; loss ops come last.
class GraphBuilder {
 public:
  explicit GraphBuilder(int first_index = 1) : next_activation_(first_index) {}

  int input(Shape shape) {
    if (has_input_) throw ConstructionError("graph already has an input");
    has_input_ = true;
    return new_activation(std::move(shape), 0);
  }

  /// Appends an op and returns the indices of its output activations.
  std::vector<int> add(OpNode node, const std::vector<Shape>& output_shapes) {
    if (!has_input_) throw ConstructionError("graph has no input");
    if (output_shapes.empty()) throw ConstructionError("op without outputs");
    node.index = static_cast<int>(ops_.size()) + 1;
    node.is_gemm = is_gemm(node.kind);
    if (is_loss(node.kind)) {
      seen_loss_ = true;
    } else if (seen_loss_) {
      throw ConstructionError("model op after a loss op");
    } else {
      ++model_ops_;
    }
    if (node.has_params && is_loss(node.kind)) {
      throw ConstructionError("loss ops carry no trainable parameters");
    }
    for (int in : node.inputs) {
      if (!shapes_.contains(in)) {
        throw ConstructionError("op " + std::to_string(node.index) +
                                " reads unknown activation " + std::to_string(in));
      }
      if (consumed_.contains(in)) {
        throw ConstructionError("activation x" + std::to_string(in) +
                                " consumed twice");
      }
      consumed_[in] = node.index;
    }
    node.outputs.clear();
    for (const Shape& s : output_shapes) {
      node.outputs.push_back(new_activation(s, node.index));
    }
    if (node.has_params) {
      if (element_count(node.param_shape) == 0) {
        throw ConstructionError("empty parameter tensor");
      }
      params_.push_back({node.param, node.param_shape, node.index});
    }
    ops_.push_back(node);
    return node.outputs;
  }

  Graph build() && {
    if (ops_.empty()) throw ConstructionError("graph has no operators");
    if (!is_loss(ops_.back().kind)) {
      throw ConstructionError("last operator must be a loss");
    }
    Graph g;
    g.ops_ = std::move(ops_);
    g.model_ops_ = model_ops_;
    for (const auto& [index, shape] : shapes_) {
      const std::size_t size = element_count(shape);
      if (size < 1) throw ConstructionError("empty activation tensor");
      const int owner = producer_.at(index);
      g.tensors_.push_back({x_(index), size, owner, shape});
      g.tensors_.push_back({dx_(index), size, owner, shape});
      g.activations_.push_back(index);
    }
    std::sort(params_.begin(), params_.end(),
              [](const Param& a, const Param& b) { return a.index < b.index; });
    for (const Param& p : params_) {
      const std::size_t size = element_count(p.shape);
      g.tensors_.push_back({theta_(p.index), size, p.owner, p.shape});
      g.tensors_.push_back({dtheta_(p.index), size, p.owner, p.shape});
      g.params_.push_back(p.index);
    }
    for (std::size_t k = 0; k < g.tensors_.size(); ++k) {
      if (!g.position_.emplace(g.tensors_[k].id, k).second) {
        throw ConstructionError("duplicate tensor " + g.tensors_[k].id.name());
      }
      g.total_size_ += g.tensors_[k].size;
    }
    g.input_ = g.activations_.front();
    g.output_ = g.ops_.back().outputs.back();
    for (int a : g.activations_) {
      if (a != g.output_ && !consumed_.contains(a)) {
        throw ConstructionError("activation x" + std::to_string(a) +
                                " is never consumed");
      }
    }
    return g;
  }

 private:
  struct Param {
    int index;
    Shape shape;
    int owner;
  };

  int new_activation(Shape shape, int producer) {
    const int index = next_activation_++;
    shapes_[index] = std::move(shape);
    producer_[index] = producer;
    return index;
  }

  int next_activation_;
  bool has_input_ = false;
  bool seen_loss_ = false;
  int model_ops_ = 0;
  std::vector<OpNode> ops_;
  std::map<int, Shape> shapes_;
  std::map<int, int> producer_;
  std::map<int, int> consumed_;
  std::vector<Param> params_;
};

/// One layer of a chain model as written in a model description.
struct LayerSpec {
  OpKind kind = OpKind::relu;
  int out = 0;  // dense: output features; conv2d: output channels
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  double factor = 1.0;  // scale
};

inline LayerSpec dense(int out) { return {.kind = OpKind::dense, .out = out}; }
inline LayerSpec conv2d(int out, int kernel, int stride = 1, int padding = 0) {
  return {.kind = OpKind::conv2d, .out = out, .kernel = kernel,
          .stride = stride, .padding = padding};
}
inline LayerSpec relu() { return {.kind = OpKind::relu}; }
inline LayerSpec global_avg_pool() { return {.kind = OpKind::global_avg_pool}; }
inline LayerSpec scale(double factor) {
  return {.kind = OpKind::scale, .factor = factor};
}
inline LayerSpec softmax_ce() { return {.kind = OpKind::softmax_cross_entropy}; }

/// Chain graph x_1 -> f_1 -> x_2 -> ... -> f_m -> x_{m+1} with shape
/// inference. A softmax cross-entropy loss is appended when the description
/// does not end with one. theta_j belongs to op j.
inline Graph build_graph(const std::vector<LayerSpec>& layers,
                         const Shape& input_shape) {
  if (layers.empty()) throw ConstructionError("model description is empty");
  if (input_shape.empty() || element_count(input_shape) == 0) {
    throw ConstructionError("input shape must be non-empty");
  }
  std::vector<LayerSpec> chain = layers;
  if (chain.back().kind != OpKind::softmax_cross_entropy) {
    chain.push_back(softmax_ce());
  }

  GraphBuilder builder(1);
  int current = builder.input(input_shape);
  Shape shape = input_shape;
  for (std::size_t k = 0; k < chain.size(); ++k) {
    const LayerSpec& layer = chain[k];
    const int op_index = static_cast<int>(k) + 1;
    const std::string where =
        "layer " + std::to_string(op_index) + " (" +
        std::string(to_string(layer.kind)) + ")";
    OpNode node;
    node.kind = layer.kind;
    node.inputs = {current};
    Shape out;
    switch (layer.kind) {
      case OpKind::dense: {
        if (layer.out < 1) throw ConstructionError(where + ": output size < 1");
        const int in = static_cast<int>(element_count(shape));
        node.has_params = true;
        node.param = op_index;
        node.param_shape = {layer.out, in};
        out = {layer.out};
        break;
      }
      case OpKind::conv2d: {
        if (shape.size() != 3) {
          throw ConstructionError(where + ": expects a [C,H,W] input");
        }
        if (layer.out < 1 || layer.kernel < 1 || layer.stride < 1 ||
            layer.padding < 0) {
          throw ConstructionError(where + ": bad hyper-parameters");
        }
        const int h = (shape[1] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        const int w = (shape[2] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        if (shape[1] + 2 * layer.padding < layer.kernel ||
            shape[2] + 2 * layer.padding < layer.kernel || h < 1 || w < 1) {
          throw ConstructionError(where + ": kernel larger than padded input");
        }
        node.has_params = true;
        node.param = op_index;
        node.param_shape = {layer.out, shape[0], layer.kernel, layer.kernel};
        node.kernel = layer.kernel;
        node.stride = layer.stride;
        node.padding = layer.padding;
        out = {layer.out, h, w};
        break;
      }
      case OpKind::relu:
        out = shape;
        break;
      case OpKind::scale:
        node.factor = layer.factor;
        out = shape;
        break;
      case OpKind::global_avg_pool:
        if (shape.size() != 3) {
          throw ConstructionError(where + ": expects a [C,H,W] input");
        }
        out = {shape[0]};
        break;
      case OpKind::softmax_cross_entropy:
        if (k + 1 != chain.size()) {
          throw ConstructionError(where + ": loss must be the last layer");
        }
        if (shape.size() != 1 || shape[0] < 2) {
          throw ConstructionError(where + ": expects a vector of >= 2 logits");
        }
        out = {1};
        break;
      default:
        throw ConstructionError(where + ": not available in chain models");
    }
    current = builder.add(node, {out}).front();
    shape = out;
  }
  return std::move(builder).build();
}

struct TensorGroup {
  std::vector<TensorId> members;
  std::size_t total_size = 0;
};

/// Partition of TS into the tensors between adjacent GEMM operators. Walks
/// the ops in order, adding each op's inputs (with their gradients) and, for
/// model ops, its parameters; a new group opens right after every GEMM. The
/// final output activation joins the last group.
inline std::vector<TensorGroup> group_tensors(const Graph& g) {
  std::vector<TensorGroup> groups(1);
  std::map<int, bool> placed;
  auto add = [&](TensorId id) {
    groups.back().members.push_back(id);
    groups.back().total_size += g.meta(id).size;
  };
  for (const OpNode& op : g.ops()) {
    for (int in : op.inputs) {
      if (placed[in]) continue;
      placed[in] = true;
      add(x_(in));
      add(dx_(in));
    }
    if (op.has_params && op.index <= g.model_op_count()) {
      add(theta_(op.param));
      add(dtheta_(op.param));
    }
    if (op.is_gemm) groups.emplace_back();
  }
  for (int a : g.activations()) {
    if (placed[a]) continue;
    placed[a] = true;
    add(x_(a));
    add(dx_(a));
  }
  std::erase_if(groups, [](const TensorGroup& t) { return t.members.empty(); });
  return groups;
}

inline std::size_t total_size(const Graph& g, std::span<const TensorId> subset) {
  std::size_t total = 0;
  for (TensorId id : subset) total += g.meta(id).size;
  return total;
}

}  // namespace mpt
