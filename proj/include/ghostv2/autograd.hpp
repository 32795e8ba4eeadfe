#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ghostv2/kernels.hpp"
#include "ghostv2/tensor.hpp"

// Reverse-mode differentiation over a linear tape. Every differentiable
// operation records its output value, its inputs and a closure computing the
// vector-Jacobian product; backward replays the closures in reverse order.
namespace ghostv2 {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor<T>>> g) : grads_(std::move(g)) {}

  bool has(const Var<T>& v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }
  // Gradient of v; zeros when v does not influence the seed.
  Tensor<T> of(const Var<T>& v) const {
    if (has(v)) return *grads_[v.id];
    return Tensor<T>::zeros(v.shape());
  }

 private:
  std::vector<std::optional<Tensor<T>>> grads_;
};

template <typename T>
class Tape {
 public:
  // Receives the output gradient and returns one optional gradient per input.
  using Backward = std::function<std::vector<std::optional<Tensor<T>>>(const Tensor<T>&)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    Backward backward;  // empty for leaves
  };

  // grad_enabled = false keeps values only; backward is then unavailable.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, std::string name = "leaf") {
    nodes_.push_back(Node{std::move(name), std::move(value), {}, {}});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> record(std::string op, Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
    Node node{std::move(op), std::move(value), {}, {}};
    for (const auto& in : inputs) {
      if (in.tape != this) throw UsageError("tape: input of '" + node.op + "' belongs to another tape");
      node.inputs.push_back(in.id);
    }
    if (grad_enabled_) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  // Seeds d(loss)/d(loss) = 1 and propagates. The optional log receives the
  // ids of the nodes whose closures ran, in execution order.
  Gradients<T> backward(const Var<T>& loss, std::vector<std::size_t>* visit_log = nullptr) const {
    if (!grad_enabled_) throw UsageError("backward on a tape recorded without gradients");
    if (loss.tape != this) throw UsageError("backward: seed belongs to another tape");
    if (loss.value().numel() != 1) {
      throw UsageError("backward: seed must be a scalar, got shape " + loss.shape().str());
    }
    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    grads[loss.id] = Tensor<T>::full(loss.shape(), T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (!grads[i]) continue;
      const Node& node = nodes_[i];
      if (!node.backward) continue;
      if (visit_log != nullptr) visit_log->push_back(i);
      auto input_grads = node.backward(*grads[i]);
      if (input_grads.size() != node.inputs.size()) {
        throw UsageError("backward: '" + node.op + "' returned " + std::to_string(input_grads.size()) +
                         " gradients for " + std::to_string(node.inputs.size()) + " inputs");
      }
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        if (!input_grads[k]) continue;
        const std::size_t j = node.inputs[k];
        if (!(input_grads[k]->shape() == nodes_[j].value.shape())) {
          throw ShapeError("backward: '" + node.op + "' produced gradient " + input_grads[k]->shape().str() +
                           " for input of shape " + nodes_[j].value.shape().str());
        }
        if (grads[j]) {
          grads[j] = accumulate(*grads[j], *input_grads[k]);
        } else {
          grads[j] = std::move(input_grads[k]);
        }
      }
    }
    return Gradients<T>(std::move(grads));
  }

 private:
  static Tensor<T> accumulate(const Tensor<T>& a, const Tensor<T>& b) {
    auto da = a.data();
    auto db = b.data();
    std::vector<T> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] + db[i];
    return Tensor<T>(a.shape(), std::move(out));
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->node(id).value;
}

// Maps parameter tensors to tape leaves, one leaf per storage buffer, so that
// plain parameter structs can be used directly in recorded computations.
template <typename T>
class Binder {
 public:
  explicit Binder(Tape<T>& tape) : tape_(&tape) {}

  Tape<T>& tape() const { return *tape_; }

  Var<T> operator()(const Tensor<T>& t) {
    auto it = leaves_.find(t.storage_id());
    if (it != leaves_.end()) return it->second;
    Var<T> v = tape_->leaf(t, "param");
    leaves_.emplace(t.storage_id(), v);
    return v;
  }

  // Routes later lookups of v's storage to v itself, so parameter structs
  // rebuilt from existing leaves bind to those leaves.
  void adopt(const Var<T>& v) { leaves_.insert_or_assign(v.value().storage_id(), v); }
  std::optional<Var<T>> find(const Tensor<T>& t) const {
    auto it = leaves_.find(t.storage_id());
    if (it == leaves_.end()) return std::nullopt;
    return it->second;
  }

 private:
  Tape<T>* tape_;
  std::unordered_map<const void*, Var<T>> leaves_;
};

enum class Mode { train, eval };

// Batch statistics observed during a train-mode forward, keyed by the
// storage of the running-mean tensor they belong to.
template <typename T>
struct BatchStats {
  const void* running_mean_id;
  Tensor<T> mean;
  Tensor<T> var;
};

template <typename T>
struct Ctx {
  Binder<T>& bind;
  Mode mode = Mode::eval;
  std::vector<BatchStats<T>>* stats = nullptr;  // optional sink, train mode only

  Tape<T>& tape() const { return bind.tape(); }
};

namespace ad {

template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& k, int groups, const Var<T>* bias, Stride s, Padding p);
template <typename T> Var<T> conv2d_pointwise(const Var<T>& x, const Var<T>& k, const Var<T>* bias);
template <typename T> Var<T> conv2d_depthwise(const Var<T>& x, const Var<T>& k, Stride s, Padding p);

// Train mode normalises with batch statistics (and reports them to ctx.stats);
// eval mode uses the running statistics as constants.
template <typename T>
Var<T> batch_norm(const Ctx<T>& ctx, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const Tensor<T>& running_mean, const Tensor<T>& running_var, double eps);

template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> hard_sigmoid(const Var<T>& x);
template <typename T> Var<T> clip01(const Var<T>& x);

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul_channels(const Var<T>& x, const Var<T>& s);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t count);

template <typename T> Var<T> pool2d(const Var<T>& x, PoolKind kind, Window w, Stride s);
template <typename T> Var<T> resize(const Var<T>& x, ResizeKind kind, std::int64_t out_h, std::int64_t out_w);
template <typename T> Var<T> global_avg_pool(const Var<T>& x);

template <typename T> Var<T> full_fc_attention(const Var<T>& z, const Var<T>& f);
template <typename T> Var<T> dfc_vertical(const Var<T>& z, const Var<T>& fv);
template <typename T> Var<T> dfc_horizontal(const Var<T>& z, const Var<T>& fh);

// Reductions to a (1,1,1,1) scalar.
template <typename T> Var<T> sum(const Var<T>& x);
// sum_i x[i] * w[i] for a constant w of the same shape.
template <typename T> Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w);
// x[index] as a scalar.
template <typename T> Var<T> pick(const Var<T>& x, std::int64_t index);
// Mean softmax cross-entropy of logits (N,1,1,K).
template <typename T> Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels);

}  // namespace ad
}  // namespace ghostv2
