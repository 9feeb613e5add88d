#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dipnet/tensor.hpp"

namespace dipnet {

// Named trainable tensor.  Identity (the object address) is what gradient
// maps and optimizers key on; the name exists for checkpoints and debugging.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool requires_grad = true;
};

// Running statistics owned by a batch-norm layer, living outside the graph so
// they persist across steps and can be checkpointed.
template <typename T>
struct BnStats {
  std::string name;
  Tensor<T> mean;
  Tensor<T> var;
  int64_t updates = 0;

  explicit BnStats(std::string n = "", int64_t channels = 1)
      : name(std::move(n)), mean(Shape{channels}, T(0)), var(Shape{channels}, T(1)) {}
};

enum class BnMode { Train, Eval };

// Accumulated parameter gradients from one backward pass, keyed by parameter
// identity.  Iteration order is first-touch order, which is deterministic.
template <typename T>
class GradientMap {
 public:
  void accumulate(Parameter<T>* p, Tensor<T> g) {
    auto it = index_.find(p);
    if (it == index_.end()) {
      index_.emplace(p, entries_.size());
      entries_.emplace_back(p, std::move(g));
    } else {
      Tensor<T>& acc = entries_[it->second].second;
      const T* src = g.data();
      T* dst = acc.data();
      for (int64_t i = 0, n = acc.numel(); i < n; ++i) dst[i] += src[i];
    }
  }

  const Tensor<T>* find(const Parameter<T>* p) const {
    auto it = index_.find(const_cast<Parameter<T>*>(p));
    return it == index_.end() ? nullptr : &entries_[it->second].second;
  }

  size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<Parameter<T>*, Tensor<T>>> entries_;
  std::unordered_map<Parameter<T>*, size_t> index_;
};

// Define-by-run reverse-mode tape.  Building ops runs them immediately; every
// op output is checked for non-finite values.  A graph belongs to one thread
// and supports a single backward() call.  Node creation order is a valid
// topological order, so backward walks ids in reverse and node grads are
// final before their backward closure consumes them -- this makes backward
// bitwise deterministic.
template <typename T>
class Graph {
 public:
  struct Value {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  // When set, forward passes through relu / leaky_relu / abs record the sign
  // pattern of their inputs into a running signature.  Finite-difference
  // checks compare signatures to discard coordinates that cross a kink.
  explicit Graph(bool record_kinks = false) : record_kinks_(record_kinks) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // --- leaves ---------------------------------------------------------
  Value constant(Tensor<T> v);
  Value input(Tensor<T> v, bool needs_grad = false);
  Value param(Parameter<T>& p);
  // Constant view of a parameter: gradients flow through ops that consume it
  // but never accumulate in the parameter itself.
  Value frozen(const Parameter<T>& p);

  // --- elementwise ----------------------------------------------------
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value scale(Value a, T s);
  Value neg(Value a);
  Value abs(Value a);
  Value relu(Value a);
  Value leaky_relu(Value a, T negative_slope);
  Value sigmoid(Value a);

  // --- reductions (reduced axes collapse to extent 1; empty axes = identity)
  Value sum(Value a, const std::vector<int>& axes);
  Value mean(Value a, const std::vector<int>& axes);
  Value sum_all(Value a);   // rank-1 scalar
  Value mean_all(Value a);  // rank-1 scalar

  // --- structure ------------------------------------------------------
  Value reshape(Value a, Shape s);
  Value concat_channels(const std::vector<Value>& parts);
  Value broadcast_hw(Value a, int64_t h, int64_t w);  // (N,C,1,1) -> (N,C,h,w)

  // --- neural ops -----------------------------------------------------
  Value conv2d(Value in, Value weight, std::optional<Value> bias, int stride, int padding);
  Value matmul(Value a, Value b);
  Value global_avg_pool(Value a);  // (N,C,H,W) -> (N,C)
  Value batch_norm(Value x, Value gamma, Value beta, BnStats<T>& stats, BnMode mode,
                   bool update_running_stats = true);
  // Identity forward (bitwise); backward multiplies the incoming gradient by
  // -lambda before passing it upstream.
  Value grad_reverse(Value x, T lambda);

  // --- fused losses ---------------------------------------------------
  Value softmax_cross_entropy(Value logits, const std::vector<int>& labels);
  Value bce_with_logits(Value logits, T target);

  // --- execution ------------------------------------------------------
  GradientMap<T> backward(Value loss);

  const Tensor<T>& value(Value v) const { return node(v).out; }
  const Shape& shape(Value v) const { return node(v).out.shape(); }
  // Gradient w.r.t. any node that received one during backward.
  const Tensor<T>& grad_of(Value v) const;
  bool has_grad(Value v) const { return node(v).has_grad; }

  size_t num_nodes() const { return nodes_.size(); }
  uint64_t kink_signature() const { return kink_hash_; }

  static constexpr T kBnMomentum = T(0.1);
  static constexpr T kBnEps = T(1e-5);

 private:
  struct Node {
    Tensor<T> out;
    Tensor<T> grad;
    bool has_grad = false;
    bool needs_grad = false;
    Parameter<T>* bound_param = nullptr;
    bool is_input_leaf = false;
    std::function<void(Graph&)> backfn;
  };

  Value emplace(Tensor<T> out, bool needs_grad, const char* opname,
                std::function<void(Graph&)> backfn);
  Node& node(Value v);
  const Node& node(Value v) const;
  void add_grad(int32_t id, Tensor<T> g);
  void add_grad_scaled(int32_t id, const Tensor<T>& g, T s);
  bool wants(Value v) const { return node(v).needs_grad; }
  void record_kink(const Tensor<T>& x);

  enum class BinOp { Add, Sub, Mul };
  Value binary_broadcast(Value a, Value b, BinOp op);

  std::vector<Node> nodes_;
  bool record_kinks_ = false;
  uint64_t kink_hash_ = 1469598103934665603ULL;  // FNV-1a offset basis
  bool backward_done_ = false;
};

using ValueF = Graph<float>::Value;
using ValueD = Graph<double>::Value;

}  // namespace dipnet
