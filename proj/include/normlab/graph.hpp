#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "normlab/tensor.hpp"

namespace normlab {

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Learnable affine parameters plus running statistics of one BatchNorm layer.
struct BatchNormState {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = kBatchNormMomentum;
  double epsilon = kBatchNormEpsilon;
  Mode mode = Mode::Train;

  static BatchNormState create(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
};

enum class OpKind {
  Leaf,
  MatMul,
  AddBias,
  Relu,
  Conv2d,
  MaxPool2d,
  Flatten,
  BatchNorm,
  Softmax,
  Mean,
  SoftmaxCrossEntropy,
  MseMean,
  WeightedSum,
  Add,
  Scale,
};

const char* op_name(OpKind kind);

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended as ops execute, so node order is a topological order
/// and backward() is a single reverse sweep. A Graph is meant to live for one
/// forward/backward pass and is not thread-safe.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // a: [m,k], b: [k,n] -> [m,n]; b may also be a vector [k] -> [m].
  Tensor matmul(const Tensor& a, const Tensor& b);
  // Adds bias[C] along axis 1 of x: [N,C] or [N,C,H,W].
  Tensor add_bias(const Tensor& x, const Tensor& bias);
  Tensor relu(const Tensor& x);
  // x: [N,Cin,H,W], w: [Cout,Cin,3,3]; stride 1, zero padding 1.
  Tensor conv2d(const Tensor& x, const Tensor& w);
  // 2x2 window, stride 2; odd trailing rows/columns are dropped.
  Tensor maxpool2d(const Tensor& x);
  Tensor flatten(const Tensor& x);
  // In Train mode normalizes with batch statistics and, when update_running is
  // set, blends them into the running statistics. In Eval mode only the
  // running statistics are read.
  Tensor batchnorm(const Tensor& x, BatchNormState& state, bool update_running = true);
  // Row-wise softmax of [N,k].
  Tensor softmax(const Tensor& x);
  // Mean of all elements -> scalar.
  Tensor mean(const Tensor& x);
  // Mean over the batch of -sum_j y_j log softmax(logits)_j.
  Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& onehot);
  // (1/count) sum (a-b)^2 over all elements.
  Tensor mse_mean(const Tensor& a, const Tensor& b);
  // sum_i x_i * weights_i with weights treated as a constant.
  Tensor weighted_sum(const Tensor& x, const Tensor& weights);
  Tensor add(const Tensor& a, const Tensor& b);  // scalars only
  Tensor scale(const Tensor& x, double factor);

  /// Accumulates d(loss)/d(t) into t.grad for every requires_grad leaf.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  OpKind kind_of(std::size_t node) const { return nodes_.at(node).kind; }
  const std::vector<int>& parents_of(std::size_t node) const { return nodes_.at(node).parents; }
  /// Node id of a tensor seen by this graph, or -1.
  int node_id(const Tensor& t) const;

 private:
  // Receives the output gradient and one gradient buffer per parent; buffers
  // of parents that do not need a gradient are empty spans.
  using BackwardFn =
      std::function<void(std::span<const double> gout, std::vector<std::span<double>>& pgrads)>;

  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<int> parents;
    Tensor value;
    bool needs_grad = false;
    BackwardFn backward;
  };

  int register_input(const Tensor& t);
  Tensor emit(OpKind kind, std::vector<int> parents, Tensor out, BackwardFn fn);
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> ids_;
};

}  // namespace normlab
