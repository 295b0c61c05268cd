#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "neurocodec/tensor.hpp"

namespace neurocodec::ad {

// Reverse-mode tape. A Tape is built per forward pass (one training step,
// one evaluation batch, one saliency sample); backward() walks the nodes in
// reverse creation order, which is a valid topological order by
// construction. Single-threaded and allocation-simple on purpose: the
// models here are small enough that clarity and bit-reproducibility matter
// more than peak throughput.

struct Value {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

struct Conv2dGeom {
  std::int64_t stride_h = 1, stride_w = 1;
  std::int64_t pad_h = 0, pad_w = 0;
};

struct Conv3dGeom {
  std::int64_t stride_t = 1, stride_h = 1, stride_w = 1;
  std::int64_t pad_t = 0, pad_h = 0, pad_w = 0;
};

struct BatchNormOpts {
  bool use_batch_stats = true;   // false -> normalize with running stats
  bool update_running = false;   // mutate running buffers on forward
  double momentum = 0.1;
  double eps = 1e-5;
};

class Tape {
 public:
  Value leaf(Tensor t, bool requires_grad = false);
  Value constant(Tensor t) { return leaf(std::move(t), false); }

  const Tensor& val(Value v) const { return nodes_[static_cast<std::size_t>(v.idx)].out; }
  double scalar(Value v) const;
  const Tensor& grad(Value v) const;
  bool requires_grad(Value v) const {
    return nodes_[static_cast<std::size_t>(v.idx)].requires_grad;
  }

  // Seeds d(root)/d(root) = 1 and accumulates gradients into every node
  // reachable from root that requires them. root must be scalar.
  void backward(Value root);

  std::size_t node_count() const { return nodes_.size(); }

  // ---- elementwise ----
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value div(Value a, Value b);
  Value add_scalar(Value a, double c);
  Value mul_scalar(Value a, double c);
  Value relu(Value a);
  Value sigmoid(Value a);  // output clamped to (0,1) strictly

  // ---- shape ----
  Value reshape(Value a, Shape shape);

  // ---- reductions ----
  Value sum_all(Value a);
  Value mean_all(Value a);

  // ---- layers ----
  Value linear(Value x, Value w, Value b);              // [B,K] x [M,K] -> [B,M]
  Value conv2d(Value x, Value w, Value b, Conv2dGeom);  // [B,C,H,W]
  Value conv3d(Value x, Value w, Value b, Conv3dGeom);  // [B,C,T,H,W]
  Value maxpool2d(Value x, std::int64_t k, std::int64_t s);
  Value avgpool2d(Value x, std::int64_t k, std::int64_t s);
  Value upsample2d_nearest(Value x, std::int64_t scale);
  Value batchnorm(Value x, Value gamma, Value beta, Tensor* running_mean,
                  Tensor* running_var, BatchNormOpts opts);
  Value dropout(Value x, double rate, std::uint64_t seed);

  // ---- fixed-kernel / structured ops used by the objectives ----
  Value blur2d_valid(Value x, const std::vector<double>& kernel);  // separable
  Value l2_normalize_rows(Value x, double eps = 1e-12);
  Value cosine_rows(Value a, Value b, double eps = 1e-12,
                    int* zero_norm_rows = nullptr);
  Value tv2d(Value x);  // anisotropic total variation of [B,C,H,W], scalar

 private:
  struct Node {
    Tensor out;
    Tensor grad;
    bool requires_grad = false;
    bool grad_live = false;
    std::function<void()> back;
  };

  std::vector<Node> nodes_;

  Value push(Tensor out, bool requires_grad, std::function<void()> back);
  Tensor& g(int idx);             // grad buffer, allocated on first touch
  bool wants(int idx) const { return nodes_[static_cast<std::size_t>(idx)].requires_grad; }
  const Tensor& v(int idx) const { return nodes_[static_cast<std::size_t>(idx)].out; }
  Node& node(int idx) { return nodes_[static_cast<std::size_t>(idx)]; }
};

// Gaussian window used by the structural-similarity metric.
std::vector<double> gaussian_kernel(int size, double sigma);

}  // namespace neurocodec::ad
