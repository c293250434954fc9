#pragma once

// Reverse-mode tape over operator-level vector-Jacobian products. Every
// public operator records exactly one node; nodes are appended in creation
// order, which is a topological order of the graph.

#include "dvd/kernels.hpp"
#include "dvd/tensor.hpp"

#include <array>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace dvd {

class Tape;

/// Handle to a tensor recorded on a Tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an operator node. Throws NumericalError if `value` is not finite.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, Backward backward);

  /// Replays the tape in reverse from a scalar loss. Gradients of earlier
  /// backward() calls are discarded.
  void backward(const Var& loss);

  bool requires_grad(const Var& v) const { return node(v).requires_grad; }
  /// Gradient of the last backward() w.r.t. `v` (zeros if unreached).
  Tensor grad(const Var& v) const;
  /// Zero-initialised accumulator for `v`; only valid during backward().
  Tensor& grad_buffer(const Var& v);
  void accumulate(const Var& v, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(const Var& v) const { return node(v).op; }

 private:
  friend class Var;
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  const Node& node(const Var& v) const;
  Node& node(const Var& v);
  std::deque<Node> nodes_;
};

// ---- elementwise ---------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var abs(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var leaky_relu(const Var& a, double slope = 0.1);
/// Gradient is zero where the input lies outside [lo, hi].
Var clamp(const Var& a, double lo, double hi);

// ---- reductions / structure ----------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
/// [C,H,W] → [C,1,1] channel means.
Var spatial_mean(const Var& a);
Var reshape(const Var& a, Shape shape);
/// Concatenation along axis 0.
Var concat(const std::vector<Var>& parts);
/// Rows [begin, end) along axis 0.
Var slice(const Var& a, Index begin, Index end);
/// x [C,...] plus per-channel bias b [C].
Var bias_add(const Var& x, const Var& b);
/// Repeats a [1,H,W] tensor to [C,H,W].
Var broadcast_channels(const Var& m, Index channels);
/// Takes every `stride`-th pixel of a [C,H,W] tensor.
Var subsample(const Var& a, Index stride);

// ---- primitive operators ---------------------------------------------------
Var conv2d(const Var& input, const Var& weight, Index stride, Index padding);
Var maxpool2d(const Var& input, Index k, Index stride);
Var bilinear_sample(const Var& input, const Var& coords, Padding padding = Padding::Border);
Var softmax(const Var& input, Index axis);
/// Scalar cosine similarity of two equally sized tensors (norms floored at eps).
Var cosine_similarity(const Var& a, const Var& b, double eps = 1e-8);

/// Half-pixel-centred bilinear resize of a [C,H,W] tensor.
Var resize_bilinear(const Var& input, Index out_h, Index out_w);
/// Sampling grid for resize_bilinear, exposed for tests.
Tensor resize_coords(Index in_h, Index in_w, Index out_h, Index out_w);
/// Identity sampling grid [2,H,W] holding (x, y) of every pixel.
Tensor identity_grid(Index h, Index w);

// ---- attention / deformable operators --------------------------------------
/// X [C,H,W], W [C,d] → Wᵀ X as [d,H,W].
Var linear_project(const Var& x, const Var& w);

/// Gathers S = taps.size() bilinear samples of `input` [C,H,W] around
/// query-centred positions (q·stride + flow(q) + tap). flow is [2,Hq,Wq].
/// Returns [S,C,Hq,Wq].
Var window_sample(const Var& input, const Var& flow, const std::vector<std::array<double, 2>>& taps,
                  Index query_stride = 1, Padding padding = Padding::Border);

/// Cosine attention over S samples per query: softmax_s(q·k_s / (|q||k_s|√d))
/// weighted sum of v_s. q [d,H,W], keys/values [S,d,H,W] → [d,H,W].
/// Norms are floored at eps. If `weights` is non-null it receives [S,H,W].
Var cosine_attention(const Var& q, const Var& keys, const Var& values, double eps = 1e-8,
                     Tensor* weights = nullptr);

/// Deformable convolution (stride 1, same extent). Tap (ky,kx) at position p
/// reads input at p + (kx−r, ky−r) + flow(p) + offset_t(p); offsets is
/// [2·k²,H,W] with channel 2t = x, 2t+1 = y. `flow` may be an invalid Var.
Var deform_conv2d(const Var& input, const Var& offsets, const Var& flow, const Var& weight,
                  Padding padding = Padding::Border);

struct ContextualOptions {
  double bandwidth = 0.5;
  double eps = 1e-5;
  Index max_features = 1024;
};

/// Contextual loss between the feature sets of x [C,Hx,Wx] and y [C,Hy,Wy].
Var contextual_loss(const Var& x, const Var& y, const ContextualOptions& options = {});

/// Deterministic subset of feature indices used when a set exceeds max_features.
std::vector<Index> feature_subset(Index count, Index max_features);

}  // namespace dvd
