#include "dvd/autodiff.hpp"

#include <cmath>
#include <memory>
#include <numeric>

namespace dvd {

Padding padding_from_string(const std::string& name) {
  if (name == "border") return Padding::Border;
  if (name == "zeros") return Padding::Zeros;
  if (name == "reflect") return Padding::Reflect;
  throw ValidationError("unknown padding mode '" + name + "' (expected border|zeros|reflect)");
}

std::string to_string(Padding p) {
  switch (p) {
    case Padding::Border: return "border";
    case Padding::Zeros: return "zeros";
    case Padding::Reflect: return "reflect";
  }
  return "border";
}

// ---- Tape ------------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw ValidationError("use of an unbound Var");
  return tape_->node(*this).value;
}

const Tape::Node& Tape::node(const Var& v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ValidationError("Var does not belong to this tape");
  return nodes_[v.id_];
}

Tape::Node& Tape::node(const Var& v) {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ValidationError("Var does not belong to this tape");
  return nodes_[v.id_];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericalError("non-finite value registered as tape leaf");
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs, Backward backward) {
  if (!value.all_finite()) throw NumericalError(std::string("non-finite output from operator ") + op);
  bool rg = false;
  for (const Var& in : inputs) {
    if (!in.valid()) continue;
    rg = rg || node(in).requires_grad;
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

void Tape::backward(const Var& loss) {
  const Node& ln = node(loss);
  if (ln.value.size() != 1) {
    throw ValidationError("backward: loss must be a scalar, got shape " + shape_string(ln.value.shape()));
  }
  if (!ln.requires_grad) throw ValidationError("backward: loss is not connected to any differentiable tape input");
  for (auto& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
  Node& root = node(loss);
  root.grad = Tensor(root.value.shape(), 1.0);
  root.has_grad = true;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(n.grad);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = node(v);
  if (!n.has_grad) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor& Tape::grad_buffer(const Var& v) {
  Node& n = node(v);
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  if (!requires_grad(v)) return;
  Tensor& buf = grad_buffer(v);
  buf.data() += g.data();
}

// ---- helpers -----------------------------------------------------------------

namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ValidationError("operator applied to an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ValidationError("operands live on different tapes");
  return t;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

}  // namespace

// ---- elementwise ---------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), (a.value().data() + b.value().data()).eval());
  return t.record("add", std::move(out), {a, b}, [&t, a, b](const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), (a.value().data() - b.value().data()).eval());
  return t.record("sub", std::move(out), {a, b}, [&t, a, b](const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.grad_buffer(b).data() -= g.data();
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), (a.value().data() * b.value().data()).eval());
  return t.record("mul", std::move(out), {a, b}, [&t, a, b](const Tensor& g) {
    if (t.requires_grad(a)) t.grad_buffer(a).data() += g.data() * b.value().data();
    if (t.requires_grad(b)) t.grad_buffer(b).data() += g.data() * a.value().data();
  });
}

Var scale(const Var& a, double s) {
  Tape& t = tape_of(a);
  Tensor out(a.shape(), (a.value().data() * s).eval());
  return t.record("scale", std::move(out), {a}, [&t, a, s](const Tensor& g) {
    t.grad_buffer(a).data() += g.data() * s;
  });
}

Var add_scalar(const Var& a, double s) {
  Tape& t = tape_of(a);
  Tensor out(a.shape(), (a.value().data() + s).eval());
  return t.record("add_scalar", std::move(out), {a}, [&t, a](const Tensor& g) { t.accumulate(a, g); });
}

Var abs(const Var& a) {
  Tape& t = tape_of(a);
  Tensor out(a.shape(), a.value().data().abs().eval());
  return t.record("abs", std::move(out), {a}, [&t, a](const Tensor& g) {
    const auto& x = a.value().data();
    Tensor& ga = t.grad_buffer(a);
    for (Index i = 0; i < g.size(); ++i) ga[i] += x[i] > 0 ? g[i] : (x[i] < 0 ? -g[i] : 0.0);
  });
}

Var exp(const Var& a) {
  Tape& t = tape_of(a);
  Tensor out(a.shape(), a.value().data().exp().eval());
  auto holder = std::make_shared<Tensor>(out);
  return t.record("exp", std::move(out), {a}, [&t, a, holder](const Tensor& g) {
    t.grad_buffer(a).data() += g.data() * holder->data();
  });
}

Var log(const Var& a) {
  Tape& t = tape_of(a);
  if ((a.value().data() <= 0).any()) throw NumericalError("log of a non-positive value");
  Tensor out(a.shape(), a.value().data().log().eval());
  return t.record("log", std::move(out), {a}, [&t, a](const Tensor& g) {
    t.grad_buffer(a).data() += g.data() / a.value().data();
  });
}

Var tanh(const Var& a) {
  Tape& t = tape_of(a);
  Tensor out(a.shape(), a.value().data().tanh().eval());
  auto holder = std::make_shared<Tensor>(out);
  return t.record("tanh", std::move(out), {a}, [&t, a, holder](const Tensor& g) {
    t.grad_buffer(a).data() += g.data() * (1.0 - holder->data().square());
  });
}

Var sigmoid(const Var& a) {
  Tape& t = tape_of(a);
  Tensor out(a.shape(), (1.0 / (1.0 + (-a.value().data()).exp())).eval());
  auto holder = std::make_shared<Tensor>(out);
  return t.record("sigmoid", std::move(out), {a}, [&t, a, holder](const Tensor& g) {
    t.grad_buffer(a).data() += g.data() * holder->data() * (1.0 - holder->data());
  });
}

Var leaky_relu(const Var& a, double slope) {
  Tape& t = tape_of(a);
  const auto& x = a.value().data();
  Tensor out(a.shape(), (x > 0).select(x, x * slope).eval());
  return t.record("leaky_relu", std::move(out), {a}, [&t, a, slope](const Tensor& g) {
    const auto& xv = a.value().data();
    t.grad_buffer(a).data() += (xv > 0).select(g.data(), g.data() * slope);
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Tape& t = tape_of(a);
  Tensor out(a.shape(), a.value().data().max(lo).min(hi).eval());
  return t.record("clamp", std::move(out), {a}, [&t, a, lo, hi](const Tensor& g) {
    const auto& x = a.value().data();
    t.grad_buffer(a).data() += ((x >= lo) && (x <= hi)).select(g.data(), 0.0);
  });
}

// ---- reductions / structure ------------------------------------------------------

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  return t.record("sum", Tensor::scalar(a.value().data().sum()), {a}, [&t, a](const Tensor& g) {
    t.grad_buffer(a).data() += g[0];
  });
}

Var mean(const Var& a) {
  Tape& t = tape_of(a);
  const double n = static_cast<double>(a.value().size());
  return t.record("mean", Tensor::scalar(a.value().data().mean()), {a}, [&t, a, n](const Tensor& g) {
    t.grad_buffer(a).data() += g[0] / n;
  });
}

Var spatial_mean(const Var& a) {
  Tape& t = tape_of(a);
  require_rank3(a.value(), "spatial_mean");
  const Index C = a.dim(0);
  const double n = static_cast<double>(a.dim(1) * a.dim(2));
  Tensor out({C, 1, 1});
  Eigen::Map<Eigen::VectorXd>(out.raw(), C) = a.value().matrix(C).rowwise().mean();
  return t.record("spatial_mean", std::move(out), {a}, [&t, a, C, n](const Tensor& g) {
    t.grad_buffer(a).matrix(C).colwise() += Eigen::Map<const Eigen::VectorXd>(g.raw(), C) / n;
  });
}

Var reshape(const Var& a, Shape shape) {
  Tape& t = tape_of(a);
  return t.record("reshape", a.value().reshaped(std::move(shape)), {a}, [&t, a](const Tensor& g) {
    t.grad_buffer(a).data() += g.data();
  });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  Tape& t = tape_of(parts.front());
  Shape shape = parts.front().shape();
  Index rows = 0;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ValidationError("concat: rank mismatch");
    for (std::size_t i = 1; i < s.size(); ++i) {
      if (s[i] != shape[i]) {
        throw ValidationError("concat: extent mismatch in dimension " + std::to_string(i) + " (" +
                              shape_string(s) + " vs " + shape_string(shape) + ")");
      }
    }
    rows += s[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  Index offset = 0;
  for (const Var& p : parts) {
    out.data().segment(offset, p.value().size()) = p.value().data();
    offset += p.value().size();
  }
  return t.record("concat", std::move(out), parts, [&t, parts](const Tensor& g) {
    Index off = 0;
    for (const Var& p : parts) {
      const Index n = p.value().size();
      if (t.requires_grad(p)) t.grad_buffer(p).data() += g.data().segment(off, n);
      off += n;
    }
  });
}

Var slice(const Var& a, Index begin, Index end) {
  Tape& t = tape_of(a);
  if (begin < 0 || end > a.dim(0) || begin >= end) {
    throw ValidationError("slice: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") for " + shape_string(a.shape()));
  }
  Shape shape = a.shape();
  const Index inner = a.value().size() / shape[0];
  shape[0] = end - begin;
  Tensor out(shape, a.value().data().segment(begin * inner, (end - begin) * inner).eval());
  return t.record("slice", std::move(out), {a}, [&t, a, begin, end, inner](const Tensor& g) {
    t.grad_buffer(a).data().segment(begin * inner, (end - begin) * inner) += g.data();
  });
}

Var bias_add(const Var& x, const Var& b) {
  Tape& t = tape_of(x, b);
  if (b.value().size() != x.dim(0)) {
    throw ValidationError("bias_add: bias length " + std::to_string(b.value().size()) + " != channels " +
                          std::to_string(x.dim(0)));
  }
  const Index C = x.dim(0);
  Tensor out = x.value();
  out.matrix(C).colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().raw(), C);
  return t.record("bias_add", std::move(out), {x, b}, [&t, x, b, C](const Tensor& g) {
    t.accumulate(x, g);
    if (t.requires_grad(b)) {
      Eigen::Map<Eigen::VectorXd>(t.grad_buffer(b).raw(), C) += g.matrix(C).rowwise().sum();
    }
  });
}

Var broadcast_channels(const Var& m, Index channels) {
  Tape& t = tape_of(m);
  if (m.value().rank() != 3 || m.dim(0) != 1) {
    throw ValidationError("broadcast_channels: expected [1,H,W], got " + shape_string(m.shape()));
  }
  const Index P = m.value().size();
  Tensor out({channels, m.dim(1), m.dim(2)});
  for (Index c = 0; c < channels; ++c) out.data().segment(c * P, P) = m.value().data();
  return t.record("broadcast_channels", std::move(out), {m}, [&t, m, channels, P](const Tensor& g) {
    Tensor& gm = t.grad_buffer(m);
    for (Index c = 0; c < channels; ++c) gm.data() += g.data().segment(c * P, P);
  });
}

Var subsample(const Var& a, Index stride) {
  Tape& t = tape_of(a);
  require_rank3(a.value(), "subsample");
  const Index C = a.dim(0), H = a.dim(1), W = a.dim(2);
  const Index Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  Tensor out({C, Ho, Wo});
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < Ho; ++y)
      for (Index x = 0; x < Wo; ++x) out(c, y, x) = a.value()(c, y * stride, x * stride);
  return t.record("subsample", std::move(out), {a}, [&t, a, stride, C, Ho, Wo](const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (Index c = 0; c < C; ++c)
      for (Index y = 0; y < Ho; ++y)
        for (Index x = 0; x < Wo; ++x) ga(c, y * stride, x * stride) += g(c, y, x);
  });
}

// ---- primitive operators -------------------------------------------------------------

Var conv2d(const Var& input, const Var& weight, Index stride, Index padding) {
  Tape& t = tape_of(input, weight);
  Tensor out = kernels::conv2d(input.value(), weight.value(), stride, padding);
  return t.record("conv2d", std::move(out), {input, weight}, [&t, input, weight, stride, padding](const Tensor& g) {
    Tensor* gi = t.requires_grad(input) ? &t.grad_buffer(input) : nullptr;
    Tensor* gw = t.requires_grad(weight) ? &t.grad_buffer(weight) : nullptr;
    kernels::conv2d_backward(input.value(), weight.value(), g, stride, padding, gi, gw);
  });
}

Var maxpool2d(const Var& input, Index k, Index stride) {
  Tape& t = tape_of(input);
  auto argmax = std::make_shared<std::vector<Index>>();
  Tensor out = kernels::maxpool2d(input.value(), k, stride, argmax.get());
  return t.record("maxpool2d", std::move(out), {input}, [&t, input, argmax](const Tensor& g) {
    Tensor& gi = t.grad_buffer(input);
    for (Index o = 0; o < g.size(); ++o) gi[(*argmax)[static_cast<std::size_t>(o)]] += g[o];
  });
}

Var bilinear_sample(const Var& input, const Var& coords, Padding padding) {
  Tape& t = tape_of(input, coords);
  Tensor out = kernels::bilinear_sample(input.value(), coords.value(), padding);
  return t.record("bilinear_sample", std::move(out), {input, coords}, [&t, input, coords, padding](const Tensor& g) {
    Tensor* gi = t.requires_grad(input) ? &t.grad_buffer(input) : nullptr;
    Tensor* gc = t.requires_grad(coords) ? &t.grad_buffer(coords) : nullptr;
    kernels::bilinear_sample_backward(input.value(), coords.value(), g, padding, gi, gc);
  });
}

Var softmax(const Var& input, Index axis) {
  Tape& t = tape_of(input);
  Tensor out = kernels::softmax(input.value(), axis);
  auto holder = std::make_shared<Tensor>(out);
  return t.record("softmax", std::move(out), {input}, [&t, input, holder, axis](const Tensor& g) {
    kernels::softmax_backward(*holder, g, axis, t.grad_buffer(input));
  });
}

Var cosine_similarity(const Var& a, const Var& b, double eps) {
  Tape& t = tape_of(a, b);
  if (a.value().size() != b.value().size()) {
    throw ValidationError("cosine_similarity: size mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
  const auto& x = a.value().data();
  const auto& y = b.value().data();
  const double na = std::sqrt(x.square().sum()), nb = std::sqrt(y.square().sum());
  const double da = std::max(na, eps), db = std::max(nb, eps);
  const double dot = (x * y).sum();
  const double c = dot / (da * db);
  return t.record("cosine_similarity", Tensor::scalar(c), {a, b}, [&t, a, b, na, nb, da, db, c, eps](const Tensor& g) {
    const auto& xv = a.value().data();
    const auto& yv = b.value().data();
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      ga.data() += g[0] * (yv / (da * db) - (na > eps ? c / (na * na) : 0.0) * xv);
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      gb.data() += g[0] * (xv / (da * db) - (nb > eps ? c / (nb * nb) : 0.0) * yv);
    }
  });
}

Tensor identity_grid(Index h, Index w) {
  Tensor g({2, h, w});
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      g(0, y, x) = static_cast<double>(x);
      g(1, y, x) = static_cast<double>(y);
    }
  }
  return g;
}

Tensor resize_coords(Index in_h, Index in_w, Index out_h, Index out_w) {
  Tensor g({2, out_h, out_w});
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (Index y = 0; y < out_h; ++y) {
    for (Index x = 0; x < out_w; ++x) {
      g(0, y, x) = (static_cast<double>(x) + 0.5) * sx - 0.5;
      g(1, y, x) = (static_cast<double>(y) + 0.5) * sy - 0.5;
    }
  }
  return g;
}

Var resize_bilinear(const Var& input, Index out_h, Index out_w) {
  require_rank3(input.value(), "resize_bilinear");
  Tape& t = tape_of(input);
  if (input.dim(1) == out_h && input.dim(2) == out_w) return input;
  Var coords = t.constant(resize_coords(input.dim(1), input.dim(2), out_h, out_w));
  return bilinear_sample(input, coords, Padding::Border);
}

// ---- attention / deformable ----------------------------------------------------------

Var linear_project(const Var& x, const Var& w) {
  Tape& t = tape_of(x, w);
  require_rank3(x.value(), "linear_project input");
  if (w.value().rank() != 2 || w.dim(0) != x.dim(0)) {
    throw ValidationError("linear_project: weight must be [C,d] with C=" + std::to_string(x.dim(0)) + ", got " +
                          shape_string(w.shape()));
  }
  const Index C = x.dim(0), d = w.dim(1);
  Tensor out({d, x.dim(1), x.dim(2)});
  out.matrix(d).noalias() = w.value().matrix(C).transpose() * x.value().matrix(C);
  return t.record("linear_project", std::move(out), {x, w}, [&t, x, w, C, d](const Tensor& g) {
    if (t.requires_grad(x)) t.grad_buffer(x).matrix(C).noalias() += w.value().matrix(C) * g.matrix(d);
    if (t.requires_grad(w)) t.grad_buffer(w).matrix(C).noalias() += x.value().matrix(C) * g.matrix(d).transpose();
  });
}

Var window_sample(const Var& input, const Var& flow, const std::vector<std::array<double, 2>>& taps,
                  Index query_stride, Padding padding) {
  Tape& t = tape_of(input, flow);
  require_rank3(input.value(), "window_sample input");
  if (flow.value().rank() != 3 || flow.dim(0) != 2) {
    throw ValidationError("window_sample: flow must be [2,Hq,Wq], got " + shape_string(flow.shape()));
  }
  if (taps.empty()) throw ValidationError("window_sample: empty tap set");
  const Index C = input.dim(0), Hq = flow.dim(1), Wq = flow.dim(2), P = Hq * Wq;
  const Index S = static_cast<Index>(taps.size());
  // sampling coordinates for every tap, shared by forward and backward
  auto coords = std::make_shared<std::vector<Tensor>>();
  coords->reserve(taps.size());
  const Tensor& f = flow.value();
  for (const auto& tap : taps) {
    Tensor c({2, Hq, Wq});
    for (Index y = 0; y < Hq; ++y) {
      for (Index x = 0; x < Wq; ++x) {
        c(0, y, x) = static_cast<double>(x * query_stride) + f(0, y, x) + tap[0];
        c(1, y, x) = static_cast<double>(y * query_stride) + f(1, y, x) + tap[1];
      }
    }
    coords->push_back(std::move(c));
  }
  Tensor out({S, C, Hq, Wq});
  for (Index s = 0; s < S; ++s) {
    Tensor sampled = kernels::bilinear_sample(input.value(), (*coords)[static_cast<std::size_t>(s)], padding);
    out.data().segment(s * C * P, C * P) = sampled.data();
  }
  return t.record("window_sample", std::move(out), {input, flow}, [&t, input, flow, coords, S, C, P, Hq, Wq, padding](const Tensor& g) {
    Tensor* gi = t.requires_grad(input) ? &t.grad_buffer(input) : nullptr;
    Tensor gc({2, Hq, Wq});
    Tensor* gcp = t.requires_grad(flow) ? &gc : nullptr;
    for (Index s = 0; s < S; ++s) {
      Tensor gs({C, Hq, Wq}, g.data().segment(s * C * P, C * P).eval());
      kernels::bilinear_sample_backward(input.value(), (*coords)[static_cast<std::size_t>(s)], gs, padding, gi, gcp);
    }
    if (gcp) t.grad_buffer(flow).data() += gc.data();
  });
}

Var cosine_attention(const Var& q, const Var& keys, const Var& values, double eps, Tensor* weights) {
  Tape& t = tape_of(q, keys);
  tape_of(q, values);
  require_rank3(q.value(), "cosine_attention query");
  const Index d = q.dim(0), H = q.dim(1), W = q.dim(2), P = H * W;
  if (keys.value().rank() != 4 || keys.dim(1) != d || keys.dim(2) != H || keys.dim(3) != W) {
    throw ValidationError("cosine_attention: keys must be [S,d,H,W] matching query " + shape_string(q.shape()) +
                          ", got " + shape_string(keys.shape()));
  }
  if (values.value().rank() != 4 || values.dim(0) != keys.dim(0) || values.dim(2) != H || values.dim(3) != W) {
    throw ValidationError("cosine_attention: values must be [S,dv,H,W] matching keys, got " +
                          shape_string(values.shape()));
  }
  const Index S = keys.dim(0), dv = values.dim(1);
  const double root_d = std::sqrt(static_cast<double>(d));

  using Mat = Eigen::MatrixXd;
  const auto Q = q.value().matrix(d);
  Eigen::RowVectorXd nq = Q.colwise().norm();
  Eigen::RowVectorXd qden = nq.cwiseMax(eps);

  auto logits = std::make_shared<Mat>(S, P);
  auto knorm = std::make_shared<Mat>(S, P);
  for (Index s = 0; s < S; ++s) {
    Eigen::Map<const Tensor::RowMatrix> K(keys.value().raw() + s * d * P, d, P);
    knorm->row(s) = K.colwise().norm();
    const Eigen::RowVectorXd dot = Q.cwiseProduct(K).colwise().sum();
    logits->row(s) = dot.array() / (qden.array() * knorm->row(s).array().max(eps) * root_d);
  }
  // softmax over samples (rows) per query (column)
  auto w = std::make_shared<Mat>(S, P);
  for (Index p = 0; p < P; ++p) {
    const double m = logits->col(p).maxCoeff();
    w->col(p) = (logits->col(p).array() - m).exp();
    w->col(p) /= w->col(p).sum();
  }
  Tensor out({dv, H, W});
  auto O = out.matrix(dv);
  O.setZero();
  for (Index s = 0; s < S; ++s) {
    Eigen::Map<const Tensor::RowMatrix> V(values.value().raw() + s * dv * P, dv, P);
    O.array() += V.array().rowwise() * w->row(s).array();
  }
  if (weights) {
    *weights = Tensor({S, H, W});
    Eigen::Map<Tensor::RowMatrix>(weights->raw(), S, P) = *w;
  }
  return t.record("cosine_attention", std::move(out), {q, keys, values},
                  [&t, q, keys, values, w, logits, knorm, nq, qden, d, dv, S, P, root_d, eps](const Tensor& g) {
    const auto G = g.matrix(dv);
    if (t.requires_grad(values)) {
      Tensor& gv = t.grad_buffer(values);
      for (Index s = 0; s < S; ++s) {
        Eigen::Map<Tensor::RowMatrix> GV(gv.raw() + s * dv * P, dv, P);
        GV.array() += G.array().rowwise() * w->row(s).array();
      }
    }
    const bool need_q = t.requires_grad(q), need_k = t.requires_grad(keys);
    if (!need_q && !need_k) return;
    // d loss / d weight, then through softmax to logits
    Mat gw(S, P);
    for (Index s = 0; s < S; ++s) {
      Eigen::Map<const Tensor::RowMatrix> V(values.value().raw() + s * dv * P, dv, P);
      gw.row(s) = G.cwiseProduct(V).colwise().sum();
    }
    const Eigen::RowVectorXd wgw = w->cwiseProduct(gw).colwise().sum();
    Mat gl = w->array() * (gw.array().rowwise() - wgw.array());
    const auto Q = q.value().matrix(d);
    Tensor::RowMatrix gQ = Tensor::RowMatrix::Zero(d, P);
    for (Index s = 0; s < S; ++s) {
      Eigen::Map<const Tensor::RowMatrix> K(keys.value().raw() + s * d * P, d, P);
      const Eigen::ArrayXXd kden_row = knorm->row(s).array().max(eps);
      const Eigen::RowVectorXd coef = (gl.row(s).array() / (qden.array() * kden_row.row(0) * root_d)).matrix();
      if (need_q) {
        gQ.array() += K.array().rowwise() * coef.array();
        Eigen::RowVectorXd qterm(P);
        for (Index p = 0; p < P; ++p) qterm[p] = nq[p] > eps ? gl(s, p) * (*logits)(s, p) / (nq[p] * nq[p]) : 0.0;
        gQ.array() -= Q.array().rowwise() * qterm.array();
      }
      if (need_k) {
        Eigen::Map<Tensor::RowMatrix> GK(t.grad_buffer(keys).raw() + s * d * P, d, P);
        GK.array() += Q.array().rowwise() * coef.array();
        Eigen::RowVectorXd kterm(P);
        for (Index p = 0; p < P; ++p) {
          const double nk = (*knorm)(s, p);
          kterm[p] = nk > eps ? gl(s, p) * (*logits)(s, p) / (nk * nk) : 0.0;
        }
        GK.array() -= K.array().rowwise() * kterm.array();
      }
    }
    if (need_q) t.grad_buffer(q).matrix(d) += gQ;
  });
}

Var deform_conv2d(const Var& input, const Var& offsets, const Var& flow, const Var& weight, Padding padding) {
  Tape& t = tape_of(input, offsets);
  tape_of(input, weight);
  require_rank3(input.value(), "deform_conv2d input");
  const Index C = input.dim(0), H = input.dim(1), W = input.dim(2), P = H * W;
  const Tensor& w = weight.value();
  if (w.rank() != 4 || w.dim(1) != C || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    throw ValidationError("deform_conv2d: weight must be [C_out," + std::to_string(C) + ",k,k] with odd k, got " +
                          shape_string(w.shape()));
  }
  const Index k = w.dim(2), T = k * k, Co = w.dim(0), r = k / 2;
  if (offsets.value().rank() != 3 || offsets.dim(0) != 2 * T || offsets.dim(1) != H || offsets.dim(2) != W) {
    throw ValidationError("deform_conv2d: offsets must be [" + std::to_string(2 * T) + "," + std::to_string(H) + "," +
                          std::to_string(W) + "], got " + shape_string(offsets.shape()));
  }
  const bool has_flow = flow.valid();
  if (has_flow) {
    tape_of(input, flow);
    if (flow.value().rank() != 3 || flow.dim(0) != 2 || flow.dim(1) != H || flow.dim(2) != W) {
      throw ValidationError("deform_conv2d: flow must be [2," + std::to_string(H) + "," + std::to_string(W) +
                            "], got " + shape_string(flow.shape()));
    }
  }
  // per (tap, pixel) sampling coordinates
  auto cx = std::make_shared<Eigen::MatrixXd>(T, P);
  auto cy = std::make_shared<Eigen::MatrixXd>(T, P);
  const Tensor& off = offsets.value();
  for (Index tap = 0; tap < T; ++tap) {
    const double tx = static_cast<double>(tap % k - r), ty = static_cast<double>(tap / k - r);
    for (Index p = 0; p < P; ++p) {
      const double x = static_cast<double>(p % W), y = static_cast<double>(p / W);
      double fx = 0, fy = 0;
      if (has_flow) {
        fx = flow.value()[p];
        fy = flow.value()[P + p];
      }
      (*cx)(tap, p) = x + tx + fx + off[(2 * tap) * P + p];
      (*cy)(tap, p) = y + ty + fy + off[(2 * tap + 1) * P + p];
    }
  }
  auto cols = std::make_shared<Tensor::RowMatrix>(C * T, P);
  const Tensor& in = input.value();
  for (Index tap = 0; tap < T; ++tap) {
    for (Index p = 0; p < P; ++p) {
      const auto ax = kernels::axis_taps<double>((*cx)(tap, p), W, padding);
      const auto ay = kernels::axis_taps<double>((*cy)(tap, p), H, padding);
      for (Index c = 0; c < C; ++c) {
        const double* plane = in.raw() + c * P;
        const double a = (ay.valid0 && ax.valid0) ? plane[ay.i0 * W + ax.i0] : 0.0;
        const double b = (ay.valid0 && ax.valid1) ? plane[ay.i0 * W + ax.i1] : 0.0;
        const double d = (ay.valid1 && ax.valid0) ? plane[ay.i1 * W + ax.i0] : 0.0;
        const double e = (ay.valid1 && ax.valid1) ? plane[ay.i1 * W + ax.i1] : 0.0;
        (*cols)(c * T + tap, p) = ay.w0 * (ax.w0 * a + ax.w1 * b) + ay.w1 * (ax.w0 * d + ax.w1 * e);
      }
    }
  }
  Tensor out({Co, H, W});
  out.matrix(Co).noalias() = w.matrix(Co) * *cols;
  std::vector<Var> inputs{input, offsets, weight};
  if (has_flow) inputs.push_back(flow);
  return t.record("deform_conv2d", std::move(out), inputs,
                  [&t, input, offsets, flow, weight, has_flow, cols, cx, cy, C, H, W, P, T, Co, padding](const Tensor& g) {
    const auto G = g.matrix(Co);
    if (t.requires_grad(weight)) t.grad_buffer(weight).matrix(Co).noalias() += G * cols->transpose();
    const bool need_in = t.requires_grad(input);
    const bool need_off = t.requires_grad(offsets);
    const bool need_flow = has_flow && t.requires_grad(flow);
    if (!need_in && !need_off && !need_flow) return;
    const Tensor::RowMatrix gcols = weight.value().matrix(Co).transpose() * G;
    Tensor* gi = need_in ? &t.grad_buffer(input) : nullptr;
    const Tensor& in = input.value();
    Eigen::MatrixXd gx = Eigen::MatrixXd::Zero(T, P), gy = Eigen::MatrixXd::Zero(T, P);
    for (Index tap = 0; tap < T; ++tap) {
      for (Index p = 0; p < P; ++p) {
        const auto ax = kernels::axis_taps<double>((*cx)(tap, p), W, padding);
        const auto ay = kernels::axis_taps<double>((*cy)(tap, p), H, padding);
        const bool v00 = ay.valid0 && ax.valid0, v01 = ay.valid0 && ax.valid1;
        const bool v10 = ay.valid1 && ax.valid0, v11 = ay.valid1 && ax.valid1;
        double sx = 0, sy = 0;
        for (Index c = 0; c < C; ++c) {
          const double gc = gcols(c * T + tap, p);
          if (gc == 0.0) continue;
          if (gi) {
            double* gp = gi->raw() + c * P;
            if (v00) gp[ay.i0 * W + ax.i0] += gc * ay.w0 * ax.w0;
            if (v01) gp[ay.i0 * W + ax.i1] += gc * ay.w0 * ax.w1;
            if (v10) gp[ay.i1 * W + ax.i0] += gc * ay.w1 * ax.w0;
            if (v11) gp[ay.i1 * W + ax.i1] += gc * ay.w1 * ax.w1;
          }
          const double* plane = in.raw() + c * P;
          const double a = v00 ? plane[ay.i0 * W + ax.i0] : 0.0;
          const double b = v01 ? plane[ay.i0 * W + ax.i1] : 0.0;
          const double d = v10 ? plane[ay.i1 * W + ax.i0] : 0.0;
          const double e = v11 ? plane[ay.i1 * W + ax.i1] : 0.0;
          sx += gc * (ay.w0 * (b - a) + ay.w1 * (e - d));
          sy += gc * (ax.w0 * (d - a) + ax.w1 * (e - b));
        }
        gx(tap, p) = sx * ax.dcoord;
        gy(tap, p) = sy * ay.dcoord;
      }
    }
    if (need_off) {
      Tensor& go = t.grad_buffer(offsets);
      for (Index tap = 0; tap < T; ++tap) {
        Eigen::Map<Eigen::RowVectorXd>(go.raw() + (2 * tap) * P, P) += gx.row(tap);
        Eigen::Map<Eigen::RowVectorXd>(go.raw() + (2 * tap + 1) * P, P) += gy.row(tap);
      }
    }
    if (need_flow) {
      Tensor& gf = t.grad_buffer(flow);
      Eigen::Map<Eigen::RowVectorXd>(gf.raw(), P) += gx.colwise().sum();
      Eigen::Map<Eigen::RowVectorXd>(gf.raw() + P, P) += gy.colwise().sum();
    }
  });
}

std::vector<Index> feature_subset(Index count, Index max_features) {
  std::vector<Index> idx;
  if (count <= max_features || max_features <= 0) {
    idx.resize(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), Index{0});
    return idx;
  }
  const Index stride = (count + max_features - 1) / max_features;
  for (Index i = 0; i < count; i += stride) idx.push_back(i);
  return idx;
}

Var contextual_loss(const Var& x, const Var& y, const ContextualOptions& options) {
  Tape& t = tape_of(x, y);
  require_rank3(x.value(), "contextual_loss x");
  require_rank3(y.value(), "contextual_loss y");
  const Index C = x.dim(0);
  if (y.dim(0) != C) {
    throw ValidationError("contextual_loss: channel mismatch (" + std::to_string(C) + " vs " +
                          std::to_string(y.dim(0)) + ")");
  }
  const Index Px = x.dim(1) * x.dim(2), Py = y.dim(1) * y.dim(2);
  const auto ix = std::make_shared<std::vector<Index>>(feature_subset(Px, options.max_features));
  const auto iy = std::make_shared<std::vector<Index>>(feature_subset(Py, options.max_features));
  const Index nx = static_cast<Index>(ix->size()), ny = static_cast<Index>(iy->size());
  const double norm_eps = 1e-8, h = options.bandwidth, eps = options.eps;

  using Mat = Eigen::MatrixXd;
  const auto Xall = x.value().matrix(C);
  const auto Yall = y.value().matrix(C);
  Mat X(C, nx), Y(C, ny);
  for (Index i = 0; i < nx; ++i) X.col(i) = Xall.col((*ix)[static_cast<std::size_t>(i)]);
  for (Index j = 0; j < ny; ++j) Y.col(j) = Yall.col((*iy)[static_cast<std::size_t>(j)]);
  const Eigen::RowVectorXd xn = X.colwise().norm(), yn = Y.colwise().norm();
  auto Xh = std::make_shared<Mat>(X.array().rowwise() / xn.array().max(norm_eps));
  auto Yh = std::make_shared<Mat>(Y.array().rowwise() / yn.array().max(norm_eps));
  // column i of D and CX holds x feature i against every y feature
  auto D = std::make_shared<Mat>((1.0 - (Yh->transpose() * *Xh).array()).matrix());  // [ny, nx]
  auto den = std::make_shared<Eigen::VectorXd>(nx);
  auto jmin = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(nx));
  auto CX = std::make_shared<Mat>(ny, nx);
  for (Index i = 0; i < nx; ++i) {
    Index best = 0;
    const double dmin = D->col(i).minCoeff(&best);
    (*jmin)[static_cast<std::size_t>(i)] = best;
    (*den)[i] = dmin + eps;
    // row-softmax of (1 − D/den)/h over y features; the largest logit belongs to `best`
    const double top = (1.0 - dmin / (*den)[i]) / h;
    auto col = CX->col(i);
    col = (((1.0 - D->col(i).array() / (*den)[i]) / h) - top).exp().matrix();
    col /= col.sum();
  }
  auto imax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(ny), 0);
  Eigen::VectorXd colmax = CX->col(0);
  for (Index i = 1; i < nx; ++i) {
    const auto col = CX->col(i);
    for (Index j = 0; j < ny; ++j) {
      if (col[j] > colmax[j]) {
        colmax[j] = col[j];
        (*imax)[static_cast<std::size_t>(j)] = i;
      }
    }
  }
  const double S = colmax.sum() / static_cast<double>(ny);
  const double loss = -std::log(S);
  auto xnorm = std::make_shared<Eigen::RowVectorXd>(xn);
  auto ynorm = std::make_shared<Eigen::RowVectorXd>(yn);
  return t.record("contextual_loss", Tensor::scalar(loss), {x, y},
                  [&t, x, y, ix, iy, nx, ny, C, S, h, norm_eps, Xh, Yh, D, den, jmin, CX, imax, xnorm, ynorm](const Tensor& g) {
    // only the column-wise maxima of CX carry gradient
    const double gmax = -g[0] / (S * static_cast<double>(ny));
    Mat gCos(ny, nx);  // −∂L/∂D
    Eigen::VectorXd gCX(ny);
    for (Index i = 0; i < nx; ++i) {
      gCX.setZero();
      for (Index j = 0; j < ny; ++j)
        if ((*imax)[static_cast<std::size_t>(j)] == i) gCX[j] = gmax;
      const auto cx = CX->col(i);
      const double dot = cx.dot(gCX);
      const Eigen::VectorXd gDt = -(cx.array() * (gCX.array() - dot)).matrix() / h;
      auto gd = gCos.col(i);
      gd = -gDt / (*den)[i];
      const double gden = -(gDt.array() * D->col(i).array()).sum() / ((*den)[i] * (*den)[i]);
      gd[(*jmin)[static_cast<std::size_t>(i)]] -= gden;
    }
    if (t.requires_grad(x)) {
      const Mat gXh = *Yh * gCos;  // [C, nx]
      auto GX = t.grad_buffer(x).matrix(C);
      for (Index i = 0; i < nx; ++i) {
        const double n = (*xnorm)[i];
        Eigen::VectorXd gi = n > norm_eps ? ((gXh.col(i) - Xh->col(i) * Xh->col(i).dot(gXh.col(i))) / n).eval()
                                          : (gXh.col(i) / norm_eps).eval();
        GX.col((*ix)[static_cast<std::size_t>(i)]) += gi;
      }
    }
    if (t.requires_grad(y)) {
      const Mat gYh = *Xh * gCos.transpose();  // [C, ny]
      auto GY = t.grad_buffer(y).matrix(C);
      for (Index j = 0; j < ny; ++j) {
        const double n = (*ynorm)[j];
        Eigen::VectorXd gj = n > norm_eps ? ((gYh.col(j) - Yh->col(j) * Yh->col(j).dot(gYh.col(j))) / n).eval()
                                          : (gYh.col(j) / norm_eps).eval();
        GY.col((*iy)[static_cast<std::size_t>(j)]) += gj;
      }
    }
  });
}

}  // namespace dvd
