#include "dvd/gradcheck.hpp"

#include "dvd/align_fuse.hpp"
#include "dvd/embedder.hpp"
#include "dvd/losses.hpp"
#include "dvd/parameters.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace dvd {

namespace {

Tensor uniform(const Shape& shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

Index uniform_index(Index n, std::mt19937_64& rng) {
  return std::uniform_int_distribution<Index>(0, n - 1)(rng);
}

Var project(const Var& out, const Tensor& r) {
  Tape& tape = *out.tape();
  return sum(mul(out, tape.constant(r)));
}

double evaluate(const GraphFn& f, const std::vector<Tensor>& inputs, const Tensor& r) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.constant(t));
  return project(f(leaves), r).value()[0];
}

double numeric(const GraphFn& f, std::vector<Tensor>& inputs, const Tensor& r, std::size_t which, Index entry, double h) {
  double& x = inputs[which][entry];
  const double x0 = x;
  x = x0 + h;
  const double fp = evaluate(f, inputs, r);
  x = x0 - h;
  const double fm = evaluate(f, inputs, r);
  x = x0;
  return (fp - fm) / (2 * h);
}

// A differentiable point: halving the step moves the estimate by O(h²).
// Across a kink the two estimates differ by a fraction of the slope jump.
constexpr double kKinkAgreement = 1e-6;

}  // namespace

GradcheckStats check_gradient(const GraphFn& f, const std::vector<Tensor>& inputs, std::mt19937_64& rng,
                              const GradcheckOptions& o) {
  if (inputs.empty()) throw ValidationError("check_gradient: no inputs");
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const Var out = f(leaves);
  const Tensor r = uniform(out.shape(), -1.0, 1.0, rng);
  tape.backward(project(out, r));
  std::vector<Tensor> grads;
  for (const Var& v : leaves) grads.push_back(tape.grad(v));

  std::vector<Tensor> work = inputs;
  GradcheckStats stats;
  const Index max_attempts = 8 * o.entries;
  for (Index attempt = 0; stats.checked < o.entries && attempt < max_attempts; ++attempt) {
    const std::size_t which = static_cast<std::size_t>(uniform_index(static_cast<Index>(inputs.size()), rng));
    if (inputs[which].size() == 0) continue;
    const Index entry = uniform_index(inputs[which].size(), rng);
    const double a = grads[which][entry];
    const double n = numeric(f, work, r, which, entry, o.step);
    const double scale = std::max({std::abs(a), std::abs(n), o.floor});
    const double err = std::abs(a - n) / scale;
    if (err > o.tolerance) {
      const double n_half = numeric(f, work, r, which, entry, o.step / 2);
      if (std::abs(n - n_half) > kKinkAgreement * scale) {
        ++stats.redrawn;
        continue;
      }
    }
    stats.max_rel_error = std::max(stats.max_rel_error, err);
    ++stats.checked;
  }
  return stats;
}

namespace {

struct Case {
  std::string name;
  /// Draws inputs and a graph for one seed.
  std::function<std::pair<GraphFn, std::vector<Tensor>>(std::mt19937_64&)> make;
};

std::vector<Case> suite() {
  std::vector<Case> c;
  auto unary = [&c](const std::string& name, std::function<Var(const Var&)> op, double lo, double hi) {
    c.push_back({name, [op, lo, hi](std::mt19937_64& rng) {
                   return std::pair<GraphFn, std::vector<Tensor>>{
                       [op](const std::vector<Var>& v) { return op(v[0]); }, {uniform({2, 3, 4}, lo, hi, rng)}};
                 }});
  };
  unary("exp", [](const Var& a) { return exp(a); }, -2, 2);
  unary("log", [](const Var& a) { return log(a); }, 0.2, 3);
  unary("tanh", [](const Var& a) { return tanh(a); }, -2, 2);
  unary("sigmoid", [](const Var& a) { return sigmoid(a); }, -3, 3);
  unary("abs", [](const Var& a) { return abs(a); }, -1, 1);
  unary("leaky_relu", [](const Var& a) { return leaky_relu(a, 0.2); }, -1, 1);
  unary("clamp", [](const Var& a) { return clamp(a, -0.5, 0.5); }, -1, 1);
  unary("spatial_mean", [](const Var& a) { return spatial_mean(a); }, -1, 1);
  unary("subsample", [](const Var& a) { return subsample(a, 2); }, -1, 1);
  unary("resize_bilinear", [](const Var& a) { return resize_bilinear(a, 5, 7); }, -1, 1);

  c.push_back({"mul/concat/slice/bias_add", [](std::mt19937_64& rng) {
                 GraphFn f = [](const std::vector<Var>& v) {
                   Var m = mul(v[0], v[1]);
                   return bias_add(slice(concat({m, v[0]}), 1, 3), v[2]);
                 };
                 return std::pair{f, std::vector<Tensor>{uniform({2, 3, 3}, -1, 1, rng), uniform({2, 3, 3}, -1, 1, rng),
                                                         uniform({2}, -1, 1, rng)}};
               }});
  c.push_back({"cosine_similarity", [](std::mt19937_64& rng) {
                 GraphFn f = [](const std::vector<Var>& v) { return cosine_similarity(v[0], v[1]); };
                 return std::pair{f, std::vector<Tensor>{uniform({3, 4}, -1, 1, rng), uniform({3, 4}, -1, 1, rng)}};
               }});
  c.push_back({"conv2d", [](std::mt19937_64& rng) {
                 const Index stride = 1 + uniform_index(2, rng), pad = uniform_index(2, rng);
                 GraphFn f = [=](const std::vector<Var>& v) { return conv2d(v[0], v[1], stride, pad); };
                 return std::pair{f, std::vector<Tensor>{uniform({3, 7, 7}, -1, 1, rng), uniform({4, 3, 3, 3}, -1, 1, rng)}};
               }});
  c.push_back({"maxpool2d", [](std::mt19937_64& rng) {
                 const bool overlap = uniform_index(2, rng) == 1;
                 GraphFn f = [=](const std::vector<Var>& v) { return overlap ? maxpool2d(v[0], 3, 1) : maxpool2d(v[0], 2, 2); };
                 return std::pair{f, std::vector<Tensor>{uniform({2, 8, 8}, -1, 1, rng)}};
               }});
  c.push_back({"bilinear_sample", [](std::mt19937_64& rng) {
                 const Padding pad = static_cast<Padding>(uniform_index(3, rng));
                 GraphFn f = [=](const std::vector<Var>& v) { return bilinear_sample(v[0], v[1], pad); };
                 return std::pair{f, std::vector<Tensor>{uniform({2, 6, 7}, -1, 1, rng), uniform({2, 5, 5}, -1.5, 7.5, rng)}};
               }});
  c.push_back({"softmax", [](std::mt19937_64& rng) {
                 const Index axis = uniform_index(3, rng);
                 GraphFn f = [=](const std::vector<Var>& v) { return softmax(v[0], axis); };
                 return std::pair{f, std::vector<Tensor>{uniform({3, 4, 5}, -2, 2, rng)}};
               }});
  c.push_back({"linear_project", [](std::mt19937_64& rng) {
                 GraphFn f = [](const std::vector<Var>& v) { return linear_project(v[0], v[1]); };
                 return std::pair{f, std::vector<Tensor>{uniform({4, 3, 3}, -1, 1, rng), uniform({4, 3}, -1, 1, rng)}};
               }});
  c.push_back({"window_sample", [](std::mt19937_64& rng) {
                 const Index stride = 1 + uniform_index(2, rng);
                 GraphFn f = [=](const std::vector<Var>& v) { return window_sample(v[0], v[1], window_taps(3, WindowShape::Square), stride); };
                 return std::pair{f, std::vector<Tensor>{uniform({2, 6, 6}, -1, 1, rng), uniform({2, 6 / stride, 6 / stride}, -1.5, 1.5, rng)}};
               }});
  c.push_back({"cosine_attention", [](std::mt19937_64& rng) {
                 GraphFn f = [](const std::vector<Var>& v) { return cosine_attention(v[0], v[1], v[2]); };
                 return std::pair{f, std::vector<Tensor>{uniform({3, 4, 4}, -1, 1, rng), uniform({5, 3, 4, 4}, -1, 1, rng),
                                                         uniform({5, 3, 4, 4}, -1, 1, rng)}};
               }});
  c.push_back({"deform_conv2d", [](std::mt19937_64& rng) {
                 const Padding pad = static_cast<Padding>(uniform_index(3, rng));
                 GraphFn f = [=](const std::vector<Var>& v) { return deform_conv2d(v[0], v[1], v[2], v[3], pad); };
                 return std::pair{f, std::vector<Tensor>{uniform({2, 5, 5}, -1, 1, rng), uniform({18, 5, 5}, -1.5, 1.5, rng),
                                                         uniform({2, 5, 5}, -1, 1, rng), uniform({3, 2, 3, 3}, -1, 1, rng)}};
               }});

  c.push_back({"flow_guided_attention", [](std::mt19937_64& rng) {
                 FcasOptions o;
                 o.kernel = 3;
                 o.shape = static_cast<WindowShape>(uniform_index(2, rng));
                 o.query_stride = 1 + uniform_index(2, rng);
                 GraphFn f = [=](const std::vector<Var>& v) {
                   return flow_guided_attention(v[0], v[1], v[2], {v[3], v[4], v[5]}, o);
                 };
                 return std::pair{f, std::vector<Tensor>{uniform({4, 6, 6}, -1, 1, rng), uniform({4, 6, 6}, -1, 1, rng),
                                                         uniform({2, 6, 6}, -1.5, 1.5, rng), uniform({4, 3}, -1, 1, rng),
                                                         uniform({4, 3}, -1, 1, rng), uniform({4, 3}, -1, 1, rng)}};
               }});
  c.push_back({"fcas_offsets", [](std::mt19937_64& rng) {
                 const bool coarse = uniform_index(2, rng) == 1;
                 const Index in = 4 + 3 + 2 + (coarse ? 8 : 0);
                 GraphFn f = [=](const std::vector<Var>& v) {
                   return fcas_offsets(v[0], v[1], v[2], {v[3], v[4]}, coarse ? v[5] : Var{});
                 };
                 std::vector<Tensor> in_t{uniform({4, 6, 6}, -1, 1, rng), uniform({3, 3, 3}, -1, 1, rng),
                                          uniform({2, 6, 6}, -1, 1, rng), uniform({8, in, 3, 3}, -0.3, 0.3, rng),
                                          uniform({8}, -1, 1, rng)};
                 if (coarse) in_t.push_back(uniform({8, 6, 6}, -1, 1, rng));
                 return std::pair{f, in_t};
               }});
  c.push_back({"deformable_align", [](std::mt19937_64& rng) {
                 GraphFn f = [](const std::vector<Var>& v) { return deformable_align(v[0], v[1], v[2], v[3]); };
                 return std::pair{f, std::vector<Tensor>{uniform({3, 6, 6}, -1, 1, rng), uniform({18, 6, 6}, -1.5, 1.5, rng),
                                                         uniform({2, 6, 6}, -1.5, 1.5, rng), uniform({3, 3, 3, 3}, -1, 1, rng)}};
               }});
  c.push_back({"dcaf_fuse", [](std::mt19937_64& rng) {
                 DcafOptions o;
                 o.pool = 2;
                 GraphFn f = [=](const std::vector<Var>& v) {
                   return dcaf_fuse(v[0], v[1], {v[2], v[3], v[4], {v[5], v[6]}, v[7], v[8], v[9], v[10]}, o);
                 };
                 return std::pair{f, std::vector<Tensor>{
                                         uniform({3, 8, 8}, -1, 1, rng), uniform({3, 8, 8}, -1, 1, rng),
                                         uniform({3, 3, 1, 1}, -1, 1, rng), uniform({3, 3, 1, 1}, -1, 1, rng),
                                         uniform({3, 3, 1, 1}, -1, 1, rng), uniform({18, 3, 3, 3}, -0.3, 0.3, rng),
                                         uniform({18}, -0.5, 0.5, rng), uniform({3, 3, 3, 3}, -1, 1, rng),
                                         uniform({3, 3, 3, 3}, -1, 1, rng), uniform({3, 6, 1, 1}, -1, 1, rng),
                                         uniform({3}, -1, 1, rng)}};
               }});

  c.push_back({"contextual_loss", [](std::mt19937_64& rng) {
                 GraphFn f = [](const std::vector<Var>& v) { return contextual_loss(v[0], v[1]); };
                 return std::pair{f, std::vector<Tensor>{uniform({4, 3, 3}, -1, 1, rng), uniform({4, 3, 4}, -1, 1, rng)}};
               }});
  for (MfrDistance d : {MfrDistance::Contextual, MfrDistance::PooledCosine}) {
    c.push_back({"mfr_loss(" + to_string(d) + ")", [d](std::mt19937_64& rng) {
                   const Tensor r1 = uniform({3, 32, 32}, 0, 1, rng), r2 = uniform({3, 32, 32}, 0, 1, rng);
                   GraphFn f = [=](const std::vector<Var>& v) {
                     static const ConvEmbedder embedder;
                     return mfr_loss(v[0], r1, r2, embedder, d);
                   };
                   return std::pair{f, std::vector<Tensor>{uniform({3, 32, 32}, 0, 1, rng)}};
                 }});
  }
  c.push_back({"align_loss", [](std::mt19937_64& rng) {
                 GraphFn f = [](const std::vector<Var>& v) { return align_loss(v[0], v[1]); };
                 return std::pair{f, std::vector<Tensor>{uniform({4, 5, 5}, -1, 1, rng), uniform({4, 5, 5}, -1, 1, rng)}};
               }});
  c.push_back({"consistency_loss", [](std::mt19937_64& rng) {
                 const Tensor flow = uniform({2, 6, 6}, -1.5, 1.5, rng);
                 Tensor mask = uniform({1, 6, 6}, 0, 1, rng);
                 for (Index i = 0; i < mask.size(); ++i) mask[i] = mask[i] < 0.7 ? 1.0 : 0.0;
                 mask[0] = 1.0;
                 GraphFn f = [=](const std::vector<Var>& v) { return consistency_loss(v[0], v[1], flow, mask).loss; };
                 return std::pair{f, std::vector<Tensor>{uniform({3, 6, 6}, 0, 1, rng), uniform({3, 6, 6}, 0, 1, rng)}};
               }});
  for (const bool generator : {true, false}) {
    c.push_back({generator ? "adversarial_loss(g)" : "adversarial_loss(d)", [generator](std::mt19937_64& rng) {
                   ParameterStore store;
                   init_discriminator(store, {4}, rng());
                   // a non-zero last layer so the discriminator output depends on its input
                   store.get("disc.3.w") = uniform(store.get("disc.3.w").shape(), -0.5, 0.5, rng);
                   const std::vector<std::string> names = store.names();
                   const FrameSequence refs{{uniform({3, 16, 16}, 0, 1, rng), uniform({3, 16, 16}, 0, 1, rng)}, {}};
                   // d_loss detaches the output, so only the discriminator is checked there
                   const Tensor out = uniform({3, 16, 16}, 0, 1, rng);
                   const std::size_t first = generator ? 1 : 0;
                   GraphFn f = [=](const std::vector<Var>& v) {
                     const BoundParameters disc(names, std::vector<Var>(v.begin() + static_cast<std::ptrdiff_t>(first), v.end()));
                     const Var o = generator ? v[0] : v[0].tape()->constant(out);
                     const AdversarialLoss a = adversarial_loss(o, refs, disc);
                     return generator ? a.g_loss : a.d_loss;
                   };
                   std::vector<Tensor> in;
                   if (generator) in.push_back(out);
                   for (const std::string& n : names) in.push_back(store.get(n));
                   return std::pair{f, in};
                 }});
  }
  c.push_back({"total_loss", [](std::mt19937_64& rng) {
                 const LossWeights w{uniform({1}, 0.1, 2, rng)[0], uniform({1}, 0.1, 2, rng)[0], uniform({1}, 0.1, 2, rng)[0],
                                     uniform({1}, 0.1, 2, rng)[0]};
                 GraphFn f = [=](const std::vector<Var>& v) {
                   return total_loss(LossTerms{mean(v[0]), mean(v[1]), mean(v[2]), mean(v[3])}, w);
                 };
                 return std::pair{f, std::vector<Tensor>{uniform({3}, 0, 1, rng), uniform({3}, 0, 1, rng),
                                                         uniform({3}, 0, 1, rng), uniform({3}, 0, 1, rng)}};
               }});
  c.push_back({"dehaze_step(8x8)", [](std::mt19937_64& rng) {
                 NetworkConfig net;
                 net.channels = {4, 6, 8};
                 net.proj_dim = 4;
                 net.fcas.kernel = 3;
                 net.dcaf.pool = 2;
                 ParameterStore store;
                 init_network(store, net, rng());
                 // zero-initialised offsets and decoder would hide most of the graph
                 for (const std::string& n : store.names()) {
                   Tensor& t = store.get(n);
                   if (t.data().isZero()) t = uniform(t.shape(), -0.05, 0.05, rng);
                 }
                 const Tensor prev = uniform({3, 8, 8}, 0.3, 0.7, rng), cur = uniform({3, 8, 8}, 0.3, 0.7, rng);
                 const FlowPair flow{uniform({2, 8, 8}, -1, 1, rng), uniform({2, 8, 8}, -1, 1, rng)};
                 const std::vector<std::string> names = store.names();
                 GraphFn f = [=](const std::vector<Var>& v) {
                   const BoundParameters p(names, v);
                   Tape& tape = *v[0].tape();
                   return dehaze_step(p, net, tape.constant(prev), tape.constant(cur), flow).output;
                 };
                 std::vector<Tensor> in;
                 for (const std::string& n : names) in.push_back(store.get(n));
                 return std::pair{f, in};
               }});
  return c;
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& o, const std::string& only) {
  std::vector<GradcheckRow> rows;
  for (const Case& c : suite()) {
    if (!only.empty() && c.name.find(only) == std::string::npos) continue;
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(o.seed ^ std::hash<std::string>{}(c.name));
    GradcheckRow row{c.name, o.seeds, {}, 0, true};
    for (int s = 0; s < o.seeds; ++s) {
      auto [f, inputs] = c.make(rng);
      const GradcheckStats st = check_gradient(f, inputs, rng, o);
      row.stats.max_rel_error = std::max(row.stats.max_rel_error, st.max_rel_error);
      row.stats.checked += st.checked;
      row.stats.redrawn += st.redrawn;
      if (st.checked < o.entries) row.pass = false;
    }
    row.pass = row.pass && row.stats.max_rel_error < o.tolerance;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  return rows;
}

void write_gradcheck_table(const std::vector<GradcheckRow>& rows, std::ostream& out, bool timings) {
  out << std::left << std::setw(28) << "operator" << std::right << std::setw(7) << "seeds" << std::setw(9) << "checked"
      << std::setw(9) << "redrawn" << std::setw(14) << "max_rel_err";
  if (timings) out << std::setw(9) << "seconds";
  out << "  result\n";
  for (const GradcheckRow& r : rows) {
    out << std::left << std::setw(28) << r.op << std::right << std::setw(7) << r.seeds << std::setw(9) << r.stats.checked
        << std::setw(9) << r.stats.redrawn << std::setw(14) << std::scientific << std::setprecision(3)
        << r.stats.max_rel_error;
    if (timings) out << std::setw(9) << std::fixed << std::setprecision(2) << r.seconds;
    out << "  " << (r.pass ? "PASS" : "FAIL") << '\n';
  }
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

}  // namespace dvd
