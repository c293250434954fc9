#include "dvd/align_fuse.hpp"

#include "dvd/flow.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <random>

namespace dvd {

WindowShape window_shape_from_string(const std::string& name) {
  if (name == "square") return WindowShape::Square;
  if (name == "diamond") return WindowShape::Diamond;
  throw ValidationError("unknown window shape '" + name + "' (expected square|diamond)");
}

std::string to_string(WindowShape shape) { return shape == WindowShape::Square ? "square" : "diamond"; }

std::vector<std::array<double, 2>> window_taps(int k, WindowShape shape) {
  if (k < 1 || k % 2 == 0) throw ValidationError("window size must be odd and >= 1, got " + std::to_string(k));
  const int r = k / 2;
  std::vector<std::array<double, 2>> taps;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      if (shape == WindowShape::Diamond && std::abs(dx) + std::abs(dy) > r) continue;
      taps.push_back({static_cast<double>(dx), static_cast<double>(dy)});
    }
  return taps;
}

namespace {

void require_same_extent(const Var& a, const Var& b, const char* what) {
  if (a.value().rank() != 3 || b.value().rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ValidationError(std::string(what) + ": spatial extents differ " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

void require_flow(const Var& flow, const Var& like, const char* what) {
  if (flow.value().rank() != 3 || flow.dim(0) != 2 || flow.dim(1) != like.dim(1) || flow.dim(2) != like.dim(2)) {
    throw ValidationError(std::string(what) + ": flow must be [2," + std::to_string(like.dim(1)) + "," +
                          std::to_string(like.dim(2)) + "], got " + shape_string(flow.shape()));
  }
}

Var conv_bias(const Var& x, const Var& w, const Var& b, Index stride, Index pad) {
  return bias_add(conv2d(x, w, stride, pad), b);
}

}  // namespace

Var flow_guided_attention(const Var& f_prev, const Var& f_cur, const Var& flow, const AttentionProjections& proj,
                          const FcasOptions& o, Tensor* weights) {
  if (f_prev.shape() != f_cur.shape()) {
    throw ValidationError("flow_guided_attention: F_prev " + shape_string(f_prev.shape()) + " vs F_cur " +
                          shape_string(f_cur.shape()));
  }
  require_flow(flow, f_prev, "flow_guided_attention");
  if (o.query_stride < 1) throw ValidationError("flow_guided_attention: query stride must be >= 1");
  const auto taps = window_taps(o.kernel, o.shape);
  Var q = linear_project(f_prev, proj.wq);
  Var k = linear_project(f_cur, proj.wk);
  Var v = linear_project(f_cur, proj.wv);
  Var qflow = flow;
  if (o.query_stride > 1) {
    q = subsample(q, o.query_stride);
    qflow = subsample(flow, o.query_stride);
  }
  Var keys = window_sample(k, qflow, taps, o.query_stride);
  Var values = window_sample(v, qflow, taps, o.query_stride);
  return cosine_attention(q, keys, values, o.eps, weights);
}

Var fcas_offsets(const Var& f_prev, const Var& f_attn, const Var& flow, const OffsetConv& conv, const Var& coarse) {
  require_flow(flow, f_prev, "fcas_offsets");
  if (f_attn.value().rank() != 3) throw ValidationError("fcas_offsets: F_attn must be [d,H,W]");
  const Index H = f_prev.dim(1), W = f_prev.dim(2);
  std::vector<Var> parts{f_prev, resize_bilinear(f_attn, H, W), flow};
  if (coarse.valid()) {
    require_same_extent(coarse, f_prev, "fcas_offsets coarse offsets");
    parts.push_back(coarse);
  }
  Var off = conv_bias(concat(parts), conv.w, conv.b, 1, 1);
  return coarse.valid() ? add(off, coarse) : off;
}

Var deformable_align(const Var& f_prev, const Var& offsets, const Var& flow, const Var& weight) {
  if (flow.valid()) require_flow(flow, f_prev, "deformable_align");
  return deform_conv2d(f_prev, offsets, flow, weight, Padding::Border);
}

GpcasResult gpcas_pyramid(const std::vector<Var>& prev, const std::vector<Var>& cur, const FlowPair& flow,
                          const GpcasWeights& weights, const GpcasOptions& options) {
  const std::size_t L = weights.levels.size();
  if (L == 0 || prev.size() < L || cur.size() < L) {
    throw ValidationError("gpcas_pyramid: need " + std::to_string(L) + " levels, got " + std::to_string(prev.size()) +
                          " previous and " + std::to_string(cur.size()) + " current");
  }
  Tape& tape = *prev[0].tape();
  GpcasResult result;
  Var coarse;
  for (std::size_t i = L; i-- > 0;) {
    const Var& fp = prev[i];
    const Var& fc = cur[i];
    if (fp.shape() != fc.shape()) {
      throw ValidationError("gpcas_pyramid: level " + std::to_string(i) + " shapes differ " + shape_string(fp.shape()) +
                            " vs " + shape_string(fc.shape()));
    }
    const Index H = fp.dim(1), W = fp.dim(2);
    Var fw = tape.constant(resize_flow(flow.forward, H, W));
    Var attn;
    if (options.use_fcas) {
      Tensor wts;
      attn = flow_guided_attention(fp, fc, fw, weights.levels[i].proj, options.fcas, &wts);
      result.attention.insert(result.attention.begin(), std::move(wts));
    } else {
      attn = fc;
    }
    Var up;
    if (coarse.valid()) up = scale(resize_bilinear(coarse, H, W), 2.0);
    coarse = fcas_offsets(fp, attn, fw, weights.levels[i].offsets, up);
  }
  result.offsets = coarse;
  Var bw = tape.constant(resize_flow(flow.backward, prev[0].dim(1), prev[0].dim(2)));
  result.aligned = deformable_align(prev[0], coarse, bw, weights.align);
  return result;
}

Var dcaf_fuse(const Var& f_align, const Var& f_cur, const DcafWeights& w, const DcafOptions& o, Tensor* attention) {
  if (f_align.shape() != f_cur.shape()) {
    throw ValidationError("dcaf_fuse: F_align " + shape_string(f_align.shape()) + " vs F_cur " +
                          shape_string(f_cur.shape()));
  }
  require_rank3(f_cur.value(), "dcaf_fuse");
  const Index H = f_cur.dim(1), W = f_cur.dim(2);
  if (H < o.pool || W < o.pool) {
    throw ValidationError("dcaf_fuse: features " + shape_string(f_cur.shape()) + " smaller than the pooling size");
  }
  Tape& tape = *f_cur.tape();
  Var q = maxpool2d(conv2d(f_align, w.q, 1, 0), o.pool, o.pool);
  Var pk = maxpool2d(conv2d(f_cur, w.k, 1, 0), o.pool, o.pool);
  Var pv = maxpool2d(conv2d(f_cur, w.v, 1, 0), o.pool, o.pool);
  Var off = conv_bias(pk, w.offsets.w, w.offsets.b, 1, 1);
  Var keys_map = deform_conv2d(pk, off, Var{}, w.dk);
  Var values_map = deform_conv2d(pv, off, Var{}, w.dv);
  const auto taps = window_taps(o.window, o.shape);
  Var zero = tape.constant(Tensor({2, q.dim(1), q.dim(2)}));
  Var keys = window_sample(keys_map, zero, taps);
  Var values = window_sample(values_map, zero, taps);
  Var fused = cosine_attention(q, keys, values, o.eps, attention);
  Var up = resize_bilinear(fused, H, W);
  return add(f_cur, conv_bias(concat({f_cur, up}), w.fuse_w, w.fuse_b, 1, 0));
}

// ---- network -------------------------------------------------------------------

std::string network_config_to_json(const NetworkConfig& c) {
  nlohmann::ordered_json j;
  j["channels"] = c.channels;
  j["levels"] = c.levels;
  j["proj_dim"] = c.proj_dim;
  j["kernel"] = c.fcas.kernel;
  j["window_shape"] = to_string(c.fcas.shape);
  j["query_stride"] = c.fcas.query_stride;
  j["dcaf_pool"] = c.dcaf.pool;
  j["dcaf_window"] = c.dcaf.window;
  j["deform_kernel"] = c.deform_kernel;
  j["use_fcas"] = c.use_fcas;
  j["use_dcaf"] = c.use_dcaf;
  return j.dump();
}

NetworkConfig network_config_from_json(const std::string& text) {
  NetworkConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.contains("channels")) c.channels = j["channels"].get<std::array<Index, 3>>();
    c.levels = j.value("levels", c.levels);
    c.proj_dim = j.value("proj_dim", c.proj_dim);
    c.fcas.kernel = j.value("kernel", c.fcas.kernel);
    if (j.contains("window_shape")) c.fcas.shape = window_shape_from_string(j["window_shape"].get<std::string>());
    c.fcas.query_stride = j.value("query_stride", c.fcas.query_stride);
    c.dcaf.pool = j.value("dcaf_pool", c.dcaf.pool);
    c.dcaf.window = j.value("dcaf_window", c.dcaf.window);
    c.deform_kernel = j.value("deform_kernel", c.deform_kernel);
    c.use_fcas = j.value("use_fcas", c.use_fcas);
    c.use_dcaf = j.value("use_dcaf", c.use_dcaf);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("network config: ") + e.what());
  }
  if (c.levels < 1 || c.levels > 3) throw ValidationError("network config: levels must be 1..3");
  if (c.fcas.kernel < 1 || c.fcas.kernel % 2 == 0) throw ValidationError("network config: kernel must be odd");
  if (c.deform_kernel < 1 || c.deform_kernel % 2 == 0) throw ValidationError("network config: deform_kernel must be odd");
  return c;
}

Tensor identity_kernel(Index channels, Index k) {
  Tensor w({channels, channels, k, k});
  for (Index c = 0; c < channels; ++c) w[((c * channels + c) * k + k / 2) * k + k / 2] = 1.0;
  return w;
}

void init_network(ParameterStore& s, const NetworkConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double relu_gain = std::sqrt(2.0 / (1.0 + 0.1 * 0.1));
  Index cin = 3;
  for (int i = 0; i < 3; ++i) {
    const Index co = c.channels[static_cast<std::size_t>(i)];
    s.add("enc." + std::to_string(i) + ".w", init_uniform({co, cin, 3, 3}, relu_gain, rng));
    s.add("enc." + std::to_string(i) + ".b", Tensor({co}));
    cin = co;
  }
  const Index kd = c.deform_kernel, noff = 2 * kd * kd;
  for (int l = 0; l < c.levels; ++l) {
    const Index C = c.channels[static_cast<std::size_t>(l)];
    const std::string pre = "gpcas." + std::to_string(l) + ".";
    s.add(pre + "wq", init_uniform({C, c.proj_dim}, 1.0, rng));
    s.add(pre + "wk", init_uniform({C, c.proj_dim}, 1.0, rng));
    s.add(pre + "wv", init_uniform({C, c.proj_dim}, 1.0, rng));
    const Index in = C + (c.use_fcas ? c.proj_dim : C) + 2 + (l + 1 < c.levels ? noff : 0);
    s.add(pre + "off.w", Tensor({noff, in, 3, 3}));
    s.add(pre + "off.b", Tensor({noff}));
  }
  const Index C0 = c.channels[0];
  s.add("align.w", identity_kernel(C0, kd));
  s.add("dcaf.q", identity_kernel(C0, 1));
  s.add("dcaf.k", identity_kernel(C0, 1));
  s.add("dcaf.v", identity_kernel(C0, 1));
  s.add("dcaf.off.w", Tensor({18, C0, 3, 3}));
  s.add("dcaf.off.b", Tensor({18}));
  s.add("dcaf.dk", identity_kernel(C0, 3));
  s.add("dcaf.dv", identity_kernel(C0, 3));
  s.add("dcaf.fuse.w", init_uniform({C0, 2 * C0, 1, 1}, 0.1, rng));
  s.add("dcaf.fuse.b", Tensor({C0}));
  s.add("dec.0.w", init_uniform({C0, C0, 3, 3}, relu_gain, rng));
  s.add("dec.0.b", Tensor({C0}));
  s.add("dec.1.w", Tensor({3, C0, 3, 3}));
  s.add("dec.1.b", Tensor({3}));
}

std::vector<Var> encode(const BoundParameters& p, const Var& frame) {
  std::vector<Var> levels;
  Var x = frame;
  for (int i = 0; i < 3; ++i) {
    const std::string pre = "enc." + std::to_string(i) + ".";
    x = leaky_relu(conv_bias(x, p[pre + "w"], p[pre + "b"], i == 0 ? 1 : 2, 1));
    levels.push_back(x);
  }
  return levels;
}

GpcasWeights gpcas_weights(const BoundParameters& p, const NetworkConfig& c) {
  GpcasWeights g;
  for (int l = 0; l < c.levels; ++l) {
    const std::string pre = "gpcas." + std::to_string(l) + ".";
    g.levels.push_back({{p[pre + "wq"], p[pre + "wk"], p[pre + "wv"]}, {p[pre + "off.w"], p[pre + "off.b"]}});
  }
  g.align = p["align.w"];
  return g;
}

DcafWeights dcaf_weights(const BoundParameters& p) {
  return {p["dcaf.q"],  p["dcaf.k"],  p["dcaf.v"],      {p["dcaf.off.w"], p["dcaf.off.b"]},
          p["dcaf.dk"], p["dcaf.dv"], p["dcaf.fuse.w"], p["dcaf.fuse.b"]};
}

StepOutput dehaze_step(const BoundParameters& p, const NetworkConfig& c, const Var& j_prev, const Var& j_cur,
                       const FlowPair& flow) {
  if (j_prev.shape() != j_cur.shape() || j_cur.value().rank() != 3 || j_cur.dim(0) != 3) {
    throw ValidationError("dehaze_step: frames must both be [3,H,W], got " + shape_string(j_prev.shape()) + " and " +
                          shape_string(j_cur.shape()));
  }
  const Shape fshape{2, j_cur.dim(1), j_cur.dim(2)};
  if (flow.forward.shape() != fshape || flow.backward.shape() != fshape) {
    throw ValidationError("dehaze_step: flow must be " + shape_string(fshape) + " in both directions");
  }
  const std::vector<Var> fp = encode(p, j_prev), fc = encode(p, j_cur);
  GpcasOptions go;
  go.fcas = c.fcas;
  go.use_fcas = c.use_fcas;
  const GpcasResult g = gpcas_pyramid(fp, fc, flow, gpcas_weights(p, c), go);
  Var fusion;
  if (c.use_dcaf) {
    fusion = dcaf_fuse(g.aligned, fc[0], dcaf_weights(p), c.dcaf);
  } else {
    fusion = add(fc[0], conv_bias(concat({fc[0], g.aligned}), p["dcaf.fuse.w"], p["dcaf.fuse.b"], 1, 0));
  }
  Var h = leaky_relu(conv_bias(fusion, p["dec.0.w"], p["dec.0.b"], 1, 1));
  Var residual = conv_bias(h, p["dec.1.w"], p["dec.1.b"], 1, 1);
  return {clamp(add(j_cur, residual), 0.0, 1.0), g.aligned, fc[0], g.offsets};
}

}  // namespace dvd
