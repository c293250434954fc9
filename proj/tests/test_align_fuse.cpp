#include "dvd/align_fuse.hpp"
#include "dvd/train.hpp"
#include "test_util.hpp"

#include <doctest.h>

using namespace dvd;
using dvd::testing::max_abs_diff;
using dvd::testing::random_tensor;

namespace {

AttentionProjections random_projections(Tape& tape, Index C, Index d, std::uint64_t seed) {
  return {tape.leaf(random_tensor({C, d}, seed)), tape.leaf(random_tensor({C, d}, seed + 1)),
          tape.leaf(random_tensor({C, d}, seed + 2))};
}

Tensor constant_flow(Index H, Index W, double dx, double dy) {
  Tensor f({2, H, W});
  for (Index i = 0; i < H * W; ++i) {
    f[i] = dx;
    f[H * W + i] = dy;
  }
  return f;
}

/// Per-query sums over the leading tap axis of a [S,H,W] weight tensor.
Eigen::ArrayXd tap_sums(const Tensor& w) { return w.matrix(w.dim(0)).colwise().sum().transpose().array(); }

NetworkConfig small_network() {
  NetworkConfig c;
  c.channels = {4, 6, 8};
  c.proj_dim = 4;
  c.fcas.kernel = 3;
  c.dcaf.pool = 2;
  return c;
}

}  // namespace

TEST_CASE("window_taps: square and diamond shapes") {
  CHECK(window_taps(1, WindowShape::Square).size() == 1);
  CHECK(window_taps(7, WindowShape::Square).size() == 49);
  CHECK(window_taps(5, WindowShape::Diamond).size() == 13);
  const auto taps = window_taps(3, WindowShape::Square);
  CHECK(taps.front() == std::array<double, 2>{-1.0, -1.0});
  CHECK(taps[4] == std::array<double, 2>{0.0, 0.0});
  CHECK_THROWS_AS(window_taps(4, WindowShape::Square), ValidationError);
}

TEST_CASE("flow_guided_attention: k = 1 with zero flow returns the projected current feature") {
  Tape tape;
  const Var fp = tape.leaf(random_tensor({5, 6, 7}, 1));
  const Var fc = tape.leaf(random_tensor({5, 6, 7}, 2));
  const AttentionProjections proj = random_projections(tape, 5, 3, 10);
  FcasOptions o;
  o.kernel = 1;
  const Tensor out = flow_guided_attention(fp, fc, tape.constant(Tensor({2, 6, 7})), proj, o).value();
  CHECK(out == linear_project(fc, proj.wv).value());
}

TEST_CASE("flow_guided_attention: identical keys give the unweighted mean of sampled values") {
  Tape tape;
  const Var fp = tape.leaf(random_tensor({4, 6, 6}, 3));
  const Var fc = tape.leaf(random_tensor({4, 6, 6}, 4));
  AttentionProjections proj = random_projections(tape, 4, 3, 20);
  proj.wk = tape.leaf(Tensor({4, 3}));
  const Var flow = tape.constant(Tensor({2, 6, 6}));
  Tensor weights;
  const Tensor out = flow_guided_attention(fp, fc, flow, proj, {}, &weights).value();
  CHECK((weights.data() - 1.0 / 49.0).abs().maxCoeff() < 1e-15);
  const Tensor samples = window_sample(linear_project(fc, proj.wv), flow, window_taps(7, WindowShape::Square)).value();
  const Tensor mean(out.shape(), Tensor::Storage(samples.matrix(49).colwise().mean().transpose()));
  CHECK(max_abs_diff(out, mean) < 1e-14);
}

TEST_CASE("flow_guided_attention: weights sum to one and ignore key scaling") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tape tape;
    const Var fp = tape.leaf(random_tensor({6, 8, 8}, 100 + seed));
    const Var fc = tape.leaf(random_tensor({6, 8, 8}, 200 + seed));
    const Var flow = tape.constant(random_tensor({2, 8, 8}, 300 + seed, -2, 2));
    AttentionProjections proj = random_projections(tape, 6, 4, 400 + seed);
    Tensor w1, w2, w3;
    const Tensor base = flow_guided_attention(fp, fc, flow, proj, {}, &w1).value();
    CHECK((w1.data() > 0).all());
    CHECK((tap_sums(w1) - 1.0).abs().maxCoeff() < 1e-10);

    AttentionProjections scaled = proj;
    scaled.wk = scale(proj.wk, 5.0);
    const Tensor out2 = flow_guided_attention(fp, fc, flow, scaled, {}, &w2).value();
    CHECK(max_abs_diff(w1, w2) < 1e-10);
    CHECK(max_abs_diff(base, out2) < 1e-10);

    const Tensor out3 = flow_guided_attention(fp, scale(fc, 3.0), flow, proj, {}, &w3).value();
    CHECK(max_abs_diff(w1, w3) < 1e-10);
    Tensor tripled = base;
    tripled.data() *= 3.0;
    CHECK(max_abs_diff(out3, tripled) < 1e-10);
  }
}

TEST_CASE("flow_guided_attention: query stride 2 halves the output extent") {
  Tape tape;
  const Var f = tape.leaf(random_tensor({4, 8, 10}, 5));
  FcasOptions o;
  o.query_stride = 2;
  Tensor w;
  const Var out = flow_guided_attention(f, f, tape.constant(Tensor({2, 8, 10})), random_projections(tape, 4, 3, 1), o, &w);
  CHECK(out.shape() == Shape{3, 4, 5});
  CHECK(w.shape() == Shape{49, 4, 5});
}

TEST_CASE("flow_guided_attention: mismatched inputs are rejected") {
  Tape tape;
  const Var a = tape.leaf(random_tensor({4, 8, 8}, 1));
  const Var b = tape.leaf(random_tensor({4, 8, 6}, 2));
  const AttentionProjections p = random_projections(tape, 4, 3, 1);
  CHECK_THROWS_AS(flow_guided_attention(a, b, tape.constant(Tensor({2, 8, 8})), p), ValidationError);
  CHECK_THROWS_AS(flow_guided_attention(a, a, tape.constant(Tensor({2, 4, 4})), p), ValidationError);
}

TEST_CASE("fcas_offsets: zero convolution gives zero offsets, coarse offsets pass through") {
  Tape tape;
  const Var fp = tape.leaf(random_tensor({4, 6, 6}, 1));
  const Var fa = tape.leaf(random_tensor({3, 6, 6}, 2));
  const Var flow = tape.constant(random_tensor({2, 6, 6}, 3));
  const OffsetConv zero{tape.leaf(Tensor({18, 9, 3, 3})), tape.leaf(Tensor({18}))};
  const Tensor off = fcas_offsets(fp, fa, flow, zero).value();
  CHECK(off.shape() == Shape{18, 6, 6});
  CHECK((off.data() == 0.0).all());
  const Tensor coarse = random_tensor({18, 6, 6}, 4);
  const OffsetConv zero_c{tape.leaf(Tensor({18, 27, 3, 3})), tape.leaf(Tensor({18}))};
  CHECK(fcas_offsets(fp, fa, flow, zero_c, tape.constant(coarse)).value() == coarse);
}

TEST_CASE("deformable_align: identity degeneracy and integer shift") {
  Tape tape;
  const Tensor f = random_tensor({5, 7, 9}, 6);
  const Var fp = tape.leaf(f);
  const Var zero_off = tape.constant(Tensor({18, 7, 9}));
  const Var id = tape.leaf(identity_kernel(5, 3));
  CHECK(deformable_align(fp, zero_off, tape.constant(Tensor({2, 7, 9})), id).value() == f);

  const Tensor shifted = deformable_align(fp, zero_off, tape.constant(constant_flow(7, 9, 1.0, 0.0)), id).value();
  for (Index c = 0; c < 5; ++c)
    for (Index y = 0; y < 7; ++y)
      for (Index x = 0; x < 9; ++x) CHECK(shifted(c, y, x) == f(c, y, std::min<Index>(x + 1, 8)));
}

TEST_CASE("deformable_align: exact flow on a translated pair beats the unaligned baseline") {
  const Tensor base = random_tensor({4, 20, 20}, 7);
  Tape tape;
  // prev(p) = cur(p + (2, 1)), so cur(p) = prev(p − (2, 1))
  const Var cur = tape.leaf(base);
  Tensor grid = identity_grid(20, 20);
  grid.data() += constant_flow(20, 20, 2, 1).data();
  const Var prev = tape.constant(bilinear_sample(cur, tape.constant(grid)).value());
  const Var aligned = deformable_align(prev, tape.constant(Tensor({18, 20, 20})),
                                       tape.constant(constant_flow(20, 20, -2, -1)), tape.leaf(identity_kernel(4, 3)));
  CHECK(align_loss(aligned, cur).value()[0] < align_loss(prev, cur).value()[0]);
  double interior = 0;
  for (Index c = 0; c < 4; ++c)
    for (Index y = 2; y < 18; ++y)
      for (Index x = 3; x < 17; ++x) interior = std::max(interior, std::abs(aligned.value()(c, y, x) - base(c, y, x)));
  CHECK(interior == 0.0);
}

TEST_CASE("gpcas_pyramid: one level equals fcas_offsets followed by deformable_align") {
  NetworkConfig nc = small_network();
  nc.levels = 1;
  ParameterStore store;
  init_network(store, nc, 3);
  for (const std::string& n : store.names()) store.get(n).data() += random_tensor(store.get(n).shape(), 9, -0.05, 0.05).data();
  Tape tape;
  const BoundParameters p(tape, store);
  const Var fp = tape.leaf(random_tensor({4, 8, 8}, 1));
  const Var fc = tape.leaf(random_tensor({4, 8, 8}, 2));
  FlowPair flow{random_tensor({2, 8, 8}, 3), random_tensor({2, 8, 8}, 4)};
  const GpcasWeights w = gpcas_weights(p, nc);
  GpcasOptions o;
  o.fcas = nc.fcas;
  const GpcasResult r = gpcas_pyramid({fp}, {fc}, flow, w, o);

  const Var attn = flow_guided_attention(fp, fc, tape.constant(flow.forward), w.levels[0].proj, nc.fcas);
  const Var off = fcas_offsets(fp, attn, tape.constant(flow.forward), w.levels[0].offsets);
  const Var aligned = deformable_align(fp, off, tape.constant(flow.backward), w.align);
  CHECK(r.offsets.value() == off.value());
  CHECK(r.aligned.value() == aligned.value());
}

TEST_CASE("gpcas_pyramid: self-alignment at initialisation is the identity") {
  const NetworkConfig nc = small_network();
  ParameterStore store;
  init_network(store, nc, 3);
  Tape tape;
  const BoundParameters p(tape, store);
  const std::vector<Var> f = encode(p, tape.constant(random_tensor({3, 16, 16}, 5, 0, 1)));
  const GpcasResult r = gpcas_pyramid(f, f, zero_flow(16, 16), gpcas_weights(p, nc));
  CHECK(r.aligned.value() == f[0].value());
  CHECK(align_loss(r.aligned, f[0]).value()[0] == 0.0);
  CHECK(r.attention.size() == 3);
  for (const Tensor& w : r.attention) CHECK((tap_sums(w) - 1.0).abs().maxCoeff() < 1e-10);
}

TEST_CASE("dcaf_fuse: shape preserving, weights sum to one, key scaling only moves values") {
  const NetworkConfig nc = small_network();
  ParameterStore store;
  init_network(store, nc, 4);
  for (const std::string& n : store.names())
    if (n.rfind("dcaf.", 0) == 0 && n.find(".off.") == std::string::npos)
      store.get(n).data() += random_tensor(store.get(n).shape(), 17, -0.3, 0.3).data();
  Tape tape;
  const BoundParameters p(tape, store);
  const Var fa = tape.leaf(random_tensor({4, 8, 8}, 1));
  const Var fc = tape.leaf(random_tensor({4, 8, 8}, 2));
  Tensor w1, w2, w3;
  const Var out = dcaf_fuse(fa, fc, dcaf_weights(p), nc.dcaf, &w1);
  CHECK(out.shape() == fc.shape());
  CHECK(out.value().all_finite());
  CHECK((w1.data() > 0).all());
  CHECK((tap_sums(w1) - 1.0).abs().maxCoeff() < 1e-10);
  dcaf_fuse(fc, fc, dcaf_weights(p), nc.dcaf, &w2);
  CHECK((tap_sums(w2) - 1.0).abs().maxCoeff() < 1e-10);
  dcaf_fuse(fa, scale(fc, 2.0), dcaf_weights(p), nc.dcaf, &w3);
  CHECK(max_abs_diff(w1, w3) < 1e-10);
}

TEST_CASE("dcaf_fuse: features smaller than the pool are rejected") {
  const NetworkConfig nc = small_network();
  ParameterStore store;
  init_network(store, nc, 4);
  Tape tape;
  const BoundParameters p(tape, store);
  const Var f = tape.leaf(random_tensor({4, 1, 1}, 1));
  CHECK_THROWS_AS(dcaf_fuse(f, f, dcaf_weights(p), nc.dcaf), ValidationError);
}

TEST_CASE("dehaze_step: untrained network returns J_cur; self-pair is deterministic and finite") {
  for (bool dcaf : {true, false}) {
    NetworkConfig nc;
    nc.use_dcaf = dcaf;
    ParameterStore store;
    init_network(store, nc, 1);
    Tape tape;
    const BoundParameters p(tape, store);
    const Tensor prev = random_tensor({3, 16, 16}, 1, 0, 1), cur = random_tensor({3, 16, 16}, 2, 0, 1);
    FlowPair flow{random_tensor({2, 16, 16}, 3), random_tensor({2, 16, 16}, 4)};
    CHECK(dehaze_step(p, nc, tape.constant(prev), tape.constant(cur), flow).output.value() == cur);
    const Tensor a = dehaze_step(p, nc, tape.constant(cur), tape.constant(cur), zero_flow(16, 16)).output.value();
    const Tensor b = dehaze_step(p, nc, tape.constant(cur), tape.constant(cur), zero_flow(16, 16)).output.value();
    CHECK(a == b);
    CHECK(a.all_finite());
  }
}

TEST_CASE("dehaze_step: mismatched frames or flows are rejected") {
  const NetworkConfig nc;
  ParameterStore store;
  init_network(store, nc, 1);
  Tape tape;
  const BoundParameters p(tape, store);
  const Var a = tape.constant(Tensor({3, 16, 16})), b = tape.constant(Tensor({3, 16, 8}));
  CHECK_THROWS_AS(dehaze_step(p, nc, a, b, zero_flow(16, 16)), ValidationError);
  CHECK_THROWS_AS(dehaze_step(p, nc, a, a, zero_flow(8, 8)), ValidationError);
}

TEST_CASE("network config: JSON round trip and validation") {
  NetworkConfig c;
  c.fcas.kernel = 5;
  c.levels = 2;
  c.use_dcaf = false;
  const NetworkConfig back = network_config_from_json(network_config_to_json(c));
  CHECK(back.fcas.kernel == 5);
  CHECK(back.levels == 2);
  CHECK(!back.use_dcaf);
  CHECK(back.proj_dim == 32);
  CHECK_THROWS_AS(network_config_from_json("{\"kernel\": 4}"), ValidationError);
  CHECK_THROWS_AS(network_config_from_json("{\"levels\": 0}"), ValidationError);
}
