#include "dvd/losses.hpp"
#include "dvd/scene.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace dvd;
using dvd::testing::max_abs_diff;
using dvd::testing::random_tensor;

namespace {

/// Direct evaluation of the contextual loss from its definition.
double naive_cx(const Tensor& x, const Tensor& y, double h, double eps) {
  const Index C = x.dim(0), nx = x.dim(1) * x.dim(2), ny = y.dim(1) * y.dim(2);
  auto feat = [C](const Tensor& t, Index i) {
    std::vector<double> f(static_cast<std::size_t>(C));
    const Index P = t.dim(1) * t.dim(2);
    double n = 0;
    for (Index c = 0; c < C; ++c) n += t[c * P + i] * t[c * P + i];
    n = std::max(std::sqrt(n), 1e-8);
    for (Index c = 0; c < C; ++c) f[static_cast<std::size_t>(c)] = t[c * P + i] / n;
    return f;
  };
  std::vector<std::vector<double>> d(static_cast<std::size_t>(nx), std::vector<double>(static_cast<std::size_t>(ny)));
  for (Index i = 0; i < nx; ++i)
    for (Index j = 0; j < ny; ++j) {
      const auto a = feat(x, i), b = feat(y, j);
      double dot = 0;
      for (Index c = 0; c < C; ++c) dot += a[static_cast<std::size_t>(c)] * b[static_cast<std::size_t>(c)];
      d[i][j] = 1.0 - dot;
    }
  std::vector<double> best(static_cast<std::size_t>(ny), 0.0);
  for (Index i = 0; i < nx; ++i) {
    const double dmin = *std::min_element(d[i].begin(), d[i].end());
    std::vector<double> w(static_cast<std::size_t>(ny));
    double total = 0;
    for (Index j = 0; j < ny; ++j) total += w[j] = std::exp((1.0 - d[i][j] / (dmin + eps)) / h);
    for (Index j = 0; j < ny; ++j) best[j] = std::max(best[j], w[j] / total);
  }
  double s = 0;
  for (double b : best) s += b;
  return -std::log(s / static_cast<double>(ny));
}

double cx(const Tensor& x, const Tensor& y, const ContextualOptions& o = {}) {
  Tape tape;
  return contextual_loss(tape.constant(x), tape.constant(y), o).value()[0];
}

/// Applies a spatial permutation to the feature positions of t.
Tensor permute_features(const Tensor& t, std::uint64_t seed) {
  const Index C = t.dim(0), P = t.dim(1) * t.dim(2);
  std::vector<Index> perm(static_cast<std::size_t>(P));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor out(t.shape());
  for (Index c = 0; c < C; ++c)
    for (Index p = 0; p < P; ++p) out[c * P + p] = t[c * P + perm[static_cast<std::size_t>(p)]];
  return out;
}

Tensor flow_const(Index H, Index W, double dx, double dy) {
  Tensor f({2, H, W});
  f.data().head(H * W).setConstant(dx);
  f.data().tail(H * W).setConstant(dy);
  return f;
}

Tensor smooth_flow(Index H, Index W, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
  Tensor f({2, H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      f(0, y, x) = 2.0 * a * std::sin(0.3 * x + b) + c;
      f(1, y, x) = 2.0 * d * std::cos(0.2 * y + a) - b;
    }
  return f;
}

}  // namespace

TEST_CASE("contextual_loss: equals the double-loop oracle on C = 4, 3x3 sets") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor x = random_tensor({4, 3, 3}, 10 + seed), y = random_tensor({4, 3, 3}, 50 + seed);
    for (double h : {0.1, 0.5, 1.0}) {
      ContextualOptions o;
      o.bandwidth = h;
      CHECK(std::abs(cx(x, y, o) - naive_cx(x, y, h, o.eps)) < 1e-10);
    }
  }
  const Tensor x = random_tensor({4, 2, 5}, 3), y = random_tensor({4, 4, 2}, 4);
  CHECK(std::abs(cx(x, y) - naive_cx(x, y, 0.5, 1e-5)) < 1e-10);
}

TEST_CASE("contextual_loss: exact invariance to spatial permutation of y") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_tensor({4, 3, 3}, 100 + seed), y = random_tensor({4, 3, 3}, 200 + seed);
    CHECK(std::abs(cx(x, y) - cx(x, permute_features(y, seed))) <= 1e-12);
    CHECK(std::abs(cx(x, x) - cx(x, permute_features(x, seed))) <= 1e-12);
  }
}

TEST_CASE("contextual_loss: CX(x, x) is minimal over random comparators") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Tensor x = random_tensor({4, 3, 3}, 300 + seed);
    const double self = cx(x, x);
    for (std::uint64_t r = 0; r < 20; ++r) CHECK(self <= cx(x, random_tensor({4, 3, 3}, 1000 * seed + r)));
  }
}

TEST_CASE("contextual_loss: channel mismatch is rejected") {
  CHECK_THROWS_AS(cx(Tensor::ones({4, 3, 3}), Tensor::ones({3, 3, 3})), ValidationError);
}

TEST_CASE("feature_subset: identity below the cap, deterministic and sorted above it") {
  const std::vector<Index> all = feature_subset(10, 16);
  CHECK(all.size() == 10);
  CHECK(all.back() == 9);
  const std::vector<Index> sub = feature_subset(4096, 1024);
  CHECK(sub.size() == 1024);
  CHECK(std::is_sorted(sub.begin(), sub.end()));
  CHECK(sub == feature_subset(4096, 1024));
}

TEST_CASE("mfr_loss: self floor, duplication linearity and noise ordering") {
  SceneConfig c;
  c.width = 32;
  c.height = 32;
  c.clear_frames = 3;
  c.hazy_frames = 3;
  const GeneratedScene g = generate_scene(c);
  const Tensor r1 = g.scene.clear[0], r2 = g.scene.clear[2];
  const ConvEmbedder e;
  Tape tape;
  const Var out = tape.constant(r1);

  double floor = 0;
  const FeaturePyramid p = e.embed(r1);
  for (const Tensor& l : p.levels) floor += cx(l, l);
  CHECK(std::abs(mfr_loss(out, r1, r1, e).value()[0] - 2.0 * floor) < 1e-10);

  const Var other = tape.constant(r2);
  const double single = mfr_loss(other, r1, r1, e).value()[0] / 2.0;
  double direct = 0;
  const FeaturePyramid q = e.embed(r2);
  for (int l = 0; l < kPyramidLevels; ++l) direct += cx(q.levels[l], p.levels[l]);
  CHECK(std::abs(single - direct) < 1e-10);

  const Var noise = tape.constant(random_tensor({3, 32, 32}, 7, 0, 1));
  CHECK(mfr_loss(noise, r1, r2, e).value()[0] > mfr_loss(out, r1, r2, e).value()[0]);

  const double pooled_self = mfr_loss(out, r1, r1, e, MfrDistance::PooledCosine).value()[0];
  CHECK(std::abs(pooled_self) < 1e-12);
  CHECK_THROWS_AS(mfr_loss(out, r1, Tensor::zeros({3, 16, 16}), e), ValidationError);
}

TEST_CASE("align_loss: identical inputs, constant offset and gradient sign") {
  Tape tape;
  const Tensor a = random_tensor({3, 4, 5}, 1);
  Tensor b = a;
  b.data() += 0.5;
  const Var va = tape.leaf(a), vb = tape.leaf(b);
  CHECK(align_loss(va, va).value()[0] == 0.0);
  CHECK(align_loss(vb, va).value()[0] == doctest::Approx(0.5).epsilon(1e-14));
  tape.backward(align_loss(vb, va));
  CHECK((tape.grad(vb).data() - 1.0 / 60.0).abs().maxCoeff() < 1e-15);
  CHECK((tape.grad(va).data() + 1.0 / 60.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("occlusion_mask: consistent, inconsistent and per-pixel oracle") {
  const Tensor fw = flow_const(8, 8, 2.0, -1.0);
  Tensor bw = fw;
  bw.data() *= -1.0;
  const Tensor ones = occlusion_mask(fw, bw);
  CHECK(ones.shape() == Shape{1, 8, 8});
  CHECK((ones.data() == 1.0).all());
  CHECK((occlusion_mask(fw, fw).data() == 0.0).all());
  const Tensor tiny = flow_const(8, 8, 0.2, 0.0);
  CHECK((occlusion_mask(tiny, tiny).data() == 1.0).all());

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor f = smooth_flow(12, 10, seed), g = smooth_flow(12, 10, seed + 50);
    const OcclusionOptions o;
    const Tensor m = occlusion_mask(f, g, o);
    Tape tape;
    for (Index y = 0; y < 12; ++y)
      for (Index x = 0; x < 10; ++x) {
        const double px = x + f(0, y, x), py = y + f(1, y, x);
        Tensor at({2, 1, 1}, {px, py});
        const Tensor s = bilinear_sample(tape.constant(g), tape.constant(at), Padding::Border).value();
        const double sx = f(0, y, x) + s[0], sy = f(1, y, x) + s[1];
        const double lhs = sx * sx + sy * sy;
        const double rhs = o.alpha1 * (f(0, y, x) * f(0, y, x) + f(1, y, x) * f(1, y, x) + s[0] * s[0] + s[1] * s[1]) +
                           o.alpha2;
        CHECK(m(0, y, x) == (lhs < rhs ? 1.0 : 0.0));
      }
  }
}

TEST_CASE("consistency_loss: identical frames, exact shift and masked oracle") {
  Tape tape;
  const Tensor a = random_tensor({3, 6, 7}, 1, 0, 1);
  const Tensor full({1, 6, 7}, 1.0);
  const ConsistencyResult same = consistency_loss(tape.constant(a), tape.constant(a), Tensor({2, 6, 7}), full);
  CHECK(same.loss.value()[0] == 0.0);
  CHECK(!same.empty_mask);

  // out_t(p) = out_prev(p − (1,0)); the last column samples past the border
  Tensor shifted(a.shape());
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < 6; ++y)
      for (Index x = 0; x < 7; ++x) shifted(c, y, x) = a(c, y, std::max<Index>(x - 1, 0));
  Tensor interior = full;
  for (Index y = 0; y < 6; ++y) interior(0, y, 6) = 0.0;
  CHECK(consistency_loss(tape.constant(shifted), tape.constant(a), flow_const(6, 7, 1, 0), interior).loss.value()[0] ==
        0.0);

  const Tensor b = random_tensor({3, 6, 7}, 2, 0, 1);
  Tensor half({1, 6, 7});
  for (Index i = 0; i < 21; ++i) half[2 * i] = 1.0;
  double expect = 0;
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < 42; ++p) expect += half[p] * std::abs(b[c * 42 + p] - a[c * 42 + p]);
  expect /= 21.0 * 3.0;
  CHECK(std::abs(consistency_loss(tape.constant(b), tape.constant(a), Tensor({2, 6, 7}), half).loss.value()[0] - expect) <
        1e-15);

  const ConsistencyResult empty = consistency_loss(tape.constant(b), tape.constant(a), Tensor({2, 6, 7}), Tensor({1, 6, 7}));
  CHECK(empty.empty_mask);
  CHECK(empty.loss.value()[0] == 0.0);
  CHECK_THROWS_AS(consistency_loss(tape.constant(b), tape.constant(a), Tensor({2, 6, 6}), full), ValidationError);
}

TEST_CASE("adversarial_loss: D = 0.5 closed form and confident limit") {
  ParameterStore store;
  init_discriminator(store, {}, 3);
  Tape tape;
  const BoundParameters d(tape, store);
  FrameSequence refs;
  refs.push_back(random_tensor({3, 16, 16}, 1, 0, 1));
  refs.push_back(random_tensor({3, 16, 16}, 2, 0, 1));
  const AdversarialLoss l = adversarial_loss(tape.constant(random_tensor({3, 16, 16}, 3, 0, 1)), refs, d);
  CHECK(l.g_loss.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(l.d_loss.value()[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-14));

  // a bias-only last layer sees the frame mean: bright references, dark output
  ParameterStore sharp;
  init_discriminator(sharp, {}, 3);
  for (const std::string& n : sharp.names()) sharp.get(n).data().setZero();
  for (int i = 0; i < 3; ++i) {
    Tensor& w = sharp.get("disc." + std::to_string(i) + ".w");
    for (Index o = 0; o < w.dim(0); ++o)
      for (Index c = 0; c < w.dim(1); ++c) w[((o * w.dim(1) + c) * 3 + 1) * 3 + 1] = 1.0;
  }
  Tensor& last = sharp.get("disc.3.w");
  for (Index c = 0; c < last.dim(1); ++c) last[(c * 3 + 1) * 3 + 1] = 10.0;
  // an all-ones frame reaches the last layer as 3·16·32 per channel; the bias
  // puts the decision halfway between that logit and the all-zeros one
  const double bright_logit = 10.0 * static_cast<double>(last.dim(1)) * 3.0 * 16.0 * 32.0;
  sharp.get("disc.3.b").data().setConstant(-0.5 * bright_logit);
  Tape t2;
  const BoundParameters d2(t2, sharp);
  FrameSequence bright;
  bright.push_back(Tensor({3, 16, 16}, 1.0));
  const AdversarialLoss lim = adversarial_loss(t2.constant(Tensor({3, 16, 16}, 0.0)), bright, d2);
  CHECK(lim.d_loss.value()[0] < 1e-4);
}

TEST_CASE("total_loss: weighted sum and non-finite terms") {
  CHECK(total_loss(0, 0, 0, 0).total == 0.0);
  CHECK(total_loss(1, 2, 3, 4).total == 10.0);
  LossWeights w;
  w.cr = 0.5;
  CHECK(total_loss(1, 2, 3, 4, w).total == 8.0);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  try {
    total_loss(0, nan, 0, 0);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("mfr") != std::string::npos);
  }
  CHECK_THROWS_AS(total_loss(0, 0, std::numeric_limits<double>::infinity(), 0), NumericalError);

  Tape tape;
  LossTerms terms{tape.leaf(Tensor::scalar(1)), tape.leaf(Tensor::scalar(2)), tape.leaf(Tensor::scalar(3)),
                  tape.leaf(Tensor::scalar(4))};
  LossReport r;
  const Var total = total_loss(terms, LossWeights{}, &r);
  CHECK(total.value()[0] == 10.0);
  CHECK(r.total == 10.0);
  CHECK(r.align == 3.0);
  tape.backward(total);
  CHECK(tape.grad(terms.cr)[0] == 1.0);
}

TEST_CASE("LossReport: JSON line carries every term") {
  const std::string j = total_loss(1, 2, 3, 4).to_json(7);
  for (const char* key : {"\"step\":7", "\"adv\"", "\"mfr\"", "\"align\"", "\"cr\"", "\"total\""})
    CHECK(j.find(key) != std::string::npos);
}
