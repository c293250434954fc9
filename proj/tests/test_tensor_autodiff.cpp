#include "dvd/autodiff.hpp"
#include "dvd/gradcheck.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <filesystem>

using namespace dvd;
using dvd::testing::max_abs_diff;
using dvd::testing::random_tensor;

namespace {

Tensor naive_conv(const Tensor& in, const Tensor& w, Index stride, Index pad) {
  const Index C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const Index O = w.dim(0), k = w.dim(2);
  const Index Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor out({O, Ho, Wo});
  for (Index o = 0; o < O; ++o)
    for (Index y = 0; y < Ho; ++y)
      for (Index x = 0; x < Wo; ++x) {
        double acc = 0;
        for (Index c = 0; c < C; ++c)
          for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
              const Index iy = y * stride + ky - pad, ix = x * stride + kx - pad;
              if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
              acc += in(c, iy, ix) * w[((o * C + c) * k + ky) * k + kx];
            }
        out(o, y, x) = acc;
      }
  return out;
}

Tensor eval_conv(const Tensor& in, const Tensor& w, Index stride, Index pad) {
  Tape tape;
  return conv2d(tape.constant(in), tape.constant(w), stride, pad).value();
}

Tensor coords_at(double x, double y) { return Tensor({2, 1, 1}, {x, y}); }

double sample_at(const Tensor& img, double x, double y, Padding padding = Padding::Border) {
  Tape tape;
  return bilinear_sample(tape.constant(img), tape.constant(coords_at(x, y)), padding).value()[0];
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity weight leaves the input unchanged") {
  const Tensor in = random_tensor({3, 5, 6}, 1);
  Tensor w({3, 3, 1, 1});
  for (Index c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  CHECK(eval_conv(in, w, 1, 0) == in);
}

TEST_CASE("conv2d: all-ones 3x3 on all-ones input counts the overlap") {
  const Tensor out = eval_conv(Tensor::ones({1, 4, 4}), Tensor::ones({1, 1, 3, 3}), 1, 1);
  CHECK(out(0, 1, 1) == 9.0);
  CHECK(out(0, 2, 2) == 9.0);
  CHECK(out(0, 0, 0) == 4.0);
  CHECK(out(0, 3, 3) == 4.0);
  CHECK(out(0, 0, 1) == 6.0);
}

TEST_CASE("conv2d: matches the nested-loop oracle") {
  const Tensor w = random_tensor({4, 3, 3, 3}, 11);
  for (std::uint64_t b = 0; b < 2; ++b) {
    const Tensor in = random_tensor({3, 8, 8}, 20 + b);
    for (Index stride : {1, 2}) {
      for (Index pad : {0, 1}) {
        CHECK(max_abs_diff(eval_conv(in, w, stride, pad), naive_conv(in, w, stride, pad)) < 1e-10);
      }
    }
  }
}

TEST_CASE("conv2d: channel mismatch is rejected") {
  CHECK_THROWS_AS(eval_conv(Tensor::ones({2, 4, 4}), Tensor::ones({1, 3, 3, 3}), 1, 1), ValidationError);
}

TEST_CASE("maxpool2d: constant, ramp and window-scan oracle") {
  Tape tape;
  const Tensor c = maxpool2d(tape.constant(Tensor({2, 8, 8}, 0.3)), 2, 2).value();
  CHECK((c.data() == 0.3).all());

  Tensor ramp({1, 4, 4});
  for (Index i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  const Tensor r = maxpool2d(tape.constant(ramp), 4, 4).value();
  REQUIRE(r.size() == 1);
  CHECK(r[0] == 15.0);

  const Tensor in = random_tensor({3, 16, 16}, 5);
  const Tensor out = maxpool2d(tape.constant(in), 4, 4).value();
  REQUIRE(out.shape() == Shape{3, 4, 4});
  for (Index ch = 0; ch < 3; ++ch)
    for (Index y = 0; y < 4; ++y)
      for (Index x = 0; x < 4; ++x) {
        double m = -1e300;
        for (Index dy = 0; dy < 4; ++dy)
          for (Index dx = 0; dx < 4; ++dx) m = std::max(m, in(ch, 4 * y + dy, 4 * x + dx));
        CHECK(out(ch, y, x) == m);
      }
}

TEST_CASE("maxpool2d: gradient routes to a single winner on ties") {
  Tape tape;
  const Var x = tape.leaf(Tensor({1, 2, 2}, 1.0));
  tape.backward(sum(maxpool2d(x, 2, 2)));
  const Tensor g = tape.grad(x);
  CHECK(g.data().sum() == 1.0);
  CHECK(g[0] == 1.0);
}

TEST_CASE("bilinear_sample: integer coordinates are bit-exact") {
  const Tensor img = random_tensor({2, 5, 7}, 3);
  Tape tape;
  const Tensor out = bilinear_sample(tape.constant(img), tape.constant(identity_grid(5, 7))).value();
  CHECK(out == img);
}

TEST_CASE("bilinear_sample: cell centre and border clamp") {
  const Tensor img({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  CHECK(sample_at(img, 0.5, 0.5) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(sample_at(img, -5, -5) == 0.0);
  CHECK(sample_at(img, 9, 9) == 3.0);
  CHECK(sample_at(img, -5, -5, Padding::Zeros) == 0.0);
  CHECK(sample_at(img, 1.0, -1.0, Padding::Reflect) == 3.0);
}

TEST_CASE("softmax: closed forms and shift invariance") {
  Tape tape;
  const Tensor u = softmax(tape.constant(Tensor({4, 1}, 2.0)), 0).value();
  CHECK((u.data() - 0.25).abs().maxCoeff() < 1e-15);

  const Tensor p = softmax(tape.constant(Tensor({2}, {0.0, std::log(3.0)})), 0).value();
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-14));

  const Tensor logits = random_tensor({5, 3, 4}, 8, -30, 30);
  Tensor shifted = logits;
  shifted.data() += 17.25;
  const Tensor a = softmax(tape.constant(logits), 0).value();
  const Tensor b = softmax(tape.constant(shifted), 0).value();
  CHECK(max_abs_diff(a, b) < 1e-14);
}

TEST_CASE("softmax: sums to one along the axis for extreme logits") {
  Tape tape;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor logits = random_tensor({6, 4, 5}, 100 + seed, -700, 700);
    for (Index axis : {0, 1, 2}) {
      const Tensor s = softmax(tape.constant(logits), axis).value();
      const Index n = logits.dim(axis);
      const Index inner = axis == 0 ? 20 : axis == 1 ? 5 : 1;
      const Index outer = logits.size() / (n * inner);
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < inner; ++i) {
          double total = 0;
          for (Index j = 0; j < n; ++j) total += s[(o * n + j) * inner + i];
          CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
  }
}

TEST_CASE("cosine_similarity: equal, orthogonal and scaled vectors") {
  Tape tape;
  const Tensor a = random_tensor({3, 4, 4}, 9);
  Tensor twice = a;
  twice.data() *= 2.0;
  CHECK(cosine_similarity(tape.constant(a), tape.constant(a)).value()[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cosine_similarity(tape.constant(a), tape.constant(twice)).value()[0] == doctest::Approx(1.0).epsilon(1e-14));
  const Tensor e0({2}, {1.0, 0.0}), e1({2}, {0.0, 3.0});
  CHECK(cosine_similarity(tape.constant(e0), tape.constant(e1)).value()[0] == 0.0);
}

TEST_CASE("backward: sum and half sum of squares") {
  Tape tape;
  const Tensor xv = random_tensor({2, 3}, 4);
  const Var x = tape.leaf(xv);
  tape.backward(sum(x));
  CHECK((tape.grad(x).data() == 1.0).all());
  tape.backward(scale(sum(mul(x, x)), 0.5));
  CHECK(max_abs_diff(tape.grad(x), xv) < 1e-15);
}

TEST_CASE("backward: composed conv, sample, softmax graph matches finite differences") {
  const GraphFn f = [](const std::vector<Var>& in) {
    const Var c = conv2d(in[0], in[1], 1, 1);
    const Var s = bilinear_sample(c, in[2]);
    return softmax(s, 0);
  };
  std::mt19937_64 rng(77);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor coords = identity_grid(6, 6);
    coords.data() += random_tensor({2, 6, 6}, 300 + seed, 0.1, 0.4).data();
    const std::vector<Tensor> inputs{random_tensor({2, 6, 6}, 200 + seed), random_tensor({3, 2, 3, 3}, 400 + seed),
                                     coords};
    const GradcheckStats s = check_gradient(f, inputs, rng);
    CHECK(s.max_rel_error < 1e-4);
  }
}

TEST_CASE("backward: rejects non-scalar and foreign losses") {
  Tape tape;
  const Var x = tape.leaf(Tensor::ones({3}));
  CHECK_THROWS_AS(tape.backward(x), ValidationError);
  Tape other;
  const Var y = other.leaf(Tensor::ones({1}));
  CHECK_THROWS_AS(tape.backward(y), ValidationError);
}

TEST_CASE("record: non-finite values raise NumericalError") {
  Tape tape;
  const Var x = tape.leaf(Tensor({1}, -1.0));
  CHECK_THROWS_AS(log(x), NumericalError);
}

TEST_CASE("tensor file round trip is bit-exact") {
  const Tensor t = random_tensor({2, 3, 4}, 12);
  CHECK(decode_tensor(encode_tensor(t)) == t);
  const auto path = std::filesystem::temp_directory_path() / "dvd_test_roundtrip.dvdt";
  save_tensor(t, path);
  CHECK(load_tensor(path) == t);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(decode_tensor("DVDX"), ValidationError);
}

TEST_CASE("tensor: invalid shapes are rejected") {
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ValidationError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), ValidationError);
  CHECK_THROWS_AS(Tensor::ones({4}).reshaped({3}), ValidationError);
}
