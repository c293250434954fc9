#include "dvd/haze.hpp"
#include "dvd/metrics.hpp"
#include "dvd/scene.hpp"
#include "test_util.hpp"

#include <doctest.h>

using namespace dvd;
using dvd::testing::random_tensor;

namespace {

const Eigen::Vector3d kGrey{0.85, 0.85, 0.85};

SceneConfig small_scene(double beta) {
  SceneConfig c;
  c.width = 48;
  c.height = 48;
  c.clear_frames = 8;
  c.hazy_frames = 8;
  c.beta = beta;
  return c;
}

}  // namespace

TEST_CASE("synthesize_haze: beta 0 is bit-equal to the clear frame") {
  const Tensor j = random_tensor({3, 16, 16}, 1, 0, 1);
  const Tensor d = random_tensor({16, 16}, 2, 0, 3);
  CHECK(synthesize_haze(j, d, 0.0, kGrey) == j);
}

TEST_CASE("synthesize_haze: closed form and infinite-depth limit") {
  const Tensor j = Tensor::zeros({3, 2, 2});
  const Tensor d({2, 2}, std::log(2.0));
  const Tensor i = synthesize_haze(j, d, 1.0, Eigen::Vector3d::Ones());
  CHECK((i.data() - 0.5).abs().maxCoeff() < 1e-15);

  const Tensor far = synthesize_haze(random_tensor({3, 4, 4}, 3, 0, 1), Tensor({4, 4}, 1e4), 1.0, kGrey);
  CHECK((far.data() - 0.85).abs().maxCoeff() < 1e-12);
}

TEST_CASE("synthesize_haze: pixels stay in the convex hull and move monotonically toward airlight") {
  const Eigen::Vector3d a{0.9, 0.8, 0.7};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor j = random_tensor({3, 12, 12}, 10 + seed, 0, 1);
    const Tensor d = random_tensor({12, 12}, 30 + seed, 0, 4);
    Tensor prev = j;
    for (double beta : {0.1, 0.3, 0.7, 1.0, 2.0, 5.0}) {
      const Tensor i = synthesize_haze(j, d, beta, a);
      for (Index c = 0; c < 3; ++c)
        for (Index p = 0; p < 144; ++p) {
          const double jv = j[c * 144 + p], iv = i[c * 144 + p], pv = prev[c * 144 + p];
          CHECK(iv >= std::min(jv, a[c]) - 1e-15);
          CHECK(iv <= std::max(jv, a[c]) + 1e-15);
          CHECK(std::abs(iv - a[c]) <= std::abs(pv - a[c]) + 1e-15);
        }
      prev = i;
    }
  }
}

TEST_CASE("synthesize_haze: invalid arguments are rejected") {
  const Tensor j = Tensor::zeros({3, 4, 4});
  CHECK_THROWS_AS(synthesize_haze(j, Tensor({4, 4}, 1.0), -0.1, kGrey), ValidationError);
  CHECK_THROWS_AS(synthesize_haze(j, Tensor({4, 4}, -1.0), 1.0, kGrey), ValidationError);
  CHECK_THROWS_AS(synthesize_haze(j, Tensor({5, 4}, 1.0), 1.0, kGrey), ValidationError);
}

TEST_CASE("make_misaligned_pair: identity misalignment at beta 0 gives bit-equal pairs") {
  GeneratedScene g = generate_scene(small_scene(0.0));
  const MisalignedPair p = make_misaligned_pair(g.scene, identity_misalignment(8));
  REQUIRE(p.hazy.size() == 8);
  for (Index t = 0; t < 8; ++t) {
    CHECK(p.hazy[t] == p.clear[t]);
    CHECK(p.truth[static_cast<std::size_t>(t)].k == t);
  }
}

TEST_CASE("make_misaligned_pair: constant warp t + 5 is carried into the truth table") {
  SceneConfig c = small_scene(1.0);
  c.hazy_frames = 6;
  c.clear_frames = 13;
  for (int t = 0; t < 6; ++t) c.warp.push_back(t + 5);
  const GeneratedScene g = generate_scene(c);
  const MisalignedPair p = make_misaligned_pair(g.scene, g.misalignment);
  REQUIRE(p.truth.size() == 6);
  for (int t = 0; t < 6; ++t) {
    CHECK(p.truth[static_cast<std::size_t>(t)].k == t + 5);
    CHECK(p.truth[static_cast<std::size_t>(t)].k2 == std::min(t + 6, 12));
  }
}

TEST_CASE("make_misaligned_pair: malformed warps are rejected") {
  GeneratedScene g = generate_scene(small_scene(1.0));
  MisalignmentSpec m = identity_misalignment(8);
  m.warp[3] = 1;
  CHECK_THROWS_AS(make_misaligned_pair(g.scene, m), ValidationError);
  m = identity_misalignment(8);
  m.warp[7] = 8;
  CHECK_THROWS_AS(make_misaligned_pair(g.scene, m), ValidationError);
  CHECK_THROWS_AS(make_misaligned_pair(g.scene, identity_misalignment(11)), ValidationError);
}

TEST_CASE("scene: generated warps are monotone and jitter is bounded") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const std::vector<int> w = random_monotone_warp(40, 46, rng);
    REQUIRE(w.size() == 40);
    for (std::size_t t = 1; t < w.size(); ++t) CHECK(w[t] >= w[t - 1]);
    CHECK(w.back() < 46);
  }
  SceneConfig c = small_scene(1.0);
  c.max_jitter = 8.0;
  const GeneratedScene g = generate_scene(c);
  for (const auto& j : g.misalignment.jitter) CHECK(j.lpNorm<Eigen::Infinity>() <= 8.0);
}

TEST_CASE("predehaze_dcp: airlight-only frame recovers the airlight") {
  const Tensor i = synthesize_haze(Tensor::zeros({3, 24, 24}), Tensor({24, 24}, 1e4), 1.0, kGrey);
  const Tensor j = predehaze_dcp(i);
  CHECK((j.data() - 0.85).abs().maxCoeff() < 1e-9);
}

TEST_CASE("predehaze_dcp: haze-free frame with a zero channel everywhere is unchanged") {
  Tensor j = random_tensor({3, 24, 24}, 5, 0, 1);
  for (Index p = 0; p < 24 * 24; ++p) j[2 * 24 * 24 + p] = 0.0;
  CHECK(testing::max_abs_diff(predehaze_dcp(j), j) < 1e-12);
}

TEST_CASE("predehaze_dcp: improves PSNR over the hazy input on a synthetic scene") {
  const GeneratedScene g = generate_scene(small_scene(1.0));
  const MisalignedPair p = make_misaligned_pair(g.scene, g.misalignment);
  for (Index t = 0; t < p.hazy.size(); ++t) {
    CHECK(psnr(predehaze_dcp(p.hazy[t]), p.aligned_clear[t]) > psnr(p.hazy[t], p.aligned_clear[t]));
  }
}

TEST_CASE("dark_channel: minimum filter over channels and patch") {
  Tensor img({3, 5, 5}, 0.6);
  img(1, 2, 2) = 0.1;
  const Tensor d = dark_channel(img, 3);
  CHECK(d(1, 1) == 0.1);
  CHECK(d(3, 3) == 0.1);
  CHECK(d(0, 0) == 0.6);
  CHECK(d(4, 4) == 0.6);
}
