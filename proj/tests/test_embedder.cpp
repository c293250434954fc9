#include "dvd/embedder.hpp"
#include "dvd/nrfm.hpp"
#include "dvd/scene.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <filesystem>
#include <memory>

using namespace dvd;
using dvd::testing::random_tensor;

namespace {

MisalignedPair scene_pair(int N, int M, double beta, std::uint64_t seed) {
  SceneConfig c;
  c.hazy_frames = N;
  c.clear_frames = M;
  c.beta = beta;
  c.seed = seed;
  const GeneratedScene g = generate_scene(c);
  return make_misaligned_pair(g.scene, g.misalignment);
}

std::vector<std::unique_ptr<Embedder>> both_embedders() {
  std::vector<std::unique_ptr<Embedder>> v;
  v.push_back(std::make_unique<ConvEmbedder>());
  v.push_back(std::make_unique<ChromaEmbedder>());
  return v;
}

template <typename E>
void check_pyramid_shape(const E& e) {
  const FeaturePyramid p = e.embed(random_tensor({3, 64, 48}, 1, 0, 1));
  REQUIRE(p.levels.size() == static_cast<std::size_t>(kPyramidLevels));
  Index h = 64, w = 48;
  for (const Tensor& l : p.levels) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
    CHECK(l.dim(1) == h);
    CHECK(l.dim(2) == w);
  }
}

}  // namespace

TEST_CASE("embedders: five levels at halving extents") {
  check_pyramid_shape(ConvEmbedder());
  check_pyramid_shape(ChromaEmbedder());
}

TEST_CASE("embedders: identical frames give bit-equal pyramids") {
  const Tensor f = random_tensor({3, 64, 64}, 2, 0, 1);
  for (const auto& e : both_embedders()) {
    const FeaturePyramid a = e->embed(f), b = e->embed(f);
    for (int l = 0; l < kPyramidLevels; ++l) CHECK(a.levels[l] == b.levels[l]);
  }
  CHECK(ConvEmbedder().weights() == ConvEmbedder().weights());
}

TEST_CASE("embedders: all-zero frame gives a finite pyramid") {
  const Tensor zero = Tensor::zeros({3, 32, 32});
  for (const FeaturePyramid& p : {ConvEmbedder().embed(zero), ChromaEmbedder().embed(zero)})
    for (const Tensor& l : p.levels) CHECK(l.all_finite());
}

TEST_CASE("embedders: frames below the minimum extent are rejected") {
  CHECK_THROWS_AS(ConvEmbedder().embed(Tensor::zeros({3, 16, 64})), ValidationError);
  CHECK_THROWS_AS(ChromaEmbedder().embed(Tensor::zeros({3, 64, 8})), ValidationError);
  CHECK_THROWS_AS(ConvEmbedder().embed(Tensor::zeros({1, 64, 64})), ValidationError);
}

TEST_CASE("ConvEmbedder: taped pyramid equals the direct one") {
  const ConvEmbedder e;
  const Tensor f = random_tensor({3, 32, 32}, 4, 0, 1);
  Tape tape;
  const std::vector<Var> taped = e.embed(tape.constant(f));
  const FeaturePyramid direct = e.embed(f);
  for (int l = 0; l < kPyramidLevels; ++l) CHECK(taped[l].value() == direct.levels[l]);
}

TEST_CASE("ConvEmbedder: weights round-trip through a directory") {
  const ConvEmbedder e(99);
  const auto dir = std::filesystem::temp_directory_path() / "dvd_test_embedder";
  e.save(dir);
  CHECK(ConvEmbedder::from_directory(dir).weights() == e.weights());
  std::filesystem::remove_all(dir);
}

TEST_CASE("orthogonal_matrix: orthonormal rows or columns") {
  const Eigen::MatrixXd a = orthogonal_matrix(4, 9, 1);
  CHECK((a * a.transpose() - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-12);
  const Eigen::MatrixXd b = orthogonal_matrix(9, 4, 1);
  CHECK((b.transpose() * b - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("frame_distance: zero on itself, scale invariant, symmetric") {
  const MisalignedPair p = scene_pair(8, 10, 1.0, 3);
  for (const auto& e : both_embedders()) {
    const FeaturePyramid a = e->embed(p.hazy[0]);
    const FeaturePyramid b = e->embed(p.clear[5]);
    FeaturePyramid b2 = b;
    for (Tensor& l : b2.levels) l.data() *= 2.0;
    CHECK(frame_distance(a, a) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::abs(frame_distance(b, b2)) < 1e-12);
    CHECK(std::abs(frame_distance(a, b) - frame_distance(b, a)) < 1e-12);
    CHECK(frame_distance(a, b) >= 0.0);
    CHECK(frame_distance(a, b) <= 2.0);
  }
}

TEST_CASE("frame_distance: imperceptible noise is closer than an unrelated frame") {
  const MisalignedPair p = scene_pair(8, 20, 1.0, 5);
  const Tensor f = p.clear[2];
  Tensor noisy = f;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1e-4);
  for (Index i = 0; i < noisy.size(); ++i) noisy[i] += n(rng);
  for (const auto& e : both_embedders()) {
    const FeaturePyramid base = e->embed(f);
    CHECK(frame_distance(base, e->embed(noisy)) < frame_distance(base, e->embed(p.clear[15])));
  }
}

TEST_CASE("ChromaEmbedder: hazy frame is closer to its counterpart than to a frame 10 indices away") {
  const ChromaEmbedder e;
  const MisalignedPair p = scene_pair(20, 22, 1.0, 8);
  const auto hazy = pooled_embeddings(p.hazy, e);
  const auto clear = pooled_embeddings(p.clear, e);
  for (std::size_t t = 0; t < hazy.size(); ++t) {
    const int k = p.truth[t].k;
    const int far = k + 10 < 22 ? k + 10 : k - 10;
    CHECK(pooled_distance(hazy[t], clear[k]) < pooled_distance(hazy[t], clear[far]));
  }
}

TEST_CASE("ChromaEmbedder: nearest neighbour is the true frame in at least 90% of 60 hazy frames") {
  const ChromaEmbedder e;
  Index hits = 0, total = 0;
  for (double beta : {0.5, 1.0}) {
    const MisalignedPair p = scene_pair(30, 32, beta, 17);
    const auto hazy = pooled_embeddings(p.hazy, e);
    const auto clear = pooled_embeddings(p.clear, e);
    const std::vector<FrameMatch> g = global_matches(hazy, clear);
    for (std::size_t t = 0; t < g.size(); ++t) {
      hits += g[t].k == p.truth[t].k;
      ++total;
    }
  }
  CHECK(total == 60);
  CHECK(static_cast<double>(hits) / total >= 0.9);
}
