#include "dvd/nrfm.hpp"
#include "dvd/scene.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <sstream>

using namespace dvd;

namespace {

MisalignedPair scene_pair(const SceneConfig& c) {
  const GeneratedScene g = generate_scene(c);
  return make_misaligned_pair(g.scene, g.misalignment);
}

SceneConfig config(int N, int M, double beta, std::uint64_t seed) {
  SceneConfig c;
  c.hazy_frames = N;
  c.clear_frames = M;
  c.beta = beta;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("init_window: half the surplus, minimum length, precondition") {
  CHECK(init_window(100, 128) == Window{0, 14});
  CHECK(init_window(40, 40) == Window{0, 2});
  CHECK(init_window(42, 40) == Window{0, 2});
  CHECK(init_window(1, 2) == Window{0, 1});
  CHECK_THROWS_AS(init_window(43, 40), ValidationError);
  CHECK_THROWS_AS(init_window(0, 40), ValidationError);
}

TEST_CASE("advance_window: recurrence, stall and clamps") {
  const int M = 40;
  CHECK(advance_window(Window{10, 14}, 12, 11, M) == Window{11, 13});
  const Window stall = advance_window(Window{10, 14}, 12, 12, M);
  CHECK(stall.start == 10);
  CHECK(stall.length() == 3);
  CHECK(advance_window(Window{M - 2, M - 1}, 20, 15, M) == Window{M - 1, M - 1});
  CHECK(advance_window(Window{10, 14}, 12, 30, M) == Window{10, 12});
  const Window big = advance_window(Window{0, 5}, 30, 0, M);
  CHECK(big == Window{8, 24});
}

TEST_CASE("match_frame: exact copy in the window wins with score 0") {
  const MisalignedPair p = scene_pair(config(8, 8, 0.0, 2));
  const ChromaEmbedder e;
  const FrameMatch m = match_frame(p.clear[4], p.clear, Window{2, 6}, e);
  CHECK(m.k == 4);
  CHECK(std::abs(m.score) < 1e-12);
}

TEST_CASE("match_frame: a length-1 window returns its only index") {
  const MisalignedPair p = scene_pair(config(8, 8, 1.0, 2));
  const ChromaEmbedder e;
  for (int k : {0, 3, 7}) CHECK(match_frame(p.hazy[0], p.clear, Window{k, k}, e).k == k);
}

TEST_CASE("match_frame: window outside the clear range is rejected") {
  const MisalignedPair p = scene_pair(config(4, 4, 1.0, 2));
  CHECK_THROWS_AS(match_frame(p.hazy[0], p.clear, Window{2, 9}, ChromaEmbedder()), ValidationError);
}

TEST_CASE("run_nrfm: identity-aligned pair recovers k = t") {
  SceneConfig c = config(12, 12, 0.0, 4);
  for (int t = 0; t < 12; ++t) c.warp.push_back(t);
  c.max_jitter = 0.0;
  const MisalignedPair p = scene_pair(c);
  const MatchTable table = run_nrfm(p.hazy, p.clear, ChromaEmbedder());
  REQUIRE(table.size() == 12);
  for (int t = 0; t < 12; ++t) {
    CHECK(table[t].t == t);
    CHECK(table[t].k == t);
    CHECK(table[t].k2 == std::min(t + 1, 11));
  }
}

TEST_CASE("run_nrfm: constant offset warp t + 5 is recovered") {
  SceneConfig c = config(10, 20, 1.0, 5);
  for (int t = 0; t < 10; ++t) c.warp.push_back(t + 5);
  const MisalignedPair p = scene_pair(c);
  const MatchTable table = run_nrfm(p.hazy, p.clear, ChromaEmbedder());
  for (int t = 0; t < 10; ++t) CHECK(table[t].k == t + 5);
}

TEST_CASE("run_nrfm: N = 1 matches against the initial window only") {
  const MisalignedPair p = scene_pair(config(1, 9, 1.0, 6));
  const MatchTable table = run_nrfm(p.hazy, p.clear, ChromaEmbedder());
  REQUIRE(table.size() == 1);
  CHECK(table[0].window == init_window(1, 9));
  CHECK(table[0].window.contains(table[0].k));
}

TEST_CASE("run_nrfm: matches lie in their windows and are the window argmin") {
  const MisalignedPair p = scene_pair(config(24, 28, 1.0, 7));
  const ChromaEmbedder e;
  const auto hazy = pooled_embeddings(p.hazy, e);
  const auto clear = pooled_embeddings(p.clear, e);
  const MatchTable table = run_nrfm(hazy, clear);
  for (std::size_t t = 0; t < table.size(); ++t) {
    const MatchRecord& r = table[t];
    CHECK(r.window.contains(r.k));
    for (int k = r.window.start; k <= r.window.end; ++k) CHECK(r.score <= pooled_distance(hazy[t], clear[k]));
    const int truth = p.truth[t].k;
    if (r.window.contains(truth)) CHECK(r.score <= pooled_distance(hazy[t], clear[truth]));
  }
}

TEST_CASE("run_nrfm: equals the global argmin whenever the windows contain it") {
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    const MisalignedPair p = scene_pair(config(20, 23, 0.8, seed));
    const ChromaEmbedder e;
    const auto hazy = pooled_embeddings(p.hazy, e);
    const auto clear = pooled_embeddings(p.clear, e);
    const MatchTable table = run_nrfm(hazy, clear);
    const std::vector<FrameMatch> global = global_matches(hazy, clear);
    for (std::size_t t = 0; t < table.size(); ++t)
      if (table[t].window.contains(global[t].k)) CHECK(table[t].k == global[t].k);
  }
}

TEST_CASE("run_nrfm: deterministic and tensor path equals pooled path") {
  const MisalignedPair p = scene_pair(config(10, 12, 1.0, 8));
  const ChromaEmbedder e;
  const MatchTable a = run_nrfm(p.hazy, p.clear, e);
  CHECK(a == run_nrfm(p.hazy, p.clear, e));
  CHECK(a == run_nrfm(pooled_embeddings(p.hazy, e), pooled_embeddings(p.clear, e)));
}

TEST_CASE("run_nrfm: N > M + 2 is rejected") {
  SceneConfig c = config(6, 6, 1.0, 9);
  const MisalignedPair p = scene_pair(c);
  FrameSequence clear;
  clear.push_back(p.clear[0]);
  clear.push_back(p.clear[1]);
  clear.push_back(p.clear[2]);
  CHECK_THROWS_AS(run_nrfm(p.hazy, clear, ChromaEmbedder()), ValidationError);
}

TEST_CASE("match table: JSON lines round trip") {
  const MisalignedPair p = scene_pair(config(6, 8, 1.0, 9));
  const MatchTable table = run_nrfm(p.hazy, p.clear, ChromaEmbedder());
  std::stringstream ss;
  write_match_table(table, ss);
  const MatchTable back = read_match_table(ss);
  REQUIRE(back.size() == table.size());
  for (std::size_t i = 0; i < table.size(); ++i) {
    CHECK(back[i].t == table[i].t);
    CHECK(back[i].k == table[i].k);
    CHECK(back[i].k2 == table[i].k2);
    CHECK(back[i].window == table[i].window);
    CHECK(back[i].score == table[i].score);
  }
  std::stringstream bad("{\"t\": 0}\n");
  CHECK_THROWS_AS(read_match_table(bad), ValidationError);
}

TEST_CASE("match_accuracy and unpaired shuffling") {
  MatchTable truth;
  for (int t = 0; t < 4; ++t) truth.push_back({t, t, t + 1, 0.0, {0, 5}});
  MatchTable guess = truth;
  guess[1].k = 3;
  const MatchAccuracy acc = match_accuracy(guess, truth);
  CHECK(acc.exact_rate == 0.75);
  CHECK(acc.mean_abs_error == 0.5);

  MatchTable many;
  for (int t = 0; t < 400; ++t) many.push_back({t, t % 40, std::min(t % 40 + 1, 39), 0.0, {0, 39}});
  const MatchTable shuffled = shuffle_references(many, 40, 1);
  CHECK(shuffled == shuffle_references(many, 40, 1));
  const double rate = match_accuracy(shuffled, many).exact_rate;
  CHECK(rate < 0.1);
  for (const MatchRecord& r : shuffled) {
    CHECK(r.k >= 0);
    CHECK(r.k < 40);
    CHECK(r.k2 == std::min(r.k + 1, 39));
  }
}
