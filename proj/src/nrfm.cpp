#include "dvd/nrfm.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>

namespace dvd {

Window init_window(int N, int M, const NrfmConfig& config) {
  if (N < 1 || M < 1) throw ValidationError("init_window: N and M must be positive");
  if (N > M + 2) {
    throw ValidationError("init_window: N = " + std::to_string(N) + " exceeds M + 2 = " + std::to_string(M + 2));
  }
  if (config.window_min < 1) throw ValidationError("window_min must be >= 1");
  const int diff = M - N;
  const int half = diff > 0 ? (diff + 1) / 2 : 0;
  return Window{0, std::min(std::max(half, config.window_min - 1), M - 1)};
}

Window advance_window(const Window& prev, int k_prev, int k_prev2, int M, const NrfmConfig& config) {
  const int s = std::clamp(k_prev - k_prev2, 0, config.step_max);
  const int start = std::clamp(prev.start + s, 0, M - 1);
  const int lo = start + config.window_min - 1;
  const int end = std::min(std::max(start + 2 * s, lo), M - 1);
  return Window{start, end};
}

FrameMatch match_frame(const std::vector<Eigen::VectorXd>& hazy, const std::vector<std::vector<Eigen::VectorXd>>& clear,
                       const Window& w) {
  if (w.length() < 1) throw ValidationError("match_frame: empty window");
  if (w.start < 0 || w.end >= static_cast<int>(clear.size())) {
    throw ValidationError("match_frame: window [" + std::to_string(w.start) + "," + std::to_string(w.end) +
                          "] outside the clear sequence");
  }
  FrameMatch best{w.start, pooled_distance(hazy, clear[static_cast<std::size_t>(w.start)])};
  for (int i = w.start + 1; i <= w.end; ++i) {
    const double d = pooled_distance(hazy, clear[static_cast<std::size_t>(i)]);
    if (d < best.score) best = {i, d};
  }
  return best;
}

FrameMatch match_frame(const Tensor& hazy_t, const FrameSequence& clear, const Window& w, const Embedder& embedder) {
  if (w.length() < 1) throw ValidationError("match_frame: empty window");
  if (w.start < 0 || w.end >= clear.size()) throw ValidationError("match_frame: window outside the clear sequence");
  std::vector<std::vector<Eigen::VectorXd>> pooled(static_cast<std::size_t>(w.end + 1));
  for (int i = w.start; i <= w.end; ++i) pooled[static_cast<std::size_t>(i)] = pooled_features(embedder.embed(clear[i]));
  return match_frame(pooled_features(embedder.embed(hazy_t)), pooled, w);
}

std::vector<std::vector<Eigen::VectorXd>> pooled_embeddings(const FrameSequence& frames, const Embedder& embedder) {
  std::vector<std::vector<Eigen::VectorXd>> out;
  out.reserve(frames.frames.size());
  for (const Tensor& f : frames.frames) out.push_back(pooled_features(embedder.embed(f)));
  return out;
}

MatchTable run_nrfm(const std::vector<std::vector<Eigen::VectorXd>>& hazy,
                    const std::vector<std::vector<Eigen::VectorXd>>& clear, const NrfmConfig& config) {
  const int N = static_cast<int>(hazy.size()), M = static_cast<int>(clear.size());
  Window w = init_window(N, M, config);
  MatchTable table;
  for (int t = 0; t < N; ++t) {
    if (t >= 1) {
      const int k_prev = table.back().k;
      // t = 1 has no earlier match; the bootstrap step is max(1, k⁰ − i_s⁰)
      const int k_prev2 = t >= 2 ? table[static_cast<std::size_t>(t - 2)].k : std::min(w.start, k_prev - 1);
      w = advance_window(w, k_prev, k_prev2, M, config);
    }
    FrameMatch m;
    try {
      m = match_frame(hazy[static_cast<std::size_t>(t)], clear, w);
    } catch (const ValidationError& e) {
      throw ValidationError("nrfm step t=" + std::to_string(t) + ": " + e.what());
    }
    table.push_back(MatchRecord{t, m.k, std::min(m.k + 1, M - 1), m.score, w});
  }
  return table;
}

MatchTable run_nrfm(const FrameSequence& hazy, const FrameSequence& clear, const Embedder& embedder,
                    const NrfmConfig& config) {
  if (hazy.empty() || clear.empty()) throw ValidationError("run_nrfm: empty sequence");
  // reject before paying for any embedding
  init_window(static_cast<int>(hazy.size()), static_cast<int>(clear.size()), config);
  return run_nrfm(pooled_embeddings(hazy, embedder), pooled_embeddings(clear, embedder), config);
}

std::vector<FrameMatch> global_matches(const std::vector<std::vector<Eigen::VectorXd>>& hazy,
                                       const std::vector<std::vector<Eigen::VectorXd>>& clear) {
  std::vector<FrameMatch> out;
  const Window all{0, static_cast<int>(clear.size()) - 1};
  for (const auto& h : hazy) out.push_back(match_frame(h, clear, all));
  return out;
}

MatchTable shuffle_references(const MatchTable& table, int M, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, M - 1);
  MatchTable out = table;
  for (MatchRecord& r : out) {
    r.k = pick(rng);
    r.k2 = std::min(r.k + 1, M - 1);
  }
  return out;
}

MatchAccuracy match_accuracy(const MatchTable& table, const MatchTable& truth) {
  if (table.size() != truth.size()) {
    throw ValidationError("match_accuracy: " + std::to_string(table.size()) + " matches vs " +
                          std::to_string(truth.size()) + " truth records");
  }
  MatchAccuracy acc;
  acc.count = static_cast<Index>(table.size());
  if (table.empty()) return acc;
  Index exact = 0;
  double err = 0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    exact += table[i].k == truth[i].k;
    err += std::abs(table[i].k - truth[i].k);
  }
  acc.exact_rate = static_cast<double>(exact) / static_cast<double>(table.size());
  acc.mean_abs_error = err / static_cast<double>(table.size());
  return acc;
}

std::string match_record_to_json(const MatchRecord& r) {
  nlohmann::json j;
  j["t"] = r.t;
  j["k"] = r.k;
  j["k2"] = r.k2;
  j["score"] = r.score;
  j["win"] = {r.window.start, r.window.end};
  return j.dump();
}

void write_match_table(const MatchTable& table, std::ostream& out) {
  for (const MatchRecord& r : table) out << match_record_to_json(r) << '\n';
}

void write_match_table(const MatchTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  write_match_table(table, out);
}

MatchTable read_match_table(std::istream& in) {
  MatchTable table;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      MatchRecord r;
      r.t = j.at("t").get<int>();
      r.k = j.at("k").get<int>();
      r.k2 = j.at("k2").get<int>();
      r.score = j.value("score", 0.0);
      if (j.contains("win")) r.window = Window{j["win"].at(0).get<int>(), j["win"].at(1).get<int>()};
      table.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("match table line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return table;
}

MatchTable read_match_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open match table " + path.string());
  return read_match_table(in);
}

}  // namespace dvd
