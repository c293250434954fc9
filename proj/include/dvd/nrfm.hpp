#pragma once

// Non-aligned reference frame matching: an adaptive sliding window over the
// clear video whose advance follows the most recent matched step.

#include "dvd/embedder.hpp"
#include "dvd/types.hpp"

#include <iosfwd>
#include <random>
#include <string>

namespace dvd {

struct NrfmConfig {
  int window_min = 3;
  int step_max = 8;
};

/// [0, max(⌈(M−N)/2⌉, window_min−1)], clipped to M−1.
Window init_window(int N, int M, const NrfmConfig& config = {});

/// s = clamp(k_prev − k_prev2, 0, step_max); start = clamp(prev.start + s, 0, M−1);
/// end = clamp(start + 2s, start + window_min − 1, M − 1).
Window advance_window(const Window& prev, int k_prev, int k_prev2, int M, const NrfmConfig& config = {});

struct FrameMatch {
  int k = 0;
  double score = 0;
};

/// Argmin of the pooled distance over the window; ties go to the smaller index.
FrameMatch match_frame(const std::vector<Eigen::VectorXd>& hazy, const std::vector<std::vector<Eigen::VectorXd>>& clear,
                       const Window& w);
FrameMatch match_frame(const Tensor& hazy_t, const FrameSequence& clear, const Window& w, const Embedder& embedder);

MatchTable run_nrfm(const FrameSequence& hazy, const FrameSequence& clear, const Embedder& embedder,
                    const NrfmConfig& config = {});
/// Same recurrence on precomputed pooled embeddings.
MatchTable run_nrfm(const std::vector<std::vector<Eigen::VectorXd>>& hazy,
                    const std::vector<std::vector<Eigen::VectorXd>>& clear, const NrfmConfig& config = {});

/// Exhaustive argmin over every clear frame, per hazy frame.
std::vector<FrameMatch> global_matches(const std::vector<std::vector<Eigen::VectorXd>>& hazy,
                                       const std::vector<std::vector<Eigen::VectorXd>>& clear);

std::vector<std::vector<Eigen::VectorXd>> pooled_embeddings(const FrameSequence& frames, const Embedder& embedder);

/// Replaces every match with a uniformly random clear index (unpaired ablation).
MatchTable shuffle_references(const MatchTable& table, int M, std::uint64_t seed);

struct MatchAccuracy {
  double exact_rate = 0;
  double mean_abs_error = 0;
  Index count = 0;
};
MatchAccuracy match_accuracy(const MatchTable& table, const MatchTable& truth);

std::string match_record_to_json(const MatchRecord& r);
void write_match_table(const MatchTable& table, std::ostream& out);
void write_match_table(const MatchTable& table, const std::filesystem::path& path);
MatchTable read_match_table(std::istream& in);
MatchTable read_match_table(const std::filesystem::path& path);

}  // namespace dvd
