#pragma once

#include "dvd/tensor.hpp"

#include <string>
#include <vector>

namespace dvd {

/// Ordered frames of one video; a frame's index is its position.
struct FrameSequence {
  std::vector<Tensor> frames;
  std::string label;

  Index size() const { return static_cast<Index>(frames.size()); }
  bool empty() const { return frames.empty(); }
  const Tensor& operator[](Index i) const { return frames.at(static_cast<std::size_t>(i)); }
  Tensor& operator[](Index i) { return frames.at(static_cast<std::size_t>(i)); }
  void push_back(Tensor t) { frames.push_back(std::move(t)); }
};

/// Inclusive clear-frame index range searched for one hazy frame.
struct Window {
  int start = 0;
  int end = 0;
  int length() const { return end - start + 1; }
  bool contains(int k) const { return k >= start && k <= end; }
  friend bool operator==(const Window&, const Window&) = default;
};

struct MatchRecord {
  int t = 0;
  int k = 0;       // best clear match
  int k2 = 0;      // secondary reference min(k + 1, M − 1)
  double score = 0;
  Window window;
  friend bool operator==(const MatchRecord&, const MatchRecord&) = default;
};

using MatchTable = std::vector<MatchRecord>;

/// Displacement fields between frames t−1 and t, both [2,H,W] with channel
/// 0 = x. `forward` maps a pixel of t−1 to its position in t (sampling frame t
/// at p + forward(p) re-renders it in t−1's geometry); `backward` is the
/// converse.
struct FlowPair {
  Tensor forward;
  Tensor backward;
};

}  // namespace dvd
