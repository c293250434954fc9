#pragma once

// Feature map used for reference matching and the multi-frame reference loss.

#include "dvd/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

namespace dvd {

inline constexpr int kPyramidLevels = 5;

/// Five feature levels; level l has spatial extent ceil(H / 2^(l+1)).
struct FeaturePyramid {
  std::vector<Tensor> levels;
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual FeaturePyramid embed(const Tensor& frame) const = 0;
  virtual Index min_extent() const { return 32; }
};

class DifferentiableEmbedder : public Embedder {
 public:
  using Embedder::embed;
  /// Pyramid recorded on the frame's tape; values bit-identical to embed(Tensor).
  virtual std::vector<Var> embed(const Var& frame) const = 0;
};

/// Five stride-2 3×3 convolutions, each followed by tanh, on frame − 0.5.
/// Weights are fixed; the default set is orthogonal and seeded.
class ConvEmbedder final : public DifferentiableEmbedder {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x44564431;
  static constexpr std::array<Index, kPyramidLevels> kChannels{16, 32, 32, 64, 64};

  explicit ConvEmbedder(std::uint64_t seed = kDefaultSeed);
  /// One weight tensor per stage, shapes [C_out, C_in, 3, 3] with C_in chaining from 3.
  explicit ConvEmbedder(std::vector<Tensor> weights);
  /// Loads stage0.dvdt … stage4.dvdt from `dir`.
  static ConvEmbedder from_directory(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

  std::vector<Var> embed(const Var& frame) const override;
  FeaturePyramid embed(const Tensor& frame) const override;
  const std::vector<Tensor>& weights() const { return weights_; }

 private:
  void check_frame(const Shape& shape) const;
  std::vector<Tensor> weights_;
};

/// Matching embedder. A grey airlight scales the opponent colour vector
/// (R−G, (R+G−2B)/√3) without turning it, so the normalised hue survives haze.
/// Stage 0 blurs the hue vector (3×3 binomial, stride 2) and scores it against
/// `bins` evenly spaced hue directions with exp(κ(cos − 1)); stages 1–4 are a
/// stride-2 binomial blur per channel followed by a square root.
class ChromaEmbedder final : public Embedder {
 public:
  struct Options {
    int bins = 32;
    double kappa = 96.0;
    /// Chroma magnitude below which a pixel counts as grey.
    double grey_eps = 0.005;
  };
  ChromaEmbedder() : ChromaEmbedder(Options{}) {}
  explicit ChromaEmbedder(Options options);
  FeaturePyramid embed(const Tensor& frame) const override;
  const Options& options() const { return options_; }

 private:
  Options options_;
  Tensor hue_weights_;  // [bins, 3, 3, 3]
};

/// Mean over levels of the cosine distance between globally average-pooled
/// level features; lies in [0,2].
double frame_distance(const FeaturePyramid& a, const FeaturePyramid& b);

/// Channel means of each level.
std::vector<Eigen::VectorXd> pooled_features(const FeaturePyramid& p);
double pooled_distance(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b);

/// Rows of a [rows, cols] matrix with orthonormal rows (or columns when rows > cols).
Eigen::MatrixXd orthogonal_matrix(Index rows, Index cols, std::uint64_t seed);

}  // namespace dvd
