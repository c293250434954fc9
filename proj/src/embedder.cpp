#include "dvd/embedder.hpp"

#include <Eigen/QR>

#include <cmath>
#include <numbers>
#include <random>

namespace dvd {

Eigen::MatrixXd orthogonal_matrix(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const Index big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd g(big, small);
  for (Index j = 0; j < small; ++j)
    for (Index i = 0; i < big; ++i) g(i, j) = n01(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  // fix the sign ambiguity of QR so the draw is uniform and reproducible
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (Index j = 0; j < small; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return rows >= cols ? q : Eigen::MatrixXd(q.transpose());
}

ConvEmbedder::ConvEmbedder(std::uint64_t seed) {
  Index cin = 3;
  for (int s = 0; s < kPyramidLevels; ++s) {
    const Index cout = kChannels[static_cast<std::size_t>(s)];
    const Index fan_in = cin * 9;
    const Eigen::MatrixXd q = orthogonal_matrix(cout, fan_in, seed + static_cast<std::uint64_t>(s));
    Tensor w({cout, cin, 3, 3});
    // unit-gain rows keep tanh away from saturation on [−0.5, 0.5] inputs
    w.matrix(cout) = q * std::sqrt(static_cast<double>(std::max<Index>(1, fan_in / cout)));
    weights_.push_back(std::move(w));
    cin = cout;
  }
}

ConvEmbedder::ConvEmbedder(std::vector<Tensor> weights) : weights_(std::move(weights)) {
  if (weights_.size() != kPyramidLevels) {
    throw ValidationError("embedder needs " + std::to_string(kPyramidLevels) + " stage weights, got " +
                          std::to_string(weights_.size()));
  }
  Index cin = 3;
  for (std::size_t s = 0; s < weights_.size(); ++s) {
    const Tensor& w = weights_[s];
    if (w.rank() != 4 || w.dim(1) != cin || w.dim(2) != 3 || w.dim(3) != 3) {
      throw ValidationError("embedder stage " + std::to_string(s) + " weight must be [C_out," + std::to_string(cin) +
                            ",3,3], got " + shape_string(w.shape()));
    }
    cin = w.dim(0);
  }
}

ConvEmbedder ConvEmbedder::from_directory(const std::filesystem::path& dir) {
  std::vector<Tensor> w;
  for (int s = 0; s < kPyramidLevels; ++s) w.push_back(load_tensor(dir / ("stage" + std::to_string(s) + ".dvdt")));
  return ConvEmbedder(std::move(w));
}

void ConvEmbedder::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (std::size_t s = 0; s < weights_.size(); ++s) save_tensor(weights_[s], dir / ("stage" + std::to_string(s) + ".dvdt"));
}

void ConvEmbedder::check_frame(const Shape& shape) const {
  if (shape.size() != 3 || shape[0] != 3) throw ValidationError("embed expects a [3,H,W] frame, got " + shape_string(shape));
  if (shape[1] < min_extent() || shape[2] < min_extent()) {
    throw ValidationError("embed needs H, W >= " + std::to_string(min_extent()) + ", got " + shape_string(shape));
  }
}

std::vector<Var> ConvEmbedder::embed(const Var& frame) const {
  check_frame(frame.shape());
  Tape& tape = *frame.tape();
  std::vector<Var> levels;
  Var x = add_scalar(frame, -0.5);
  for (const Tensor& w : weights_) {
    x = tanh(conv2d(x, tape.constant(w), 2, 1));
    levels.push_back(x);
  }
  return levels;
}

FeaturePyramid ConvEmbedder::embed(const Tensor& frame) const {
  check_frame(frame.shape());
  FeaturePyramid p;
  Tensor x(frame.shape(), (frame.data() + (-0.5)).eval());
  for (const Tensor& w : weights_) {
    Tensor y = kernels::conv2d(x, w, 2, 1);
    x = Tensor(y.shape(), y.data().tanh().eval());
    p.levels.push_back(x);
  }
  return p;
}

namespace {

constexpr double kBinomial[3] = {0.25, 0.5, 0.25};

/// Per-channel 3×3 binomial blur with stride 2 and zero padding.
Tensor blur_down(const Tensor& x) {
  const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const Index h = (H + 1) / 2, w = (W + 1) / 2;
  Tensor out({C, h, w});
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx) {
        double acc = 0;
        for (int dy = 0; dy < 3; ++dy) {
          const Index sy = 2 * y + dy - 1;
          if (sy < 0 || sy >= H) continue;
          for (int dx = 0; dx < 3; ++dx) {
            const Index sx = 2 * xx + dx - 1;
            if (sx >= 0 && sx < W) acc += kBinomial[dy] * kBinomial[dx] * x(c, sy, sx);
          }
        }
        out(c, y, xx) = acc;
      }
  return out;
}

}  // namespace

ChromaEmbedder::ChromaEmbedder(Options options) : options_(options) {
  if (options_.bins < 2 || options_.kappa <= 0 || options_.grey_eps <= 0) {
    throw ValidationError("chroma embedder needs bins >= 2, kappa > 0, grey_eps > 0");
  }
  hue_weights_ = Tensor({options_.bins, 3, 3, 3});
  for (int k = 0; k < options_.bins; ++k) {
    const double a = 2.0 * std::numbers::pi * k / options_.bins;
    for (int dy = 0; dy < 3; ++dy)
      for (int dx = 0; dx < 3; ++dx) {
        hue_weights_[((k * 3 + 0) * 3 + dy) * 3 + dx] = kBinomial[dy] * kBinomial[dx] * std::cos(a);
        hue_weights_[((k * 3 + 1) * 3 + dy) * 3 + dx] = kBinomial[dy] * kBinomial[dx] * std::sin(a);
      }
  }
}

FeaturePyramid ChromaEmbedder::embed(const Tensor& frame) const {
  if (frame.rank() != 3 || frame.dim(0) != 3) throw ValidationError("embed expects a [3,H,W] frame, got " + shape_string(frame.shape()));
  const Index H = frame.dim(1), W = frame.dim(2);
  if (H < min_extent() || W < min_extent()) {
    throw ValidationError("embed needs H, W >= " + std::to_string(min_extent()) + ", got " + shape_string(frame.shape()));
  }
  const double e2 = options_.grey_eps * options_.grey_eps;
  Tensor hue({3, H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const double r = frame(0, y, x), g = frame(1, y, x), b = frame(2, y, x);
      const double o1 = r - g, o2 = (r + g - 2 * b) / std::numbers::sqrt3;
      const double n = std::sqrt(o1 * o1 + o2 * o2 + e2);
      hue(0, y, x) = o1 / n;
      hue(1, y, x) = o2 / n;
    }
  FeaturePyramid p;
  Tensor level = kernels::conv2d(hue, hue_weights_, 2, 1);
  level.data() = (options_.kappa * (level.data() - 1.0)).exp();
  p.levels.push_back(level);
  for (int s = 1; s < kPyramidLevels; ++s) {
    level = blur_down(level);
    level.data() = level.data().sqrt();
    p.levels.push_back(level);
  }
  return p;
}

std::vector<Eigen::VectorXd> pooled_features(const FeaturePyramid& p) {
  std::vector<Eigen::VectorXd> out;
  for (const Tensor& l : p.levels) {
    require_rank3(l, "pooled_features");
    out.emplace_back(l.matrix(l.dim(0)).rowwise().mean());
  }
  return out;
}

double pooled_distance(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
  if (a.size() != b.size() || a.empty()) throw ValidationError("frame_distance: pyramids have different level counts");
  double total = 0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].size() != b[l].size()) {
      throw ValidationError("frame_distance: level " + std::to_string(l) + " channel counts differ");
    }
    total += kernels::cosine_distance<double>({a[l].data(), static_cast<std::size_t>(a[l].size())},
                                              {b[l].data(), static_cast<std::size_t>(b[l].size())});
  }
  return total / static_cast<double>(a.size());
}

double frame_distance(const FeaturePyramid& a, const FeaturePyramid& b) {
  if (a.levels.size() != b.levels.size()) throw ValidationError("frame_distance: pyramids have different level counts");
  for (std::size_t l = 0; l < a.levels.size(); ++l) {
    if (a.levels[l].shape() != b.levels[l].shape()) {
      throw ValidationError("frame_distance: level " + std::to_string(l) + " geometry " +
                            shape_string(a.levels[l].shape()) + " vs " + shape_string(b.levels[l].shape()));
    }
  }
  return pooled_distance(pooled_features(a), pooled_features(b));
}

}  // namespace dvd
