#include "dvd/metrics.hpp"

#include <json.hpp>

#include <cmath>

namespace dvd {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

/// Separable Gaussian filter over the valid region only.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& m, const Eigen::VectorXd& g) {
  const Index k = g.size();
  const Index H = m.rows() - k + 1, W = m.cols() - k + 1;
  Eigen::MatrixXd rows(m.rows(), W);
  for (Index x = 0; x < W; ++x) rows.col(x) = m.middleCols(x, k) * g;
  Eigen::MatrixXd out(H, W);
  for (Index y = 0; y < H; ++y) out.row(y) = g.transpose() * rows.middleRows(y, k);
  return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  require_same(a, b, "psnr");
  const double mse = (a.data() - b.data()).square().mean();
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
  require_same(a, b, "ssim");
  require_rank3(a, "ssim");
  constexpr Index k = 11;
  constexpr double sigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const Index C = a.dim(0), H = a.dim(1), W = a.dim(2);
  if (H < k || W < k) throw ValidationError("ssim needs frames of at least 11x11");
  Eigen::VectorXd g(k);
  for (Index i = 0; i < k; ++i) {
    const double d = static_cast<double>(i - k / 2);
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
  }
  g /= g.sum();
  double total = 0;
  for (Index c = 0; c < C; ++c) {
    Eigen::MatrixXd x(H, W), y(H, W);
    for (Index i = 0; i < H; ++i)
      for (Index j = 0; j < W; ++j) {
        x(i, j) = a(c, i, j);
        y(i, j) = b(c, i, j);
      }
    const Eigen::ArrayXXd mx = filter_valid(x, g).array(), my = filter_valid(y, g).array();
    const Eigen::ArrayXXd sxx = filter_valid(x.cwiseProduct(x), g).array() - mx.square();
    const Eigen::ArrayXXd syy = filter_valid(y.cwiseProduct(y), g).array() - my.square();
    const Eigen::ArrayXXd sxy = filter_valid(x.cwiseProduct(y), g).array() - mx * my;
    const Eigen::ArrayXXd map =
        ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx.square() + my.square() + C1) * (sxx + syy + C2));
    total += map.mean();
  }
  return total / static_cast<double>(C);
}

EvalReport evaluate(const FrameSequence& outputs, const FrameSequence& clear) {
  if (outputs.size() != clear.size()) {
    throw ValidationError("eval: " + std::to_string(outputs.size()) + " output frames vs " +
                          std::to_string(clear.size()) + " clear frames");
  }
  if (outputs.empty()) throw ValidationError("eval: no frames");
  EvalReport r;
  for (Index i = 0; i < outputs.size(); ++i) {
    r.psnr.push_back(psnr(outputs[i], clear[i]));
    r.ssim.push_back(ssim(outputs[i], clear[i]));
    r.mean_psnr += r.psnr.back();
    r.mean_ssim += r.ssim.back();
  }
  r.mean_psnr /= static_cast<double>(outputs.size());
  r.mean_ssim /= static_cast<double>(outputs.size());
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["mean_psnr"] = mean_psnr;
  j["mean_ssim"] = mean_ssim;
  j["psnr"] = psnr;
  j["ssim"] = ssim;
  if (has_match_accuracy) {
    j["match_exact_rate"] = match_exact_rate;
    j["match_mean_abs_error"] = match_mean_abs_error;
  }
  return j.dump();
}

}  // namespace dvd
