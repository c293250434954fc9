#pragma once

#include "dvd/types.hpp"

#include <string>
#include <vector>

namespace dvd {

inline constexpr double kPsnrCap = 99.0;

/// 10·log10(1 / MSE) on [0,1] frames, capped at 99 dB.
double psnr(const Tensor& a, const Tensor& b);
/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), C1 = 0.01², C2 = 0.03²,
/// averaged over channels and window positions fully inside the frame.
double ssim(const Tensor& a, const Tensor& b);

struct EvalReport {
  std::vector<double> psnr;
  std::vector<double> ssim;
  double mean_psnr = 0;
  double mean_ssim = 0;
  bool has_match_accuracy = false;
  double match_exact_rate = 0;
  double match_mean_abs_error = 0;
  std::string to_json() const;
};

EvalReport evaluate(const FrameSequence& outputs, const FrameSequence& clear);

}  // namespace dvd
