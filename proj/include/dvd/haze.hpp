#pragma once

// Atmospheric scattering synthesis, misaligned pair construction and the
// dark-channel-prior frame pre-dehazer.

#include "dvd/types.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <vector>

namespace dvd {

struct SceneSpec {
  FrameSequence clear;            // [3,H,W] in [0,1]
  std::vector<Tensor> depth;      // [H,W] per clear frame, >= 0
  double beta = 1.0;              // scattering per unit depth
  Eigen::Vector3d airlight{0.85, 0.85, 0.85};
  /// Optional content offset of each clear frame (frame k shows world(p + o_k));
  /// enables ground-truth flow for the generated pairs.
  std::vector<Eigen::Vector2d> camera_offsets;
  /// Optional re-rendering of clear frame k viewed with an extra offset; when
  /// set, jittered views show real content instead of replicated borders.
  std::function<Tensor(Index k, const Eigen::Vector2d& offset)> render;
};

/// Throws ValidationError if the scene breaks its invariants.
void validate_scene(const SceneSpec& scene);

struct MisalignmentSpec {
  std::vector<int> warp;                   // hazy t → true clear index k*(t)
  std::vector<Eigen::Vector2d> jitter;     // per hazy frame; sampling offset in px
  std::vector<Tensor> object_masks;        // optional [H,W] binary, per hazy frame
};

MisalignmentSpec identity_misalignment(Index frames);

/// I = J·t + A·(1 − t) with t = exp(−β·d).
Tensor synthesize_haze(const Tensor& clear, const Tensor& depth, double beta, const Eigen::Vector3d& airlight);
Tensor synthesize_haze(const SceneSpec& scene, Index frame_index);

Tensor transmission(const Tensor& depth, double beta);

struct MisalignedPair {
  FrameSequence hazy;
  FrameSequence clear;
  MatchTable truth;
  FrameSequence aligned_clear;   // haze-free rendering of each hazy frame
  std::vector<FlowPair> flows;   // entry t−1 relates hazy frames t−1 and t
};

MisalignedPair make_misaligned_pair(const SceneSpec& scene, const MisalignmentSpec& mis);

/// Translates an image by sampling at p + shift with border clamp.
Tensor shift_image(const Tensor& image, const Eigen::Vector2d& shift);

/// Fills mask pixels of `frame` with a fixed stripe texture.
void paste_object(Tensor& frame, const Tensor& mask);

struct DcpOptions {
  double omega = 0.95;
  Index patch = 15;
  double t_floor = 0.1;
  double top_fraction = 0.001;
};

/// Per-pixel channel minimum followed by a patch×patch minimum filter.
Tensor dark_channel(const Tensor& image, Index patch);
Eigen::Vector3d estimate_airlight(const Tensor& image, const Tensor& dark, double top_fraction);

/// Dark-channel-prior dehazing, clipped to [0,1].
Tensor predehaze_dcp(const Tensor& hazy, const DcpOptions& options = {});

/// Pluggable frame pre-dehazer; the default is DCP.
class FrameDehazer {
 public:
  virtual ~FrameDehazer() = default;
  virtual Tensor operator()(const Tensor& hazy) const = 0;
};

class DcpDehazer final : public FrameDehazer {
 public:
  explicit DcpDehazer(DcpOptions options = {}) : options_(options) {}
  Tensor operator()(const Tensor& hazy) const override { return predehaze_dcp(hazy, options_); }

 private:
  DcpOptions options_;
};

}  // namespace dvd
