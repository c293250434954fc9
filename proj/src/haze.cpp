#include "dvd/haze.hpp"

#include "dvd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dvd {

void validate_scene(const SceneSpec& scene) {
  if (scene.clear.empty()) throw ValidationError("scene has no clear frames");
  if (!(scene.beta >= 0.0)) throw ValidationError("scene beta must be >= 0, got " + std::to_string(scene.beta));
  for (int c = 0; c < 3; ++c) {
    if (!(scene.airlight[c] >= 0.0 && scene.airlight[c] <= 1.0)) throw ValidationError("airlight must lie in [0,1]");
  }
  if (static_cast<Index>(scene.depth.size()) != scene.clear.size()) {
    throw ValidationError("scene needs one depth map per clear frame");
  }
  const Shape& s0 = scene.clear[0].shape();
  if (s0.size() != 3 || s0[0] != 3) throw ValidationError("clear frames must be [3,H,W], got " + shape_string(s0));
  for (Index k = 0; k < scene.clear.size(); ++k) {
    if (scene.clear[k].shape() != s0) throw ValidationError("clear frame " + std::to_string(k) + " has a different shape");
    const Tensor& d = scene.depth[static_cast<std::size_t>(k)];
    if (d.shape() != Shape{s0[1], s0[2]}) {
      throw ValidationError("depth map " + std::to_string(k) + " must be [H,W], got " + shape_string(d.shape()));
    }
    if ((d.data() < 0).any()) throw ValidationError("depth must be >= 0 (frame " + std::to_string(k) + ")");
  }
  if (!scene.camera_offsets.empty() && static_cast<Index>(scene.camera_offsets.size()) != scene.clear.size()) {
    throw ValidationError("camera_offsets must be empty or one per clear frame");
  }
}

MisalignmentSpec identity_misalignment(Index frames) {
  MisalignmentSpec m;
  m.warp.resize(static_cast<std::size_t>(frames));
  std::iota(m.warp.begin(), m.warp.end(), 0);
  m.jitter.assign(static_cast<std::size_t>(frames), Eigen::Vector2d::Zero());
  return m;
}

Tensor transmission(const Tensor& depth, double beta) {
  return Tensor(depth.shape(), (-beta * depth.data()).exp().eval());
}

Tensor synthesize_haze(const Tensor& clear, const Tensor& depth, double beta, const Eigen::Vector3d& airlight) {
  require_rank3(clear, "synthesize_haze clear frame");
  if (beta < 0) throw ValidationError("synthesize_haze: beta must be >= 0");
  if ((depth.data() < 0).any()) throw ValidationError("synthesize_haze: depth must be >= 0");
  const Index P = clear.dim(1) * clear.dim(2);
  if (depth.size() != P) throw ValidationError("synthesize_haze: depth extent does not match frame");
  const Tensor t = transmission(depth, beta);
  Tensor out(clear.shape());
  for (Index c = 0; c < clear.dim(0); ++c) {
    const double a = airlight[c];
    out.data().segment(c * P, P) = clear.data().segment(c * P, P) * t.data() + a * (1.0 - t.data());
  }
  out.data() = out.data().max(0.0).min(1.0);
  return out;
}

Tensor synthesize_haze(const SceneSpec& scene, Index frame_index) {
  validate_scene(scene);
  if (frame_index < 0 || frame_index >= scene.clear.size()) {
    throw ValidationError("synthesize_haze: frame " + std::to_string(frame_index) + " out of range");
  }
  return synthesize_haze(scene.clear[frame_index], scene.depth[static_cast<std::size_t>(frame_index)], scene.beta,
                         scene.airlight);
}

Tensor shift_image(const Tensor& image, const Eigen::Vector2d& shift) {
  if (shift.isZero()) return image;
  const bool rank2 = image.rank() == 2;
  const Tensor img3 = rank2 ? image.reshaped({1, image.dim(0), image.dim(1)}) : image;
  const Index H = img3.dim(1), W = img3.dim(2);
  Tensor coords({2, H, W});
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      coords(0, y, x) = static_cast<double>(x) + shift.x();
      coords(1, y, x) = static_cast<double>(y) + shift.y();
    }
  }
  Tensor out = kernels::bilinear_sample(img3, coords, Padding::Border);
  return rank2 ? out.reshaped(image.shape()) : out;
}

void paste_object(Tensor& frame, const Tensor& mask) {
  const Index H = frame.dim(1), W = frame.dim(2);
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      if (mask(y, x) < 0.5) continue;
      const bool stripe = ((x + y) / 3) % 2 == 0;
      frame(0, y, x) = stripe ? 0.9 : 0.15;
      frame(1, y, x) = stripe ? 0.2 : 0.1;
      frame(2, y, x) = stripe ? 0.1 : 0.6;
    }
  }
}

MisalignedPair make_misaligned_pair(const SceneSpec& scene, const MisalignmentSpec& mis) {
  validate_scene(scene);
  const Index M = scene.clear.size();
  const Index N = static_cast<Index>(mis.warp.size());
  if (N < 1) throw ValidationError("misalignment warp is empty");
  if (N > M + 2) {
    throw ValidationError("N = " + std::to_string(N) + " hazy frames exceeds M + 2 = " + std::to_string(M + 2));
  }
  for (Index t = 0; t < N; ++t) {
    const int k = mis.warp[static_cast<std::size_t>(t)];
    if (k < 0 || k >= M) throw ValidationError("warp value " + std::to_string(k) + " at t=" + std::to_string(t) + " outside [0, M-1]");
    if (t > 0 && k < mis.warp[static_cast<std::size_t>(t - 1)]) {
      throw ValidationError("warp is not monotone at t=" + std::to_string(t));
    }
  }
  if (!mis.jitter.empty() && static_cast<Index>(mis.jitter.size()) != N) {
    throw ValidationError("jitter must be empty or one entry per hazy frame");
  }
  if (!mis.object_masks.empty() && static_cast<Index>(mis.object_masks.size()) != N) {
    throw ValidationError("object_masks must be empty or one entry per hazy frame");
  }

  MisalignedPair pair;
  pair.clear = scene.clear;
  pair.hazy.label = "hazy";
  pair.aligned_clear.label = "aligned_clear";
  for (Index t = 0; t < N; ++t) {
    const int k = mis.warp[static_cast<std::size_t>(t)];
    const Eigen::Vector2d j = mis.jitter.empty() ? Eigen::Vector2d::Zero() : mis.jitter[static_cast<std::size_t>(t)];
    Tensor clean = scene.render && !j.isZero() ? scene.render(k, j) : shift_image(scene.clear[k], j);
    const Tensor depth = shift_image(scene.depth[static_cast<std::size_t>(k)], j);
    if (!mis.object_masks.empty() && !mis.object_masks[static_cast<std::size_t>(t)].empty()) {
      paste_object(clean, mis.object_masks[static_cast<std::size_t>(t)]);
    }
    pair.hazy.push_back(synthesize_haze(clean, depth, scene.beta, scene.airlight));
    pair.aligned_clear.push_back(std::move(clean));
    MatchRecord r;
    r.t = static_cast<int>(t);
    r.k = k;
    r.k2 = static_cast<int>(std::min<Index>(k + 1, M - 1));
    r.window = Window{k, k};
    pair.truth.push_back(r);
  }
  if (!scene.camera_offsets.empty()) {
    const Index H = scene.clear[0].dim(1), W = scene.clear[0].dim(2);
    auto content = [&](Index t) {
      const auto ts = static_cast<std::size_t>(t);
      const Eigen::Vector2d j = mis.jitter.empty() ? Eigen::Vector2d::Zero() : mis.jitter[ts];
      return Eigen::Vector2d(scene.camera_offsets[static_cast<std::size_t>(mis.warp[ts])] + j);
    };
    for (Index t = 1; t < N; ++t) {
      // hazy_t(p) = hazy_{t−1}(p + delta)
      const Eigen::Vector2d delta = content(t) - content(t - 1);
      FlowPair fp{Tensor({2, H, W}), Tensor({2, H, W})};
      const Index P = H * W;
      fp.backward.data().head(P).setConstant(delta.x());
      fp.backward.data().tail(P).setConstant(delta.y());
      fp.forward.data() = -fp.backward.data();
      pair.flows.push_back(std::move(fp));
    }
  }
  return pair;
}

Tensor dark_channel(const Tensor& image, Index patch) {
  require_rank3(image, "dark_channel");
  const Index C = image.dim(0), H = image.dim(1), W = image.dim(2), r = patch / 2;
  Tensor minc({H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double m = image(0, y, x);
      for (Index c = 1; c < C; ++c) m = std::min(m, image(c, y, x));
      minc(y, x) = m;
    }
  // separable min filter, window clipped at the border
  Tensor rows({H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double m = minc(y, x);
      for (Index dx = std::max<Index>(0, x - r); dx <= std::min(W - 1, x + r); ++dx) m = std::min(m, minc(y, dx));
      rows(y, x) = m;
    }
  Tensor out({H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double m = rows(y, x);
      for (Index dy = std::max<Index>(0, y - r); dy <= std::min(H - 1, y + r); ++dy) m = std::min(m, rows(dy, x));
      out(y, x) = m;
    }
  return out;
}

Eigen::Vector3d estimate_airlight(const Tensor& image, const Tensor& dark, double top_fraction) {
  const Index P = dark.size();
  const Index count = std::max<Index>(1, static_cast<Index>(std::floor(top_fraction * static_cast<double>(P))));
  std::vector<Index> order(static_cast<std::size_t>(P));
  std::iota(order.begin(), order.end(), Index{0});
  // brightest dark-channel pixels; ties broken by index for determinism
  std::partial_sort(order.begin(), order.begin() + count, order.end(), [&](Index a, Index b) {
    return dark[a] > dark[b] || (dark[a] == dark[b] && a < b);
  });
  Eigen::Vector3d a = Eigen::Vector3d::Zero();
  for (Index i = 0; i < count; ++i)
    for (int c = 0; c < 3; ++c) a[c] += image[c * P + order[static_cast<std::size_t>(i)]];
  return a / static_cast<double>(count);
}

Tensor predehaze_dcp(const Tensor& hazy, const DcpOptions& options) {
  require_rank3(hazy, "predehaze_dcp");
  if (hazy.dim(0) != 3) throw ValidationError("predehaze_dcp expects a 3-channel frame");
  const Index P = hazy.dim(1) * hazy.dim(2);
  const Tensor dark = dark_channel(hazy, options.patch);
  Eigen::Vector3d A = estimate_airlight(hazy, dark, options.top_fraction);
  A = A.cwiseMax(1e-6);
  Tensor normalized(hazy.shape());
  for (int c = 0; c < 3; ++c) normalized.data().segment(c * P, P) = hazy.data().segment(c * P, P) / A[c];
  const Tensor dn = dark_channel(normalized, options.patch);
  const Eigen::ArrayXd t = (1.0 - options.omega * dn.data()).max(options.t_floor);
  Tensor out(hazy.shape());
  for (int c = 0; c < 3; ++c) {
    out.data().segment(c * P, P) = (hazy.data().segment(c * P, P) - A[c]) / t + A[c];
  }
  out.data() = out.data().max(0.0).min(1.0);
  return out;
}

}  // namespace dvd
