#pragma once

// Procedural driving-like scenes: a panning textured world with a road-ramp
// depth map and per-frame traffic blobs that make frames distinguishable.

#include "dvd/haze.hpp"

#include <cstdint>
#include <random>
#include <string>

namespace dvd {

struct SceneConfig {
  Index width = 64;
  Index height = 64;
  int clear_frames = 10;   // M
  int hazy_frames = 8;     // N
  double beta = 1.0;
  double airlight = 0.85;
  std::vector<int> warp;                     // empty → random monotone warp
  std::vector<Eigen::Vector2d> jitter;       // empty → random integer jitter
  double max_jitter = 2.0;
  Eigen::Vector2d pan{2.0, 0.0};             // world offset per clear frame
  int blobs = 6;
  double blob_radius_min = 8.0;
  double blob_radius_max = 14.0;
  /// Blobs stay this far inside the frame; negative means max_jitter.
  double blob_margin = -1.0;
  double depth_near = 0.2;
  double depth_far = 2.0;
  bool moving_object = false;
  std::uint64_t seed = 7;
};

/// Parses the JSON scene document {beta, airlight, warp, jitter, seed, ...}.
SceneConfig scene_config_from_json(const std::string& text);
std::string scene_config_to_json(const SceneConfig& config);

struct GeneratedScene {
  SceneSpec scene;
  MisalignmentSpec misalignment;
};

GeneratedScene generate_scene(const SceneConfig& config);

/// Random non-decreasing map [0,N) → [0,M) with mostly unit steps.
std::vector<int> random_monotone_warp(int hazy_frames, int clear_frames, std::mt19937_64& rng);

/// Road-ramp depth: far above the horizon, linear toward the camera below it.
Tensor road_depth(Index height, Index width, double near, double far);

}  // namespace dvd
