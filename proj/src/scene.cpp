#include "dvd/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numbers>

namespace dvd {

namespace {

struct Wave {
  double amp, fx, fy, phase;
};

struct World {
  std::array<std::vector<Wave>, 3> waves;
  double horizon;
  double road_top;
  std::uint64_t seed;
};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double hash_unit(std::uint64_t seed, std::int64_t i, int salt) {
  return static_cast<double>(splitmix(seed ^ splitmix(static_cast<std::uint64_t>(i) * 8 + static_cast<std::uint64_t>(salt))) >> 11) *
         0x1.0p-53;
}

World make_world(std::mt19937_64& rng, Index height) {
  World w;
  std::uniform_real_distribution<double> amp(0.04, 0.12), wl(6.0, 30.0), ang(0.0, std::numbers::pi),
      ph(0.0, 2.0 * std::numbers::pi);
  for (auto& ch : w.waves) {
    for (int i = 0; i < 6; ++i) {
      const double lambda = wl(rng), theta = ang(rng);
      const double f = 2.0 * std::numbers::pi / lambda;
      ch.push_back({amp(rng), f * std::cos(theta), f * std::sin(theta), ph(rng)});
    }
  }
  w.horizon = 0.3 * static_cast<double>(height);
  w.road_top = 0.75 * static_cast<double>(height);
  w.seed = rng();
  return w;
}

double texture(const World& w, int c, double X, double Y) {
  double v = 0;
  for (const Wave& wv : w.waves[static_cast<std::size_t>(c)]) v += wv.amp * std::sin(wv.fx * X + wv.fy * Y + wv.phase);
  return v;
}

double pos_mod(double a, double m) { return a - m * std::floor(a / m); }

double render_world(const World& w, int c, double X, double Y) {
  static constexpr double sky[3] = {0.55, 0.65, 0.80};
  double v;
  if (Y < w.horizon) {
    v = sky[c] + 0.3 * texture(w, c, X, Y);
  } else if (Y < w.road_top) {
    // facades: blocks of 12 px with their own colour, plus dark windows
    const auto block = static_cast<std::int64_t>(std::floor(X / 12.0));
    v = 0.1 + 0.8 * hash_unit(w.seed, block, c) + 0.5 * texture(w, c, X, Y);
    if (pos_mod(X, 6.0) < 2.0 && pos_mod(Y, 8.0) < 3.0) v *= 0.25;
  } else {
    v = 0.3 + 0.15 * texture(w, 0, X, Y);
    const bool marking = pos_mod(X, 16.0) < 7.0 && std::abs(Y - (w.road_top + 6.0)) < 1.5;
    if (marking) v = 0.92;
  }
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace

Tensor road_depth(Index height, Index width, double near, double far) {
  Tensor d({height, width});
  const double horizon = 0.3 * static_cast<double>(height);
  for (Index y = 0; y < height; ++y) {
    const double yy = static_cast<double>(y);
    const double frac = yy <= horizon ? 0.0 : (yy - horizon) / (static_cast<double>(height - 1) - horizon);
    for (Index x = 0; x < width; ++x) d(y, x) = far + (near - far) * std::clamp(frac, 0.0, 1.0);
  }
  return d;
}

std::vector<int> random_monotone_warp(int hazy_frames, int clear_frames, std::mt19937_64& rng) {
  if (hazy_frames < 1 || clear_frames < 1) throw ValidationError("warp needs at least one frame on each side");
  // The first hazy frame starts near the front of the clear clip.
  const int lead = std::max((clear_frames - hazy_frames + 1) / 2, 2);
  const int first = std::uniform_int_distribution<int>(0, std::min(lead, clear_frames - 1))(rng);
  std::vector<int> warp(static_cast<std::size_t>(hazy_frames), first);
  if (hazy_frames == 1) return warp;
  // Constant speed ratio between the two recordings, at most 2 clear frames per hazy frame.
  const int room = clear_frames - 1 - first;
  const int lo = std::min(room, hazy_frames - 1), hi = std::min(room, 2 * (hazy_frames - 1));
  const int span = std::uniform_int_distribution<int>(lo, hi)(rng);
  const double rate = static_cast<double>(span) / static_cast<double>(hazy_frames - 1);
  const double phase = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  for (int t = 1; t < hazy_frames; ++t) {
    const int k = first + static_cast<int>(std::floor(rate * t + phase));
    warp[static_cast<std::size_t>(t)] = std::clamp(k, warp[static_cast<std::size_t>(t - 1)], first + span);
  }
  return warp;
}

namespace {

struct Blob {
  double x, y, r;
  std::array<double, 3> color;
  std::array<double, 3> color2;
  double kx, ky;  // stripe wave vector
};

struct SceneState {
  World world;
  Index height = 0, width = 0;
  Eigen::Vector2d pan;
  std::vector<std::vector<Blob>> blobs;  // per clear frame, screen coordinates

  Tensor render(Index k, const Eigen::Vector2d& extra) const {
    const Eigen::Vector2d offset = pan * static_cast<double>(k) + extra;
    Tensor frame({3, height, width});
    for (int c = 0; c < 3; ++c)
      for (Index y = 0; y < height; ++y)
        for (Index x = 0; x < width; ++x)
          frame(c, y, x) = render_world(world, c, static_cast<double>(x) + offset.x(), static_cast<double>(y) + offset.y());
    for (const Blob& b : blobs[static_cast<std::size_t>(k)])
      for (Index y = 0; y < height; ++y)
        for (Index x = 0; x < width; ++x) {
          const double dx = static_cast<double>(x) + extra.x() - b.x, dy = static_cast<double>(y) + extra.y() - b.y;
          if (dx * dx + dy * dy <= b.r * b.r) {
            const bool stripe = std::sin(b.kx * dx + b.ky * dy) > 0;
            for (int c = 0; c < 3; ++c) frame(c, y, x) = (stripe ? b.color : b.color2)[static_cast<std::size_t>(c)];
          }
        }
    return frame;
  }
};

}  // namespace

GeneratedScene generate_scene(const SceneConfig& cfg) {
  if (cfg.width < 8 || cfg.height < 8) throw ValidationError("scene must be at least 8x8");
  if (cfg.clear_frames < 1 || cfg.hazy_frames < 1) throw ValidationError("scene needs frames");
  std::mt19937_64 rng(cfg.seed);
  auto state = std::make_shared<SceneState>();
  state->world = make_world(rng, cfg.height);
  state->height = cfg.height;
  state->width = cfg.width;
  state->pan = cfg.pan;
  GeneratedScene g;
  SceneSpec& s = g.scene;
  s.beta = cfg.beta;
  s.airlight = Eigen::Vector3d::Constant(cfg.airlight);
  s.clear.label = "clear";
  const Tensor depth = road_depth(cfg.height, cfg.width, cfg.depth_near, cfg.depth_far);
  const double W = static_cast<double>(cfg.width), H = static_cast<double>(cfg.height);
  const double margin = cfg.blob_margin < 0 ? cfg.max_jitter : cfg.blob_margin;
  std::uniform_real_distribution<double> ur(cfg.blob_radius_min, cfg.blob_radius_max);
  std::uniform_real_distribution<double> ucol(0.0, 1.0);
  for (int k = 0; k < cfg.clear_frames; ++k) {
    std::vector<Blob> blobs;
    for (int b = 0; b < cfg.blobs; ++b) {
      const double r = ur(rng);
      const double x0 = std::min(margin + r, 0.5 * W), x1 = std::max(W - 1 - margin - r, x0);
      const double y0 = std::min(std::max(0.3 * H, margin + r), 0.5 * H), y1 = std::max(H - 1 - margin - r, y0);
      const double bx = x0 + (x1 - x0) * ucol(rng), by = y0 + (y1 - y0) * ucol(rng);
      Blob blob{bx, by, r, {ucol(rng), ucol(rng), ucol(rng)}, {ucol(rng), ucol(rng), ucol(rng)}, 0, 0};
      blob.color[static_cast<std::size_t>(b % 3)] = 0.05;  // keep one channel dark
      const double theta = std::numbers::pi * ucol(rng), period = 4.0 + 8.0 * ucol(rng);
      blob.kx = 2 * std::numbers::pi / period * std::cos(theta);
      blob.ky = 2 * std::numbers::pi / period * std::sin(theta);
      blobs.push_back(blob);
    }
    state->blobs.push_back(std::move(blobs));
    s.camera_offsets.push_back(cfg.pan * static_cast<double>(k));
  }
  for (int k = 0; k < cfg.clear_frames; ++k) {
    s.clear.push_back(state->render(k, Eigen::Vector2d::Zero()));
    s.depth.push_back(depth);
  }
  s.render = [state](Index k, const Eigen::Vector2d& extra) { return state->render(k, extra); };
  MisalignmentSpec& m = g.misalignment;
  m.warp = cfg.warp.empty() ? random_monotone_warp(cfg.hazy_frames, cfg.clear_frames, rng) : cfg.warp;
  if (static_cast<int>(m.warp.size()) != cfg.hazy_frames) {
    throw ValidationError("warp length " + std::to_string(m.warp.size()) + " != hazy_frames " +
                          std::to_string(cfg.hazy_frames));
  }
  if (!cfg.jitter.empty()) {
    m.jitter = cfg.jitter;
  } else {
    const int J = static_cast<int>(std::floor(cfg.max_jitter));
    std::uniform_int_distribution<int> uj(-J, J);
    for (int t = 0; t < cfg.hazy_frames; ++t) m.jitter.emplace_back(uj(rng), uj(rng));
  }
  if (cfg.moving_object) {
    for (int t = 0; t < cfg.hazy_frames; ++t) {
      Tensor mask({cfg.height, cfg.width});
      const Index x0 = (4 + 3 * t) % std::max<Index>(1, cfg.width - 10);
      const Index y0 = cfg.height / 2;
      for (Index y = y0; y < std::min(cfg.height, y0 + 8); ++y)
        for (Index x = x0; x < std::min(cfg.width, x0 + 10); ++x) mask(y, x) = 1.0;
      m.object_masks.push_back(std::move(mask));
    }
  }
  return g;
}

SceneConfig scene_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("scene config is not valid JSON: ") + e.what());
  }
  SceneConfig c;
  try {
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.clear_frames = j.value("clear_frames", c.clear_frames);
    c.hazy_frames = j.value("hazy_frames", c.hazy_frames);
    c.beta = j.value("beta", c.beta);
    c.airlight = j.value("airlight", c.airlight);
    c.max_jitter = j.value("max_jitter", c.max_jitter);
    c.blobs = j.value("blobs", c.blobs);
    c.blob_radius_min = j.value("blob_radius_min", c.blob_radius_min);
    c.blob_radius_max = j.value("blob_radius_max", c.blob_radius_max);
    c.blob_margin = j.value("blob_margin", c.blob_margin);
    c.depth_near = j.value("depth_near", c.depth_near);
    c.depth_far = j.value("depth_far", c.depth_far);
    c.moving_object = j.value("moving_object", c.moving_object);
    c.seed = j.value("seed", c.seed);
    if (j.contains("pan")) c.pan = {j["pan"].at(0).get<double>(), j["pan"].at(1).get<double>()};
    if (j.contains("warp")) c.warp = j["warp"].get<std::vector<int>>();
    if (j.contains("jitter")) {
      for (const auto& e : j["jitter"]) c.jitter.emplace_back(e.at(0).get<double>(), e.at(1).get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("scene config field has the wrong type: ") + e.what());
  }
  if (c.beta < 0) throw ValidationError("beta must be >= 0");
  if (c.airlight < 0 || c.airlight > 1) throw ValidationError("airlight must lie in [0,1]");
  if (c.hazy_frames > c.clear_frames + 2) throw ValidationError("hazy_frames must not exceed clear_frames + 2");
  return c;
}

std::string scene_config_to_json(const SceneConfig& c) {
  nlohmann::json j;
  j["width"] = c.width;
  j["height"] = c.height;
  j["clear_frames"] = c.clear_frames;
  j["hazy_frames"] = c.hazy_frames;
  j["beta"] = c.beta;
  j["airlight"] = c.airlight;
  j["max_jitter"] = c.max_jitter;
  j["pan"] = {c.pan.x(), c.pan.y()};
  j["blobs"] = c.blobs;
  j["blob_radius_min"] = c.blob_radius_min;
  j["blob_radius_max"] = c.blob_radius_max;
  j["blob_margin"] = c.blob_margin;
  j["depth_near"] = c.depth_near;
  j["depth_far"] = c.depth_far;
  j["moving_object"] = c.moving_object;
  j["seed"] = c.seed;
  j["warp"] = c.warp;
  nlohmann::json jit = nlohmann::json::array();
  for (const auto& v : c.jitter) jit.push_back({v.x(), v.y()});
  j["jitter"] = jit;
  return j.dump(2);
}

}  // namespace dvd
