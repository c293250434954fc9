#pragma once

// Two-frame dehazing network: encoder, flow-guided cosine attention sampler
// (FCAS) in a coarse-to-fine pyramid (GPCAS), deformable alignment, deformable
// cosine attention fusion (DCAF) and a residual RGB decoder.

#include "dvd/autodiff.hpp"
#include "dvd/parameters.hpp"
#include "dvd/types.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace dvd {

enum class WindowShape { Square, Diamond };
WindowShape window_shape_from_string(const std::string& name);
std::string to_string(WindowShape shape);

/// Offsets (dx, dy) of the sampling window: ‖e‖∞ ≤ (k−1)/2 for Square,
/// ‖e‖₁ ≤ (k−1)/2 for Diamond. Row-major order, centre included.
std::vector<std::array<double, 2>> window_taps(int k, WindowShape shape);

/// W^q, W^k, W^v, each [C, d].
struct AttentionProjections {
  Var wq, wk, wv;
};

struct FcasOptions {
  int kernel = 7;
  WindowShape shape = WindowShape::Square;
  /// 2 evaluates queries on every other pixel.
  Index query_stride = 1;
  double eps = 1e-8;
};

/// Queries W^qᵀF_prev at p; keys and values W^kᵀF_cur, W^vᵀF_cur sampled
/// bilinearly at p + flow(p) + e for every window tap e; softmax over taps of
/// cos(q, k)/√d. Returns [d, H/stride, W/stride]. `weights` receives [S,Hq,Wq].
Var flow_guided_attention(const Var& f_prev, const Var& f_cur, const Var& flow, const AttentionProjections& proj,
                          const FcasOptions& options = {}, Tensor* weights = nullptr);

/// 3×3 convolution with bias producing 2·k_d² offset channels.
struct OffsetConv {
  Var w, b;
};

/// conv3x3(Cat(F_prev, F_attn, flow[, coarse])) (+ coarse when given).
/// F_attn is resized to F_prev's extent first.
Var fcas_offsets(const Var& f_prev, const Var& f_attn, const Var& flow, const OffsetConv& conv, const Var& coarse = {});

/// Deformable convolution of F_prev: tap e at p reads p + e + flow(p) + offset_e(p).
Var deformable_align(const Var& f_prev, const Var& offsets, const Var& flow, const Var& weight);

struct GpcasLevel {
  AttentionProjections proj;
  OffsetConv offsets;
};

struct GpcasWeights {
  std::vector<GpcasLevel> levels;  // finest first
  Var align;                       // [C0, C0, k_d, k_d]
};

struct GpcasOptions {
  FcasOptions fcas;
  /// Without FCAS the offset conv sees Cat(F_prev, F_cur, flow) (plain pyramid
  /// deformable alignment).
  bool use_fcas = true;
};

struct GpcasResult {
  Var aligned;                     // F_align at level 0
  Var offsets;                     // level-0 offsets
  std::vector<Tensor> attention;   // per level, [S,Hq,Wq]
};

/// Coarse-to-fine alignment of F_prev to F_cur. `flow` is given at level-0
/// resolution and resampled per level with displacements scaled; FCAS uses
/// flow.forward, the deformable sampling uses flow.backward. Coarse offsets
/// are upsampled ×2, doubled, fed to the next level's offset conv and added
/// to its output.
GpcasResult gpcas_pyramid(const std::vector<Var>& prev, const std::vector<Var>& cur, const FlowPair& flow,
                          const GpcasWeights& weights, const GpcasOptions& options = {});

struct DcafWeights {
  Var q, k, v;        // 1×1 convolutions [C, C, 1, 1]
  OffsetConv offsets; // on the pooled key features, shared by K̃ and Ṽ
  Var dk, dv;         // deformable 3×3 kernels [C, C, 3, 3]
  Var fuse_w, fuse_b; // 1×1 [C, 2C, 1, 1] and [C]
};

struct DcafOptions {
  Index pool = 4;
  int window = 3;
  WindowShape shape = WindowShape::Square;
  double eps = 1e-8;
};

/// Q̃ = maxpool(conv1×1(F_align)); K̃, Ṽ = DConv(maxpool(conv1×1(F_cur)));
/// window cosine attention at the pooled scale, bilinear upsampling to H×W and
/// F_fusion = F_cur + conv1×1(Cat(F_cur, up)) + b. `weights` receives [S,h,w].
Var dcaf_fuse(const Var& f_align, const Var& f_cur, const DcafWeights& weights, const DcafOptions& options = {},
              Tensor* attention = nullptr);

struct NetworkConfig {
  std::array<Index, 3> channels{16, 32, 64};
  int levels = 3;
  Index proj_dim = 32;
  FcasOptions fcas;
  DcafOptions dcaf;
  int deform_kernel = 3;
  bool use_fcas = true;
  bool use_dcaf = true;
};

std::string network_config_to_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const std::string& text);

/// Registers every network parameter in `store`. The offset convolutions and
/// the last decoder layer start at zero and the deformable kernels at the
/// centre-tap identity, so the untrained network returns J_cur.
void init_network(ParameterStore& store, const NetworkConfig& config, std::uint64_t seed);

/// Three conv3x3 + leaky-ReLU stages at strides 1, 2, 2.
std::vector<Var> encode(const BoundParameters& p, const Var& frame);

GpcasWeights gpcas_weights(const BoundParameters& p, const NetworkConfig& config);
DcafWeights dcaf_weights(const BoundParameters& p);

struct StepOutput {
  Var output;   // J̃_cur
  Var aligned;  // F_align (level 0)
  Var current;  // F_cur (level 0)
  Var offsets;
};

/// Encodes both frames, aligns, fuses and decodes an RGB residual added to
/// J_cur, clipped to [0,1].
StepOutput dehaze_step(const BoundParameters& p, const NetworkConfig& config, const Var& j_prev, const Var& j_cur,
                       const FlowPair& flow);

/// Centre-tap identity kernel [C, C, k, k].
Tensor identity_kernel(Index channels, Index k);

}  // namespace dvd
