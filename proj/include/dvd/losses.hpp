#pragma once

// Training objective: multi-frame reference loss, alignment loss, occlusion-
// masked temporal consistency, adversarial loss and their weighted sum.

#include "dvd/autodiff.hpp"
#include "dvd/embedder.hpp"
#include "dvd/parameters.hpp"
#include "dvd/types.hpp"

#include <cstdint>
#include <string>

namespace dvd {

enum class MfrDistance { Contextual, PooledCosine };
MfrDistance mfr_distance_from_string(const std::string& name);
std::string to_string(MfrDistance d);

/// Σ over pyramid levels and both references of d(Φ^l(out), Φ^l(ref)).
/// Reference pyramids are constants.
Var mfr_loss(const Var& out, const Tensor& ref1, const Tensor& ref2, const DifferentiableEmbedder& embedder,
             MfrDistance distance = MfrDistance::Contextual, const ContextualOptions& options = {});

/// Mean |F_align − F_cur|.
Var align_loss(const Var& f_align, const Var& f_cur);

struct OcclusionOptions {
  double alpha1 = 0.01;
  double alpha2 = 0.5;
};

/// [1,H,W] in {0,1}: 1 where ‖fw(p) + bw(p + fw(p))‖² < α1(‖fw(p)‖² + ‖bw(p + fw(p))‖²) + α2,
/// with bw sampled bilinearly (border clamp).
Tensor occlusion_mask(const Tensor& flow_fw, const Tensor& flow_bw, const OcclusionOptions& options = {});

struct ConsistencyResult {
  Var loss;
  /// Set when the mask trusts no pixel; the loss is then 0.
  bool empty_mask = false;
};

/// Samples out_t at p + flow(p) (bilinear, border clamp), so that a consistent
/// flow lands every trusted pixel on out_prev(p), and returns the mean absolute
/// difference over trusted pixels and channels.
ConsistencyResult consistency_loss(const Var& out_t, const Var& out_prev, const Tensor& flow, const Tensor& mask);

/// Four stride-2 3×3 convolutions (16, 32, 64, 1 channels) with leaky ReLU
/// between them; patch logits.
struct DiscriminatorConfig {
  Index base_channels = 16;
};
void init_discriminator(ParameterStore& store, const DiscriminatorConfig& config, std::uint64_t seed);
/// Patch probabilities clamped to [1e-6, 1 − 1e-6].
Var discriminator_probs(const BoundParameters& disc, const Var& frame);

struct AdversarialLoss {
  Var g_loss;  // −E[log D(out)]
  Var d_loss;  // −E[log D(ref)] − E[log(1 − D(out))], out detached
};
AdversarialLoss adversarial_loss(const Var& out, const FrameSequence& refs, const BoundParameters& disc);

struct LossWeights {
  double adv = 1.0;
  double mfr = 1.0;
  double align = 1.0;
  double cr = 1.0;
};

struct LossReport {
  double adv = 0;
  double mfr = 0;
  double align = 0;
  double cr = 0;
  double total = 0;
  std::string to_json(Index step) const;
};

/// total = Σ weight·term. Throws NumericalError naming the first non-finite term.
LossReport total_loss(double adv, double mfr, double align, double cr, const LossWeights& weights = {});

struct LossTerms {
  Var adv, mfr, align, cr;
};
/// Weighted sum on the tape; `report` receives the scalar decomposition.
Var total_loss(const LossTerms& terms, const LossWeights& weights, LossReport* report = nullptr);

}  // namespace dvd
