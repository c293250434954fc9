#include "dvd/losses.hpp"

#include <json.hpp>

#include <cmath>
#include <random>

namespace dvd {

MfrDistance mfr_distance_from_string(const std::string& name) {
  if (name == "contextual") return MfrDistance::Contextual;
  if (name == "pooled_cosine") return MfrDistance::PooledCosine;
  throw ValidationError("unknown mfr distance '" + name + "' (expected contextual|pooled_cosine)");
}

std::string to_string(MfrDistance d) { return d == MfrDistance::Contextual ? "contextual" : "pooled_cosine"; }

Var mfr_loss(const Var& out, const Tensor& ref1, const Tensor& ref2, const DifferentiableEmbedder& embedder,
             MfrDistance distance, const ContextualOptions& options) {
  if (ref1.shape() != out.shape() || ref2.shape() != out.shape()) {
    throw ValidationError("mfr_loss: output " + shape_string(out.shape()) + " vs references " +
                          shape_string(ref1.shape()) + ", " + shape_string(ref2.shape()));
  }
  Tape& tape = *out.tape();
  const std::vector<Var> fo = embedder.embed(out);
  Var total;
  for (const Tensor* ref : {&ref1, &ref2}) {
    const FeaturePyramid fr = embedder.embed(*ref);
    if (fr.levels.size() != fo.size()) throw ValidationError("mfr_loss: pyramid level counts differ");
    for (std::size_t l = 0; l < fo.size(); ++l) {
      if (fr.levels[l].shape() != fo[l].shape()) throw ValidationError("mfr_loss: pyramid geometry differs at level " + std::to_string(l));
      Var term;
      if (distance == MfrDistance::Contextual) {
        term = contextual_loss(fo[l], tape.constant(fr.levels[l]), options);
      } else {
        Tensor pooled({fr.levels[l].dim(0), 1, 1});
        const Eigen::VectorXd m = pooled_features(FeaturePyramid{{fr.levels[l]}})[0];
        for (Index c = 0; c < m.size(); ++c) pooled[c] = m[c];
        term = add_scalar(scale(cosine_similarity(spatial_mean(fo[l]), tape.constant(pooled)), -1.0), 1.0);
      }
      total = total.valid() ? add(total, term) : term;
    }
  }
  return total;
}

Var align_loss(const Var& f_align, const Var& f_cur) {
  if (f_align.shape() != f_cur.shape()) {
    throw ValidationError("align_loss: shapes differ " + shape_string(f_align.shape()) + " vs " +
                          shape_string(f_cur.shape()));
  }
  return mean(abs(sub(f_align, f_cur)));
}

Tensor occlusion_mask(const Tensor& fw, const Tensor& bw, const OcclusionOptions& o) {
  if (fw.shape() != bw.shape() || fw.rank() != 3 || fw.dim(0) != 2) {
    throw ValidationError("occlusion_mask: flows must share a [2,H,W] shape, got " + shape_string(fw.shape()) + " and " +
                          shape_string(bw.shape()));
  }
  const Index H = fw.dim(1), W = fw.dim(2);
  Tensor coords = identity_grid(H, W);
  coords.data() += fw.data();
  const Tensor bw_warped = kernels::bilinear_sample(bw, coords, Padding::Border);
  Tensor mask({1, H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const double fu = fw(0, y, x), fv = fw(1, y, x), bu = bw_warped(0, y, x), bv = bw_warped(1, y, x);
      const double su = fu + bu, sv = fv + bv;
      const double lhs = su * su + sv * sv;
      const double rhs = o.alpha1 * (fu * fu + fv * fv + bu * bu + bv * bv) + o.alpha2;
      mask(0, y, x) = lhs < rhs ? 1.0 : 0.0;
    }
  return mask;
}

ConsistencyResult consistency_loss(const Var& out_t, const Var& out_prev, const Tensor& flow, const Tensor& mask) {
  if (out_t.shape() != out_prev.shape()) {
    throw ValidationError("consistency_loss: frames differ " + shape_string(out_t.shape()) + " vs " +
                          shape_string(out_prev.shape()));
  }
  require_rank3(out_t.value(), "consistency_loss");
  const Index C = out_t.dim(0), H = out_t.dim(1), W = out_t.dim(2);
  if (flow.shape() != Shape{2, H, W}) throw ValidationError("consistency_loss: flow must be [2,H,W], got " + shape_string(flow.shape()));
  if (mask.shape() != Shape{1, H, W}) throw ValidationError("consistency_loss: mask must be [1,H,W], got " + shape_string(mask.shape()));
  Tape& tape = *out_t.tape();
  const double trusted = mask.data().sum();
  if (trusted <= 0) return {scale(sum(out_t), 0.0), true};
  Tensor coords = identity_grid(H, W);
  coords.data() += flow.data();
  Var warped = bilinear_sample(out_t, tape.constant(std::move(coords)), Padding::Border);
  Tensor m({C, H, W});
  for (Index c = 0; c < C; ++c) m.data().segment(c * H * W, H * W) = mask.data();
  Var diff = mul(abs(sub(warped, out_prev)), tape.constant(std::move(m)));
  return {scale(sum(diff), 1.0 / (trusted * static_cast<double>(C))), false};
}

void init_discriminator(ParameterStore& store, const DiscriminatorConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index b = config.base_channels;
  const Index chans[5] = {3, b, 2 * b, 4 * b, 1};
  for (int i = 0; i < 4; ++i) {
    const std::string pre = "disc." + std::to_string(i) + ".";
    const Shape shape{chans[i + 1], chans[i], 3, 3};
    // the last layer starts at zero so D begins at 0.5 everywhere
    store.add(pre + "w", i == 3 ? Tensor(shape) : init_uniform(shape, 1.0, rng));
    store.add(pre + "b", Tensor({chans[i + 1]}));
  }
}

Var discriminator_probs(const BoundParameters& disc, const Var& frame) {
  Var x = frame;
  for (int i = 0; i < 4; ++i) {
    const std::string pre = "disc." + std::to_string(i) + ".";
    x = bias_add(conv2d(x, disc[pre + "w"], 2, 1), disc[pre + "b"]);
    if (i < 3) x = leaky_relu(x, 0.2);
  }
  return clamp(sigmoid(x), 1e-6, 1.0 - 1e-6);
}

AdversarialLoss adversarial_loss(const Var& out, const FrameSequence& refs, const BoundParameters& disc) {
  if (refs.empty()) throw ValidationError("adversarial_loss: no reference frames");
  Tape& tape = *out.tape();
  Var p_out = discriminator_probs(disc, out);
  AdversarialLoss r;
  r.g_loss = scale(mean(log(p_out)), -1.0);
  Var real;
  for (const Tensor& ref : refs.frames) {
    Var term = mean(log(discriminator_probs(disc, tape.constant(ref))));
    real = real.valid() ? add(real, term) : term;
  }
  real = scale(real, -1.0 / static_cast<double>(refs.size()));
  // the discriminator update sees a detached copy of the output
  Var p_fake = discriminator_probs(disc, tape.constant(out.value()));
  Var fake = scale(mean(log(add_scalar(scale(p_fake, -1.0), 1.0))), -1.0);
  r.d_loss = add(real, fake);
  return r;
}

std::string LossReport::to_json(Index step) const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["adv"] = adv;
  j["mfr"] = mfr;
  j["align"] = align;
  j["cr"] = cr;
  j["total"] = total;
  return j.dump();
}

LossReport total_loss(double adv, double mfr, double align, double cr, const LossWeights& w) {
  const std::pair<const char*, double> terms[] = {{"adv", adv}, {"mfr", mfr}, {"align", align}, {"cr", cr}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) throw NumericalError(std::string("loss term '") + name + "' is not finite");
  }
  LossReport r{adv, mfr, align, cr, 0};
  r.total = w.adv * adv + w.mfr * mfr + w.align * align + w.cr * cr;
  return r;
}

Var total_loss(const LossTerms& t, const LossWeights& w, LossReport* report) {
  auto value = [](const Var& v) { return v.valid() ? v.value()[0] : 0.0; };
  const LossReport r = total_loss(value(t.adv), value(t.mfr), value(t.align), value(t.cr), w);
  if (report) *report = r;
  Var total;
  const std::pair<const Var*, double> parts[] = {{&t.adv, w.adv}, {&t.mfr, w.mfr}, {&t.align, w.align}, {&t.cr, w.cr}};
  for (const auto& [v, weight] : parts) {
    if (!v->valid() || weight == 0) continue;
    Var term = weight == 1.0 ? *v : scale(*v, weight);
    total = total.valid() ? add(total, term) : term;
  }
  if (!total.valid()) throw ValidationError("total_loss: no active terms");
  return total;
}

}  // namespace dvd
