#include "dvd/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>

namespace dvd {

namespace {

constexpr std::uint64_t kDiscriminatorSeedMix = 0x9E3779B97F4A7C15ull;

void check_training_data(const TrainingData& d) {
  const Index N = d.predehazed.size();
  if (N < 1) throw ValidationError("training data has no frames");
  if (static_cast<Index>(d.matches.size()) != N) {
    throw ValidationError("training data: " + std::to_string(d.matches.size()) + " matches for " + std::to_string(N) +
                          " frames");
  }
  if (static_cast<Index>(d.flows.size()) != N - 1) {
    throw ValidationError("training data: " + std::to_string(d.flows.size()) + " flow pairs for " + std::to_string(N) +
                          " frames (expected N-1)");
  }
  if (d.clear.empty()) throw ValidationError("training data has no clear frames");
  const Shape& shape = d.predehazed[0].shape();
  for (const Tensor& f : d.predehazed.frames)
    if (f.shape() != shape) throw ValidationError("training frames differ in shape");
  for (const Tensor& f : d.clear.frames)
    if (f.shape() != shape) throw ValidationError("clear frames " + shape_string(f.shape()) + " vs hazy " + shape_string(shape));
  for (const MatchRecord& r : d.matches) {
    if (r.k < 0 || r.k >= d.clear.size() || r.k2 < 0 || r.k2 >= d.clear.size()) {
      throw ValidationError("match for t=" + std::to_string(r.t) + " references a missing clear frame");
    }
  }
}

std::string step_dir_name(Index step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%05lld", static_cast<long long>(step));
  return buf;
}

}  // namespace

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["iterations"] = c.iterations;
  j["lr"] = c.lr;
  j["disc_lr"] = c.disc_lr;
  j["network"] = nlohmann::ordered_json::parse(network_config_to_json(c.network));
  j["weights"] = {{"adv", c.weights.adv}, {"mfr", c.weights.mfr}, {"align", c.weights.align}, {"cr", c.weights.cr}};
  j["mfr"] = to_string(c.mfr);
  j["contextual"] = {{"bandwidth", c.contextual.bandwidth},
                     {"eps", c.contextual.eps},
                     {"max_features", c.contextual.max_features}};
  j["occlusion"] = {{"alpha1", c.occlusion.alpha1}, {"alpha2", c.occlusion.alpha2}};
  j["disc_channels"] = c.discriminator.base_channels;
  j["flow"] = to_string(c.flow);
  j["blockmatch"] = {{"block", c.blockmatch.block}, {"radius", c.blockmatch.radius}, {"smooth", c.blockmatch.smooth}};
  j["unpaired"] = c.unpaired;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["precision"] = "f64";
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ValidationError("train config must be a JSON object");
    c.iterations = j.value("iterations", c.iterations);
    c.lr = j.value("lr", c.lr);
    c.disc_lr = j.value("disc_lr", c.disc_lr);
    if (j.contains("network")) c.network = network_config_from_json(j["network"].dump());
    // top-level shortcuts for the two swept hyper-parameters
    c.network.fcas.kernel = j.value("kernel", c.network.fcas.kernel);
    c.network.levels = j.value("levels", c.network.levels);
    if (j.contains("weights")) {
      const auto& w = j["weights"];
      c.weights.adv = w.value("adv", c.weights.adv);
      c.weights.mfr = w.value("mfr", c.weights.mfr);
      c.weights.align = w.value("align", c.weights.align);
      c.weights.cr = w.value("cr", c.weights.cr);
    }
    if (j.contains("mfr")) c.mfr = mfr_distance_from_string(j["mfr"].get<std::string>());
    if (j.contains("contextual")) {
      const auto& x = j["contextual"];
      c.contextual.bandwidth = x.value("bandwidth", c.contextual.bandwidth);
      c.contextual.eps = x.value("eps", c.contextual.eps);
      c.contextual.max_features = x.value("max_features", c.contextual.max_features);
    }
    if (j.contains("occlusion")) {
      c.occlusion.alpha1 = j["occlusion"].value("alpha1", c.occlusion.alpha1);
      c.occlusion.alpha2 = j["occlusion"].value("alpha2", c.occlusion.alpha2);
    }
    c.discriminator.base_channels = j.value("disc_channels", c.discriminator.base_channels);
    if (j.contains("flow")) c.flow = flow_kind_from_string(j["flow"].get<std::string>());
    if (j.contains("blockmatch")) {
      const auto& b = j["blockmatch"];
      c.blockmatch.block = b.value("block", c.blockmatch.block);
      c.blockmatch.radius = b.value("radius", c.blockmatch.radius);
      c.blockmatch.smooth = b.value("smooth", c.blockmatch.smooth);
    }
    c.unpaired = j.value("unpaired", c.unpaired);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    const std::string precision = j.value("precision", std::string("f64"));
    if (precision != "f64") throw ValidationError("train config: only precision \"f64\" is supported, got \"" + precision + "\"");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  if (c.iterations < 0) throw ValidationError("train config: iterations must be >= 0");
  if (!(c.lr > 0) || !(c.disc_lr > 0)) throw ValidationError("train config: learning rates must be positive");
  if (c.checkpoint_every < 0) throw ValidationError("train config: checkpoint_every must be >= 0");
  if (c.contextual.bandwidth <= 0) throw ValidationError("train config: contextual bandwidth must be positive");
  return c;
}

FrameSequence predehaze_sequence(const FrameSequence& hazy, const FrameDehazer& dehazer) {
  FrameSequence out;
  out.label = hazy.label;
  for (const Tensor& f : hazy.frames) out.push_back(dehazer(f));
  return out;
}

ParameterStore initial_parameters(const TrainConfig& config) {
  ParameterStore store;
  init_network(store, config.network, config.seed);
  return store;
}

void save_checkpoint(const ParameterStore& params, const NetworkConfig& network, const std::filesystem::path& dir) {
  params.save(dir);
  std::ofstream out(dir / "network.json");
  if (!out) throw ValidationError("cannot write " + (dir / "network.json").string());
  out << network_config_to_json(network) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "network.json");
  if (!in) throw ValidationError("checkpoint network config missing: " + (dir / "network.json").string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint c{ParameterStore::load(dir), network_config_from_json(text)};
  // a store from another configuration fails here rather than mid-inference
  ParameterStore reference;
  init_network(reference, c.network, 0);
  for (const std::string& name : reference.names()) {
    if (!c.params.contains(name)) throw ValidationError("checkpoint lacks parameter '" + name + "'");
    if (c.params.get(name).shape() != reference.get(name).shape()) {
      throw ValidationError("checkpoint parameter '" + name + "' has shape " + shape_string(c.params.get(name).shape()) +
                            ", expected " + shape_string(reference.get(name).shape()));
    }
  }
  return c;
}

FlowPair zero_flow(Index height, Index width) { return {Tensor({2, height, width}), Tensor({2, height, width})}; }

TrainResult train(const TrainingData& data, const TrainConfig& config, const TrainHooks& hooks) {
  check_training_data(data);
  const Index N = data.predehazed.size();
  const Index H = data.predehazed[0].dim(1), W = data.predehazed[0].dim(2);

  TrainResult result{initial_parameters(config), {}};
  ParameterStore& params = result.params;
  ParameterStore disc;
  init_discriminator(disc, config.discriminator, config.seed ^ kDiscriminatorSeedMix);
  Adam opt(config.lr), disc_opt(config.disc_lr);
  const ConvEmbedder embedder;
  const MatchTable refs =
      config.unpaired ? shuffle_references(data.matches, static_cast<int>(data.clear.size()), config.seed) : data.matches;

  std::vector<Tensor> masks;
  for (const FlowPair& f : data.flows) masks.push_back(occlusion_mask(f.forward, f.backward, config.occlusion));
  std::vector<Tensor> previous = data.predehazed.frames;
  const FlowPair self_flow = zero_flow(H, W);
  const bool adversarial = config.weights.adv != 0;

  auto checkpoint = [&](const std::string& name) {
    if (hooks.checkpoint_dir) save_checkpoint(params, config.network, *hooks.checkpoint_dir / name);
  };

  for (Index step = 0; step < config.iterations; ++step) {
    const Index t = step % N;
    const MatchRecord& ref = refs[static_cast<std::size_t>(t)];
    const Tensor& ref1 = data.clear[ref.k];
    const Tensor& ref2 = data.clear[ref.k2];
    LossReport report;
    try {
      Tape tape;
      const BoundParameters bp(tape, params);
      const Var j_cur = tape.constant(data.predehazed[t]);
      const Var j_prev = t > 0 ? tape.constant(data.predehazed[t - 1]) : j_cur;
      const StepOutput o = dehaze_step(bp, config.network, j_prev, j_cur, t > 0 ? data.flows[t - 1] : self_flow);

      LossTerms terms;
      terms.mfr = mfr_loss(o.output, ref1, ref2, embedder, config.mfr, config.contextual);
      terms.align = align_loss(o.aligned, o.current);
      if (t > 0) {
        terms.cr = consistency_loss(o.output, tape.constant(previous[t - 1]), data.flows[t - 1].forward, masks[t - 1]).loss;
      }
      BoundParameters bd;
      AdversarialLoss adv;
      if (adversarial) {
        bd = BoundParameters(tape, disc);
        adv = adversarial_loss(o.output, FrameSequence{{ref1, ref2}, {}}, bd);
        terms.adv = adv.g_loss;
      }
      const Var total = total_loss(terms, config.weights, &report);
      tape.backward(total);
      opt.step(params, bp, tape);
      if (adversarial) {
        tape.backward(adv.d_loss);
        disc_opt.step(disc, bd, tape);
      }
      previous[t] = o.output.value();
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.log.push_back(report);
    if (hooks.on_step) hooks.on_step(step, report);
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) checkpoint(step_dir_name(step + 1));
  }
  checkpoint("final");
  return result;
}

FrameSequence dehaze_sequence(const ParameterStore& params, const NetworkConfig& network, const FrameSequence& predehazed,
                              const std::vector<FlowPair>& flows) {
  const Index N = predehazed.size();
  if (N < 1) throw ValidationError("dehaze: no frames");
  if (static_cast<Index>(flows.size()) != N - 1) {
    throw ValidationError("dehaze: " + std::to_string(flows.size()) + " flow pairs for " + std::to_string(N) + " frames");
  }
  const Tensor& first = predehazed[0];
  require_rank3(first, "dehaze");
  const Index H = first.dim(1), W = first.dim(2);
  // two stride-2 encoder stages, then the DCAF pooling
  const Index multiple = network.use_dcaf ? std::lcm(Index{4}, network.dcaf.pool) : Index{4};
  if (H % multiple != 0 || W % multiple != 0) {
    throw ValidationError("dehaze: frame size " + std::to_string(H) + "x" + std::to_string(W) + " must be a multiple of " +
                          std::to_string(multiple));
  }
  FrameSequence out;
  out.label = predehazed.label;
  const FlowPair self_flow = zero_flow(H, W);
  for (Index t = 0; t < N; ++t) {
    if (predehazed[t].shape() != first.shape()) throw ValidationError("dehaze: frames differ in shape");
    Tape tape;
    const BoundParameters bp(tape, params, false);
    const Var j_cur = tape.constant(predehazed[t]);
    const Var j_prev = t > 0 ? tape.constant(predehazed[t - 1]) : j_cur;
    out.push_back(dehaze_step(bp, network, j_prev, j_cur, t > 0 ? flows[t - 1] : self_flow).output.value());
  }
  return out;
}

double loss_drop(const std::vector<LossReport>& log, Index head, Index tail) {
  const Index n = static_cast<Index>(log.size());
  if (n == 0) return 0.0;
  head = std::min(head, n);
  tail = std::min(tail, n);
  double a = 0, b = 0;
  for (Index i = 0; i < head; ++i) a += log[i].total;
  for (Index i = n - tail; i < n; ++i) b += log[i].total;
  a /= static_cast<double>(head);
  b /= static_cast<double>(tail);
  return a > 0 ? 1.0 - b / a : 0.0;
}

std::vector<double> moving_average(const std::vector<LossReport>& log, Index w) {
  if (w < 1) throw ValidationError("moving_average: window must be >= 1");
  std::vector<double> out;
  double acc = 0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    acc += log[i].total;
    if (static_cast<Index>(i) >= w) acc -= log[i - static_cast<std::size_t>(w)].total;
    out.push_back(acc / static_cast<double>(std::min<Index>(w, static_cast<Index>(i) + 1)));
  }
  return out;
}

std::vector<FlowPair> provide_flows(FlowKind kind, const FrameSequence& frames, const std::vector<FlowPair>& truth,
                                    const BlockMatchOptions& options, const std::filesystem::path& flow_dir) {
  const Index pairs = std::max<Index>(frames.size() - 1, 0);
  switch (kind) {
    case FlowKind::Truth:
      if (static_cast<Index>(truth.size()) != pairs) {
        throw ValidationError("truth flow requested but synthesis metadata provides " + std::to_string(truth.size()) +
                              " of " + std::to_string(pairs) + " flow pairs");
      }
      return truth;
    case FlowKind::Blockmatch:
      return blockmatch_sequence(frames, options);
    case FlowKind::File:
      if (flow_dir.empty()) throw ValidationError("file flow requested without a flow directory");
      return read_flows(flow_dir, pairs);
  }
  throw ValidationError("unknown flow provider");
}

SyntheticSet make_synthetic_set(const SceneConfig& scene, const TrainConfig& config) {
  const GeneratedScene g = generate_scene(scene);
  SyntheticSet s;
  s.pair = make_misaligned_pair(g.scene, g.misalignment);
  s.data.hazy = s.pair.hazy;
  s.data.clear = s.pair.clear;
  s.data.predehazed = predehaze_sequence(s.pair.hazy, DcpDehazer());
  s.data.matches = run_nrfm(s.pair.hazy, s.pair.clear, ChromaEmbedder());
  s.data.flows = provide_flows(config.flow, s.data.predehazed, s.pair.flows, config.blockmatch);
  return s;
}

HeldOutResult evaluate_held_out(const ParameterStore& params, const NetworkConfig& network, const SyntheticSet& set) {
  const FrameSequence out = dehaze_sequence(params, network, set.data.predehazed, set.data.flows);
  const EvalReport base = evaluate(set.data.predehazed, set.pair.aligned_clear);
  const EvalReport ours = evaluate(out, set.pair.aligned_clear);
  return {base.mean_psnr, ours.mean_psnr, base.mean_ssim, ours.mean_ssim};
}

std::vector<SweepRow> kernel_sweep(const SyntheticSet& train_set, const SyntheticSet& held_out, TrainConfig config,
                                   const std::vector<int>& kernels) {
  std::vector<SweepRow> rows;
  for (int k : kernels) {
    if (k < 1 || k % 2 == 0) throw ValidationError("kernel sweep: kernel sizes must be odd, got " + std::to_string(k));
    config.network.fcas.kernel = k;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = train(train_set.data, config);
    const HeldOutResult h = evaluate_held_out(r.params, config.network, held_out);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::vector<double> ma = moving_average(r.log, 50);
    rows.push_back({k, ma.empty() ? 0.0 : ma.back(), loss_drop(r.log), h.output_psnr - h.baseline_psnr, seconds});
  }
  return rows;
}

void write_sweep_table(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "| k | final loss (MA50) | loss drop | PSNR gain (dB) | seconds |\n";
  out << "|---|---|---|---|---|\n";
  out << std::fixed;
  for (const SweepRow& r : rows) {
    out << "| " << r.kernel << "x" << r.kernel << " | " << std::setprecision(4) << r.final_loss << " | "
        << std::setprecision(3) << r.loss_drop << " | " << std::setprecision(2) << r.psnr_gain << " | "
        << std::setprecision(1) << r.seconds << " |\n";
  }
  out.unsetf(std::ios::floatfield);
}

std::vector<AblationRow> module_ablation(const TrainingData& data, TrainConfig config) {
  struct Variant {
    const char* name;
    bool fcas, dcaf;
  };
  const Variant variants[] = {{"basic", false, false}, {"basic+FCAS", true, false}, {"basic+FCAS+DCAF", true, true}};
  std::vector<AblationRow> rows;
  for (const Variant& v : variants) {
    config.network.use_fcas = v.fcas;
    config.network.use_dcaf = v.dcaf;
    const TrainResult r = train(data, config);
    const std::size_t n = r.log.size(), tail = std::min<std::size_t>(20, n);
    AblationRow row{v.name, 0, 0};
    for (std::size_t i = n - tail; i < n; ++i) {
      row.align_loss += r.log[i].align / static_cast<double>(tail);
      row.total_loss += r.log[i].total / static_cast<double>(tail);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace dvd
