#pragma once

// Toy training loop, sequential two-frame inference and the experiment
// drivers built on them (kernel-size sweep, module ablation).

#include "dvd/align_fuse.hpp"
#include "dvd/flow.hpp"
#include "dvd/haze.hpp"
#include "dvd/losses.hpp"
#include "dvd/metrics.hpp"
#include "dvd/nrfm.hpp"
#include "dvd/scene.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace dvd {

struct TrainConfig {
  int iterations = 500;
  double lr = 1e-4;
  double disc_lr = 1e-4;
  NetworkConfig network;
  LossWeights weights;
  MfrDistance mfr = MfrDistance::Contextual;
  ContextualOptions contextual;
  OcclusionOptions occlusion;
  DiscriminatorConfig discriminator;
  FlowKind flow = FlowKind::Truth;
  BlockMatchOptions blockmatch;
  /// Replace NRFM references with random clear frames (unpaired ablation).
  bool unpaired = false;
  std::uint64_t seed = 1234;
  /// 0 disables periodic checkpoints; the final one is always written when a
  /// checkpoint directory is given.
  int checkpoint_every = 100;
};

std::string train_config_to_json(const TrainConfig& config);
/// Missing fields keep their defaults.
TrainConfig train_config_from_json(const std::string& text);

/// One hazy/clear pair prepared for training.
struct TrainingData {
  FrameSequence hazy;
  FrameSequence clear;
  FrameSequence predehazed;
  MatchTable matches;
  std::vector<FlowPair> flows;  // N − 1 entries
};

/// Pre-dehazes every hazy frame with `dehazer`.
FrameSequence predehaze_sequence(const FrameSequence& hazy, const FrameDehazer& dehazer);

struct TrainResult {
  ParameterStore params;
  std::vector<LossReport> log;
};

struct TrainHooks {
  /// Receives every step's report (0-based step index).
  std::function<void(Index, const LossReport&)> on_step;
  /// Checkpoint root; step_XXXXX/ and final/ are written below it.
  std::optional<std::filesystem::path> checkpoint_dir;
};

/// Adam on the weighted sum of the adversarial, reference, alignment and
/// consistency terms. Steps cycle over t = 0..N−1; frame 0
/// pairs with itself. The previous output used by the consistency term is the
/// detached network output from the last visit of frame t−1 (initially the
/// pre-dehazed frame). On a NumericalError the last checkpoint stays in place
/// and the error propagates.
TrainResult train(const TrainingData& data, const TrainConfig& config, const TrainHooks& hooks = {});

ParameterStore initial_parameters(const TrainConfig& config);

/// Parameter directory plus network.json.
void save_checkpoint(const ParameterStore& params, const NetworkConfig& network, const std::filesystem::path& dir);
struct Checkpoint {
  ParameterStore params;
  NetworkConfig network;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Zero flow for self-pairs.
FlowPair zero_flow(Index height, Index width);

/// Sequential inference; frame 0 pairs with itself under zero flow.
FrameSequence dehaze_sequence(const ParameterStore& params, const NetworkConfig& network,
                              const FrameSequence& predehazed, const std::vector<FlowPair>& flows);

/// 1 − (mean of the last `tail` totals) / (mean of the first `head` totals).
double loss_drop(const std::vector<LossReport>& log, Index head = 10, Index tail = 50);
/// Trailing moving average of the totals with window `w`, one value per step.
std::vector<double> moving_average(const std::vector<LossReport>& log, Index w);

/// Flows for a pair according to the configured provider.
std::vector<FlowPair> provide_flows(FlowKind kind, const FrameSequence& frames, const std::vector<FlowPair>& truth,
                                    const BlockMatchOptions& options, const std::filesystem::path& flow_dir = {});

/// Synthesises a scene, matches it with NRFM and pre-dehazes it.
struct SyntheticSet {
  MisalignedPair pair;
  TrainingData data;
};
SyntheticSet make_synthetic_set(const SceneConfig& scene, const TrainConfig& config);

struct HeldOutResult {
  double baseline_psnr = 0;  // pre-dehazed frames vs aligned clear
  double output_psnr = 0;
  double baseline_ssim = 0;
  double output_ssim = 0;
};
HeldOutResult evaluate_held_out(const ParameterStore& params, const NetworkConfig& network, const SyntheticSet& set);

struct SweepRow {
  int kernel = 0;
  double final_loss = 0;
  double loss_drop = 0;
  double psnr_gain = 0;
  double seconds = 0;
};
/// Trains one model per kernel size and evaluates each on `held_out`.
std::vector<SweepRow> kernel_sweep(const SyntheticSet& train_set, const SyntheticSet& held_out, TrainConfig config,
                                   const std::vector<int>& kernels);
void write_sweep_table(const std::vector<SweepRow>& rows, std::ostream& out);

struct AblationRow {
  std::string name;
  double align_loss = 0;  // mean alignment term over the last 20 steps
  double total_loss = 0;  // mean total over the last 20 steps
};
/// basic (plain pyramid deformable alignment, concatenation fusion),
/// basic+FCAS and basic+FCAS+DCAF trained with the same schedule.
std::vector<AblationRow> module_ablation(const TrainingData& data, TrainConfig config);

}  // namespace dvd
