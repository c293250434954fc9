// dvd: synth | match | train | dehaze | eval | gradcheck
//
// Exit codes: 0 success, 1 validation error, 2 numerical failure.

#include "dvd/dataset.hpp"
#include "dvd/gradcheck.hpp"
#include "dvd/image_io.hpp"
#include "dvd/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace dvd;
using ojson = nlohmann::ordered_json;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void emit(const ojson& j) { std::cout << j.dump() << '\n'; }

/// Flag beats DVD_SEED beats the configured value.
std::uint64_t resolve_seed(std::uint64_t configured, const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("DVD_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      return v;
    } catch (const std::exception&) {
      throw ValidationError(std::string("DVD_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  return configured;
}

fs::path default_match_file(const fs::path& manifest, std::size_t pair) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%03zu.jsonl", pair);
  return manifest.parent_path() / "matches" / buf;
}

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta;
};

int run_synth(const SynthArgs& a) {
  SceneConfig c = a.config.empty() ? SceneConfig{} : scene_config_from_json(read_text(a.config));
  c.seed = resolve_seed(c.seed, a.seed);
  if (a.beta) c.beta = *a.beta;
  write_synthetic_dataset(c, a.out);
  emit({{"event", "synth"}, {"out", a.out}, {"hazy_frames", c.hazy_frames}, {"clear_frames", c.clear_frames}, {"seed", c.seed}});
  return 0;
}

struct MatchArgs {
  std::string manifest, out, embedder = "chroma", embedder_weights;
  bool unpaired = false;
  std::optional<std::uint64_t> seed;
  int window_min = NrfmConfig{}.window_min, step_max = NrfmConfig{}.step_max;
};

int run_match(const MatchArgs& a) {
  const DatasetManifest m = load_manifest(a.manifest);
  std::unique_ptr<Embedder> embedder;
  if (a.embedder == "chroma") {
    embedder = std::make_unique<ChromaEmbedder>();
  } else if (a.embedder == "conv") {
    embedder = a.embedder_weights.empty() ? std::make_unique<ConvEmbedder>()
                                          : std::make_unique<ConvEmbedder>(ConvEmbedder::from_directory(a.embedder_weights));
  } else {
    throw ValidationError("unknown embedder '" + a.embedder + "' (expected chroma|conv)");
  }
  const NrfmConfig nc{a.window_min, a.step_max};
  const std::uint64_t seed = resolve_seed(TrainConfig{}.seed, a.seed);
  Index done = 0;
  for (std::size_t i = 0; i < m.pairs.size(); ++i) {
    const ManifestPair& p = m.pairs[i];
    const FrameSequence hazy = read_sequence(p.hazy_dir), clear = read_sequence(p.clear_dir);
    const Index N = hazy.size(), M = clear.size();
    if (N == 0 || M == 0 || N > M + 2) {
      emit({{"event", "skip"}, {"pair", i}, {"reason", "frame counts N=" + std::to_string(N) + ", M=" + std::to_string(M) +
                                                            " violate 1 <= N <= M + 2"}});
      continue;
    }
    MatchTable table = run_nrfm(hazy, clear, *embedder, nc);
    if (a.unpaired) table = shuffle_references(table, static_cast<int>(M), seed);
    const fs::path out = a.out.empty() ? default_match_file(a.manifest, i) : fs::path(a.out) / default_match_file("", i).filename();
    fs::create_directories(out.parent_path());
    write_match_table(table, out);
    ojson j{{"event", "match"}, {"pair", i}, {"N", N}, {"M", M}, {"unpaired", a.unpaired}, {"out", out.generic_string()}};
    if (p.truth_file) {
      const MatchAccuracy acc = match_accuracy(table, read_match_table(*p.truth_file));
      j["exact_rate"] = acc.exact_rate;
      j["mean_abs_error"] = acc.mean_abs_error;
    }
    emit(j);
    ++done;
  }
  if (done == 0) throw ValidationError("no pair in the manifest could be matched");
  return 0;
}

struct TrainArgs {
  std::string manifest, config, matches, out, log, flow, flow_dir;
  std::size_t pair = 0;
  std::optional<int> iterations, kernel, levels;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  TrainConfig c = a.config.empty() ? TrainConfig{} : train_config_from_json(read_text(a.config));
  c.seed = resolve_seed(c.seed, a.seed);
  if (a.iterations) c.iterations = *a.iterations;
  if (a.lr) c.lr = *a.lr;
  if (a.kernel) c.network.fcas.kernel = *a.kernel;
  if (a.levels) c.network.levels = *a.levels;
  if (!a.flow.empty()) c.flow = flow_kind_from_string(a.flow);
  // re-validate after overrides
  c = train_config_from_json(train_config_to_json(c));

  const DatasetManifest m = load_manifest(a.manifest);
  if (a.pair >= m.pairs.size()) throw ValidationError("manifest has no pair " + std::to_string(a.pair));
  const ManifestPair& p = m.pairs[a.pair];
  TrainingData data;
  data.hazy = read_sequence(p.hazy_dir);
  data.clear = read_sequence(p.clear_dir);
  data.predehazed = predehaze_sequence(data.hazy, DcpDehazer());
  const fs::path match_file = a.matches.empty() ? default_match_file(a.manifest, a.pair) : fs::path(a.matches);
  if (!fs::exists(match_file)) throw ValidationError("match table " + match_file.string() + " not found; run `dvd match` first");
  data.matches = read_match_table(match_file);
  std::vector<FlowPair> truth;
  if (c.flow == FlowKind::Truth) {
    if (!p.flow_dir) throw ValidationError("truth flow requested but the manifest pair has no flow_dir");
    truth = read_flows(*p.flow_dir, std::max<Index>(data.hazy.size() - 1, 0));
  }
  data.flows = provide_flows(c.flow, data.predehazed, truth, c.blockmatch, a.flow_dir);

  fs::create_directories(a.out);
  {
    std::ofstream cfg(fs::path(a.out) / "train_config.json");
    cfg << train_config_to_json(c) << '\n';
  }
  const fs::path log_path = a.log.empty() ? fs::path(a.out) / "train_log.jsonl" : fs::path(a.log);
  std::ofstream log(log_path);
  if (!log) throw ValidationError("cannot write " + log_path.string());
  TrainHooks hooks;
  hooks.checkpoint_dir = fs::path(a.out);
  hooks.on_step = [&](Index step, const LossReport& r) {
    const std::string line = r.to_json(step);
    log << line << '\n';
    if (!a.quiet) std::cout << line << '\n';
  };
  const TrainResult r = train(data, c, hooks);
  emit({{"event", "train"},
        {"iterations", c.iterations},
        {"loss_drop", loss_drop(r.log)},
        {"checkpoint", (fs::path(a.out) / "final").generic_string()}});
  return 0;
}

struct DehazeArgs {
  std::string checkpoint, frames, out, flow = "blockmatch", flow_dir;
  bool predehazed = false;
};

int run_dehaze(const DehazeArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const FrameSequence input = read_sequence(a.frames);
  if (input.empty()) throw ValidationError("no frames in " + a.frames);
  const FrameSequence pre = a.predehazed ? input : predehaze_sequence(input, DcpDehazer());
  const FlowKind kind = flow_kind_from_string(a.flow);
  std::vector<FlowPair> truth;
  if (kind == FlowKind::Truth) {
    if (a.flow_dir.empty()) throw ValidationError("truth flow requested without synthesis metadata (--flow-dir)");
    truth = read_flows(a.flow_dir, pre.size() - 1);
  }
  const std::vector<FlowPair> flows = provide_flows(kind, pre, truth, BlockMatchOptions{}, a.flow_dir);
  const FrameSequence out = dehaze_sequence(ck.params, ck.network, pre, flows);
  write_sequence(out, a.out);
  emit({{"event", "dehaze"}, {"frames", out.size()}, {"out", a.out}});
  return 0;
}

struct EvalArgs {
  std::string outputs, clear, matches, truth, out;
};

int run_eval(const EvalArgs& a) {
  EvalReport r = evaluate(read_sequence(a.outputs), read_sequence(a.clear));
  if (!a.matches.empty() != !a.truth.empty()) throw ValidationError("--matches and --truth must be given together");
  if (!a.matches.empty()) {
    const MatchAccuracy acc = match_accuracy(read_match_table(a.matches), read_match_table(a.truth));
    r.has_match_accuracy = true;
    r.match_exact_rate = acc.exact_rate;
    r.match_mean_abs_error = acc.mean_abs_error;
  }
  const std::string json = r.to_json();
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw ValidationError("cannot write " + a.out);
    f << json << '\n';
  }
  std::cout << json << '\n';
  return 0;
}

struct GradcheckArgs {
  int seeds = GradcheckOptions{}.seeds;
  std::string only;
};

int run_gradcheck_cmd(const GradcheckArgs& a) {
  if (a.seeds < 1) throw ValidationError("--seeds must be >= 1");
  GradcheckOptions o;
  o.seeds = a.seeds;
  const auto start = std::chrono::steady_clock::now();
  const std::vector<GradcheckRow> rows = run_gradcheck(o, a.only);
  if (rows.empty()) throw ValidationError("no operator matches '" + a.only + "'");
  // wall time goes to stderr so stdout stays reproducible
  write_gradcheck_table(rows, std::cout, false);
  std::cerr << ojson{{"event", "gradcheck"},
                     {"operators", rows.size()},
                     {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}}
                   .dump()
            << '\n';
  for (const GradcheckRow& r : rows)
    if (!r.pass) return 2;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video dehazing with non-aligned references"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic hazy/clear pair with truth matches and flows");
  synth->add_option("--config", sa.config, "Scene JSON");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.seed, "Override the scene seed");
  synth->add_option("--beta", sa.beta, "Override the scattering coefficient");

  MatchArgs ma;
  auto* match = app.add_subcommand("match", "Run NRFM on every manifest pair");
  match->add_option("--manifest", ma.manifest, "Dataset manifest")->required();
  match->add_option("--out", ma.out, "Directory for pair_XXX.jsonl (default: <manifest dir>/matches)");
  match->add_flag("--unpaired", ma.unpaired, "Replace matches with random clear frames");
  match->add_option("--seed", ma.seed, "Shuffle seed for --unpaired");
  match->add_option("--embedder", ma.embedder, "chroma|conv");
  match->add_option("--embedder-weights", ma.embedder_weights, "Directory of stage0..4.dvdt for the conv embedder");
  match->add_option("--window-min", ma.window_min, "Minimum window length");
  match->add_option("--step-max", ma.step_max, "Maximum window advance");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train the two-frame dehazing network on one manifest pair");
  trn->add_option("--manifest", ta.manifest, "Dataset manifest")->required();
  trn->add_option("--pair", ta.pair, "Pair index");
  trn->add_option("--config", ta.config, "Train config JSON");
  trn->add_option("--matches", ta.matches, "Match table (default: output of `dvd match`)");
  trn->add_option("--out", ta.out, "Checkpoint root")->required();
  trn->add_option("--log", ta.log, "JSON-lines loss log (default: <out>/train_log.jsonl)");
  trn->add_option("--iterations", ta.iterations);
  trn->add_option("--lr", ta.lr);
  trn->add_option("--kernel", ta.kernel, "FCAS window size");
  trn->add_option("--levels", ta.levels, "Pyramid levels");
  trn->add_option("--seed", ta.seed);
  trn->add_option("--flow", ta.flow, "truth|blockmatch|file");
  trn->add_option("--flow-dir", ta.flow_dir, "Flow directory for --flow file");
  trn->add_flag("--quiet", ta.quiet, "Write losses only to the log file");

  DehazeArgs da;
  auto* dehaze = app.add_subcommand("dehaze", "Sequential two-frame inference");
  dehaze->add_option("--checkpoint", da.checkpoint, "Checkpoint directory")->required();
  dehaze->add_option("--frames", da.frames, "Hazy frame directory")->required();
  dehaze->add_option("--out", da.out, "Output frame directory")->required();
  dehaze->add_option("--flow", da.flow, "truth|blockmatch|file");
  dehaze->add_option("--flow-dir", da.flow_dir, "Flow directory for truth|file");
  dehaze->add_flag("--predehazed", da.predehazed, "Frames are already pre-dehazed");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM against clear frames");
  eval->add_option("--outputs", ea.outputs, "Output frame directory")->required();
  eval->add_option("--clear", ea.clear, "Clear frame directory")->required();
  eval->add_option("--matches", ea.matches, "Match table to score");
  eval->add_option("--truth", ea.truth, "Truth match table");
  eval->add_option("--out", ea.out, "Write the report JSON here too");

  GradcheckArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operator");
  grad->add_option("--seeds", ga.seeds);
  grad->add_option("--only", ga.only, "Substring filter on operator names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*match) return run_match(ma);
    if (*trn) return run_train(ta);
    if (*dehaze) return run_dehaze(da);
    if (*eval) return run_eval(ea);
    if (*grad) return run_gradcheck_cmd(ga);
  } catch (const NumericalError& e) {
    std::cerr << ojson{{"event", "error"}, {"kind", "numerical"}, {"message", e.what()}}.dump() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << ojson{{"event", "error"}, {"kind", "validation"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << ojson{{"event", "error"}, {"kind", "validation"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 1;
}
