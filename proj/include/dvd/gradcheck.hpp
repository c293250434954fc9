#pragma once

// Central finite-difference verification of every tape operator and of the
// network and loss graphs built from them.

#include "dvd/autodiff.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

namespace dvd {

struct GradcheckOptions {
  int seeds = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Entries compared per seed, drawn uniformly over inputs then positions.
  Index entries = 16;
  /// Gradients smaller than this are compared in absolute terms.
  double floor = 1e-3;
  std::uint64_t seed = 0x67726164;
};

/// Builds the graph under test from tape leaves; any output shape.
using GraphFn = std::function<Var(const std::vector<Var>& inputs)>;

struct GradcheckStats {
  double max_rel_error = 0;
  Index checked = 0;
  /// Entries within one step of a kink (max, abs, clamp, integer sample
  /// positions) are detected by disagreeing step sizes and redrawn.
  Index redrawn = 0;
};

/// |analytic − numeric| / max(|analytic|, |numeric|, floor) for a random
/// projection ⟨R, f(inputs)⟩ of the output, over `options.entries` entries.
GradcheckStats check_gradient(const GraphFn& f, const std::vector<Tensor>& inputs, std::mt19937_64& rng,
                              const GradcheckOptions& options = {});

struct GradcheckRow {
  std::string op;
  int seeds = 0;
  GradcheckStats stats;
  double seconds = 0;
  bool pass = false;
};

/// Runs the full operator suite; `only` restricts it to operators whose name
/// contains the string.
std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& options = {}, const std::string& only = {});
/// Without `timings` the table is a pure function of the options.
void write_gradcheck_table(const std::vector<GradcheckRow>& rows, std::ostream& out, bool timings = true);

}  // namespace dvd
