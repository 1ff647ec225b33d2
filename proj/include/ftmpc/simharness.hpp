#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <thread>

#include "ftmpc/controller.hpp"

namespace ftmpc {

// ---------------------------------------------------------------------------
// Closed-loop simulation, finite-time detection, feasibility-region scans and
// bounded-disturbance Monte Carlo.
// ---------------------------------------------------------------------------

/// Deterministic splitmix64 stream; uniforms are derived from raw bits so
/// results are identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  double uniform01() { return (next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

 private:
  std::uint64_t state_;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng r(seed ^ (0xa0761d6478bd642full * (stream + 1)));
  return r.next_u64();
}

struct Trajectory {
  std::vector<Vec> states;            // steps + 1 entries (first = x0)
  std::vector<Vec> inputs;            // one per executed step
  std::vector<double> costs;          // per-step optimal shifted-window cost
  std::vector<SolveStatus> statuses;
  std::vector<int> iterations;        // per-step solver iterations
  std::optional<int> settle_step;
  bool truncated_infeasible = false;
  double max_violation = 0.0;         // against the supplied box, if any
};

/// Minimal T such that ||x(k)||_inf <= tol for every k >= T, with at least
/// n_dim recorded steps after T to witness that the state stays.
inline std::optional<int> finite_time_check(const std::vector<Vec>& states, int n_dim,
                                            double tol = 1e-9) {
  const int last = static_cast<int>(states.size()) - 1;
  int first_bad = -1;
  for (int k = 0; k <= last; ++k)
    if (norm_inf(states[k]) > tol) first_bad = k;
  const int t = first_bad + 1;
  if (t > last) return std::nullopt;
  if (last - t < n_dim) return std::nullopt;
  return t;
}

inline std::optional<int> finite_time_check(const Trajectory& traj, int n_dim, double tol = 1e-9) {
  return finite_time_check(traj.states, n_dim, tol);
}

struct DisturbanceSpec {
  double bound = 0.0;       // |w_i| <= bound, added to the input channel
  std::uint64_t seed = 0;
};

using Stepper = std::function<ControlStep(const Vec&)>;
using PlantStep = std::function<Vec(const Vec&, const Vec&)>;

/// Iterates measure -> solve -> apply. A disturbance spec adds seeded uniform
/// noise on the input channel (x+ = f(x, u + w)); recorded inputs are the
/// controls themselves. An InfeasibleAtStateError truncates the trajectory
/// and flags it.
inline Trajectory simulate(const Stepper& stepper, const PlantStep& plant,
                           const BoxConstraintSet* box, const Vec& x0, int steps,
                           int n_dim, const DisturbanceSpec* disturbance = nullptr,
                           double settle_tol = 1e-9) {
  if (steps < 1) throw DimensionError("simulate: steps must be >= 1");
  Trajectory traj;
  traj.states.push_back(x0);
  std::optional<Rng> rng;
  if (disturbance) rng.emplace(disturbance->seed);
  Vec x = x0;
  for (int k = 0; k < steps; ++k) {
    ControlStep step;
    try {
      step = stepper(x);
    } catch (const InfeasibleAtStateError&) {
      traj.truncated_infeasible = true;
      break;
    }
    traj.inputs.push_back(step.u);
    traj.costs.push_back(step.predicted_cost);
    traj.statuses.push_back(step.status);
    traj.iterations.push_back(step.solve_iterations);
    Vec u_eff = step.u;
    if (disturbance)
      for (double& ui : u_eff) ui += rng->uniform(-disturbance->bound, disturbance->bound);
    x = plant(x, u_eff);
    traj.states.push_back(x);
    if (box) {
      traj.max_violation = std::max(traj.max_violation, box->input_violation(step.u));
      traj.max_violation = std::max(traj.max_violation, box->state_violation(x));
    }
  }
  traj.settle_step = finite_time_check(traj.states, n_dim, settle_tol);
  return traj;
}

// ---------------------------------------------------------------------------
// Feasibility-region scan
// ---------------------------------------------------------------------------

enum class CellLabel { FeasibleBoth, FeasibleProposedOnly, FeasibleBaselineOnly, Infeasible };

inline const char* to_string(CellLabel l) {
  switch (l) {
    case CellLabel::FeasibleBoth: return "both";
    case CellLabel::FeasibleProposedOnly: return "proposed_only";
    case CellLabel::FeasibleBaselineOnly: return "baseline_only";
    case CellLabel::Infeasible: return "infeasible";
  }
  return "?";
}

struct GridSpec {
  Vec lo, hi;
  std::vector<int> resolution;  // points per axis, endpoints included

  int cell_count() const {
    int c = 1;
    for (int r : resolution) c *= r;
    return c;
  }

  Vec point(int flat_index) const {
    const int dims = static_cast<int>(resolution.size());
    Vec x(dims);
    for (int d = dims - 1; d >= 0; --d) {
      const int r = resolution[d];
      const int idx = flat_index % r;
      flat_index /= r;
      x[d] = r > 1 ? lo[d] + (hi[d] - lo[d]) * idx / (r - 1) : 0.5 * (lo[d] + hi[d]);
    }
    return x;
  }
};

struct FeasibilityMap {
  GridSpec grid;
  std::vector<CellLabel> labels;  // row-major over the grid
  int count_both = 0;
  int count_proposed_only = 0;
  int count_baseline_only = 0;    // containment says this stays zero
  int count_infeasible = 0;

  int proposed_total() const { return count_both + count_proposed_only; }
  int baseline_total() const { return count_both + count_baseline_only; }
};

/// Labels every grid point by feasibility under the proposed and baseline
/// programs. Cells are independent, so they are evaluated concurrently;
/// labels land in a preallocated row-major array, keeping the output
/// deterministic.
inline FeasibilityMap feasibility_scan(const CondensedProgram& proposed,
                                       const CondensedProgram& baseline,
                                       const GridSpec& grid, int threads = 0) {
  FeasibilityMap map;
  map.grid = grid;
  const int cells = grid.cell_count();
  map.labels.assign(cells, CellLabel::Infeasible);
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= cells) return;
      const Vec x = grid.point(i);
      const bool fp = check_feasible(proposed, x);
      const bool fb = check_feasible(baseline, x);
      map.labels[i] = fp ? (fb ? CellLabel::FeasibleBoth : CellLabel::FeasibleProposedOnly)
                         : (fb ? CellLabel::FeasibleBaselineOnly : CellLabel::Infeasible);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (CellLabel l : map.labels) {
    switch (l) {
      case CellLabel::FeasibleBoth: ++map.count_both; break;
      case CellLabel::FeasibleProposedOnly: ++map.count_proposed_only; break;
      case CellLabel::FeasibleBaselineOnly: ++map.count_baseline_only; break;
      case CellLabel::Infeasible: ++map.count_infeasible; break;
    }
  }
  return map;
}

// ---------------------------------------------------------------------------
// Bounded-disturbance Monte Carlo
// ---------------------------------------------------------------------------

struct MonteCarloSummary {
  std::vector<Trajectory> runs;
  double tail_sup_norm = 0.0;   // max over runs of max_{k >= steps/2} ||x(k)||_inf
  double max_input_violation = 0.0;
  int infeasible_runs = 0;
};

/// Seeded, reproducible batch of disturbed closed-loop runs. Each run gets a
/// fresh controller (via make_stepper) and a derived disturbance stream, so
/// identical (seed, config) pairs give bit-identical summaries.
inline MonteCarloSummary monte_carlo(const std::function<Stepper()>& make_stepper,
                                     const PlantStep& plant, const BoxConstraintSet* box,
                                     const Vec& x0, int runs, int steps, std::uint64_t seed,
                                     double w_bound, int n_dim) {
  if (runs < 1) throw DimensionError("monte_carlo: runs must be >= 1");
  MonteCarloSummary summary;
  for (int r = 0; r < runs; ++r) {
    DisturbanceSpec spec{w_bound, derive_seed(seed, static_cast<std::uint64_t>(r))};
    Stepper stepper = make_stepper();
    Trajectory traj = simulate(stepper, plant, box, x0, steps, n_dim, &spec);
    if (traj.truncated_infeasible) ++summary.infeasible_runs;
    const int k_tail = steps / 2;
    for (int k = k_tail; k < static_cast<int>(traj.states.size()); ++k)
      summary.tail_sup_norm = std::max(summary.tail_sup_norm, norm_inf(traj.states[k]));
    if (box)
      for (const Vec& u : traj.inputs)
        summary.max_input_violation = std::max(summary.max_input_violation, box->input_violation(u));
    summary.runs.push_back(std::move(traj));
  }
  return summary;
}

}  // namespace ftmpc
