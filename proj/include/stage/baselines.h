#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stage/metrics.h"
#include "stage/planner.h"

namespace stage {

// One full run of the planning pipeline: build, extract at the resolved
// epsilon, filter at the resolved d_min, and score. Every method and
// ablation funnels through this one code path.
struct RunOutcome {
  SearchTree tree;
  std::vector<Path> paths;  // post-filter
  MetricsReport report;
  double epsilon = 0.0;
  double d_min = 0.0;
};

RunOutcome run_stage(const PlannerConfig& cfg, const std::vector<StableState>& c_s,
                     const SceneSpec& scene, const EntropyParams& entropy = {},
                     ExecPolicy exec = {});

struct BaselineConfig {
  double goal_bias = 0.2;  // probability of drawing targets from C_s
  PlannerConfig planner;   // base configuration the deltas apply to
  // rrt_sim is defined with a single best action and no rejection; these
  // knobs exist so configuration-equivalence can be tested
  int rrt_n = 1;
  bool rrt_rejection = false;
  // predictive sampling
  int ps_horizon = 5;
  int ps_samples = 32;
  int ps_max_control_steps = 0;  // 0: the step budget is the only cap
};

// Named ablations of Alg. 1; each is the base config with one delta.
// Variants: stage, no_rejection, no_nbest, no_knn, uniform80.
PlannerConfig variant_config(const PlannerConfig& base, const std::string& variant);
const std::vector<std::string>& ablation_variants();

// Kinodynamic RRT with goal biasing: targets are stable states with
// probability goal_bias and uniform otherwise, nearest node only, one action
// per expansion, no rejection. Identical code path to run_stage.
RunOutcome run_rrt_sim(const BaselineConfig& cfg, const std::vector<StableState>& c_s,
                       const SceneSpec& scene, const EntropyParams& entropy = {},
                       ExecPolicy exec = {});

struct MpcResult {
  std::vector<SystemState> trajectory;  // includes the start state
  std::vector<ActionCommand> actions;
  bool success = false;
  long sim_steps = 0;
  double final_distance = 0.0;
};

// Receding-horizon predictive sampling: keep a nominal plan, try Gaussian
// perturbations of it, adopt the best, apply its first action. Succeeds when
// the weighted metric to goal drops below epsilon; gives up when the
// simulation-step budget runs out (recorded, not thrown).
MpcResult run_predictive_sampling(const BaselineConfig& cfg, const SystemState& start,
                                  const SystemState& goal, const SceneSpec& scene, double epsilon,
                                  long budget_steps, std::uint64_t seed, ExecPolicy exec = {});

struct PsPairOutcome {
  int start_id = -1;
  int goal_id = -1;
  MpcResult result;
};

struct PsSummary {
  int attempts = 0;
  int successes = 0;
  double success_rate_pct = 0.0;
  long total_steps = 0;
  std::vector<PsPairOutcome> pairs;
};

// All ordered (start, goal) pairs of C_s, each given an equal share of
// stage_total_steps, the simulation-step cost of the tree run it is compared
// against (budget parity in simulator steps).
PsSummary run_ps_all_pairs(const BaselineConfig& cfg, const std::vector<StableState>& c_s,
                           const SceneSpec& scene, double epsilon, long stage_total_steps,
                           std::uint64_t seed, ExecPolicy exec = {});

struct GridCell {
  std::string method;
  std::uint64_t seed = 0;
  MetricsReport report;
  TreeStats stats;
  std::vector<Path> paths;  // post-filter, for per-cell persistence
};

struct GridOptions {
  bool sweep_nk = false;            // n and k in {1,2,4,8,16}, other fixed at base
  std::vector<int> cs_sizes;        // optional |C_s| sweep via prefixes
  std::vector<int> nk_values{1, 2, 4, 8, 16};
};

// The five named variants (plus requested sweeps) for every seed. All cells
// share the base expansion budget; run_ablation_grid asserts that parity.
std::vector<GridCell> run_ablation_grid(const SceneSpec& scene,
                                        const std::vector<StableState>& c_s,
                                        const std::vector<std::uint64_t>& seeds,
                                        const PlannerConfig& base, const GridOptions& opt = {},
                                        const EntropyParams& entropy = {}, ExecPolicy exec = {});

// Mean over the cells that share a method name; optional metrics are averaged
// over the cells that have them and absent when none do.
struct GridMean {
  double path_count = 0.0;
  double coverage_pct = 0.0;
  std::optional<double> entropy_nats;
  std::optional<double> avg_hausdorff;
  int cells = 0;
};

GridMean mean_report(const std::vector<GridCell>& cells, const std::string& method);

}  // namespace stage
