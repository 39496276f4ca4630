#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stage/baselines.h"

namespace stage {

// One experiment, fully resolved: scene, method, budgets, seeds, outputs.
// Serialized as the header of every file the experiment writes, so any output
// can be reproduced from its own first line.
struct ExperimentConfig {
  std::string scene = "spheres_ramp";   // builtin name
  std::optional<SceneSpec> scene_spec;  // inline scene, overrides the name
  // stage, rrt_sim, predictive_sampling, or an ablation variant name
  std::string method = "stage";
  PlannerConfig planner;  // per-run seed comes from `seeds`, not planner.seed
  double goal_bias = 0.2;
  int ps_horizon = 5;
  int ps_samples = 32;
  // total simulator steps granted to the all-pairs MPC; 0 derives parity by
  // running the tree planner on the same seed and taking its step count
  long ps_budget_steps = 0;
  int m = 26;              // stable states to sample when no file is given
  int max_attempts = 200;  // projection attempts per stable state
  std::uint64_t cs_seed = 0;
  std::string cs_file;  // pre-sampled stable set (JSONL, header optional)
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::string output_dir = ".";
  bool emit_paths = true;
  bool emit_tree = false;
  bool emit_metrics = true;
  bool emit_adjacency = false;
  EntropyParams entropy;

  SceneSpec resolve_scene() const;         // throws ValidationError
  PlannerConfig method_planner() const;    // planner with the method's deltas
  BaselineConfig baseline_config() const;  // for rrt_sim / predictive_sampling
  void validate() const;
};

void to_json(json& j, const ExperimentConfig& c);
void from_json(const json& j, ExperimentConfig& c);

// --- output files ----------------------------------------------------------
// Every writer puts a single-line JSON header first: {"config": <config>} or
// {"config": <config>, "seed": <n>} for per-seed files. Readers skip it.

std::string stable_file_name(const ExperimentConfig& c);
std::string paths_file_name(const ExperimentConfig& c, std::uint64_t seed);
std::string tree_file_name(const ExperimentConfig& c, std::uint64_t seed);
std::string metrics_file_name(const ExperimentConfig& c);
std::string adjacency_csv_name(const ExperimentConfig& c);
std::string adjacency_ppm_name(const ExperimentConfig& c);

void write_stable_file(const std::string& file, const ExperimentConfig& c,
                       const std::vector<StableState>& states);
void write_paths_file(const std::string& file, const ExperimentConfig& c, std::uint64_t seed,
                      const std::vector<Path>& paths);

// Reads a JSONL file, tolerating (and returning) a leading config header.
std::vector<StableState> read_stable_file(const std::string& file,
                                          json* header_out = nullptr);
std::vector<Path> read_paths_file(const std::string& file, json* header_out = nullptr);

// --- stable set ------------------------------------------------------------

// cs_file when set, otherwise sample_stable_states(m, max_attempts, cs_seed).
std::vector<StableState> obtain_stable_states(const ExperimentConfig& c, const SceneSpec& scene,
                                              ExecPolicy exec = {});

// --- plan experiment -------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;  // what() of the per-seed failure, empty when ok
  MetricsReport report;
  TreeStats stats;              // tree methods only
  std::vector<Path> paths;      // retained diverse paths (MPC: successful pairs)
  double epsilon = 0.0;
  double d_min = 0.0;
  int root_stable_id = -1;      // -1 for the all-pairs MPC
  long mpc_budget_steps = 0;    // per-pair share, predictive_sampling only
};

struct PlanResult {
  std::vector<SeedRun> runs;
  std::vector<std::string> written;  // files emitted, in write order
};

// Runs cfg.method once per seed and writes the files selected by the emit
// flags. A failing seed is recorded in its SeedRun and does not stop the
// remaining seeds.
PlanResult run_plan_experiment(const ExperimentConfig& c, const std::vector<StableState>& c_s,
                               ExecPolicy exec = {});

// Metrics CSV text: "# config=<json>" line, the column header, one row per
// successful seed, and a final mean row (seed label "mean").
std::string metrics_csv_text(const ExperimentConfig& c, const std::vector<SeedRun>& runs);

// A parsed data row; numbers re-emit in the same shortest round-trip form
// they were written in, so emit(parse(text)) == text.
struct MetricsCsvRow {
  std::string scene;
  std::string method;
  std::string seed;  // a number or "mean"
  double count = 0.0;
  double coverage = 0.0;
  std::optional<double> entropy;
  std::optional<double> avg_hausdorff;
};

struct MetricsCsv {
  json config;
  std::vector<MetricsCsvRow> rows;
};

std::string emit_metrics_csv(const json& config, const std::vector<MetricsCsvRow>& rows);
MetricsCsv parse_metrics_csv(const std::string& text);  // throws ValidationError

// --- adjacency -------------------------------------------------------------

struct AdjacencyMatrix {
  std::vector<int> ids;                  // ascending stable ids, row/col labels
  std::vector<std::vector<int>> counts;  // counts[i][j]: paths from i to j

  int total() const;
  int row_sum(int id) const;  // throws UnknownGoalIdError for unknown ids
};

// Counts retained paths per (start_id, goal_id) over the supplied stable set.
// Throws UnknownGoalIdError when a path references an id outside the set.
AdjacencyMatrix build_adjacency(const std::vector<Path>& paths,
                                const std::vector<StableState>& c_s);

// CSV: label row "start\\goal,<id>,...", then one row per start id.
std::string adjacency_csv_text(const ExperimentConfig& c, const AdjacencyMatrix& m);

// Binary portable pixmap, one pixel per cell: zero counts in a sentinel blue,
// positive counts on a linear white-to-red ramp; config embedded as a header
// comment.
void write_adjacency_ppm(const std::string& file, const ExperimentConfig& c,
                         const AdjacencyMatrix& m);

}  // namespace stage
