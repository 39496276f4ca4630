#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stage/distance.h"
#include "stage/rng.h"
#include "stage/sim.h"
#include "stage/stability.h"

namespace stage {

struct TreeNode {
  int id = 0;
  SystemState state;
  int parent = -1;  // -1 marks the root
  std::optional<ActionCommand> incoming_action;
  int depth = 0;
  bool active = true;
  // iteration bookkeeping, used by the audit tests
  int created_at = -1;
  int disabled_at = -1;
};

// Bounded max-heap of (squared distance, node id), lexicographic, holding the
// k nearest tree nodes seen so far. The root entry is the largest kept pair,
// so a closer newcomer evicts it in O(log k).
class BoundedMaxHeap {
 public:
  explicit BoundedMaxHeap(int k) : k_(k) {}

  void offer(double d2, int id);
  const std::vector<std::pair<double, int>>& entries() const { return entries_; }
  int capacity() const { return k_; }

 private:
  int k_;
  std::vector<std::pair<double, int>> entries_;
};

// C_s plus the per-stable-state nearest-node bookkeeping that makes node
// selection a constant-time heap read.
struct StableRegistry {
  std::vector<StableState> states;
  std::vector<BoundedMaxHeap> heaps;
  std::vector<double> best_sq_distance;  // smallest squared node distance seen
  StateWeights weights;

  StableRegistry(std::vector<StableState> c_s, int k, const StateWeights& w);

  int size() const { return static_cast<int>(states.size()); }
};

struct PlannerConfig {
  int n_max = 2500;       // expansion-loop iterations
  int m = 0;              // |C_s|; 0 means "take it from the supplied set"
  int k = 16;             // nearest neighbors per stable state
  int n = 16;             // best actions kept per expansion
  int n_candidates = 64;  // actions sampled per expansion
  double epsilon = 0.0;   // goal-reach distance; 0 defers to scene default
  double d_min = 0.0;     // minimal path difference; 0 defers to epsilon
  StateWeights weights;
  double stable_sample_prob = 1.0;  // target draws from C_s vs uniform
  bool node_rejection = true;
  std::uint64_t seed = 0;
  double action_duration = 0.25;  // seconds each candidate action is held
  double progress_tol = 1e-6;     // required squared-distance improvement
  // compare candidate progress against the per-stable-state best distance
  // instead of the expanding node's own distance
  bool rejection_against_best = false;

  void validate() const;  // throws ValidationError
};

// Goal-reach threshold used when PlannerConfig.epsilon is 0: five percent of
// the scene's workspace diagonal under the weighted metric's object scale.
double default_epsilon(const SceneSpec& scene, const StateWeights& w);

struct Path {
  std::vector<SystemState> states;  // root first
  std::vector<ActionCommand> actions;
  int start_id = -1;  // stable id of the root state
  int goal_id = -1;
  double terminal_distance = 0.0;
  int node_id = -1;  // leaf the path was read off
};

void to_json(json& j, const Path& p);
void from_json(const json& j, Path& p);

struct TreeStats {
  int iterations = 0;
  int expansions = 0;       // iterations that inserted children
  int rejections = 0;       // nodes disabled
  int skipped_no_nodes = 0;  // every near candidate inactive
  int skipped_diverged = 0;  // all candidate rollouts diverged
  long sim_steps = 0;        // physics substeps consumed
};

struct SearchTree {
  std::vector<TreeNode> nodes;
  StableRegistry registry;
  int root_stable_id = -1;  // x0's id, excluded from the goal set
  TreeStats stats;
};

// A target drawn for one iteration: either a tracked stable state
// (stable_index is its registry position) or an untracked uniform
// configuration (stable_index = -1, no heap bookkeeping, no goal test).
struct Target {
  SystemState state;
  int stable_index = -1;
};

// Uniform configuration: robots anywhere in their bounds, objects anywhere
// in the workspace with uniform orientation, zero velocities.
SystemState sample_uniform_state(const SceneSpec& scene, Rng& rng);

Target select_target(const StableRegistry& registry, const SceneSpec& scene, Rng& rng,
                     double stable_sample_prob);

// The ≤ k nearest nodes recorded for a tracked stable state, filtered to
// active nodes. Constant-time heap read; ids in ascending order.
std::vector<int> k_nearest(const SearchTree& tree, int target_id);

// Nearest active nodes to an arbitrary state by linear scan (used for
// untracked uniform targets).
std::vector<int> k_nearest_scan(const SearchTree& tree, const SystemState& target, int k,
                                const StateWeights& w);

// Folds a freshly inserted node into every stable state's heap and best
// distance. O(m log k).
void update_knn(StableRegistry& registry, const TreeNode& node);

// Zero-mean Gaussian commanded velocities, sigma = half max speed, clamped
// to the speed limit; one entry per robot.
std::vector<ActionCommand> sample_candidate_actions(const SceneSpec& scene, int n_candidates,
                                                    double duration, Rng& rng);

struct ScoredAction {
  ActionCommand action;
  SystemState end_state;
  double sq_distance = 0.0;  // to the expansion target
};

struct ExpansionResult {
  std::vector<ScoredAction> best;  // ascending (distance, candidate index)
  long sim_steps = 0;              // substeps over all candidates, kept or not
};

// Samples n_candidates actions from x_near, simulates each, and returns the
// n whose end states land closest to x_target (ties broken by candidate
// index). Diverged rollouts are discarded; if none survive, throws
// AllDivergedError (carrying the substeps burned).
ExpansionResult optimize_actions(const SystemState& x_near, const SystemState& x_target, int n,
                                 int n_candidates, const SceneSpec& scene, const PlannerConfig& cfg,
                                 Rng& rng, ExecPolicy exec = {});

// True iff some candidate end state is closer to some stable state than the
// expanding node is (squared distances, progress_tol margin). With
// cfg.rejection_against_best the comparison is against the registry's best
// distance for that stable state instead.
bool reduces_distance(const std::vector<ScoredAction>& candidates, const TreeNode& x_near,
                      const StableRegistry& registry, const PlannerConfig& cfg);

// Alg. 1: runs exactly cfg.n_max iterations of target sampling, k-NN node
// selection, n-best expansion and (optionally) node rejection. Reproducible
// from cfg.seed at any worker count.
SearchTree build_tree(const PlannerConfig& cfg, const std::vector<StableState>& c_s,
                      const SceneSpec& scene, ExecPolicy exec = {});

// Undirected Hausdorff distance between the paths' state sets under the
// weighted metric (square root of the squared form, so it is a metric).
double hausdorff(const Path& p, const Path& q, const StateWeights& w);

// Every (node, stable state != x0) pair within epsilon yields the node's
// root path tagged with that goal. Disabled nodes participate.
std::vector<Path> extract_paths(const SearchTree& tree, double epsilon);

// Per goal id independently: visit the paths in random order and keep one
// iff its Hausdorff distance to every previously kept same-goal path exceeds
// d_min. Groups are processed in ascending goal order, each shuffled with
// `rng`, so replays are exact.
std::vector<Path> remove_redundant(const std::vector<Path>& paths, double d_min, Rng& rng,
                                   const StateWeights& w);

// JSONL persistence: one path per line.
void write_paths_jsonl(const std::string& path, const std::vector<Path>& paths);
std::vector<Path> read_paths_jsonl(const std::string& path);

// Debug dump of nodes and edges, one node per line.
void dump_tree_jsonl(const std::string& path, const SearchTree& tree);
void dump_tree_jsonl(std::ostream& os, const SearchTree& tree);

void to_json(json& j, const StateWeights& w);
void from_json(const json& j, StateWeights& w);
void to_json(json& j, const PlannerConfig& c);
void from_json(const json& j, PlannerConfig& c);

}  // namespace stage
