#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stage/planner.h"

namespace stage {

struct MetricsReport {
  int path_count = 0;
  double coverage_pct = 0.0;
  std::optional<double> entropy_nats;
  std::optional<double> avg_hausdorff;
  std::vector<std::string> notes;  // reasons for absent fields, pool handling
};

void to_json(json& j, const MetricsReport& r);
void from_json(const json& j, MetricsReport& r);

// Percentage of goal stable states (C_s minus the root's) with at least one
// tree node within epsilon. Reads the registry's best distances, so it is
// O(m) after the build.
double coverage(const SearchTree& tree, double epsilon);

// Same number recovered from extracted paths: the redundancy filter always
// keeps at least one path per reached goal, so distinct goal ids suffice.
double coverage(const std::vector<Path>& paths, const std::vector<StableState>& c_s,
                int root_stable_id);

// Degrees of freedom spanned by a scene's states: robot positions and
// velocities plus per-object position, linear and angular velocity, and for
// boxes the three rotational degrees (sphere orientations are pinned).
int state_dimension(const SceneSpec& scene);

// log volume of the unit d-ball, log(pi^(d/2) / Gamma(d/2 + 1))
double ball_log_volume(int d);

struct EntropyParams {
  int sample_n = 100;
  int k = 10;
  int repeats = 10;

  friend void to_json(json& j, const EntropyParams& p) {
    j = json{{"sample_n", p.sample_n}, {"k", p.k}, {"repeats", p.repeats}};
  }
  friend void from_json(const json& j, EntropyParams& p) {
    EntropyParams d;
    p.sample_n = j.value("sample_n", d.sample_n);
    p.k = j.value("k", d.k);
    p.repeats = j.value("repeats", d.repeats);
  }
};

// Kozachenko-Leonenko estimate over repeated subsamples:
//   H = psi(N) - psi(k) + log V_d + (d/N) * sum_i log eps_i
// with eps_i the weighted-metric distance from sample point i to its k-th
// nearest neighbor within the sample, averaged over `repeats` draws without
// replacement. Throws InsufficientStatesError when the pool is smaller than
// sample_n and DegenerateSampleError when some eps_i is zero (duplicates).
// This digamma form is one of several variants differing by additive
// constants; estimates are comparable across runs of this code only.
double kl_entropy(const std::vector<SystemState>& pool, const StateWeights& w, int d,
                  const EntropyParams& params, Rng& rng);

// Mean pairwise Hausdorff distance among same-goal paths, averaged over the
// goals with at least two paths; absent when no goal qualifies.
std::optional<double> avg_hausdorff(const std::vector<Path>& paths, const StateWeights& w);

// Full report over one run's retained paths. The entropy pool is every state
// on the retained paths, de-duplicated (exact matches would degenerate the
// estimator); absent metrics carry a note. Pure function of its inputs.
MetricsReport compute_metrics(const SearchTree& tree, const std::vector<Path>& retained,
                              const SceneSpec& scene, double epsilon,
                              const EntropyParams& params, std::uint64_t seed);

// Same report rebuilt from persisted paths alone (no tree); coverage counts
// the goal states reached by at least one path.
MetricsReport metrics_from_paths(const std::vector<Path>& paths,
                                 const std::vector<StableState>& c_s, int root_stable_id,
                                 const SceneSpec& scene, const StateWeights& w,
                                 const EntropyParams& params, std::uint64_t seed);

// CSV row protocol shared by the harness and the baselines: doubles printed
// shortest-round-trip, absent metrics as empty cells.
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& scene, const std::string& method,
                            std::uint64_t seed, const MetricsReport& r);
// Free-form seed label and fractional count, for aggregate rows. Numbers use
// the shortest round-trip decimal form, so parse -> re-emit is the identity.
std::string metrics_csv_row(const std::string& scene, const std::string& method,
                            const std::string& seed_label, double count, double coverage,
                            const std::optional<double>& entropy,
                            const std::optional<double>& avg_hausdorff);

}  // namespace stage
