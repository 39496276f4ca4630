#include "stage/metrics.h"

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "stage/errors.h"

namespace stage {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

double coverage(const SearchTree& tree, double epsilon) {
  if (epsilon <= 0.0) throw ValidationError("epsilon must be > 0");
  int goals = 0;
  int reached = 0;
  for (int j = 0; j < tree.registry.size(); ++j) {
    if (tree.registry.states[static_cast<size_t>(j)].id == tree.root_stable_id) continue;
    ++goals;
    if (std::sqrt(tree.registry.best_sq_distance[static_cast<size_t>(j)]) < epsilon) ++reached;
  }
  if (goals == 0) return 100.0;  // no goals to miss
  return 100.0 * reached / goals;
}

double coverage(const std::vector<Path>& paths, const std::vector<StableState>& c_s,
                int root_stable_id) {
  int goals = 0;
  for (const StableState& s : c_s)
    if (s.id != root_stable_id) ++goals;
  if (goals == 0) return 100.0;
  std::set<int> reached;
  for (const Path& p : paths) reached.insert(p.goal_id);
  return 100.0 * static_cast<int>(reached.size()) / goals;
}

int state_dimension(const SceneSpec& scene) {
  int d = 2 * scene.robot_dof();  // positions and velocities
  for (const ObjectSpec& o : scene.objects) {
    d += 9;  // position, linear velocity, angular velocity
    if (o.kind == ShapeKind::Box) d += 3;
  }
  return d;
}

double ball_log_volume(int d) {
  return 0.5 * d * std::log(M_PI) - std::lgamma(0.5 * d + 1.0);
}

double kl_entropy(const std::vector<SystemState>& pool, const StateWeights& w, int d,
                  const EntropyParams& params, Rng& rng) {
  const int n = params.sample_n;
  if (static_cast<int>(pool.size()) < n)
    throw InsufficientStatesError("entropy pool has " + std::to_string(pool.size()) +
                                  " states, need " + std::to_string(n));
  if (params.k < 1 || params.k >= n) throw ValidationError("need 1 <= k < sample_n");

  const double base = boost::math::digamma(double(n)) - boost::math::digamma(double(params.k)) +
                      ball_log_volume(d);

  std::vector<size_t> order(pool.size());
  double total = 0.0;
  for (int rep = 0; rep < params.repeats; ++rep) {
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);

    double log_sum = 0.0;
    std::vector<double> dists(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j)
        dists[static_cast<size_t>(j)] =
            i == j ? std::numeric_limits<double>::infinity()
                   : weighted_distance(pool[order[static_cast<size_t>(i)]],
                                       pool[order[static_cast<size_t>(j)]], w);
      std::nth_element(dists.begin(), dists.begin() + (params.k - 1), dists.end());
      const double eps = dists[static_cast<size_t>(params.k - 1)];
      if (eps <= 0.0)
        throw DegenerateSampleError("duplicate states in entropy sample (eps_i = 0)");
      log_sum += std::log(eps);
    }
    total += base + (double(d) / n) * log_sum;
  }
  return total / params.repeats;
}

std::optional<double> avg_hausdorff(const std::vector<Path>& paths, const StateWeights& w) {
  std::map<int, std::vector<size_t>> by_goal;
  for (size_t i = 0; i < paths.size(); ++i) by_goal[paths[i].goal_id].push_back(i);

  double goal_sum = 0.0;
  int goal_count = 0;
  for (const auto& [goal, idxs] : by_goal) {
    (void)goal;
    if (idxs.size() < 2) continue;
    double pair_sum = 0.0;
    int pairs = 0;
    for (size_t a = 0; a < idxs.size(); ++a)
      for (size_t b = a + 1; b < idxs.size(); ++b) {
        pair_sum += hausdorff(paths[idxs[a]], paths[idxs[b]], w);
        ++pairs;
      }
    goal_sum += pair_sum / pairs;
    ++goal_count;
  }
  if (goal_count == 0) return std::nullopt;
  return goal_sum / goal_count;
}

namespace {

// Everything below coverage is a function of the retained paths alone; shared
// between the tree-based and file-based report builders.
void fill_path_metrics(MetricsReport& r, const std::vector<Path>& retained,
                       const StateWeights& w, const SceneSpec& scene,
                       const EntropyParams& params, std::uint64_t seed) {
  std::vector<SystemState> pool;
  for (const Path& p : retained)
    for (const SystemState& s : p.states) pool.push_back(s);
  // shared tree prefixes repeat verbatim across paths; exact duplicates
  // would zero out nearest-neighbor distances
  std::vector<SystemState> unique_pool;
  for (const SystemState& s : pool) {
    bool dup = false;
    for (const SystemState& u : unique_pool)
      if (u == s) {
        dup = true;
        break;
      }
    if (!dup) unique_pool.push_back(s);
  }
  if (unique_pool.size() < pool.size())
    r.notes.push_back("entropy pool: dropped " +
                      std::to_string(pool.size() - unique_pool.size()) +
                      " duplicate states of " + std::to_string(pool.size()));

  if (static_cast<int>(unique_pool.size()) < params.sample_n) {
    r.notes.push_back("entropy absent: pool has " + std::to_string(unique_pool.size()) +
                      " states, need " + std::to_string(params.sample_n));
  } else {
    Rng rng(derive_seed(seed, streams::kEntropy));
    try {
      r.entropy_nats = kl_entropy(unique_pool, w, state_dimension(scene), params, rng);
      r.notes.push_back("entropy distances use the planner's weighted metric");
    } catch (const DegenerateSampleError& e) {
      r.notes.push_back(std::string("entropy absent: ") + e.what());
    }
  }

  r.avg_hausdorff = avg_hausdorff(retained, w);
  if (!r.avg_hausdorff) r.notes.push_back("avg_hausdorff absent: no goal has two paths");
}

}  // namespace

MetricsReport compute_metrics(const SearchTree& tree, const std::vector<Path>& retained,
                              const SceneSpec& scene, double epsilon,
                              const EntropyParams& params, std::uint64_t seed) {
  MetricsReport r;
  r.path_count = static_cast<int>(retained.size());
  r.coverage_pct = coverage(tree, epsilon);
  fill_path_metrics(r, retained, tree.registry.weights, scene, params, seed);
  return r;
}

MetricsReport metrics_from_paths(const std::vector<Path>& paths,
                                 const std::vector<StableState>& c_s, int root_stable_id,
                                 const SceneSpec& scene, const StateWeights& w,
                                 const EntropyParams& params, std::uint64_t seed) {
  MetricsReport r;
  r.path_count = static_cast<int>(paths.size());
  r.coverage_pct = coverage(paths, c_s, root_stable_id);
  fill_path_metrics(r, paths, w, scene, params, seed);
  return r;
}

std::string metrics_csv_header() {
  return "scene,method,seed,count,coverage,entropy,avg_hausdorff";
}

std::string metrics_csv_row(const std::string& scene, const std::string& method,
                            const std::string& seed_label, double count, double coverage,
                            const std::optional<double>& entropy,
                            const std::optional<double>& avg_hausdorff) {
  std::string row =
      scene + "," + method + "," + seed_label + "," + fmt_double(count) + "," +
      fmt_double(coverage) + ",";
  if (entropy) row += fmt_double(*entropy);
  row += ",";
  if (avg_hausdorff) row += fmt_double(*avg_hausdorff);
  return row;
}

std::string metrics_csv_row(const std::string& scene, const std::string& method,
                            std::uint64_t seed, const MetricsReport& r) {
  return metrics_csv_row(scene, method, std::to_string(seed), double(r.path_count),
                         r.coverage_pct, r.entropy_nats, r.avg_hausdorff);
}

void to_json(json& j, const MetricsReport& r) {
  j = json{{"path_count", r.path_count},
           {"coverage_pct", r.coverage_pct},
           {"notes", r.notes}};
  if (r.entropy_nats) j["entropy_nats"] = *r.entropy_nats;
  if (r.avg_hausdorff) j["avg_hausdorff"] = *r.avg_hausdorff;
}

void from_json(const json& j, MetricsReport& r) {
  j.at("path_count").get_to(r.path_count);
  j.at("coverage_pct").get_to(r.coverage_pct);
  r.notes = j.value("notes", std::vector<std::string>{});
  if (j.contains("entropy_nats")) r.entropy_nats = j.at("entropy_nats").get<double>();
  if (j.contains("avg_hausdorff")) r.avg_hausdorff = j.at("avg_hausdorff").get<double>();
}

}  // namespace stage
