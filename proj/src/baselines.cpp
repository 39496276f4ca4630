#include "stage/baselines.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "stage/errors.h"
#include "stage/geometry.h"

namespace stage {

RunOutcome run_stage(const PlannerConfig& cfg, const std::vector<StableState>& c_s,
                     const SceneSpec& scene, const EntropyParams& entropy, ExecPolicy exec) {
  cfg.validate();
  RunOutcome out{build_tree(cfg, c_s, scene, exec), {}, {}, 0.0, 0.0};
  out.epsilon = cfg.epsilon > 0 ? cfg.epsilon : default_epsilon(scene, cfg.weights);
  out.d_min = cfg.d_min > 0 ? cfg.d_min : out.epsilon;
  std::vector<Path> raw = extract_paths(out.tree, out.epsilon);
  Rng filter_rng(derive_seed(cfg.seed, streams::kShuffles));
  out.paths = remove_redundant(raw, out.d_min, filter_rng, cfg.weights);
  out.report = compute_metrics(out.tree, out.paths, scene, out.epsilon, entropy, cfg.seed);
  return out;
}

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names{"stage", "no_rejection", "no_nbest", "no_knn",
                                              "uniform80"};
  return names;
}

PlannerConfig variant_config(const PlannerConfig& base, const std::string& variant) {
  PlannerConfig cfg = base;
  if (variant == "stage") {
    // the reference configuration itself
  } else if (variant == "no_rejection") {
    cfg.node_rejection = false;
  } else if (variant == "no_nbest") {
    cfg.n = 1;
  } else if (variant == "no_knn") {
    cfg.k = 1;
  } else if (variant == "uniform80") {
    cfg.stable_sample_prob = 0.2;
  } else {
    throw ValidationError("unknown ablation variant: " + variant);
  }
  return cfg;
}

RunOutcome run_rrt_sim(const BaselineConfig& cfg, const std::vector<StableState>& c_s,
                       const SceneSpec& scene, const EntropyParams& entropy, ExecPolicy exec) {
  if (cfg.goal_bias < 0.0 || cfg.goal_bias > 1.0)
    throw ValidationError("goal_bias must be in [0,1]");
  PlannerConfig c = cfg.planner;
  c.k = 1;
  c.n = cfg.rrt_n;
  c.node_rejection = cfg.rrt_rejection;
  c.stable_sample_prob = cfg.goal_bias;
  return run_stage(c, c_s, scene, entropy, exec);
}

namespace {

// Gaussian perturbation of a plan, per-robot sigma = half max speed, clamped
// to the speed limit; the same action distribution the tree planner samples.
std::vector<ActionCommand> perturb_plan(const std::vector<ActionCommand>& plan,
                                        const SceneSpec& scene, Rng& rng) {
  std::vector<ActionCommand> out = plan;
  for (ActionCommand& a : out) {
    for (size_t r = 0; r < a.robot_target_vel.size(); ++r) {
      const double sigma = 0.5 * scene.robots[r].max_speed;
      Vec3 v = a.robot_target_vel[r];
      for (int d = 0; d < 3; ++d) v(d) += sigma * rng.normal();
      a.robot_target_vel[r] = clamp_norm(v, scene.robots[r].max_speed);
    }
  }
  return out;
}

}  // namespace

MpcResult run_predictive_sampling(const BaselineConfig& cfg, const SystemState& start,
                                  const SystemState& goal, const SceneSpec& scene, double epsilon,
                                  long budget_steps, std::uint64_t seed, ExecPolicy exec) {
  if (cfg.ps_horizon < 1) throw ValidationError("ps_horizon must be >= 1");
  if (cfg.ps_samples < 1) throw ValidationError("ps_samples must be >= 1");
  if (epsilon <= 0) throw ValidationError("epsilon must be positive");
  if (budget_steps < 0) throw ValidationError("budget_steps must be >= 0");

  const StateWeights& w = cfg.planner.weights;
  const double duration = cfg.planner.action_duration;
  const long spa = std::max<long>(1, std::lround(duration / scene.dt));
  // worst-case simulator cost of one control step: every candidate plan
  // rolled out to the full horizon (divergence only makes it cheaper)
  const long step_cost = static_cast<long>(cfg.ps_samples + 1) * cfg.ps_horizon * spa;

  MpcResult res;
  res.trajectory.push_back(start);
  res.final_distance = weighted_distance(start, goal, w);
  if (res.final_distance < epsilon) {
    res.success = true;
    return res;
  }

  Rng rng(derive_seed(seed, streams::kMpc));
  SystemState current = start;
  std::vector<ActionCommand> nominal(static_cast<size_t>(cfg.ps_horizon),
                                     zero_action(scene, duration));

  int control_steps = 0;
  while (res.sim_steps + step_cost <= budget_steps &&
         (cfg.ps_max_control_steps == 0 || control_steps < cfg.ps_max_control_steps)) {
    std::vector<std::vector<ActionCommand>> plans;
    plans.reserve(static_cast<size_t>(cfg.ps_samples) + 1);
    plans.push_back(nominal);  // keeping the incumbent guards against regressions
    for (int s = 0; s < cfg.ps_samples; ++s) plans.push_back(perturb_plan(nominal, scene, rng));

    std::vector<RolloutOutcome> rolls = evaluate_plans(current, plans, scene, exec);
    int best = -1;
    double best_cost = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < rolls.size(); ++i) {
      res.sim_steps += rolls[i].steps;
      if (rolls[i].diverged) continue;
      const double cost = weighted_squared_distance(rolls[i].states.back(), goal, w);
      if (cost < best_cost) {
        best_cost = cost;
        best = static_cast<int>(i);
      }
    }
    if (best < 0) break;  // every plan blew up; nothing sane to apply

    // the rollout already visited the post-first-action state; reuse it
    current = rolls[static_cast<size_t>(best)].states.front();
    res.actions.push_back(plans[static_cast<size_t>(best)].front());
    res.trajectory.push_back(current);
    ++control_steps;

    res.final_distance = weighted_distance(current, goal, w);
    if (res.final_distance < epsilon) {
      res.success = true;
      return res;
    }

    // recede: adopt the winner, drop its spent head, pad with a null tail
    nominal = plans[static_cast<size_t>(best)];
    nominal.erase(nominal.begin());
    nominal.push_back(zero_action(scene, duration));
  }

  res.final_distance = weighted_distance(current, goal, w);
  return res;  // budget exhausted (or all-diverged): recorded as failure
}

PsSummary run_ps_all_pairs(const BaselineConfig& cfg, const std::vector<StableState>& c_s,
                           const SceneSpec& scene, double epsilon, long stage_total_steps,
                           std::uint64_t seed, ExecPolicy exec) {
  const int m = static_cast<int>(c_s.size());
  if (m < 2) throw ValidationError("all-pairs MPC needs at least two stable states");
  if (stage_total_steps <= 0) throw ValidationError("stage_total_steps must be positive");

  PsSummary sum;
  const long pairs = static_cast<long>(m) * (m - 1);
  const long budget_pair = stage_total_steps / pairs;  // equal share per ordered pair
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      if (i == j) continue;
      PsPairOutcome po;
      po.start_id = c_s[static_cast<size_t>(i)].id;
      po.goal_id = c_s[static_cast<size_t>(j)].id;
      po.result = run_predictive_sampling(
          cfg, c_s[static_cast<size_t>(i)].config, c_s[static_cast<size_t>(j)].config, scene,
          epsilon, budget_pair, derive_seed(seed, streams::kMpc, std::uint64_t(i), std::uint64_t(j)),
          exec);
      ++sum.attempts;
      if (po.result.success) ++sum.successes;
      sum.total_steps += po.result.sim_steps;
      sum.pairs.push_back(std::move(po));
    }
  }
  sum.success_rate_pct = 100.0 * double(sum.successes) / double(sum.attempts);
  return sum;
}

std::vector<GridCell> run_ablation_grid(const SceneSpec& scene,
                                        const std::vector<StableState>& c_s,
                                        const std::vector<std::uint64_t>& seeds,
                                        const PlannerConfig& base, const GridOptions& opt,
                                        const EntropyParams& entropy, ExecPolicy exec) {
  base.validate();
  if (seeds.empty()) throw ValidationError("ablation grid needs at least one seed");
  for (int m : opt.cs_sizes)
    if (m < 1 || m > static_cast<int>(c_s.size()))
      throw ValidationError("cs_sizes entries must be in [1, |C_s|]");

  struct Job {
    std::string method;
    PlannerConfig cfg;
    const std::vector<StableState>* states;
  };
  std::vector<Job> jobs;
  for (const std::string& v : ablation_variants())
    jobs.push_back({v, variant_config(base, v), &c_s});
  if (opt.sweep_nk) {
    for (int v : opt.nk_values) {
      PlannerConfig cn = base;
      cn.n = v;
      jobs.push_back({"stage_n" + std::to_string(v), cn, &c_s});
      PlannerConfig ck = base;
      ck.k = v;
      jobs.push_back({"stage_k" + std::to_string(v), ck, &c_s});
    }
  }
  std::vector<std::vector<StableState>> prefixes;
  prefixes.reserve(opt.cs_sizes.size());
  for (int m : opt.cs_sizes) {
    prefixes.emplace_back(c_s.begin(), c_s.begin() + m);
    jobs.push_back({"stage_m" + std::to_string(m), base, &prefixes.back()});
  }

  std::vector<GridCell> cells;
  cells.reserve(jobs.size() * seeds.size());
  for (std::uint64_t seed : seeds) {
    for (const Job& job : jobs) {
      PlannerConfig cfg = job.cfg;
      cfg.seed = seed;
      RunOutcome out = run_stage(cfg, *job.states, scene, entropy, exec);
      // budget parity: every compared cell consumed the identical number of
      // expansion iterations
      if (out.tree.stats.iterations != base.n_max)
        throw std::logic_error("budget parity violated in ablation grid");
      cells.push_back(
          {job.method, seed, std::move(out.report), out.tree.stats, std::move(out.paths)});
    }
  }
  return cells;
}

GridMean mean_report(const std::vector<GridCell>& cells, const std::string& method) {
  GridMean m;
  double ent_sum = 0.0, hd_sum = 0.0;
  int ent_n = 0, hd_n = 0;
  for (const GridCell& c : cells) {
    if (c.method != method) continue;
    ++m.cells;
    m.path_count += c.report.path_count;
    m.coverage_pct += c.report.coverage_pct;
    if (c.report.entropy_nats) {
      ent_sum += *c.report.entropy_nats;
      ++ent_n;
    }
    if (c.report.avg_hausdorff) {
      hd_sum += *c.report.avg_hausdorff;
      ++hd_n;
    }
  }
  if (m.cells == 0) return m;
  m.path_count /= m.cells;
  m.coverage_pct /= m.cells;
  if (ent_n > 0) m.entropy_nats = ent_sum / ent_n;
  if (hd_n > 0) m.avg_hausdorff = hd_sum / hd_n;
  return m;
}

}  // namespace stage
