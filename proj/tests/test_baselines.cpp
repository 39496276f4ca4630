#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "stage/baselines.h"
#include "stage/errors.h"

using namespace stage;

namespace {

SceneSpec ramp() { return builtin_scene("spheres_ramp"); }

// Single robot pushing a ball on a level floor inside a walled arena: the
// easy regime for a receding-horizon controller. The walls matter — an open
// plane lets one mis-push send the ball rolling away beyond recovery.
SceneSpec flat() {
  SceneSpec s;
  s.name = "flat_floor";
  s.surfaces.push_back({Vec3(0, 0, 1), 0.0, "floor"});
  s.surfaces.push_back({Vec3(1, 0, 0), -0.6, "wall_neg_x"});
  s.surfaces.push_back({Vec3(-1, 0, 0), -0.6, "wall_pos_x"});
  s.surfaces.push_back({Vec3(0, 1, 0), -0.6, "wall_neg_y"});
  s.surfaces.push_back({Vec3(0, -1, 0), -0.6, "wall_pos_y"});
  RobotSpec r;
  r.radius = 0.08;
  r.pos_lo = Vec3(-0.55, -0.55, 0.0);
  r.pos_hi = Vec3(0.55, 0.55, 0.9);
  s.robots.push_back(r);
  s.objects.push_back(ObjectSpec{});  // 0.1 m sphere, 1 kg
  s.workspace_lo = Vec3(-0.6, -0.6, -0.3);
  s.workspace_hi = Vec3(0.6, 0.6, 1);
  s.validate();
  return s;
}

// Ball at rest over (x, y) with the robot parked nearby but out of contact;
// a one-second zero-command hold settles the penalty compression so the
// returned state is (numerically) a fixed point.
SystemState rest_state(const SceneSpec& scene, double bx, double by, const Vec3& robot) {
  SystemState s = default_state(scene);
  s.object_poses[0].pos = Vec3(bx, by, scene.objects[0].radius);
  s.set_robot_pos(0, robot);
  s.zero_velocities();
  StepOutcome so = step(s, zero_action(scene, 1.0), scene);
  REQUIRE(!so.diverged);
  SystemState out = so.state;
  out.zero_velocities();
  return out;
}

// Same hand-built near-stable ramp configurations the planner tests use.
std::vector<StableState> fake_cs(const SceneSpec& scene, int m) {
  const HalfSpace& ground = scene.surfaces.front();
  const Vec3 n = ground.normal.normalized();
  Vec3 downhill = scene.gravity_vec() - scene.gravity_vec().dot(n) * n;
  if (downhill.norm() < 1e-9) downhill = Vec3(1, 0, 0);
  downhill.normalize();

  std::vector<StableState> cs;
  Rng rng(99);
  for (int i = 0; i < m; ++i) {
    StableState s;
    s.config = default_state(scene);
    const double rb = scene.objects[0].radius;
    Vec3 seed_pt(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0.0);
    Vec3 ball = seed_pt + (rb + ground.offset - n.dot(seed_pt)) * n;
    s.config.object_poses[0].pos = ball;
    const double rr = scene.robots[0].radius;
    Vec3 blocker = ball + 0.999 * (rb + rr) * downhill;
    s.config.set_robot_pos(0,
                           blocker.cwiseMax(scene.robots[0].pos_lo).cwiseMin(scene.robots[0].pos_hi));
    s.config.zero_velocities();
    s.id = i;
    cs.push_back(std::move(s));
  }
  return cs;
}

json paths_json(const std::vector<Path>& paths) {
  json j = json::array();
  for (const Path& p : paths) {
    json e;
    to_json(e, p);
    j.push_back(e);
  }
  return j;
}

bool same_tree(const SearchTree& a, const SearchTree& b) {
  if (a.nodes.size() != b.nodes.size()) return false;
  for (size_t i = 0; i < a.nodes.size(); ++i) {
    if (!(a.nodes[i].state == b.nodes[i].state)) return false;
    if (a.nodes[i].parent != b.nodes[i].parent) return false;
    if (a.nodes[i].active != b.nodes[i].active) return false;
  }
  return a.root_stable_id == b.root_stable_id;
}

}  // namespace

TEST_CASE("rrt_sim is the planner under a goal-bias configuration") {
  SceneSpec scene = ramp();
  std::vector<StableState> cs = fake_cs(scene, 4);

  PlannerConfig base;
  base.n_max = 60;
  base.seed = 7;

  SUBCASE("matching overrides reproduce the no-knn ablation exactly") {
    BaselineConfig b;
    b.planner = base;
    b.goal_bias = 1.0;   // stable targets only, like the ablation
    b.rrt_n = 16;        // keep the n-best expansion
    b.rrt_rejection = true;
    RunOutcome rrt = run_rrt_sim(b, cs, scene);
    RunOutcome abl = run_stage(variant_config(base, "no_knn"), cs, scene);
    CHECK(same_tree(rrt.tree, abl.tree));
    CHECK(paths_json(rrt.paths) == paths_json(abl.paths));
    CHECK(rrt.report.path_count == abl.report.path_count);
    CHECK(rrt.report.coverage_pct == abl.report.coverage_pct);
  }

  SUBCASE("default shape: single action, no rejection, biased targets") {
    BaselineConfig b;
    b.planner = base;
    RunOutcome out = run_rrt_sim(b, cs, scene);
    CHECK(out.tree.stats.rejections == 0);
    for (const TreeNode& n : out.tree.nodes) CHECK(n.active);
    // one child per successful expansion
    CHECK(static_cast<int>(out.tree.nodes.size()) == 1 + out.tree.stats.expansions);
    CHECK(out.tree.stats.iterations == base.n_max);
  }

  SUBCASE("deterministic per seed") {
    BaselineConfig b;
    b.planner = base;
    RunOutcome a1 = run_rrt_sim(b, cs, scene);
    RunOutcome a2 = run_rrt_sim(b, cs, scene);
    CHECK(same_tree(a1.tree, a2.tree));
    CHECK(paths_json(a1.paths) == paths_json(a2.paths));
    b.planner.seed = 8;
    RunOutcome a3 = run_rrt_sim(b, cs, scene);
    CHECK(!same_tree(a1.tree, a3.tree));
  }

  SUBCASE("goal bias outside [0,1] is rejected") {
    BaselineConfig b;
    b.planner = base;
    b.goal_bias = 1.5;
    CHECK_THROWS_AS(run_rrt_sim(b, cs, scene), ValidationError);
  }
}

TEST_CASE("predictive sampling pushes a sphere between rest states") {
  SceneSpec scene = flat();
  StateWeights w;
  const double eps = default_epsilon(scene, w);

  SystemState start = rest_state(scene, 0.0, 0.0, Vec3(-0.2, 0.0, 0.1));
  SystemState goal = rest_state(scene, 0.3, 0.0, Vec3(0.1, 0.0, 0.1));
  REQUIRE(weighted_distance(start, goal, w) > eps);

  BaselineConfig cfg;

  SUBCASE("goal equal to start succeeds immediately") {
    MpcResult r = run_predictive_sampling(cfg, start, start, scene, eps, 1000, 1);
    CHECK(r.success);
    CHECK(r.actions.empty());
    CHECK(r.trajectory.size() == 1);
    CHECK(r.sim_steps == 0);
    CHECK(r.final_distance == 0.0);
  }

  SUBCASE("level-floor push reaches the goal within budget") {
    MpcResult r = run_predictive_sampling(cfg, start, goal, scene, eps, 200000, 1);
    CHECK(r.success);
    CHECK(r.final_distance < eps);
    CHECK(r.sim_steps <= 200000);
    CHECK(r.trajectory.size() == r.actions.size() + 1);
    CHECK(weighted_distance(r.trajectory.back(), goal, w) == r.final_distance);
  }

  SUBCASE("a budget below one control step is exhausted without progress") {
    MpcResult r = run_predictive_sampling(cfg, start, goal, scene, eps, 100, 1);
    CHECK(!r.success);
    CHECK(r.sim_steps == 0);
    CHECK(r.actions.empty());
    CHECK(r.final_distance > eps);
  }

  SUBCASE("the control-step cap limits the loop") {
    cfg.ps_max_control_steps = 2;
    MpcResult r = run_predictive_sampling(cfg, start, goal, scene, eps, 200000, 1);
    CHECK(r.actions.size() <= 2);
  }

  SUBCASE("deterministic in the seed, serial matches parallel") {
    cfg.ps_max_control_steps = 3;
    MpcResult a = run_predictive_sampling(cfg, start, goal, scene, eps, 200000, 5);
    MpcResult b = run_predictive_sampling(cfg, start, goal, scene, eps, 200000, 5);
    REQUIRE(a.trajectory.size() == b.trajectory.size());
    for (size_t i = 0; i < a.trajectory.size(); ++i) CHECK(a.trajectory[i] == b.trajectory[i]);

    MpcResult c = run_predictive_sampling(cfg, start, goal, scene, eps, 200000, 5, {false});
    REQUIRE(a.trajectory.size() == c.trajectory.size());
    for (size_t i = 0; i < a.trajectory.size(); ++i) CHECK(a.trajectory[i] == c.trajectory[i]);

    MpcResult d = run_predictive_sampling(cfg, start, goal, scene, eps, 200000, 6);
    bool same = a.trajectory.size() == d.trajectory.size();
    if (same)
      for (size_t i = 0; i < a.trajectory.size(); ++i) same = same && a.trajectory[i] == d.trajectory[i];
    CHECK(!same);
  }

  SUBCASE("config validation") {
    cfg.ps_horizon = 0;
    CHECK_THROWS_AS(run_predictive_sampling(cfg, start, goal, scene, eps, 1000, 1),
                    ValidationError);
    cfg.ps_horizon = 5;
    cfg.ps_samples = 0;
    CHECK_THROWS_AS(run_predictive_sampling(cfg, start, goal, scene, eps, 1000, 1),
                    ValidationError);
    cfg.ps_samples = 32;
    CHECK_THROWS_AS(run_predictive_sampling(cfg, start, goal, scene, 0.0, 1000, 1),
                    ValidationError);
  }
}

TEST_CASE("all-pairs MPC shares one simulation budget") {
  SceneSpec scene = flat();
  StateWeights w;
  const double eps = default_epsilon(scene, w);

  std::vector<StableState> cs(3);
  cs[0].config = rest_state(scene, 0.0, 0.0, Vec3(-0.2, 0.0, 0.1));
  cs[1].config = rest_state(scene, 0.3, 0.0, Vec3(0.1, 0.0, 0.1));
  cs[2].config = rest_state(scene, 0.0, 0.3, Vec3(0.0, 0.1, 0.1));
  for (int i = 0; i < 3; ++i) cs[static_cast<size_t>(i)].id = i;

  BaselineConfig cfg;
  const long total = 1200000;  // 200k steps per ordered pair

  PsSummary sum = run_ps_all_pairs(cfg, cs, scene, eps, total, 3);

  SUBCASE("bookkeeping") {
    CHECK(sum.attempts == 6);
    CHECK(sum.pairs.size() == 6);
    int wins = 0;
    long steps = 0;
    std::set<std::pair<int, int>> seen;
    for (const PsPairOutcome& p : sum.pairs) {
      CHECK(p.start_id != p.goal_id);
      seen.insert({p.start_id, p.goal_id});
      if (p.result.success) ++wins;
      steps += p.result.sim_steps;
      CHECK(p.result.sim_steps <= total / 6);  // equal per-pair share
    }
    CHECK(seen.size() == 6);
    CHECK(sum.successes == wins);
    CHECK(sum.total_steps == steps);
    CHECK(sum.success_rate_pct == doctest::Approx(100.0 * wins / 6.0));
    CHECK(sum.successes >= 1);  // 0.3 m level-floor pushes are the easy regime
  }

  SUBCASE("deterministic") {
    PsSummary again = run_ps_all_pairs(cfg, cs, scene, eps, total, 3);
    CHECK(again.successes == sum.successes);
    CHECK(again.total_steps == sum.total_steps);
  }

  SUBCASE("needs two states and a positive budget") {
    std::vector<StableState> one(cs.begin(), cs.begin() + 1);
    CHECK_THROWS_AS(run_ps_all_pairs(cfg, one, scene, eps, total, 3), ValidationError);
    CHECK_THROWS_AS(run_ps_all_pairs(cfg, cs, scene, eps, 0, 3), ValidationError);
  }
}

TEST_CASE("ablation grid holds the five variants at one budget") {
  SceneSpec scene = ramp();
  std::vector<StableState> cs = fake_cs(scene, 4);

  PlannerConfig base;
  base.n_max = 30;
  std::vector<std::uint64_t> seeds{1, 2};

  SUBCASE("variant configs apply exactly one delta") {
    CHECK(ablation_variants() ==
          std::vector<std::string>{"stage", "no_rejection", "no_nbest", "no_knn", "uniform80"});
    CHECK(variant_config(base, "stage").n == base.n);
    CHECK(variant_config(base, "no_rejection").node_rejection == false);
    CHECK(variant_config(base, "no_nbest").n == 1);
    CHECK(variant_config(base, "no_knn").k == 1);
    CHECK(variant_config(base, "uniform80").stable_sample_prob == doctest::Approx(0.2));
    CHECK_THROWS_AS(variant_config(base, "bogus"), ValidationError);
    // everything not named by the delta stays at the base value
    PlannerConfig v = variant_config(base, "no_nbest");
    CHECK(v.k == base.k);
    CHECK(v.n_max == base.n_max);
    CHECK(v.node_rejection == base.node_rejection);
  }

  SUBCASE("five cells per seed, parity asserted, reducible to direct runs") {
    std::vector<GridCell> cells = run_ablation_grid(scene, cs, seeds, base);
    CHECK(cells.size() == 10);

    std::set<std::pair<std::string, std::uint64_t>> keys;
    for (const GridCell& c : cells) {
      keys.insert({c.method, c.seed});
      CHECK(c.stats.iterations == base.n_max);  // budget parity across every cell
    }
    for (std::uint64_t s : seeds)
      for (const std::string& v : ablation_variants())
        CHECK(keys.count({v, s}) == 1);

    // the grid's cells are the planner under the stated config, nothing more
    for (const std::string& v : {"stage", "no_nbest"}) {
      PlannerConfig direct_cfg = variant_config(base, v);
      direct_cfg.seed = 1;
      RunOutcome direct = run_stage(direct_cfg, cs, scene);
      const GridCell* cell = nullptr;
      for (const GridCell& c : cells)
        if (c.method == v && c.seed == 1) cell = &c;
      REQUIRE(cell != nullptr);
      CHECK(cell->report.path_count == direct.report.path_count);
      CHECK(cell->report.coverage_pct == direct.report.coverage_pct);
      CHECK(paths_json(cell->paths) == paths_json(direct.paths));
    }

    for (const GridCell& c : cells)
      if (c.method == "no_rejection") CHECK(c.stats.rejections == 0);
  }

  SUBCASE("sweeps extend the grid with labeled cells") {
    GridOptions opt;
    opt.sweep_nk = true;
    opt.nk_values = {1, 16};
    opt.cs_sizes = {2, 4};
    std::vector<std::uint64_t> one_seed{1};
    std::vector<GridCell> cells = run_ablation_grid(scene, cs, one_seed, base, opt);
    CHECK(cells.size() == 5 + 4 + 2);

    std::set<std::string> names;
    for (const GridCell& c : cells) names.insert(c.method);
    for (const char* want : {"stage_n1", "stage_n16", "stage_k1", "stage_k16", "stage_m2",
                             "stage_m4"})
      CHECK(names.count(want) == 1);

    // the |C_s| sweep runs on a prefix of the supplied set
    PlannerConfig direct_cfg = base;
    direct_cfg.seed = 1;
    std::vector<StableState> prefix(cs.begin(), cs.begin() + 2);
    RunOutcome direct = run_stage(direct_cfg, prefix, scene);
    for (const GridCell& c : cells)
      if (c.method == "stage_m2") CHECK(paths_json(c.paths) == paths_json(direct.paths));

    GridOptions bad;
    bad.cs_sizes = {9};
    CHECK_THROWS_AS(run_ablation_grid(scene, cs, one_seed, base, bad), ValidationError);
    CHECK_THROWS_AS(run_ablation_grid(scene, cs, {}, base), ValidationError);
  }

  SUBCASE("mean over seeds") {
    std::vector<GridCell> cells = run_ablation_grid(scene, cs, seeds, base);
    GridMean m = mean_report(cells, "stage");
    CHECK(m.cells == 2);
    double pc = 0.0, cov = 0.0;
    for (const GridCell& c : cells)
      if (c.method == "stage") {
        pc += c.report.path_count;
        cov += c.report.coverage_pct;
      }
    CHECK(m.path_count == doctest::Approx(pc / 2.0));
    CHECK(m.coverage_pct == doctest::Approx(cov / 2.0));
    CHECK(mean_report(cells, "absent").cells == 0);
  }
}
