#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stage/errors.h"
#include "stage/harness.h"

using namespace stage;
namespace fs = std::filesystem;

namespace {

SceneSpec ramp() { return builtin_scene("spheres_ramp"); }

// Walled flat arena for the MPC path (see test_baselines for why the walls
// matter: an open plane lets a mis-push roll the ball beyond recovery).
SceneSpec flat() {
  SceneSpec s;
  s.name = "flat_arena";
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
  s.objects.push_back(ObjectSpec{});
  s.workspace_lo = Vec3(-0.6, -0.6, -0.3);
  s.workspace_hi = Vec3(0.6, 0.6, 1);
  s.validate();
  return s;
}

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

std::string fresh_dir(const char* stem) {
  fs::path dir = fs::temp_directory_path() / stem;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& file) {
  std::ifstream f(file, std::ios::binary);
  REQUIRE(f);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
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

Path make_path(int start, int goal) {
  Path p;
  p.start_id = start;
  p.goal_id = goal;
  p.states.push_back(SystemState{});
  return p;
}

}  // namespace

TEST_CASE("experiment config resolves scenes and methods") {
  ExperimentConfig c;

  SUBCASE("defaults validate and resolve the builtin scene") {
    c.validate();
    CHECK(c.resolve_scene().name == "spheres_ramp");
    CHECK(c.seeds.size() == 10);
    CHECK(c.planner.n_max == 2500);
  }

  SUBCASE("inline scene overrides the name") {
    c.scene_spec = flat();
    CHECK(c.resolve_scene().name == "flat_arena");
    CHECK(stable_file_name(c) == "flat_arena_stable.jsonl");
  }

  SUBCASE("method deltas") {
    CHECK(c.method_planner().k == c.planner.k);
    c.method = "no_knn";
    CHECK(c.method_planner().k == 1);
    c.method = "rrt_sim";
    PlannerConfig p = c.method_planner();
    CHECK(p.k == 1);
    CHECK(p.n == 1);
    CHECK(p.node_rejection == false);
    CHECK(p.stable_sample_prob == doctest::Approx(0.2));
    c.method = "predictive_sampling";
    CHECK_THROWS_AS(c.method_planner(), ValidationError);
  }

  SUBCASE("validation failures") {
    c.seeds.clear();
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = ExperimentConfig{};
    c.method = "bogus";
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = ExperimentConfig{};
    c.goal_bias = -0.1;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = ExperimentConfig{};
    c.m = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c.cs_file = "somewhere.jsonl";  // m unused when the set comes from a file
    c.validate();
    c = ExperimentConfig{};
    c.scene = "unknown_scene";
    CHECK_THROWS_AS(c.validate(), ValidationError);
  }

  SUBCASE("json round trip, name and inline forms") {
    c.method = "rrt_sim";
    c.seeds = {4, 5};
    c.planner.n_max = 123;
    c.emit_adjacency = true;
    json j1(c);
    ExperimentConfig back = j1.get<ExperimentConfig>();
    CHECK(json(back).dump() == j1.dump());

    c.scene_spec = flat();
    json j2(c);
    CHECK(j2.at("scene").is_object());
    ExperimentConfig back2 = j2.get<ExperimentConfig>();
    REQUIRE(back2.scene_spec.has_value());
    CHECK(back2.scene == "flat_arena");
    CHECK(json(back2).dump() == j2.dump());
  }
}

TEST_CASE("plan experiment writes reproducible files") {
  SceneSpec scene = ramp();
  std::vector<StableState> cs = fake_cs(scene, 4);

  ExperimentConfig c;
  c.planner.n_max = 40;
  c.seeds = {1, 2};
  c.emit_tree = true;
  c.emit_adjacency = true;
  c.output_dir = fresh_dir("stage_harness_plan");

  PlanResult res = run_plan_experiment(c, cs);

  SUBCASE("expected files, expected contents") {
    REQUIRE(res.runs.size() == 2);
    for (const SeedRun& r : res.runs) {
      CHECK(r.ok);
      CHECK(r.stats.iterations == 40);
      CHECK(r.report.path_count == static_cast<int>(r.paths.size()));
      CHECK(r.epsilon > 0);
    }
    // 2 trees + 2 paths + metrics + adjacency csv + ppm
    CHECK(res.written.size() == 7);
    for (const std::string& f : res.written) CHECK(fs::exists(f));

    json header;
    std::vector<Path> from_disk =
        read_paths_file(c.output_dir + "/" + paths_file_name(c, 1), &header);
    CHECK(paths_json(from_disk) == paths_json(res.runs[0].paths));
    CHECK(header.at("seed") == 1);
    CHECK(header.at("config").at("method") == "stage");
  }

  SUBCASE("rerunning the same config reproduces every file byte for byte") {
    std::vector<std::pair<std::string, std::string>> before;
    for (const std::string& f : res.written) before.emplace_back(f, slurp(f));
    PlanResult again = run_plan_experiment(c, cs);
    CHECK(again.written == res.written);
    for (const auto& [f, bytes] : before) CHECK(slurp(f) == bytes);
  }

  SUBCASE("the embedded header config reproduces the run") {
    json header;
    read_paths_file(c.output_dir + "/" + paths_file_name(c, 1), &header);
    ExperimentConfig from_header = header.at("config").get<ExperimentConfig>();
    std::string metrics_before = slurp(c.output_dir + "/" + metrics_file_name(c));
    run_plan_experiment(from_header, cs);
    CHECK(slurp(c.output_dir + "/" + metrics_file_name(c)) == metrics_before);
  }

  SUBCASE("a failing seed is recorded without stopping the rest") {
    std::vector<StableState> dup = cs;
    dup[1].id = 0;  // duplicate id: the registry refuses it, every seed fails
    ExperimentConfig c2 = c;
    c2.output_dir = fresh_dir("stage_harness_fail");
    PlanResult bad = run_plan_experiment(c2, dup);
    REQUIRE(bad.runs.size() == 2);
    for (const SeedRun& r : bad.runs) {
      CHECK(!r.ok);
      CHECK(!r.error.empty());
      CHECK(r.paths.empty());
    }
    // metrics file still written, just with no data rows
    MetricsCsv parsed = parse_metrics_csv(slurp(c2.output_dir + "/" + metrics_file_name(c2)));
    CHECK(parsed.rows.empty());
  }

  SUBCASE("stable set file round trip, with and without header") {
    std::string with_header = c.output_dir + "/stable_with_header.jsonl";
    write_stable_file(with_header, c, cs);
    json h;
    std::vector<StableState> back = read_stable_file(with_header, &h);
    REQUIRE(back.size() == cs.size());
    for (size_t i = 0; i < cs.size(); ++i) {
      CHECK(back[i].id == cs[i].id);
      CHECK(back[i].config == cs[i].config);
    }
    CHECK(h.at("config").at("m") == c.m);

    std::string bare = c.output_dir + "/stable_bare.jsonl";
    write_stable_states_jsonl(bare, cs);
    std::vector<StableState> back2 = read_stable_file(bare);
    REQUIRE(back2.size() == cs.size());
    CHECK(back2[2].config == cs[2].config);

    ExperimentConfig c3 = c;
    c3.cs_file = with_header;
    std::vector<StableState> via = obtain_stable_states(c3, scene);
    CHECK(via.size() == cs.size());
  }
}

TEST_CASE("metrics csv round-trips through parse and emit") {
  SceneSpec scene = ramp();
  std::vector<StableState> cs = fake_cs(scene, 4);

  ExperimentConfig c;
  c.planner.n_max = 40;
  c.seeds = {1, 2, 3};
  c.output_dir = fresh_dir("stage_harness_csv");
  c.emit_tree = false;
  c.emit_adjacency = false;

  PlanResult res = run_plan_experiment(c, cs);
  std::string text = slurp(c.output_dir + "/" + metrics_file_name(c));

  SUBCASE("shape: one row per seed plus a mean row") {
    MetricsCsv parsed = parse_metrics_csv(text);
    REQUIRE(parsed.rows.size() == 4);
    CHECK(parsed.rows[0].seed == "1");
    CHECK(parsed.rows[3].seed == "mean");
    CHECK(parsed.config.dump() == json(c).dump());
    double total = 0.0;
    for (int i = 0; i < 3; ++i) {
      CHECK(parsed.rows[size_t(i)].scene == "spheres_ramp");
      CHECK(parsed.rows[size_t(i)].method == "stage");
      CHECK(parsed.rows[size_t(i)].count ==
            doctest::Approx(double(res.runs[size_t(i)].report.path_count)));
      total += parsed.rows[size_t(i)].count;
    }
    CHECK(parsed.rows[3].count == doctest::Approx(total / 3.0));
  }

  SUBCASE("emit(parse(text)) is the identity") {
    MetricsCsv parsed = parse_metrics_csv(text);
    CHECK(emit_metrics_csv(parsed.config, parsed.rows) == text);
  }

  SUBCASE("malformed inputs are rejected") {
    CHECK_THROWS_AS(parse_metrics_csv("scene,method\n"), ValidationError);
    CHECK_THROWS_AS(parse_metrics_csv("# config={}\nwrong,header\n"), ValidationError);
    CHECK_THROWS_AS(parse_metrics_csv("# config={}\n" + metrics_csv_header() + "\na,b,c\n"),
                    ValidationError);
    CHECK_THROWS_AS(
        parse_metrics_csv("# config={}\n" + metrics_csv_header() + "\na,b,c,x,1,,\n"),
        ValidationError);
  }
}

TEST_CASE("adjacency counts start-goal pairs") {
  SceneSpec scene = ramp();
  std::vector<StableState> cs = fake_cs(scene, 4);
  ExperimentConfig c;
  c.output_dir = fresh_dir("stage_harness_adj");

  SUBCASE("hand example: {0->1, 0->1, 0->2}") {
    std::vector<Path> paths{make_path(0, 1), make_path(0, 1), make_path(0, 2)};
    AdjacencyMatrix m = build_adjacency(paths, cs);
    CHECK(m.ids == std::vector<int>{0, 1, 2, 3});
    CHECK(m.counts[0] == std::vector<int>{0, 2, 1, 0});
    CHECK(m.counts[1] == std::vector<int>{0, 0, 0, 0});
    CHECK(m.row_sum(0) == 3);
    CHECK(m.total() == 3);
  }

  SUBCASE("empty path set gives the zero matrix") {
    AdjacencyMatrix m = build_adjacency({}, cs);
    CHECK(m.total() == 0);
    for (const auto& row : m.counts)
      for (int v : row) CHECK(v == 0);
  }

  SUBCASE("unknown ids are refused") {
    CHECK_THROWS_AS(build_adjacency({make_path(0, 9)}, cs), UnknownGoalIdError);
    CHECK_THROWS_AS(build_adjacency({make_path(9, 0)}, cs), UnknownGoalIdError);
    AdjacencyMatrix m = build_adjacency({}, cs);
    CHECK_THROWS_AS(m.row_sum(9), UnknownGoalIdError);
  }

  SUBCASE("row sums match per-start retained path counts") {
    c.planner.n_max = 40;
    c.seeds = {1, 2};
    c.emit_adjacency = true;
    PlanResult res = run_plan_experiment(c, fake_cs(scene, 4));
    int total = 0;
    for (const SeedRun& r : res.runs) {
      AdjacencyMatrix per_seed = build_adjacency(r.paths, cs);
      CHECK(per_seed.row_sum(r.root_stable_id) == r.report.path_count);
      CHECK(per_seed.total() == r.report.path_count);
      total += r.report.path_count;
      // x0 exclusion keeps the diagonal empty
      for (size_t i = 0; i < per_seed.ids.size(); ++i) CHECK(per_seed.counts[i][i] == 0);
    }
    AdjacencyMatrix all = build_adjacency(
        [&] {
          std::vector<Path> v;
          for (const SeedRun& r : res.runs) v.insert(v.end(), r.paths.begin(), r.paths.end());
          return v;
        }(),
        cs);
    CHECK(all.total() == total);
  }

  SUBCASE("csv and ppm renderings") {
    std::vector<Path> paths{make_path(0, 1), make_path(0, 1), make_path(0, 2)};
    AdjacencyMatrix m = build_adjacency(paths, cs);

    std::string csv = adjacency_csv_text(c, m);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line.rfind("# config=", 0) == 0);
    std::getline(in, line);
    CHECK(line == "start\\goal,0,1,2,3");
    std::getline(in, line);
    CHECK(line == "0,0,2,1,0");

    std::string ppm_file = c.output_dir + "/adj.ppm";
    write_adjacency_ppm(ppm_file, c, m);
    std::string ppm = slurp(ppm_file);
    CHECK(ppm.rfind("P6\n# config=", 0) == 0);
    size_t hdr = ppm.find("\n4 4\n255\n");
    REQUIRE(hdr != std::string::npos);
    size_t raster = hdr + 9;
    REQUIRE(ppm.size() == raster + 3 * 16);
    const auto px = [&](int i, int j) {
      size_t off = raster + 3 * size_t(4 * i + j);
      return std::array<unsigned char, 3>{(unsigned char)ppm[off], (unsigned char)ppm[off + 1],
                                          (unsigned char)ppm[off + 2]};
    };
    CHECK(px(0, 0) == std::array<unsigned char, 3>{30, 60, 150});    // zero sentinel
    CHECK(px(0, 1) == std::array<unsigned char, 3>{165, 15, 21});    // max of the ramp
    CHECK(px(0, 2) == std::array<unsigned char, 3>{255, 237, 222});  // ramp start

    AdjacencyMatrix empty;
    CHECK_THROWS_AS(write_adjacency_ppm(c.output_dir + "/bad.ppm", c, empty), ValidationError);
  }
}

TEST_CASE("predictive sampling experiment reports the pair success rate") {
  SceneSpec scene = flat();
  std::vector<StableState> cs(3);
  cs[0].config = rest_state(scene, 0.0, 0.0, Vec3(-0.2, 0.0, 0.1));
  cs[1].config = rest_state(scene, 0.3, 0.0, Vec3(0.1, 0.0, 0.1));
  cs[2].config = rest_state(scene, 0.0, 0.3, Vec3(0.0, 0.1, 0.1));
  for (int i = 0; i < 3; ++i) cs[static_cast<size_t>(i)].id = i;

  ExperimentConfig c;
  c.scene_spec = scene;
  c.method = "predictive_sampling";
  c.ps_budget_steps = 1200000;
  c.seeds = {3};
  c.output_dir = fresh_dir("stage_harness_mpc");
  c.emit_adjacency = true;

  PlanResult res = run_plan_experiment(c, cs);
  REQUIRE(res.runs.size() == 1);
  const SeedRun& r = res.runs[0];

  SUBCASE("rate-based report") {
    CHECK(r.ok);
    CHECK(r.report.path_count == static_cast<int>(r.paths.size()));
    CHECK(r.report.coverage_pct == doctest::Approx(100.0 * r.paths.size() / 6.0));
    CHECK(r.mpc_budget_steps == 1200000 / 6);
    CHECK(r.root_stable_id == -1);
    for (const Path& p : r.paths) {
      CHECK(p.start_id != p.goal_id);
      CHECK(p.terminal_distance < r.epsilon);
      CHECK(p.states.size() == p.actions.size() + 1);
    }
    CHECK(!r.paths.empty());
  }

  SUBCASE("files and adjacency from MPC trajectories") {
    MetricsCsv parsed = parse_metrics_csv(slurp(c.output_dir + "/" + metrics_file_name(c)));
    REQUIRE(parsed.rows.size() == 2);
    CHECK(parsed.rows[0].method == "predictive_sampling");
    AdjacencyMatrix m = build_adjacency(r.paths, cs);
    CHECK(m.total() == static_cast<int>(r.paths.size()));
    CHECK(fs::exists(c.output_dir + "/" + adjacency_ppm_name(c)));
  }

  SUBCASE("derived budget parity uses a tree run's step count") {
    ExperimentConfig c2 = c;
    c2.ps_budget_steps = 0;
    c2.planner.n_max = 25;
    c2.output_dir = fresh_dir("stage_harness_mpc_parity");
    PlanResult res2 = run_plan_experiment(c2, cs);
    REQUIRE(res2.runs.size() == 1);
    CHECK(res2.runs[0].ok);
    CHECK(res2.runs[0].mpc_budget_steps > 0);
  }
}

TEST_CASE("rrt_sim through the harness equals the direct baseline") {
  SceneSpec scene = ramp();
  std::vector<StableState> cs = fake_cs(scene, 4);

  ExperimentConfig c;
  c.method = "rrt_sim";
  c.planner.n_max = 50;
  c.seeds = {6};
  c.output_dir = fresh_dir("stage_harness_rrt");

  PlanResult res = run_plan_experiment(c, cs);
  REQUIRE(res.runs.size() == 1);
  REQUIRE(res.runs[0].ok);

  BaselineConfig direct_cfg;
  direct_cfg.planner = c.planner;
  direct_cfg.planner.seed = 6;
  RunOutcome direct = run_rrt_sim(direct_cfg, cs, scene);
  CHECK(paths_json(res.runs[0].paths) == paths_json(direct.paths));
  CHECK(res.runs[0].report.coverage_pct == direct.report.coverage_pct);

  MetricsCsv parsed = parse_metrics_csv(slurp(c.output_dir + "/" + metrics_file_name(c)));
  CHECK(parsed.rows[0].method == "rrt_sim");
  CHECK(parsed.config.at("goal_bias") == doctest::Approx(0.2));
}
