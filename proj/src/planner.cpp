#include "stage/planner.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "stage/errors.h"
#include "stage/geometry.h"

namespace stage {

void BoundedMaxHeap::offer(double d2, int id) {
  const std::pair<double, int> e{d2, id};
  if (static_cast<int>(entries_.size()) < k_) {
    entries_.push_back(e);
    std::push_heap(entries_.begin(), entries_.end());
    return;
  }
  if (k_ > 0 && e < entries_.front()) {
    std::pop_heap(entries_.begin(), entries_.end());
    entries_.back() = e;
    std::push_heap(entries_.begin(), entries_.end());
  }
}

StableRegistry::StableRegistry(std::vector<StableState> c_s, int k, const StateWeights& w)
    : states(std::move(c_s)), weights(w) {
  if (states.empty()) throw ValidationError("stable set is empty");
  if (k < 1) throw ValidationError("k must be >= 1");
  std::set<int> ids;
  for (const StableState& s : states) {
    if (!ids.insert(s.id).second)
      throw ValidationError("duplicate stable state id " + std::to_string(s.id));
  }
  heaps.assign(states.size(), BoundedMaxHeap(k));
  best_sq_distance.assign(states.size(), std::numeric_limits<double>::infinity());
}

void PlannerConfig::validate() const {
  if (n_max < 0) throw ValidationError("n_max must be >= 0");
  if (k < 1) throw ValidationError("k must be >= 1");
  if (n < 1) throw ValidationError("n must be >= 1");
  if (n > n_candidates) throw ValidationError("n exceeds n_candidates");
  if (stable_sample_prob < 0.0 || stable_sample_prob > 1.0)
    throw ValidationError("stable_sample_prob outside [0,1]");
  if (epsilon < 0.0 || d_min < 0.0) throw ValidationError("epsilon and d_min must be >= 0");
  if (action_duration <= 0.0) throw ValidationError("action_duration must be > 0");
}

double default_epsilon(const SceneSpec& scene, const StateWeights& w) {
  const double diag = (scene.workspace_hi - scene.workspace_lo).norm();
  return 0.05 * std::sqrt(w.object) * diag;
}

SystemState sample_uniform_state(const SceneSpec& scene, Rng& rng) {
  SystemState s = default_state(scene);
  for (size_t r = 0; r < scene.robots.size(); ++r) {
    const RobotSpec& spec = scene.robots[r];
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = rng.uniform(spec.pos_lo[a], spec.pos_hi[a]);
    s.set_robot_pos(static_cast<int>(r), p);
  }
  for (size_t o = 0; o < scene.objects.size(); ++o) {
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = rng.uniform(scene.workspace_lo[a], scene.workspace_hi[a]);
    s.object_poses[o].pos = p;
    if (scene.objects[o].kind == ShapeKind::Box) s.object_poses[o].quat = uniform_quat(rng);
  }
  s.zero_velocities();
  return s;
}

Target select_target(const StableRegistry& registry, const SceneSpec& scene, Rng& rng,
                     double stable_sample_prob) {
  if (rng.bernoulli(stable_sample_prob)) {
    const int idx = static_cast<int>(rng.below(static_cast<std::uint64_t>(registry.size())));
    return Target{registry.states[static_cast<size_t>(idx)].config, idx};
  }
  return Target{sample_uniform_state(scene, rng), -1};
}

std::vector<int> k_nearest(const SearchTree& tree, int target_index) {
  if (tree.nodes.empty()) throw ValidationError("empty tree");
  if (target_index < 0 || target_index >= tree.registry.size())
    throw ValidationError("target is not a tracked stable state");
  std::vector<int> ids;
  for (const auto& [d2, id] : tree.registry.heaps[static_cast<size_t>(target_index)].entries()) {
    (void)d2;
    if (tree.nodes[static_cast<size_t>(id)].active) ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<int> k_nearest_scan(const SearchTree& tree, const SystemState& target, int k,
                                const StateWeights& w) {
  if (tree.nodes.empty()) throw ValidationError("empty tree");
  std::vector<std::pair<double, int>> scored;
  for (const TreeNode& node : tree.nodes) {
    if (!node.active) continue;
    scored.emplace_back(weighted_squared_distance(node.state, target, w), node.id);
  }
  const size_t keep = std::min(scored.size(), static_cast<size_t>(k));
  std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(keep), scored.end());
  std::vector<int> ids;
  ids.reserve(keep);
  for (size_t i = 0; i < keep; ++i) ids.push_back(scored[i].second);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void update_knn(StableRegistry& registry, const TreeNode& node) {
  for (int i = 0; i < registry.size(); ++i) {
    const double d2 =
        weighted_squared_distance(node.state, registry.states[static_cast<size_t>(i)].config,
                                  registry.weights);
    registry.heaps[static_cast<size_t>(i)].offer(d2, node.id);
    registry.best_sq_distance[static_cast<size_t>(i)] =
        std::min(registry.best_sq_distance[static_cast<size_t>(i)], d2);
  }
}

std::vector<ActionCommand> sample_candidate_actions(const SceneSpec& scene, int n_candidates,
                                                    double duration, Rng& rng) {
  std::vector<ActionCommand> out;
  out.reserve(static_cast<size_t>(n_candidates));
  for (int c = 0; c < n_candidates; ++c) {
    ActionCommand a;
    a.duration = duration;
    a.robot_target_vel.reserve(scene.robots.size());
    for (const RobotSpec& spec : scene.robots) {
      const double sigma = 0.5 * spec.max_speed;
      Vec3 v(sigma * rng.normal(), sigma * rng.normal(), sigma * rng.normal());
      a.robot_target_vel.push_back(clamp_norm(v, spec.max_speed));
    }
    out.push_back(std::move(a));
  }
  return out;
}

ExpansionResult optimize_actions(const SystemState& x_near, const SystemState& x_target, int n,
                                 int n_candidates, const SceneSpec& scene, const PlannerConfig& cfg,
                                 Rng& rng, ExecPolicy exec) {
  if (n > n_candidates) throw ValidationError("n exceeds n_candidates");
  std::vector<ActionCommand> actions =
      sample_candidate_actions(scene, n_candidates, cfg.action_duration, rng);
  std::vector<StepOutcome> outcomes = evaluate_actions(x_near, actions, scene, exec);

  ExpansionResult res;
  std::vector<std::pair<double, int>> scored;  // (squared distance, candidate index)
  for (int c = 0; c < n_candidates; ++c) {
    const StepOutcome& so = outcomes[static_cast<size_t>(c)];
    res.sim_steps += so.steps;
    if (so.diverged) continue;
    scored.emplace_back(weighted_squared_distance(so.state, x_target, cfg.weights), c);
  }
  if (scored.empty())
    throw AllDivergedError("all candidate rollouts diverged", res.sim_steps);
  std::sort(scored.begin(), scored.end());
  const size_t keep = std::min(scored.size(), static_cast<size_t>(n));
  res.best.reserve(keep);
  for (size_t i = 0; i < keep; ++i) {
    const int c = scored[i].second;
    res.best.push_back(ScoredAction{std::move(actions[static_cast<size_t>(c)]),
                                    std::move(outcomes[static_cast<size_t>(c)].state),
                                    scored[i].first});
  }
  return res;
}

bool reduces_distance(const std::vector<ScoredAction>& candidates, const TreeNode& x_near,
                      const StableRegistry& registry, const PlannerConfig& cfg) {
  if (candidates.empty()) return false;
  for (int j = 0; j < registry.size(); ++j) {
    const SystemState& goal = registry.states[static_cast<size_t>(j)].config;
    const double base = cfg.rejection_against_best
                            ? registry.best_sq_distance[static_cast<size_t>(j)]
                            : weighted_squared_distance(x_near.state, goal, registry.weights);
    for (const ScoredAction& c : candidates) {
      if (weighted_squared_distance(c.end_state, goal, registry.weights) <
          base - cfg.progress_tol)
        return true;
    }
  }
  return false;
}

SearchTree build_tree(const PlannerConfig& cfg, const std::vector<StableState>& c_s,
                      const SceneSpec& scene, ExecPolicy exec) {
  cfg.validate();
  if (c_s.empty()) throw ValidationError("stable set is empty");
  if (cfg.m > 0 && cfg.m != static_cast<int>(c_s.size()))
    throw ValidationError("config m disagrees with the stable set size");

  SearchTree tree{{}, StableRegistry(c_s, cfg.k, cfg.weights), -1, {}};

  Rng root_rng(derive_seed(cfg.seed, streams::kRoot));
  const size_t root_idx = root_rng.below(c_s.size());
  tree.root_stable_id = c_s[root_idx].id;
  TreeNode root;
  root.id = 0;
  root.state = c_s[root_idx].config;
  root.created_at = -1;
  tree.nodes.push_back(root);
  update_knn(tree.registry, tree.nodes[0]);

  for (int i = 0; i < cfg.n_max; ++i) {
    ++tree.stats.iterations;

    Rng target_rng(derive_seed(cfg.seed, streams::kTargets, static_cast<std::uint64_t>(i)));
    const Target target = select_target(tree.registry, scene, target_rng, cfg.stable_sample_prob);

    const std::vector<int> near =
        target.stable_index >= 0 ? k_nearest(tree, target.stable_index)
                                 : k_nearest_scan(tree, target.state, cfg.k, cfg.weights);
    if (near.empty()) {
      ++tree.stats.skipped_no_nodes;
      continue;
    }
    Rng choice_rng(derive_seed(cfg.seed, streams::kNearChoice, static_cast<std::uint64_t>(i)));
    const int near_id = near[choice_rng.below(near.size())];

    Rng action_rng(derive_seed(cfg.seed, streams::kActions, static_cast<std::uint64_t>(i)));
    ExpansionResult er;
    try {
      er = optimize_actions(tree.nodes[static_cast<size_t>(near_id)].state, target.state, cfg.n,
                            cfg.n_candidates, scene, cfg, action_rng, exec);
    } catch (const AllDivergedError& e) {
      ++tree.stats.skipped_diverged;
      tree.stats.sim_steps += e.sim_steps;
      continue;
    }
    tree.stats.sim_steps += er.sim_steps;

    TreeNode& x_near = tree.nodes[static_cast<size_t>(near_id)];
    if (reduces_distance(er.best, x_near, tree.registry, cfg)) {
      ++tree.stats.expansions;
      const int parent_depth = x_near.depth;
      for (ScoredAction& sa : er.best) {
        TreeNode child;
        child.id = static_cast<int>(tree.nodes.size());
        child.state = std::move(sa.end_state);
        child.parent = near_id;
        child.incoming_action = std::move(sa.action);
        child.depth = parent_depth + 1;
        child.created_at = i;
        tree.nodes.push_back(std::move(child));
        update_knn(tree.registry, tree.nodes.back());
      }
    } else if (cfg.node_rejection) {
      if (x_near.active) {
        x_near.active = false;
        x_near.disabled_at = i;
        ++tree.stats.rejections;
      }
    }
  }
  return tree;
}

double hausdorff(const Path& p, const Path& q, const StateWeights& w) {
  if (p.states.empty() || q.states.empty()) throw ValidationError("empty path");
  auto directed = [&w](const Path& a, const Path& b) {
    double worst = 0.0;
    for (const SystemState& sa : a.states) {
      double best = std::numeric_limits<double>::infinity();
      for (const SystemState& sb : b.states)
        best = std::min(best, weighted_squared_distance(sa, sb, w));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(std::max(directed(p, q), directed(q, p)));
}

std::vector<Path> extract_paths(const SearchTree& tree, double epsilon) {
  if (epsilon <= 0.0) throw ValidationError("epsilon must be > 0");
  std::vector<Path> out;
  for (const TreeNode& node : tree.nodes) {
    for (int j = 0; j < tree.registry.size(); ++j) {
      const StableState& goal = tree.registry.states[static_cast<size_t>(j)];
      if (goal.id == tree.root_stable_id) continue;
      const double d = std::sqrt(
          weighted_squared_distance(node.state, goal.config, tree.registry.weights));
      if (d >= epsilon) continue;
      Path path;
      path.start_id = tree.root_stable_id;
      path.goal_id = goal.id;
      path.terminal_distance = d;
      path.node_id = node.id;
      std::vector<int> chain;
      for (int cur = node.id; cur != -1; cur = tree.nodes[static_cast<size_t>(cur)].parent)
        chain.push_back(cur);
      std::reverse(chain.begin(), chain.end());
      for (int id : chain) {
        const TreeNode& n = tree.nodes[static_cast<size_t>(id)];
        path.states.push_back(n.state);
        if (n.incoming_action) path.actions.push_back(*n.incoming_action);
      }
      out.push_back(std::move(path));
    }
  }
  return out;
}

std::vector<Path> remove_redundant(const std::vector<Path>& paths, double d_min, Rng& rng,
                                   const StateWeights& w) {
  std::map<int, std::vector<size_t>> by_goal;
  for (size_t i = 0; i < paths.size(); ++i) by_goal[paths[i].goal_id].push_back(i);

  std::vector<Path> out;
  for (auto& [goal, idxs] : by_goal) {
    (void)goal;
    rng.shuffle(idxs);
    std::vector<size_t> kept;
    for (size_t idx : idxs) {
      bool novel = true;
      for (size_t kept_idx : kept) {
        if (hausdorff(paths[idx], paths[kept_idx], w) <= d_min) {
          novel = false;
          break;
        }
      }
      if (novel) kept.push_back(idx);
    }
    for (size_t idx : kept) out.push_back(paths[idx]);
  }
  return out;
}

void to_json(json& j, const StateWeights& w) {
  j = json{{"object", w.object}, {"robot", w.robot}, {"velocity", w.velocity}};
}

void from_json(const json& j, StateWeights& w) {
  StateWeights d;
  w.object = j.value("object", d.object);
  w.robot = j.value("robot", d.robot);
  w.velocity = j.value("velocity", d.velocity);
}

void to_json(json& j, const PlannerConfig& c) {
  j = json{{"n_max", c.n_max},
           {"m", c.m},
           {"k", c.k},
           {"n", c.n},
           {"n_candidates", c.n_candidates},
           {"epsilon", c.epsilon},
           {"d_min", c.d_min},
           {"weights", c.weights},
           {"stable_sample_prob", c.stable_sample_prob},
           {"node_rejection", c.node_rejection},
           {"seed", c.seed},
           {"action_duration", c.action_duration},
           {"progress_tol", c.progress_tol},
           {"rejection_against_best", c.rejection_against_best}};
}

void from_json(const json& j, PlannerConfig& c) {
  PlannerConfig d;
  c.n_max = j.value("n_max", d.n_max);
  c.m = j.value("m", d.m);
  c.k = j.value("k", d.k);
  c.n = j.value("n", d.n);
  c.n_candidates = j.value("n_candidates", d.n_candidates);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.d_min = j.value("d_min", d.d_min);
  c.weights = j.value("weights", d.weights);
  c.stable_sample_prob = j.value("stable_sample_prob", d.stable_sample_prob);
  c.node_rejection = j.value("node_rejection", d.node_rejection);
  c.seed = j.value("seed", d.seed);
  c.action_duration = j.value("action_duration", d.action_duration);
  c.progress_tol = j.value("progress_tol", d.progress_tol);
  c.rejection_against_best = j.value("rejection_against_best", d.rejection_against_best);
}

void to_json(json& j, const Path& p) {
  j = json{{"start_id", p.start_id},
           {"goal_id", p.goal_id},
           {"terminal_distance", p.terminal_distance},
           {"node_id", p.node_id},
           {"actions", p.actions},
           {"states", p.states}};
}

void from_json(const json& j, Path& p) {
  p.start_id = j.value("start_id", -1);
  j.at("goal_id").get_to(p.goal_id);
  j.at("terminal_distance").get_to(p.terminal_distance);
  p.node_id = j.value("node_id", -1);
  j.at("actions").get_to(p.actions);
  j.at("states").get_to(p.states);
}

void write_paths_jsonl(const std::string& path, const std::vector<Path>& paths) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot open " + path + " for writing");
  for (const Path& p : paths) {
    json j = p;
    f << j.dump() << "\n";
  }
}

std::vector<Path> read_paths_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open " + path);
  std::vector<Path> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(json::parse(line).get<Path>());
  }
  return out;
}

void dump_tree_jsonl(std::ostream& os, const SearchTree& tree) {
  for (const TreeNode& n : tree.nodes) {
    json j{{"id", n.id},       {"parent", n.parent},         {"depth", n.depth},
           {"active", n.active}, {"created_at", n.created_at}, {"disabled_at", n.disabled_at},
           {"state", n.state}};
    if (n.incoming_action) j["action"] = *n.incoming_action;
    os << j.dump() << "\n";
  }
}

void dump_tree_jsonl(const std::string& path, const SearchTree& tree) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot open " + path + " for writing");
  dump_tree_jsonl(f, tree);
}

}  // namespace stage
