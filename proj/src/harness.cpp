#include "stage/harness.h"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "stage/errors.h"

namespace stage {

namespace {

double parse_double(const std::string& s, const char* what) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ValidationError(std::string("metrics csv: bad ") + what + " value '" + s + "'");
  return v;
}

std::string scene_label(const ExperimentConfig& c) {
  if (c.scene_spec && !c.scene_spec->name.empty()) return c.scene_spec->name;
  return c.scene;
}

// A header line carries the experiment config; data lines never contain a
// "config" object with a "scene" member (StableState's config is a state).
bool is_header_line(const json& j) {
  return j.is_object() && j.contains("config") && j.at("config").is_object() &&
         j.at("config").contains("scene");
}

json header_json(const ExperimentConfig& c) {
  json h;
  h["config"] = c;
  return h;
}

std::vector<json> read_jsonl(const std::string& file, json* header_out) {
  std::ifstream f(file);
  if (!f) throw ValidationError("cannot open " + file);
  std::vector<json> lines;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (first && is_header_line(j)) {
      if (header_out) *header_out = j;
      first = false;
      continue;
    }
    first = false;
    lines.push_back(std::move(j));
  }
  return lines;
}

}  // namespace

// --- ExperimentConfig -------------------------------------------------------

SceneSpec ExperimentConfig::resolve_scene() const {
  if (scene_spec) {
    scene_spec->validate();
    return *scene_spec;
  }
  return builtin_scene(scene);
}

PlannerConfig ExperimentConfig::method_planner() const {
  if (method == "predictive_sampling")
    throw ValidationError("predictive_sampling does not run the tree planner");
  if (method == "rrt_sim") {
    PlannerConfig c = planner;
    c.k = 1;
    c.n = 1;
    c.node_rejection = false;
    c.stable_sample_prob = goal_bias;
    return c;
  }
  return variant_config(planner, method);  // "stage" or an ablation name
}

BaselineConfig ExperimentConfig::baseline_config() const {
  BaselineConfig b;
  b.planner = planner;
  b.goal_bias = goal_bias;
  b.ps_horizon = ps_horizon;
  b.ps_samples = ps_samples;
  return b;
}

void ExperimentConfig::validate() const {
  resolve_scene();
  planner.validate();
  if (seeds.empty()) throw ValidationError("seeds must be nonempty");
  if (method != "rrt_sim" && method != "predictive_sampling") {
    const auto& names = ablation_variants();
    if (std::find(names.begin(), names.end(), method) == names.end())
      throw ValidationError("unknown method: " + method);
  }
  if (cs_file.empty() && m < 1) throw ValidationError("m must be >= 1");
  if (max_attempts < 1) throw ValidationError("max_attempts must be >= 1");
  if (goal_bias < 0.0 || goal_bias > 1.0) throw ValidationError("goal_bias must be in [0,1]");
  if (ps_horizon < 1) throw ValidationError("ps_horizon must be >= 1");
  if (ps_samples < 1) throw ValidationError("ps_samples must be >= 1");
  if (ps_budget_steps < 0) throw ValidationError("ps_budget_steps must be >= 0");
  if (output_dir.empty()) throw ValidationError("output_dir must be set");
}

void to_json(json& j, const ExperimentConfig& c) {
  if (c.scene_spec)
    j["scene"] = *c.scene_spec;
  else
    j["scene"] = c.scene;
  j["method"] = c.method;
  j["planner"] = c.planner;
  j["goal_bias"] = c.goal_bias;
  j["ps_horizon"] = c.ps_horizon;
  j["ps_samples"] = c.ps_samples;
  j["ps_budget_steps"] = c.ps_budget_steps;
  j["m"] = c.m;
  j["max_attempts"] = c.max_attempts;
  j["cs_seed"] = c.cs_seed;
  j["cs_file"] = c.cs_file;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["emit"] = json{{"paths", c.emit_paths},
                   {"tree", c.emit_tree},
                   {"metrics", c.emit_metrics},
                   {"adjacency", c.emit_adjacency}};
  j["entropy"] = c.entropy;
}

void from_json(const json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  if (j.contains("scene")) {
    if (j.at("scene").is_string())
      c.scene = j.at("scene").get<std::string>();
    else {
      c.scene_spec = j.at("scene").get<SceneSpec>();
      c.scene = c.scene_spec->name;
    }
  }
  c.method = j.value("method", d.method);
  c.planner = j.value("planner", d.planner);
  c.goal_bias = j.value("goal_bias", d.goal_bias);
  c.ps_horizon = j.value("ps_horizon", d.ps_horizon);
  c.ps_samples = j.value("ps_samples", d.ps_samples);
  c.ps_budget_steps = j.value("ps_budget_steps", d.ps_budget_steps);
  c.m = j.value("m", d.m);
  c.max_attempts = j.value("max_attempts", d.max_attempts);
  c.cs_seed = j.value("cs_seed", d.cs_seed);
  c.cs_file = j.value("cs_file", d.cs_file);
  c.seeds = j.value("seeds", d.seeds);
  c.output_dir = j.value("output_dir", d.output_dir);
  if (j.contains("emit")) {
    const json& e = j.at("emit");
    c.emit_paths = e.value("paths", d.emit_paths);
    c.emit_tree = e.value("tree", d.emit_tree);
    c.emit_metrics = e.value("metrics", d.emit_metrics);
    c.emit_adjacency = e.value("adjacency", d.emit_adjacency);
  }
  c.entropy = j.value("entropy", d.entropy);
}

// --- file names and writers -------------------------------------------------

std::string stable_file_name(const ExperimentConfig& c) {
  return scene_label(c) + "_stable.jsonl";
}

std::string paths_file_name(const ExperimentConfig& c, std::uint64_t seed) {
  return scene_label(c) + "_" + c.method + "_" + std::to_string(seed) + ".jsonl";
}

std::string tree_file_name(const ExperimentConfig& c, std::uint64_t seed) {
  return scene_label(c) + "_" + c.method + "_" + std::to_string(seed) + "_tree.jsonl";
}

std::string metrics_file_name(const ExperimentConfig& c) {
  return scene_label(c) + "_" + c.method + "_metrics.csv";
}

std::string adjacency_csv_name(const ExperimentConfig& c) {
  return scene_label(c) + "_" + c.method + "_adjacency.csv";
}

std::string adjacency_ppm_name(const ExperimentConfig& c) {
  return scene_label(c) + "_" + c.method + "_adjacency.ppm";
}

void write_stable_file(const std::string& file, const ExperimentConfig& c,
                       const std::vector<StableState>& states) {
  std::ofstream f(file);
  if (!f) throw ValidationError("cannot open " + file + " for writing");
  f << header_json(c).dump() << "\n";
  for (const StableState& s : states) {
    json j;
    to_json(j, s);
    f << j.dump() << "\n";
  }
}

void write_paths_file(const std::string& file, const ExperimentConfig& c, std::uint64_t seed,
                      const std::vector<Path>& paths) {
  std::ofstream f(file);
  if (!f) throw ValidationError("cannot open " + file + " for writing");
  json h = header_json(c);
  h["seed"] = seed;
  f << h.dump() << "\n";
  for (const Path& p : paths) {
    json j;
    to_json(j, p);
    f << j.dump() << "\n";
  }
}

std::vector<StableState> read_stable_file(const std::string& file, json* header_out) {
  std::vector<StableState> out;
  for (const json& j : read_jsonl(file, header_out)) out.push_back(j.get<StableState>());
  return out;
}

std::vector<Path> read_paths_file(const std::string& file, json* header_out) {
  std::vector<Path> out;
  for (const json& j : read_jsonl(file, header_out)) out.push_back(j.get<Path>());
  return out;
}

// --- stable set ---------------------------------------------------------

std::vector<StableState> obtain_stable_states(const ExperimentConfig& c, const SceneSpec& scene,
                                              ExecPolicy exec) {
  if (!c.cs_file.empty()) return read_stable_file(c.cs_file);
  return sample_stable_states(c.m, c.max_attempts, scene, c.cs_seed, {}, exec);
}

// --- plan experiment ------------------------------------------------------

namespace {

// The all-pairs MPC as one "seed run": successful pairs become paths, the
// success rate stands in for coverage.
SeedRun run_mpc_seed(const ExperimentConfig& c, const std::vector<StableState>& c_s,
                     const SceneSpec& scene, std::uint64_t seed, ExecPolicy exec) {
  SeedRun run;
  run.seed = seed;
  run.epsilon =
      c.planner.epsilon > 0 ? c.planner.epsilon : default_epsilon(scene, c.planner.weights);

  long budget = c.ps_budget_steps;
  if (budget == 0) {
    // parity by construction: grant the MPC exactly the simulator steps one
    // tree run on this seed consumed
    PlannerConfig pc = c.planner;
    pc.seed = seed;
    SearchTree t = build_tree(pc, c_s, scene, exec);
    budget = t.stats.sim_steps;
  }

  PsSummary ps = run_ps_all_pairs(c.baseline_config(), c_s, scene, run.epsilon, budget, seed, exec);
  run.mpc_budget_steps = ps.attempts > 0 ? budget / ps.attempts : budget;
  for (const PsPairOutcome& p : ps.pairs) {
    if (!p.result.success) continue;
    Path path;
    path.states = p.result.trajectory;
    path.actions = p.result.actions;
    path.start_id = p.start_id;
    path.goal_id = p.goal_id;
    path.terminal_distance = p.result.final_distance;
    run.paths.push_back(std::move(path));
  }

  run.report = metrics_from_paths(run.paths, c_s, -1, scene, c.planner.weights, c.entropy, seed);
  run.report.coverage_pct = ps.success_rate_pct;
  run.report.notes.insert(run.report.notes.begin(),
                          "coverage is the all-pairs success rate: " +
                              std::to_string(ps.successes) + "/" + std::to_string(ps.attempts) +
                              " pairs, " + std::to_string(run.mpc_budget_steps) +
                              " simulator steps each");
  run.ok = true;
  return run;
}

}  // namespace

PlanResult run_plan_experiment(const ExperimentConfig& c, const std::vector<StableState>& c_s,
                               ExecPolicy exec) {
  c.validate();
  const SceneSpec scene = c.resolve_scene();
  std::filesystem::create_directories(c.output_dir);
  const auto out_path = [&](const std::string& name) { return c.output_dir + "/" + name; };

  PlanResult result;
  for (std::uint64_t seed : c.seeds) {
    SeedRun run;
    run.seed = seed;
    try {
      if (c.method == "predictive_sampling") {
        run = run_mpc_seed(c, c_s, scene, seed, exec);
      } else {
        // every tree method funnels through run_stage with the method's
        // config deltas; rrt_sim's delta application lives in method_planner
        PlannerConfig pc = c.method_planner();
        pc.seed = seed;
        RunOutcome out = run_stage(pc, c_s, scene, c.entropy, exec);
        run.report = std::move(out.report);
        run.stats = out.tree.stats;
        run.paths = std::move(out.paths);
        run.epsilon = out.epsilon;
        run.d_min = out.d_min;
        run.root_stable_id = out.tree.root_stable_id;
        run.ok = true;
        if (c.emit_tree) {
          const std::string file = out_path(tree_file_name(c, seed));
          std::ofstream f(file);
          if (!f) throw ValidationError("cannot open " + file + " for writing");
          json h = header_json(c);
          h["seed"] = seed;
          f << h.dump() << "\n";
          dump_tree_jsonl(f, out.tree);
          result.written.push_back(file);
        }
      }
    } catch (const std::exception& e) {
      run.ok = false;
      run.error = e.what();
    }
    if (run.ok && c.emit_paths) {
      const std::string file = out_path(paths_file_name(c, seed));
      write_paths_file(file, c, seed, run.paths);
      result.written.push_back(file);
    }
    result.runs.push_back(std::move(run));
  }

  if (c.emit_metrics) {
    const std::string file = out_path(metrics_file_name(c));
    std::ofstream f(file);
    if (!f) throw ValidationError("cannot open " + file + " for writing");
    f << metrics_csv_text(c, result.runs);
    result.written.push_back(file);
  }

  if (c.emit_adjacency) {
    std::vector<Path> all;
    for (const SeedRun& r : result.runs)
      if (r.ok) all.insert(all.end(), r.paths.begin(), r.paths.end());
    AdjacencyMatrix m = build_adjacency(all, c_s);
    const std::string csv = out_path(adjacency_csv_name(c));
    std::ofstream f(csv);
    if (!f) throw ValidationError("cannot open " + csv + " for writing");
    f << adjacency_csv_text(c, m);
    result.written.push_back(csv);
    const std::string ppm = out_path(adjacency_ppm_name(c));
    write_adjacency_ppm(ppm, c, m);
    result.written.push_back(ppm);
  }

  return result;
}

// --- metrics CSV ------------------------------------------------------------

std::string emit_metrics_csv(const json& config, const std::vector<MetricsCsvRow>& rows) {
  std::string text = "# config=" + config.dump() + "\n" + metrics_csv_header() + "\n";
  for (const MetricsCsvRow& r : rows)
    text += metrics_csv_row(r.scene, r.method, r.seed, r.count, r.coverage, r.entropy,
                            r.avg_hausdorff) +
            "\n";
  return text;
}

std::string metrics_csv_text(const ExperimentConfig& c, const std::vector<SeedRun>& runs) {
  std::vector<MetricsCsvRow> rows;
  const std::string label = scene_label(c);
  double count = 0.0, cov = 0.0, ent = 0.0, hd = 0.0;
  int ok = 0, ent_n = 0, hd_n = 0;
  for (const SeedRun& r : runs) {
    if (!r.ok) continue;
    MetricsCsvRow row{label,
                      c.method,
                      std::to_string(r.seed),
                      double(r.report.path_count),
                      r.report.coverage_pct,
                      r.report.entropy_nats,
                      r.report.avg_hausdorff};
    rows.push_back(std::move(row));
    ++ok;
    count += r.report.path_count;
    cov += r.report.coverage_pct;
    if (r.report.entropy_nats) {
      ent += *r.report.entropy_nats;
      ++ent_n;
    }
    if (r.report.avg_hausdorff) {
      hd += *r.report.avg_hausdorff;
      ++hd_n;
    }
  }
  if (ok > 0) {
    MetricsCsvRow mean{label,
                       c.method,
                       "mean",
                       count / ok,
                       cov / ok,
                       ent_n ? std::optional<double>(ent / ent_n) : std::nullopt,
                       hd_n ? std::optional<double>(hd / hd_n) : std::nullopt};
    rows.push_back(std::move(mean));
  }
  return emit_metrics_csv(json(c), rows);
}

MetricsCsv parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# config=", 0) != 0)
    throw ValidationError("metrics csv: missing config line");
  MetricsCsv out;
  out.config = json::parse(line.substr(9));
  if (!std::getline(in, line) || line != metrics_csv_header())
    throw ValidationError("metrics csv: bad column header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    size_t pos = 0;
    for (;;) {
      size_t comma = line.find(',', pos);
      if (comma == std::string::npos) {
        cells.push_back(line.substr(pos));
        break;
      }
      cells.push_back(line.substr(pos, comma - pos));
      pos = comma + 1;
    }
    if (cells.size() != 7) throw ValidationError("metrics csv: expected 7 cells per row");
    MetricsCsvRow r;
    r.scene = cells[0];
    r.method = cells[1];
    r.seed = cells[2];
    r.count = parse_double(cells[3], "count");
    r.coverage = parse_double(cells[4], "coverage");
    if (!cells[5].empty()) r.entropy = parse_double(cells[5], "entropy");
    if (!cells[6].empty()) r.avg_hausdorff = parse_double(cells[6], "avg_hausdorff");
    out.rows.push_back(std::move(r));
  }
  return out;
}

// --- adjacency ---------------------------------------------------------

int AdjacencyMatrix::total() const {
  int t = 0;
  for (const auto& row : counts)
    for (int c : row) t += c;
  return t;
}

int AdjacencyMatrix::row_sum(int id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end())
    throw UnknownGoalIdError("stable id " + std::to_string(id) + " not in adjacency matrix");
  const auto& row = counts[static_cast<size_t>(it - ids.begin())];
  int t = 0;
  for (int c : row) t += c;
  return t;
}

AdjacencyMatrix build_adjacency(const std::vector<Path>& paths,
                                const std::vector<StableState>& c_s) {
  AdjacencyMatrix m;
  for (const StableState& s : c_s) m.ids.push_back(s.id);
  std::sort(m.ids.begin(), m.ids.end());
  if (std::adjacent_find(m.ids.begin(), m.ids.end()) != m.ids.end())
    throw ValidationError("stable ids must be unique");
  std::map<int, size_t> index;
  for (size_t i = 0; i < m.ids.size(); ++i) index[m.ids[i]] = i;
  m.counts.assign(m.ids.size(), std::vector<int>(m.ids.size(), 0));
  for (const Path& p : paths) {
    auto si = index.find(p.start_id);
    auto gi = index.find(p.goal_id);
    if (si == index.end())
      throw UnknownGoalIdError("path start id " + std::to_string(p.start_id) +
                               " not in the stable set");
    if (gi == index.end())
      throw UnknownGoalIdError("path goal id " + std::to_string(p.goal_id) +
                               " not in the stable set");
    ++m.counts[si->second][gi->second];
  }
  return m;
}

std::string adjacency_csv_text(const ExperimentConfig& c, const AdjacencyMatrix& m) {
  std::string text = "# config=" + json(c).dump() + "\n";
  text += "start\\goal";
  for (int id : m.ids) text += "," + std::to_string(id);
  text += "\n";
  for (size_t i = 0; i < m.ids.size(); ++i) {
    text += std::to_string(m.ids[i]);
    for (int v : m.counts[i]) text += "," + std::to_string(v);
    text += "\n";
  }
  return text;
}

void write_adjacency_ppm(const std::string& file, const ExperimentConfig& c,
                         const AdjacencyMatrix& m) {
  const int n = static_cast<int>(m.ids.size());
  if (n == 0) throw ValidationError("cannot render an empty adjacency matrix");
  int max_count = 0;
  for (const auto& row : m.counts)
    for (int v : row) max_count = std::max(max_count, v);

  std::ofstream f(file, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + file + " for writing");
  f << "P6\n# config=" << json(c).dump() << "\n" << n << " " << n << "\n255\n";
  // zero cells get a sentinel blue so "no paths" never blends into the ramp;
  // positive counts run linearly from near-white to dark red
  const unsigned char zero_rgb[3] = {30, 60, 150};
  const double lo[3] = {255, 237, 222};
  const double hi[3] = {165, 15, 21};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int v = m.counts[static_cast<size_t>(i)][static_cast<size_t>(j)];
      unsigned char px[3];
      if (v == 0) {
        px[0] = zero_rgb[0];
        px[1] = zero_rgb[1];
        px[2] = zero_rgb[2];
      } else {
        const double t = max_count > 1 ? double(v - 1) / double(max_count - 1) : 0.0;
        for (int ch = 0; ch < 3; ++ch)
          px[ch] = static_cast<unsigned char>(lo[ch] + t * (hi[ch] - lo[ch]) + 0.5);
      }
      f.write(reinterpret_cast<const char*>(px), 3);
    }
  }
}

}  // namespace stage
