#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "skyline/horizon.hpp"
#include "skyline/motion.hpp"
#include "skyline/solver.hpp"
#include "skyline/transcription.hpp"
#include "skyline/urdf.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace skyline;

namespace {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

const char* joint_kind_name(urdf::JointKind k) {
  switch (k) {
    case urdf::JointKind::revolute: return "revolute";
    case urdf::JointKind::continuous: return "continuous";
    case urdf::JointKind::prismatic: return "prismatic";
    case urdf::JointKind::fixed: return "fixed";
  }
  return "?";
}

void require_keys(const json& j, const std::string& where,
                  const std::vector<std::string>& allowed) {
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown key '" + key + "' in " + where);
}

Eigen::Vector3d vec3(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw ConfigError(where + " must be an array of 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

struct Run {
  std::string scenario;
  urdf::KinematicModel model;
  motion::ScenarioConfig config;
  int n_mpc_iterations = 100;
};

Run load_run(const std::string& config_path, const std::string& solver_override) {
  std::ifstream in(config_path);
  if (!in) throw ConfigError("cannot open config file: " + config_path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }

  require_keys(j, "config",
               {"schema_version", "scenario", "urdf", "contact_frames",
                "n_nodes", "dt", "solver", "integrator", "q0_joints", "weights",
                "friction", "mu", "torque_limits", "clearance_apex",
                "solver_options", "leap", "turn", "walk"});
  if (j.value("schema_version", 0) != 1)
    throw ConfigError("unsupported schema_version (expected 1)");

  Run run;
  run.scenario = j.at("scenario").get<std::string>();
  if (run.scenario != "leap" && run.scenario != "turn" && run.scenario != "walk")
    throw ConfigError("unknown scenario '" + run.scenario + "'");

  fs::path urdf_path = j.at("urdf").get<std::string>();
  if (urdf_path.is_relative())
    urdf_path = fs::path(config_path).parent_path() / urdf_path;
  run.model = urdf::attach_floating_base(urdf::parse_urdf_file(urdf_path.string()));

  motion::ScenarioConfig& cfg = run.config;
  for (const auto& f : j.at("contact_frames"))
    cfg.contact_frames.push_back(f.get<std::string>());
  cfg.n_nodes = j.value("n_nodes", 0);
  cfg.dt = j.value("dt", 0.0);
  cfg.solver = j.value("solver", "gnsqp");
  if (!solver_override.empty()) cfg.solver = solver_override;
  if (cfg.solver != "gnsqp" && cfg.solver != "ilqr")
    throw ConfigError("unknown solver '" + cfg.solver + "'");
  cfg.integrator =
      transcription::integrator_from_string(j.value("integrator", "rk4"));

  cfg.q0_joints = Eigen::VectorXd::Zero(run.model.n_movable);
  for (const auto& [name, value] : j.at("q0_joints").items()) {
    const int ji = run.model.joint_index(name);
    if (ji < 0) throw ConfigError("q0_joints: unknown joint '" + name + "'");
    const auto& joint = run.model.joints[ji];
    if (!joint.movable())
      throw ConfigError("q0_joints: joint '" + name + "' is fixed");
    cfg.q0_joints[joint.coord_index] = value.get<double>();
  }

  if (j.contains("weights")) {
    const json& w = j["weights"];
    require_keys(w, "weights", {"min_f", "min_v", "v_ref", "postural"});
    cfg.w_min_f = w.value("min_f", cfg.w_min_f);
    cfg.w_min_v = w.value("min_v", cfg.w_min_v);
    cfg.w_v_ref = w.value("v_ref", cfg.w_v_ref);
    cfg.w_postural = w.value("postural", cfg.w_postural);
  }
  cfg.friction = j.value("friction", cfg.friction);
  cfg.mu = j.value("mu", cfg.mu);
  cfg.torque_limits = j.value("torque_limits", cfg.torque_limits);
  cfg.clearance_apex = j.value("clearance_apex", cfg.clearance_apex);

  if (j.contains("solver_options")) {
    const json& s = j["solver_options"];
    require_keys(s, "solver_options",
                 {"max_iterations", "tolerance", "merit_penalty", "ilqr_reg",
                  "verbosity"});
    cfg.solver_options.max_iterations =
        s.value("max_iterations", cfg.solver_options.max_iterations);
    cfg.solver_options.tolerance =
        s.value("tolerance", cfg.solver_options.tolerance);
    cfg.solver_options.merit_penalty =
        s.value("merit_penalty", cfg.solver_options.merit_penalty);
    cfg.solver_options.ilqr_reg = s.value("ilqr_reg", cfg.solver_options.ilqr_reg);
    cfg.solver_options.verbosity =
        s.value("verbosity", cfg.solver_options.verbosity);
  }
  if (const char* lvl = std::getenv("SKYLINE_LOG"))
    cfg.solver_options.verbosity = std::atoi(lvl);

  if (run.scenario == "leap") {
    if (!j.contains("leap") || !j["leap"].contains("p_des_offset"))
      throw ConfigError("leap config needs leap.p_des_offset");
    require_keys(j["leap"], "leap", {"p_des_offset"});
    cfg.p_des_offset = vec3(j["leap"]["p_des_offset"], "leap.p_des_offset");
  }
  if (run.scenario == "turn") {
    if (!j.contains("turn") || !j["turn"].contains("angle_deg"))
      throw ConfigError("turn config needs turn.angle_deg");
    require_keys(j["turn"], "turn", {"angle_deg"});
    cfg.turn_angle =
        j["turn"]["angle_deg"].get<double>() * M_PI / 180.0;
  }
  if (run.scenario == "walk") {
    if (!j.contains("walk") || !j["walk"].contains("v_ref"))
      throw ConfigError("walk config needs walk.v_ref");
    require_keys(j["walk"], "walk", {"v_ref", "n_mpc_iterations"});
    cfg.v_ref = vec3(j["walk"]["v_ref"], "walk.v_ref");
    run.n_mpc_iterations = j["walk"].value("n_mpc_iterations", 100);
    cfg.n_mpc_iterations = run.n_mpc_iterations;
    if (cfg.solver != "ilqr")
      throw ConfigError("walk runs the receding-horizon loop with ilqr");
  }
  return run;
}

int cmd_describe(const std::string& urdf_path, bool floating, bool as_json) {
  urdf::KinematicModel model = urdf::parse_urdf_file(urdf_path);
  if (floating) model = urdf::attach_floating_base(model);
  double mass = 0.0;
  for (const auto& l : model.links) mass += l.mass;

  if (as_json) {
    json out;
    out["nq"] = model.nq();
    out["nv"] = model.nv();
    out["floating_base"] = model.floating_base;
    out["mass"] = mass;
    out["root_link"] = model.links[model.root_link].name;
    out["joints"] = json::array();
    for (const auto& jt : model.joints) {
      json row{{"name", jt.name},
               {"type", joint_kind_name(jt.kind)},
               {"parent", jt.parent_link},
               {"child", jt.child_link}};
      if (jt.movable()) row["coord"] = jt.coord_index;
      if (jt.effort_limit) row["effort_limit"] = *jt.effort_limit;
      if (jt.position_limits)
        row["position_limits"] = {(*jt.position_limits)[0],
                                  (*jt.position_limits)[1]};
      out["joints"].push_back(row);
    }
    out["frames"] = json::array();
    for (const auto& fr : model.frames)
      out["frames"].push_back(
          {{"name", fr.name}, {"link", model.links[fr.link_index].name}});
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  std::cout << "nq " << model.nq() << "\n"
            << "nv " << model.nv() << "\n"
            << "floating base: " << (model.floating_base ? "yes" : "no") << "\n"
            << "total mass " << mass << " kg\n"
            << "joints (" << model.n_movable << " movable, " << model.joints.size()
            << " total):\n";
  for (const auto& jt : model.joints) {
    std::cout << "  " << jt.name << " [" << joint_kind_name(jt.kind) << "]";
    if (jt.movable()) std::cout << " coord " << jt.coord_index;
    if (jt.position_limits)
      std::cout << " range [" << (*jt.position_limits)[0] << ", "
                << (*jt.position_limits)[1] << "]";
    if (jt.effort_limit) std::cout << " effort " << *jt.effort_limit;
    std::cout << "\n";
  }
  std::cout << "frames (" << model.frames.size() << "):\n";
  for (const auto& fr : model.frames)
    std::cout << "  " << fr.name << " -> " << model.links[fr.link_index].name
              << "\n";
  return 0;
}

std::vector<std::string> trajectory_header(const motion::StateInputLayout& L,
                                           bool mpc) {
  std::vector<std::string> cols;
  if (mpc) cols.push_back("mpc_iter");
  cols.push_back("node");
  cols.push_back("t");
  for (int i = 0; i < L.nq; ++i) cols.push_back("q" + std::to_string(i));
  for (int i = 0; i < L.nv; ++i) cols.push_back("v" + std::to_string(i));
  for (int i = 0; i < L.nv; ++i) cols.push_back("a" + std::to_string(i));
  for (const auto& f : L.contact_frames)
    for (const char* ax : {"_x", "_y", "_z"}) cols.push_back("f_" + f + ax);
  return cols;
}

void write_row(std::ofstream& os, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) os << ',';
    os << cells[i];
  }
  os << '\n';
}

struct Outputs {
  fs::path trajectory, forces, iterations, summary;
};

Outputs output_paths(const fs::path& dir) {
  return {dir / "trajectory.csv", dir / "forces.csv", dir / "iterations.csv",
          dir / "summary.json"};
}

void write_solve_outputs(const Outputs& paths, const motion::Scenario& sc,
                         const solver::SolveResult& res) {
  const auto& L = sc.layout;
  const auto& prb = sc.problem;
  const Eigen::MatrixXd& q = res.trajectories.at("q");
  const Eigen::MatrixXd& v = res.trajectories.at("v");
  const Eigen::MatrixXd& a = res.trajectories.at("a");
  std::vector<const Eigen::MatrixXd*> f;
  for (const auto& name : L.contact_frames)
    f.push_back(&res.trajectories.at("f_" + name));

  std::ofstream tr(paths.trajectory);
  write_row(tr, trajectory_header(L, false));
  for (int k = 0; k <= prb.n_nodes; ++k) {
    std::vector<std::string> cells{std::to_string(k), fmt(k * prb.dt)};
    for (int i = 0; i < L.nq; ++i) cells.push_back(fmt(q(i, k)));
    for (int i = 0; i < L.nv; ++i) cells.push_back(fmt(v(i, k)));
    const bool has_input = k < prb.n_nodes;
    for (int i = 0; i < L.nv; ++i)
      cells.push_back(has_input ? fmt(a(i, k)) : "");
    for (int c = 0; c < L.n_contacts(); ++c)
      for (int i = 0; i < 3; ++i)
        cells.push_back(has_input ? fmt((*f[c])(i, k)) : "");
    write_row(tr, cells);
  }

  std::ofstream fo(paths.forces);
  std::vector<std::string> fhead{"node", "t"};
  for (const auto& name : L.contact_frames)
    for (const char* ax : {"_x", "_y", "_z"}) fhead.push_back("f_" + name + ax);
  write_row(fo, fhead);
  for (int k = 0; k < prb.n_nodes; ++k) {
    std::vector<std::string> cells{std::to_string(k), fmt(k * prb.dt)};
    for (int c = 0; c < L.n_contacts(); ++c)
      for (int i = 0; i < 3; ++i) cells.push_back(fmt((*f[c])(i, k)));
    write_row(fo, cells);
  }

  std::ofstream it(paths.iterations);
  it << solver::log_csv(res.log);
}

void write_mpc_outputs(const Outputs& paths, const motion::Scenario& sc,
                       const motion::MpcLog& log) {
  const auto& L = sc.layout;
  const double dt = sc.problem.dt;

  std::ofstream tr(paths.trajectory);
  write_row(tr, trajectory_header(L, true));
  std::ofstream fo(paths.forces);
  std::vector<std::string> fhead{"mpc_iter", "node", "t"};
  for (const auto& name : L.contact_frames)
    for (const char* ax : {"_x", "_y", "_z"}) fhead.push_back("f_" + name + ax);
  write_row(fo, fhead);

  for (std::size_t i = 0; i < log.steps.size(); ++i) {
    const auto& st = log.steps[i];
    if (st.x0.size() == 0) continue;  // aborted step carries no trajectory
    std::vector<std::string> cells{std::to_string(i), std::to_string(i),
                                   fmt(i * dt)};
    for (int r = 0; r < L.nq; ++r) cells.push_back(fmt(st.x0[r]));
    for (int r = 0; r < L.nv; ++r) cells.push_back(fmt(st.x0[L.nq + r]));
    for (int r = 0; r < L.nv; ++r) cells.push_back(fmt(st.u0[r]));
    for (int c = 0; c < L.n_contacts(); ++c)
      for (int r = 0; r < 3; ++r)
        cells.push_back(fmt(st.u0[L.force_offset(c) + r]));
    write_row(tr, cells);

    std::vector<std::string> frow{std::to_string(i), std::to_string(i),
                                  fmt(i * dt)};
    for (int c = 0; c < L.n_contacts(); ++c)
      for (int r = 0; r < 3; ++r)
        frow.push_back(fmt(st.u0[L.force_offset(c) + r]));
    write_row(fo, frow);
  }

  std::ofstream it(paths.iterations);
  it << "mpc_iter,status,iterations,objective,max_defect\n";
  for (std::size_t i = 0; i < log.steps.size(); ++i) {
    const auto& st = log.steps[i];
    it << i << ',' << solver::status_name(st.status) << ',' << st.iterations
       << ',' << fmt(st.objective) << ',' << fmt(st.max_defect) << '\n';
  }
}

int cmd_solve(const std::string& config_path, const std::string& out_dir,
              const std::string& solver_override, bool describe_only, int seed) {
  Run run = load_run(config_path, solver_override);

  motion::Scenario sc;
  if (run.scenario == "leap")
    sc = motion::build_leap(run.model, run.config);
  else if (run.scenario == "turn")
    sc = motion::build_turn(run.model, run.config);
  else
    sc = motion::build_walk(run.model, run.config);

  if (describe_only) {
    json out = json::parse(horizon::describe(sc.problem));
    out["scenario"] = run.scenario;
    out["solver"] = run.config.solver;
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  const fs::path dir(out_dir);
  fs::create_directories(dir);
  const Outputs paths = output_paths(dir);

  json summary;
  summary["schema_version"] = 1;
  summary["scenario"] = run.scenario;
  summary["solver"] = run.config.solver;
  summary["n_nodes"] = sc.problem.n_nodes;
  summary["dt"] = sc.problem.dt;
  summary["seed"] = seed;
  summary["outputs"] = {{"trajectory", paths.trajectory.string()},
                        {"forces", paths.forces.string()},
                        {"iterations", paths.iterations.string()},
                        {"summary", paths.summary.string()}};

  const auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  if (run.scenario == "walk") {
    const motion::MpcLog log = motion::run_receding_horizon(sc, run.config);
    const auto t1 = std::chrono::steady_clock::now();
    write_mpc_outputs(paths, sc, log);

    int warm_total = 0;
    double worst_defect = 0.0;
    for (std::size_t i = 1; i < log.steps.size(); ++i)
      warm_total += log.steps[i].iterations;
    for (const auto& st : log.steps)
      worst_defect = std::max(worst_defect, st.max_defect);
    ok = !log.aborted && !log.steps.empty();
    summary["status"] = ok ? "converged"
                           : (log.steps.empty()
                                  ? "diverged"
                                  : solver::status_name(log.steps.back().status));
    summary["iterations"] = log.cold_iterations + warm_total;
    summary["objective"] =
        log.steps.empty() ? 0.0 : log.steps.back().objective;
    summary["max_defect"] = worst_defect;
    summary["max_constraint_violation"] = worst_defect;
    summary["mpc"] = {
        {"n_steps", log.steps.size()},
        {"aborted", log.aborted},
        {"cold_iterations", log.cold_iterations},
        {"warm_iterations_mean",
         log.steps.size() > 1
             ? static_cast<double>(warm_total) /
                   static_cast<double>(log.steps.size() - 1)
             : 0.0}};
    summary["wall_time_seconds"] =
        std::chrono::duration<double>(t1 - t0).count();
  } else {
    solver::SolveResult res;
    if (run.config.solver == "gnsqp") {
      const horizon::Nlp nlp = horizon::assemble_nlp(sc.problem);
      res = solver::solve_gnsqp(nlp, run.config.solver_options);
    } else {
      res = solver::solve_ilqr(sc.problem, run.config.solver_options);
    }
    const auto t1 = std::chrono::steady_clock::now();
    write_solve_outputs(paths, sc, res);

    ok = res.status == solver::SolveStatus::converged;
    summary["status"] = solver::status_name(res.status);
    summary["objective"] = res.objective;
    summary["iterations"] = res.iterations;
    summary["kkt_residual"] = res.kkt_residual;
    summary["max_constraint_violation"] = res.constraint_violation;
    summary["max_defect"] =
        motion::max_defect(sc.problem, res, run.config.integrator);
    summary["wall_time_seconds"] =
        std::chrono::duration<double>(t1 - t0).count();
  }

  std::ofstream(paths.summary) << summary.dump(2) << "\n";
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Legged-robot trajectory optimization"};
  app.require_subcommand(1);

  std::string urdf_path;
  bool floating = false, as_json = false;
  auto* describe =
      app.add_subcommand("describe", "Report model dimensions, joints and mass");
  describe->add_option("urdf", urdf_path, "URDF file")->required();
  describe->add_flag("--floating", floating, "Attach a floating base first");
  describe->add_flag("--json", as_json, "Emit JSON instead of text");

  std::string config_path, out_dir = "out", solver_override;
  bool describe_only = false;
  int seed = 0;
  auto* solve =
      app.add_subcommand("solve", "Build and solve a scenario from a config");
  solve->add_option("--config", config_path, "Scenario config JSON")->required();
  solve->add_option("--out", out_dir, "Output directory (default: out)");
  solve->add_option("--solver", solver_override, "Override the config solver")
      ->check(CLI::IsMember({"gnsqp", "ilqr"}));
  solve->add_flag("--describe", describe_only,
                  "Print the problem summary and exit without solving");
  solve->add_option("--seed", seed,
                    "Recorded in the summary; solves are deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (describe->parsed()) return cmd_describe(urdf_path, floating, as_json);
    return cmd_solve(config_path, out_dir, solver_override, describe_only, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
