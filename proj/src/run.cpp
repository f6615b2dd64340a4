#include "contraction_kit/run.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "contraction_kit/certify.hpp"
#include "contraction_kit/checkpoint.hpp"
#include "contraction_kit/training.hpp"

namespace ckit {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json train_defaults() {
  const TrainConfig c;
  return {{"N", c.N},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"lr_decay", c.lr_decay},
          {"lr_decay_every", c.lr_decay_every},
          {"alpha", c.alpha},
          {"K", c.K},
          {"metric_hidden", c.metric_hidden},
          {"controller_hidden", c.controller_hidden},
          {"channels", c.channels},
          {"m_bar", c.m_bar},
          {"m_under", c.m_under},
          {"time_input", c.time_input},
          {"metric_state_inputs", json::array()},
          {"controller_state_inputs", json::array()},
          {"holdout_fraction", c.holdout_fraction},
          {"cv_enabled", c.cv_enabled},
          {"cv_scale", c.cv_scale},
          {"full_scale", false}};
}

json cvstem_defaults() {
  const CvstemProblem p;
  return {{"alpha", p.alpha},         {"alpha_s", p.alpha_s},
          {"alpha_d", p.alpha_d},     {"alpha_G", p.alpha_G},
          {"R", json::array()},       {"grid_per_dim", 5},
          {"grid_cap", 100000},       {"chi_max", p.chi_max},
          {"nu_max", p.nu_max},       {"nu_min", p.nu_min},
          {"tolerance", p.tolerance}, {"chi_width", p.chi_width},
          {"max_iterations", p.max_iterations}};
}

json certify_defaults() {
  const VerifyOptions v;
  const EstimateOptions e;
  return {{"controller", "checkpoint"},
          {"reference", "none"},
          {"mode", to_string(v.mode)},
          {"n_traj", v.n_traj},
          {"horizon", v.horizon},
          {"dt", v.dt},
          {"tol", v.tol},
          {"record_every", v.record_every},
          {"quad_segments", v.quad_segments},
          {"disturbance", v.disturbance},
          {"alpha_d", e.alpha_d},
          {"alpha_G", e.alpha_G},
          {"grid_per_dim", 5},
          {"grid_cap", 100000},
          {"lipschitz_pairs", e.lipschitz_pairs},
          {"keep_records", v.keep_records},
          {"write_csv", true}};
}

json simulate_defaults() {
  return {{"controller", "checkpoint"}, {"mode", "deterministic"}, {"n_traj", 10},
          {"horizon", 5.0},             {"dt", kDefaultStep},       {"record_every", 10},
          {"disturbance", false},       {"quad_segments", 32}};
}

json top_defaults() {
  return {{"system", "pvtol"},
          {"seed", 0},
          {"out", "out"},
          {"checkpoint", ""},
          {"disturbance", json::object()},
          {"train", train_defaults()},
          {"cvstem", cvstem_defaults()},
          {"certify", certify_defaults()},
          {"simulate", simulate_defaults()}};
}

bool same_kind(const json& proto, const json& value) {
  if (proto.is_number_float()) return value.is_number();
  if (proto.is_number_integer()) return value.is_number_integer();
  if (proto.is_array()) return value.is_array();
  return proto.type() == value.type();
}

void merge_section(json& target, const json& source, const std::string& where) {
  if (!source.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : source.items()) {
    if (!target.contains(key)) throw ConfigError("unknown config key '" + where + "." + key + "'");
    if (!same_kind(target[key], value))
      throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
    target[key] = value;
  }
}

SystemModel system_from(const json& cfg) {
  SystemModel s = make_system(cfg.at("system").get<std::string>());
  const json& d = cfg.at("disturbance");
  set_disturbance(s, d.at("d_bar").get<double>(), d.at("g_bar").get<double>());
  return s;
}

TrainConfig train_config_from(const json& cfg) {
  const json& j = cfg.at("train");
  TrainConfig c;
  c.N = j.at("N");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.learning_rate = j.at("learning_rate");
  c.lr_decay = j.at("lr_decay");
  c.lr_decay_every = j.at("lr_decay_every");
  c.alpha = j.at("alpha");
  c.K = j.at("K");
  c.metric_hidden = j.at("metric_hidden").get<std::vector<int>>();
  c.controller_hidden = j.at("controller_hidden").get<std::vector<int>>();
  c.channels = j.at("channels");
  c.m_bar = j.at("m_bar");
  c.m_under = j.at("m_under");
  c.time_input = j.at("time_input");
  c.metric_state_inputs = j.at("metric_state_inputs").get<std::vector<int>>();
  c.controller_state_inputs = j.at("controller_state_inputs").get<std::vector<int>>();
  c.holdout_fraction = j.at("holdout_fraction");
  c.cv_enabled = j.at("cv_enabled");
  c.cv_scale = j.at("cv_scale");
  if (j.at("full_scale").get<bool>()) c.use_full_scale();
  c.seed = cfg.at("seed").get<std::uint64_t>();
  return c;
}

CvstemProblem cvstem_problem_from(const json& cfg, const SystemModel& system) {
  const json& j = cfg.at("cvstem");
  CvstemProblem p;
  p.system = system;
  p.alpha = j.at("alpha");
  p.alpha_s = j.at("alpha_s");
  p.alpha_d = j.at("alpha_d");
  p.alpha_G = j.at("alpha_G");
  p.chi_max = j.at("chi_max");
  p.nu_max = j.at("nu_max");
  p.nu_min = j.at("nu_min");
  p.tolerance = j.at("tolerance");
  p.chi_width = j.at("chi_width");
  p.max_iterations = j.at("max_iterations");
  const auto R = j.at("R").get<std::vector<std::vector<double>>>();
  if (!R.empty()) {
    p.R.resize(static_cast<Eigen::Index>(R.size()), static_cast<Eigen::Index>(R.front().size()));
    for (std::size_t r = 0; r < R.size(); ++r) {
      if (R[r].size() != R.front().size()) throw ConfigError("cvstem.R: ragged matrix");
      for (std::size_t c = 0; c < R[r].size(); ++c)
        p.R(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = R[r][c];
    }
  }
  for (const auto& x : lattice(system.state_box, j.at("grid_per_dim"), j.at("grid_cap")))
    p.grid.push_back({x, system.t_min});
  return p;
}

json cvstem_solution_json(const CvstemSolution& s) {
  std::vector<std::vector<double>> W(static_cast<std::size_t>(s.W_bar.rows()));
  for (Eigen::Index r = 0; r < s.W_bar.rows(); ++r)
    for (Eigen::Index c = 0; c < s.W_bar.cols(); ++c) W[static_cast<std::size_t>(r)].push_back(s.W_bar(r, c));
  return {{"chi", s.chi},          {"nu", s.nu},
          {"W_bar", W},            {"J_CV", s.objective},
          {"margins", s.margins},  {"killing_margin", s.killing_margin},
          {"iterations", s.iterations}};
}

std::string indexed_name(const std::string& stem, int i) {
  std::string digits = std::to_string(i);
  while (digits.size() < 3) digits.insert(digits.begin(), '0');
  return stem + "_" + digits + ".csv";
}

struct ControllerSetup {
  MetricField metric;
  FeedbackLaw controller;
  double alpha = 0.0;
  std::optional<Checkpoint> checkpoint;
  std::optional<CvstemSolution> cvstem;
};

ControllerSetup controller_from(const json& cfg, const std::string& kind, const SystemModel& system,
                                int quad_segments, std::ostream& log) {
  ControllerSetup s;
  if (kind == "checkpoint") {
    const std::string path = cfg.at("checkpoint").get<std::string>();
    if (path.empty()) throw ConfigError("a checkpoint path is required for controller 'checkpoint'");
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.system != system.name)
      throw ConfigError("checkpoint was trained on '" + ckpt.system + "', config names '" +
                        system.name + "'");
    s.metric = learned_metric(ckpt.metric);
    s.controller = learned_controller(ckpt.controller);
    s.alpha = ckpt.alpha;
    s.checkpoint = std::move(ckpt);
  } else if (kind == "cvstem") {
    const CvstemProblem p = cvstem_problem_from(cfg, system);
    CvstemSolution sol = solve_cvstem(p);
    log << "cvstem: chi = " << format_double(sol.chi) << ", nu = " << format_double(sol.nu) << '\n';
    s.metric = cvstem_metric(sol);
    s.controller = geodesic_controller(s.metric, system, p.R, quad_segments);
    s.alpha = p.alpha;
    s.cvstem = std::move(sol);
  } else {
    throw ConfigError("unknown controller '" + kind + "' (expected checkpoint or cvstem)");
  }
  return s;
}

void write_manifest(const fs::path& out, const std::string& subcommand, const json& cfg) {
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  json seeds = {{"global", seed},
                {"streams",
                 {{"dataset", streams::kDataset},
                  {"sphere", streams::kSphere},
                  {"wiener", streams::kWiener},
                  {"targets", streams::kTargets},
                  {"init", streams::kInit},
                  {"grid", streams::kGrid},
                  {"shuffle", streams::kShuffle}}}};
  write_json_file((out / "manifest.json").string(),
                  {{"tool", "contraction-kit"}, {"subcommand", subcommand}, {"config", cfg}, {"seeds", seeds}});
}

int cmd_train(const json& cfg, const fs::path& out, std::ostream& log) {
  const SystemModel system = system_from(cfg);
  const TrainConfig tc = train_config_from(cfg);
  tc.validate();
  const TrainResult r = train(system, tc, [&](int epoch, const LossReport& rep) {
    log << "epoch " << epoch << ": total " << format_double(rep.total()) << " (l_u "
        << format_double(rep.l_u) << ", l_c " << format_double(rep.l_c) << ", l_w1 "
        << format_double(rep.l_w1) << ", l_w2 " << format_double(rep.l_w2) << ")\n";
  });
  Checkpoint ckpt;
  ckpt.system = system.name;
  ckpt.alpha = tc.alpha;
  ckpt.metric = r.metric;
  ckpt.controller = r.controller;
  ckpt.config = cfg.at("train");
  std::string path = cfg.at("checkpoint").get<std::string>();
  if (path.empty()) path = (out / "checkpoint.json").string();
  save_checkpoint(path, ckpt);
  write_loss_history_csv((out / "loss_history.csv").string(), r.history);
  log << "wrote " << path << '\n';
  return kExitOk;
}

int cmd_cvstem(const json& cfg, const fs::path& out, std::ostream& log) {
  const SystemModel system = system_from(cfg);
  const CvstemProblem p = cvstem_problem_from(cfg, system);
  try {
    const CvstemSolution s = solve_cvstem(p);
    json j = cvstem_solution_json(s);
    j["status"] = "feasible";
    write_json_file((out / "cvstem_solution.json").string(), j);
    log << "cvstem: chi = " << format_double(s.chi) << ", nu = " << format_double(s.nu)
        << ", J_CV = " << format_double(s.objective) << '\n';
    return kExitOk;
  } catch (const CvstemInfeasible& e) {
    write_json_file((out / "cvstem_solution.json").string(),
                    {{"status", "infeasible"}, {"reason", e.what()}});
    log << e.what() << '\n';
    return kExitFailure;
  }
}

int cmd_certify(const json& cfg, const fs::path& out, std::ostream& log) {
  const SystemModel system = system_from(cfg);
  const json& j = cfg.at("certify");
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  const int quad = j.at("quad_segments");
  ControllerSetup setup = controller_from(cfg, j.at("controller"), system, quad, log);

  const auto grid = certification_grid(system, j.at("grid_per_dim"), j.at("grid_cap"), {}, seed);
  EstimateOptions eo;
  eo.alpha = setup.alpha;
  eo.alpha_d = j.at("alpha_d");
  eo.alpha_G = j.at("alpha_G");
  eo.mode = bound_mode_from_string(j.at("mode"));
  eo.lipschitz_pairs = j.at("lipschitz_pairs");
  eo.seed = seed;

  std::optional<FeedbackLaw> reference;
  const std::string ref = j.at("reference");
  if (ref == "cvstem") {
    const CvstemSolution sol = solve_cvstem(cvstem_problem_from(cfg, system));
    reference = geodesic_controller(cvstem_metric(sol), system, Matrix(), quad);
  } else if (ref != "none") {
    throw ConfigError("certify.reference must be none or cvstem");
  }
  const BoundConstants constants = estimate_constants(
      setup.metric, setup.controller, reference ? &*reference : nullptr, system, grid, eo);

  VerifyOptions vo;
  vo.mode = eo.mode;
  vo.n_traj = j.at("n_traj");
  vo.horizon = j.at("horizon");
  vo.dt = j.at("dt");
  vo.tol = j.at("tol");
  vo.record_every = j.at("record_every");
  vo.quad_segments = quad;
  vo.disturbance = j.at("disturbance");
  vo.seed = seed;
  vo.keep_records = j.at("keep_records");

  CertificateReport report;
  try {
    report = verify_tracking(setup.metric, setup.controller, system, constants, vo);
  } catch (const CertificateRefused& e) {
    report.constants = constants;
    report.pass = false;
    report.note = e.what();
  }
  if (setup.checkpoint)
    report.grid = grid_contraction(setup.checkpoint->metric, setup.checkpoint->controller, system,
                                   grid, setup.alpha);
  write_json_file((out / "certificate.json").string(), certificate_to_json(report));
  if (j.at("write_csv").get<bool>()) {
    fs::create_directories(out / "trajectories");
    for (const auto& rec : report.trajectories)
      write_trajectory_csv((out / "trajectories" / indexed_name("traj", rec.index)).string(), rec);
  }
  log << "certificate: " << (report.pass ? "pass" : "fail") << " (max violation "
      << format_double(report.max_violation) << ")\n";
  return report.pass ? kExitOk : kExitFailure;
}

int cmd_simulate(const json& cfg, const fs::path& out, std::ostream& log) {
  SystemModel system = system_from(cfg);
  const json& j = cfg.at("simulate");
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  const ControllerSetup setup = controller_from(cfg, j.at("controller"), system, j.at("quad_segments"), log);
  ClosedLoopOptions co;
  co.horizon = j.at("horizon");
  co.dt = j.at("dt");
  co.mode = bound_mode_from_string(j.at("mode"));
  co.record_every = j.at("record_every");
  co.d_bar = j.at("disturbance").get<bool>() ? system.d_bar : 0.0;
  const int n_traj = j.at("n_traj");
  if (n_traj < 1) throw ConfigError("simulate.n_traj must be >= 1");
  std::vector<ClosedLoopRun> runs(static_cast<std::size_t>(n_traj));
  parallel_for(n_traj, [&](int i) {
    const std::uint64_t ts = seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(i + 1);
    const TargetTrajectory target = generate_target(system, co.horizon, ts);
    RngStream init(seed, streams::kInit | (static_cast<std::uint64_t>(i + 1) << 32));
    RngStream wiener(seed, streams::kWiener | (static_cast<std::uint64_t>(i + 1) << 32));
    runs[static_cast<std::size_t>(i)] = simulate_closed_loop(
        system, setup.controller, target.input, target.x_d.front(), sample_initial_error(system, init),
        co, &wiener);
  });
  fs::create_directories(out / "trajectories");
  std::vector<double> final_xe;
  for (int i = 0; i < n_traj; ++i) {
    const auto& r = runs[static_cast<std::size_t>(i)];
    std::ofstream f(out / "trajectories" / indexed_name("sim", i), std::ios::binary);
    f << "t,error_norm,x_e\n";
    for (std::size_t k = 0; k < r.t.size(); ++k)
      f << format_double(r.t[k]) << ',' << format_double(r.error[k]) << ','
        << format_double(r.error[k] / r.error.front()) << '\n';
    final_xe.push_back(r.error.back() / r.error.front());
  }
  std::vector<double> sorted = final_xe;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted.size() % 2 ? sorted[sorted.size() / 2]
                                          : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
  write_json_file((out / "simulation.json").string(),
                  {{"final_x_e", final_xe}, {"median_final_x_e", median}});
  log << "simulate: median final x_e = " << format_double(median) << '\n';
  return kExitOk;
}

int cmd_selftest(std::ostream& log) {
  int failures = 0;
  auto check = [&](const std::string& name, bool ok) {
    log << (ok ? "PASS " : "FAIL ") << name << '\n';
    if (!ok) ++failures;
  };
  RngStream rng(7, streams::kSphere);
  const auto pts = sample_unit_sphere(3, 256, rng);
  check("l_pd zero on PSD", l_pd(Matrix::Identity(3, 3), pts) == 0.0);
  check("l_pd positive on ND", l_pd(-Matrix::Identity(3, 3), pts) > 0.0);

  CvstemProblem p;
  p.system = make_scalar_test(1.0);
  p.alpha = 1.0;
  p.grid = {{Vector::Zero(1), 0.0}};
  const CvstemSolution s = solve_cvstem(p);
  check("cvstem scalar chi* = 1", std::abs(s.chi - 1.0) < 1e-3);
  check("cvstem scalar nu = 4", std::abs(s.nu - 4.0) < 1e-3);

  p.system = make_lti(Matrix::Ones(1, 1), Matrix::Zero(1, 1));
  bool infeasible = false;
  try {
    solve_cvstem(p);
  } catch (const CvstemInfeasible&) {
    infeasible = true;
  }
  check("cvstem uncontrollable infeasible", infeasible);

  BoundConstants c;
  c.m_over = 4.0;
  c.m_under = 1.0;
  c.alpha = 1.0;
  c.L_u = 0.25;
  c.eps1 = 1.0;
  check("alpha_ell arithmetic", std::abs(alpha_ell_deterministic(c) - 0.5) < 1e-15);
  check("metric-error conversion", eps1_from_metric_error(2.0, 3.0, 0.1) == 2.0 * 9.0 * 0.1);
  return failures == 0 ? kExitOk : kExitFailure;
}

}  // namespace

json resolve_config(const std::string& subcommand, const json& document,
                    std::optional<std::uint64_t> seed, std::optional<std::string> out) {
  static const std::vector<std::string> kCommands{"train", "certify", "simulate", "cvstem",
                                                  "selftest"};
  if (std::find(kCommands.begin(), kCommands.end(), subcommand) == kCommands.end())
    throw ConfigError("unknown subcommand '" + subcommand + "'");
  if (!document.is_object()) throw ConfigError("config must be a JSON object");
  json cfg = top_defaults();
  for (const auto& [key, value] : document.items()) {
    if (!cfg.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    if (key == "disturbance") {
      if (!value.is_object()) throw ConfigError("disturbance: expected an object");
      for (const auto& [k, v] : value.items()) {
        if (k != "d_bar" && k != "g_bar") throw ConfigError("unknown config key 'disturbance." + k + "'");
        if (!v.is_number() || v.get<double>() < 0.0)
          throw ConfigError("disturbance." + k + " must be a number >= 0");
      }
      cfg[key] = value;
    } else if (cfg[key].is_object()) {
      merge_section(cfg[key], value, key);
    } else {
      if (!same_kind(cfg[key], value)) throw ConfigError("config key '" + key + "' has the wrong type");
      cfg[key] = value;
    }
  }
  if (seed) cfg["seed"] = *seed;
  if (out) cfg["out"] = *out;
  if (!cfg["seed"].is_number_unsigned() && cfg["seed"].get<std::int64_t>() < 0)
    throw ConfigError("seed must be >= 0");

  SystemModel system;
  try {
    system = make_system(cfg["system"].get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  json& d = cfg["disturbance"];
  if (!d.contains("d_bar")) d["d_bar"] = system.d_bar;
  if (!d.contains("g_bar")) d["g_bar"] = system.g_bar;
  try {
    train_config_from(cfg).validate();
    bound_mode_from_string(cfg["certify"]["mode"]);
    bound_mode_from_string(cfg["simulate"]["mode"]);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

int run(const RunConfig& rc, std::ostream& log) {
  json cfg;
  try {
    cfg = resolve_config(rc.subcommand, rc.document, rc.seed, rc.out);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const json::exception& e) {
    log << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  set_worker_threads(rc.threads);
  if (rc.subcommand == "selftest") return cmd_selftest(log);

  const fs::path out = cfg.at("out").get<std::string>();
  try {
    fs::create_directories(out);
    write_manifest(out, rc.subcommand, cfg);
    if (rc.subcommand == "train") return cmd_train(cfg, out, log);
    if (rc.subcommand == "cvstem") return cmd_cvstem(cfg, out, log);
    if (rc.subcommand == "certify") return cmd_certify(cfg, out, log);
    return cmd_simulate(cfg, out, log);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Contraction-metric learning, synthesis and certification"};
  std::string subcommand, config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int threads = 0;
  app.add_option("subcommand", subcommand, "train | certify | simulate | cvstem | selftest")
      ->required();
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "global seed override");
  app.add_option("--out", out, "output directory override");
  app.add_option("--threads", threads, "worker thread cap (0 = hardware)")->check(CLI::NonNegativeNumber);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  RunConfig rc;
  rc.subcommand = subcommand;
  rc.seed = seed;
  rc.out = out;
  rc.threads = threads;
  if (!config_path.empty()) {
    try {
      rc.document = read_json_file(config_path);
    } catch (const std::exception& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kExitConfig;
    }
  } else if (subcommand != "selftest") {
    std::cerr << "config error: --config is required for " << subcommand << '\n';
    return kExitConfig;
  }
  return run(rc, std::cerr);
}

}  // namespace ckit
