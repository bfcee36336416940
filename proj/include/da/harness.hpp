#pragma once

#include <da/config.hpp>
#include <da/diagnostics.hpp>
#include <da/fourdvar.hpp>
#include <da/hmc.hpp>
#include <da/io.hpp>
#include <da/rom.hpp>

#include <chrono>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace da {

// --- manifests ---------------------------------------------------------------

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Per-stage record of what a command produced. The deterministic hash covers
// config, tool version and the file inventory but not wall-clock timings, so
// reports that embed it stay byte-identical across reruns.
struct RunManifest {
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::map<std::string, double> stage_seconds;
  std::map<std::string, std::string> files;

  std::string deterministic_hash() const {
    Json j;
    j["config_hash"] = config_hash;
    j["tool_version"] = tool_version;
    j["files"] = files;
    return checksum_string(j.dump());
  }

  Json to_json() const {
    Json j;
    j["config_hash"] = config_hash;
    j["tool_version"] = tool_version;
    j["stage_seconds"] = stage_seconds;
    j["files"] = files;
    j["manifest_hash"] = deterministic_hash();
    return j;
  }
};

inline void add_file(RunManifest& m, const fs::path& dir,
                     const std::string& rel) {
  m.files[rel] = checksum_file(dir / rel);
}

inline void write_manifest(const fs::path& dir, const RunManifest& m) {
  write_json(dir / "manifest.json", m.to_json());
}

inline RunManifest read_manifest(const fs::path& dir) {
  Json j = read_json(dir / "manifest.json");
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.tool_version = j.at("tool_version").get<std::string>();
  for (auto& [k, v] : j.at("stage_seconds").items())
    m.stage_seconds[k] = v.get<double>();
  for (auto& [k, v] : j.at("files").items())
    m.files[k] = v.get<std::string>();
  return m;
}

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// --- truth and observations --------------------------------------------------

inline fs::path truth_dir(const fs::path& out_root) { return out_root / "truth"; }
inline fs::path obs_dir(const fs::path& out_root) { return out_root / "obs"; }
inline fs::path run_dir(const fs::path& out_root, const std::string& mode) {
  return out_root / "runs" / mode;
}

inline RunManifest cmd_generate_truth(const ExperimentConfig& cfg,
                                      const fs::path& out_root) {
  StageTimer timer;
  auto model = make_model(cfg);
  Vector x0 = truth_initial_state(cfg, *model);
  const int n_intervals = cfg.window.obs_times.back();
  Trajectory traj = propagate_trajectory(*model, StateVector::full(x0),
                                         n_intervals,
                                         cfg.window.steps_per_interval);
  Matrix rows(n_intervals + 1, model->state_dimension());
  for (int k = 0; k <= n_intervals; ++k) rows.row(k) = traj.at(k);

  fs::path dir = truth_dir(out_root);
  fs::create_directories(dir);
  write_vector(dir / "x0.bin", x0, Json{{"seed", cfg.truth.seed}});
  write_matrix_rowmajor(dir / "trajectory.bin", rows,
                        Json{{"n_intervals", n_intervals},
                             {"steps_per_interval",
                              cfg.window.steps_per_interval},
                             {"seed", cfg.truth.seed}});

  RunManifest m;
  m.config_hash = config_hash(cfg);
  add_file(m, dir, "x0.bin");
  add_file(m, dir, "x0.bin.meta.json");
  add_file(m, dir, "trajectory.bin");
  add_file(m, dir, "trajectory.bin.meta.json");
  m.stage_seconds["generate_truth"] = timer.seconds();
  write_manifest(dir, m);
  return m;
}

inline Matrix load_truth_trajectory(const fs::path& out_root) {
  fs::path p = truth_dir(out_root) / "trajectory.bin";
  if (!fs::exists(p))
    throw Error("missing truth trajectory: " + p.string() +
                " (run generate-truth first)");
  return read_matrix(p);
}

inline RunManifest cmd_observe(const ExperimentConfig& cfg,
                               const fs::path& out_root) {
  StageTimer timer;
  auto model = make_model(cfg);
  Matrix traj = load_truth_trajectory(out_root);
  require_dim(traj.cols(), model->state_dimension(), "cmd_observe: truth");
  auto op = build_obs_operator(cfg, model->state_dimension());
  CovarianceOperator r = build_obs_covariance(cfg, *op);
  RngStream rng(cfg.obs.noise_seed, 0);

  Matrix ys(cfg.window.nobs, op->obs_dim());
  for (int i = 0; i < cfg.window.nobs; ++i) {
    int k = cfg.window.obs_times[static_cast<std::size_t>(i)];
    Vector y = op->apply(traj.row(k).transpose());
    y += r.sqrt_apply(rng.normal_vector(op->obs_dim()));
    ys.row(i) = y;
  }

  fs::path dir = obs_dir(out_root);
  fs::create_directories(dir);
  write_matrix_rowmajor(dir / "observations.bin", ys,
                        Json{{"times", cfg.window.obs_times},
                             {"operator", cfg.obs.operator_kind},
                             {"sigma", cfg.obs.sigma},
                             {"seed", cfg.obs.noise_seed}});

  RunManifest m;
  m.config_hash = config_hash(cfg);
  add_file(m, dir, "observations.bin");
  add_file(m, dir, "observations.bin.meta.json");
  m.stage_seconds["observe"] = timer.seconds();
  write_manifest(dir, m);
  return m;
}

// --- window assembly ----------------------------------------------------------

struct TwinProblem {
  std::shared_ptr<const AssimilationWindow> window;
  Vector truth_x0;
  std::shared_ptr<ModelInterface> model;
};

inline TwinProblem build_twin_problem(const ExperimentConfig& cfg,
                                      const fs::path& out_root) {
  TwinProblem tp;
  tp.model = make_model(cfg);
  Matrix traj = load_truth_trajectory(out_root);
  tp.truth_x0 = traj.row(0).transpose();

  fs::path obs_file = obs_dir(out_root) / "observations.bin";
  if (!fs::exists(obs_file))
    throw Error("missing observations: " + obs_file.string() +
                " (run observe first)");
  Matrix ys = read_matrix(obs_file);

  auto op = build_obs_operator(cfg, tp.model->state_dimension());
  CovarianceOperator r = build_obs_covariance(cfg, *op);
  require_dim(ys.cols(), op->obs_dim(), "build_twin_problem: observations");
  require(ys.rows() == cfg.window.nobs,
          "build_twin_problem: observation count mismatch");

  ObservationSet obs;
  for (int i = 0; i < cfg.window.nobs; ++i)
    obs.add(Observation(cfg.window.obs_times[static_cast<std::size_t>(i)],
                        ys.row(i).transpose(), op, r));

  CovarianceOperator b0 = build_prior_covariance(cfg, *tp.model);
  RngStream rng(cfg.prior.background_seed, 0);
  Vector xb = tp.truth_x0 +
              b0.sqrt_apply(rng.normal_vector(tp.model->state_dimension()));
  tp.window = std::make_shared<AssimilationWindow>(
      GaussianDensity(StateVector::full(xb), b0), std::move(obs), tp.model,
      cfg.window.steps_per_interval);
  return tp;
}

inline RefreshOptions refresh_options(const ExperimentConfig& cfg) {
  RefreshOptions o;
  o.normalize_adjoint_columns = cfg.rom.normalize_adjoint_snapshots;
  o.center_snapshots = cfg.rom.center_snapshots;
  o.snapshot_stride = cfg.rom.snapshot_stride;
  return o;
}

// --- assimilation modes --------------------------------------------------------

inline MassMatrix reduced_mass_matrix(const AssimilationWindow& win,
                                      const PodBasis& basis) {
  Matrix b_red = symmetrized(basis.matrix().transpose() *
                             win.prior.cov.matrix() * basis.matrix());
  Eigen::LLT<Matrix> llt(b_red);
  require(llt.info() == Eigen::Success,
          "reduced_mass_matrix: projected prior not SPD");
  Matrix inv = llt.solve(Matrix::Identity(b_red.rows(), b_red.cols()));
  return MassMatrix(inv.diagonal());
}

inline MassMatrix full_mass_matrix(const AssimilationWindow& win) {
  return MassMatrix(win.prior.cov.inverse_matrix().diagonal());
}

namespace detail {

inline void write_accept_log(const fs::path& path,
                             const std::vector<ChainResult>& chains) {
  std::ofstream out(path);
  out << "chain,proposal,phase,delta_h,accepted\n";
  for (std::size_t c = 0; c < chains.size(); ++c) {
    const auto& log = chains[c].accept_log;
    for (std::size_t i = 0; i < log.size(); ++i)
      out << c << "," << i << "," << (log[i].during_burn_in ? "burn" : "sample")
          << "," << fmt_double(log[i].delta_h) << ","
          << (log[i].accepted ? 1 : 0) << "\n";
  }
}

inline void write_trace(const fs::path& path, const MinimizeResult& res) {
  std::ofstream out(path);
  out << "iter,cost,grad_norm\n";
  for (const auto& e : res.trace)
    out << e.iter << "," << fmt_double(e.cost) << "," << fmt_double(e.grad_norm)
        << "\n";
}

struct ChainSetup {
  std::shared_ptr<PotentialBackend> backend;
  MassMatrix mass = MassMatrix::identity(1);
  Vector x_init;
  std::optional<PodBasis> basis;
};

}  // namespace detail

inline RunManifest cmd_assimilate(const ExperimentConfig& cfg,
                                  const std::string& mode,
                                  const fs::path& out_root) {
  StageTimer stage_timer;
  TwinProblem tp = build_twin_problem(cfg, out_root);
  const AssimilationWindow& win = *tp.window;
  fs::path dir = run_dir(out_root, mode);
  fs::create_directories(dir);

  RunManifest m;
  m.config_hash = config_hash(cfg);

  MinimizeOptions mopts;
  mopts.gtol_rel = cfg.fourdvar.gtol_rel;
  mopts.gtol_abs = cfg.fourdvar.gtol_abs;
  mopts.max_iters = cfg.fourdvar.max_iters;

  auto write_analysis = [&](const Vector& x, Json extra) {
    extra["mode"] = mode;
    write_vector(dir / "analysis.bin", x, std::move(extra));
    add_file(m, dir, "analysis.bin");
    add_file(m, dir, "analysis.bin.meta.json");
  };

  if (mode == "4dvar-full") {
    StageTimer t;
    MinimizeResult res = minimize(win, win.background(), mopts);
    m.stage_seconds["minimize"] = t.seconds();
    detail::write_trace(dir / "trace.csv", res);
    add_file(m, dir, "trace.csv");
    write_analysis(res.x, Json{{"converged", res.converged},
                               {"iterations", res.iterations},
                               {"line_search_failed", res.line_search_failed}});
  } else if (mode == "4dvar-reduced") {
    StageTimer t;
    PodBasis basis =
        refresh_basis(win.background(), win, cfg.rom.gamma,
                      refresh_options(cfg));
    MinimizeResult res = lbfgs_minimize(
        [&](const Vector& z) { return reduced_cost(win, basis, z); },
        [&](const Vector& z) { return reduced_gradient(win, basis, z); },
        basis.restrict_state(win.background()), mopts);
    m.stage_seconds["minimize"] = t.seconds();
    detail::write_trace(dir / "trace.csv", res);
    add_file(m, dir, "trace.csv");
    save_basis(dir / "basis.bin", basis, cfg.hmc.seed);
    add_file(m, dir, "basis.bin");
    add_file(m, dir, "basis.bin.meta.json");
    write_analysis(basis.lift(res.x),
                   Json{{"converged", res.converged},
                        {"iterations", res.iterations},
                        {"line_search_failed", res.line_search_failed},
                        {"reduced_dim", basis.reduced_dim()}});
  } else if (mode == "hmc-full" || mode == "hmc-reduced" ||
             mode == "hmc-approx") {
    ExperimentConfig::HmcCfg hc = hmc_for_mode(cfg, mode);
    HmcConfig chain_cfg;
    chain_cfg.h = hc.h;
    chain_cfg.m = hc.m;
    chain_cfg.burn_in = hc.burn_in;
    chain_cfg.mixing_steps = hc.mixing_steps;
    chain_cfg.seed = hc.seed;
    chain_cfg.stall_limit = hc.stall_limit;

    std::optional<PodBasis> basis;
    if (mode != "hmc-full") {
      StageTimer t;
      basis = refresh_basis(win.background(), win, cfg.rom.gamma,
                            refresh_options(cfg));
      m.stage_seconds["initial_basis"] = t.seconds();
      save_basis(dir / "basis.bin", *basis, hc.seed);
      add_file(m, dir, "basis.bin");
      add_file(m, dir, "basis.bin.meta.json");
    }

    // chain start: the mode's own minimizer unless configured otherwise.
    // The construction-time gradient check probes at the background, where
    // the gradient is informative (at a converged minimizer both sides of
    // the check sit in the noise floor).
    StageTimer t_min;
    detail::ChainSetup setup;
    setup.basis = basis;
    if (mode == "hmc-full") {
      Vector x_init = win.background();
      setup.backend = make_full_backend(tp.window, win.background());
      if (hc.init == "minimizer") x_init = minimize(win, x_init, mopts).x;
      setup.mass = full_mass_matrix(win);
      setup.x_init = x_init;
    } else if (mode == "hmc-reduced") {
      Vector z_init = basis->restrict_state(win.background());
      setup.backend = make_reduced_backend(tp.window, *basis, "initial", z_init);
      if (hc.init == "minimizer")
        z_init = lbfgs_minimize(
                     [&](const Vector& z) { return reduced_cost(win, *basis, z); },
                     [&](const Vector& z) {
                       return reduced_gradient(win, *basis, z);
                     },
                     z_init, mopts)
                     .x;
      setup.mass = reduced_mass_matrix(win, *basis);
      setup.x_init = z_init;
    } else {
      Vector x_init = win.background();
      setup.backend =
          make_approx_backend(tp.window, *basis, "initial", win.background());
      if (hc.init == "minimizer")
        x_init = lbfgs_minimize(
                     [&](const Vector& x) {
                       return approx_full_cost(win, *basis, x);
                     },
                     [&](const Vector& x) {
                       return approx_full_gradient(win, *basis, x);
                     },
                     x_init, mopts)
                     .x;
      setup.mass = full_mass_matrix(win);
      setup.x_init = x_init;
    }
    m.stage_seconds["initialize"] = t_min.seconds();

    const int n_chains = hc.n_chains;
    std::vector<int> per_chain(n_chains, hc.ensemble_size / n_chains);
    for (int c = 0; c < hc.ensemble_size % n_chains; ++c) ++per_chain[c];

    std::vector<ChainResult> chains(n_chains);
    std::vector<std::exception_ptr> errors(n_chains);
    StageTimer t_chain;
    auto run_one = [&](int c) {
      try {
        HmcConfig cc = chain_cfg;
        cc.ensemble_size = per_chain[c];
        RngStream rng(hc.seed, static_cast<std::uint64_t>(c));
        BasisRefreshPolicy policy;
        std::shared_ptr<int> refresh_counter = std::make_shared<int>(0);
        const BasisRefreshPolicy* policy_ptr = nullptr;
        if (mode != "hmc-full" &&
            (cfg.rom.refresh_after_burnin || cfg.rom.refresh_every_kept > 0)) {
          policy.after_burn_in = cfg.rom.refresh_after_burnin;
          policy.every_kept = cfg.rom.refresh_every_kept;
          // After a swap the carried-over state can sit far uphill on the
          // new target (tiny subspace changes are amplified by R^-1), where
          // the fixed-step integrator cannot relax. Hand the chain a state
          // in the new target's typical set instead: a short minimization
          // of the new objective.
          MinimizeOptions refit_opts = mopts;
          refit_opts.max_iters = std::min(mopts.max_iters, 60);
          policy.rebuild = [&, c, refresh_counter,
                            refit_opts](const Vector& x_full) {
            PodBasis nb = refresh_basis(x_full, win, cfg.rom.gamma,
                                        refresh_options(cfg));
            std::string id = "c" + std::to_string(c) + "-refresh-" +
                             std::to_string(++*refresh_counter);
            BasisRefreshPolicy::Refit refit{nullptr, MassMatrix::identity(1),
                                            Vector(), id};
            if (mode == "hmc-reduced") {
              refit.backend = make_reduced_backend(
                  tp.window, nb, id, nb.restrict_state(win.background()));
              refit.mass = reduced_mass_matrix(win, nb);
              refit.state =
                  lbfgs_minimize(
                      [&win, nb](const Vector& z) {
                        return reduced_cost(win, nb, z);
                      },
                      [&win, nb](const Vector& z) {
                        return reduced_gradient(win, nb, z);
                      },
                      nb.restrict_state(x_full), refit_opts)
                      .x;
            } else {
              refit.backend =
                  make_approx_backend(tp.window, nb, id, win.background());
              refit.mass = full_mass_matrix(win);
              refit.state =
                  lbfgs_minimize(
                      [&win, nb](const Vector& x) {
                        return approx_full_cost(win, nb, x);
                      },
                      [&win, nb](const Vector& x) {
                        return approx_full_gradient(win, nb, x);
                      },
                      x_full, refit_opts)
                      .x;
            }
            return refit;
          };
          policy_ptr = &policy;
        }
        chains[c] = run_smoother(setup.backend, setup.mass, setup.x_init, cc,
                                 rng, policy_ptr);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    };
    if (n_chains == 1) {
      run_one(0);
    } else {
      std::vector<std::thread> workers;
      workers.reserve(n_chains);
      for (int c = 0; c < n_chains; ++c) workers.emplace_back(run_one, c);
      for (auto& w : workers) w.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    m.stage_seconds["chain"] = t_chain.seconds();

    // merge chain-major
    const Index nvar = win.state_dim();
    Matrix ensemble(hc.ensemble_size, nvar);
    Index row = 0;
    double accepted = 0.0, proposals = 0.0;
    for (const auto& ch : chains) {
      for (const auto& s : ch.full_samples) ensemble.row(row++) = s;
      for (const auto& rec : ch.accept_log) {
        proposals += 1.0;
        accepted += rec.accepted ? 1.0 : 0.0;
      }
    }
    double acceptance_rate = proposals > 0.0 ? accepted / proposals : 0.0;

    Json basis_meta = Json();
    if (basis) {
      basis_meta = Json{{"gamma", basis->gamma()},
                        {"reduced_dim", basis->reduced_dim()},
                        {"provenance", basis->provenance()}};
      // persist the adapted basis the first chain finished with, when it
      // differs from the initial one
      const PodBasis* final_basis = nullptr;
      if (const auto* rp = dynamic_cast<const ReducedPotential*>(
              chains.front().final_backend.get()))
        final_basis = &rp->basis();
      else if (const auto* ap = dynamic_cast<const ApproxFullPotential*>(
                   chains.front().final_backend.get()))
        final_basis = &ap->basis();
      if (final_basis != nullptr &&
          chains.front().final_backend->basis_id() != "initial") {
        save_basis(dir / "basis-final.bin", *final_basis, hc.seed);
        add_file(m, dir, "basis-final.bin");
        add_file(m, dir, "basis-final.bin.meta.json");
      }
    }
    std::vector<std::string> basis_ids;
    for (const auto& ch : chains)
      basis_ids.insert(basis_ids.end(), ch.sample_basis_ids.begin(),
                       ch.sample_basis_ids.end());
    write_matrix_rowmajor(
        dir / "ensemble.bin", ensemble,
        Json{{"backend", mode.substr(4)},
             {"seed", hc.seed},
             {"n_chains", n_chains},
             {"acceptance_rate", acceptance_rate},
             {"hmc",
              {{"h", hc.h},
               {"m", hc.m},
               {"burn_in", hc.burn_in},
               {"mixing_steps", hc.mixing_steps},
               {"ensemble_size", hc.ensemble_size},
               {"init", hc.init}}},
             {"basis", basis_meta},
             {"sample_basis_ids", basis_ids}});
    add_file(m, dir, "ensemble.bin");
    add_file(m, dir, "ensemble.bin.meta.json");
    detail::write_accept_log(dir / "accept_log.csv", chains);
    add_file(m, dir, "accept_log.csv");

    Vector mean = ensemble.colwise().mean().transpose();
    write_analysis(mean, Json{{"estimator", "ensemble_mean"},
                              {"acceptance_rate", acceptance_rate},
                              {"nens", hc.ensemble_size}});
  } else {
    throw ConfigError("unknown assimilation mode \"" + mode + "\"");
  }

  m.stage_seconds["assimilate"] = stage_timer.seconds();
  write_manifest(dir, m);
  return m;
}

// --- step tuning ----------------------------------------------------------------

inline Json cmd_tune_step(const ExperimentConfig& cfg, const std::string& mode,
                          const fs::path& out_root) {
  TwinProblem tp = build_twin_problem(cfg, out_root);
  const AssimilationWindow& win = *tp.window;
  ExperimentConfig::HmcCfg hc = hmc_for_mode(cfg, mode);
  HmcConfig base;
  base.h = hc.h;
  base.m = hc.m;

  std::shared_ptr<PotentialBackend> backend;
  MassMatrix mass = MassMatrix::identity(1);
  Vector x_init;
  if (mode == "hmc-full") {
    backend = make_full_backend(tp.window, win.background());
    mass = full_mass_matrix(win);
    x_init = win.background();
  } else if (mode == "hmc-reduced" || mode == "hmc-approx") {
    PodBasis basis = refresh_basis(win.background(), win, cfg.rom.gamma,
                                   refresh_options(cfg));
    if (mode == "hmc-reduced") {
      x_init = basis.restrict_state(win.background());
      backend = make_reduced_backend(tp.window, basis, "initial", x_init);
      mass = reduced_mass_matrix(win, basis);
    } else {
      x_init = win.background();
      backend = make_approx_backend(tp.window, basis, "initial", x_init);
      mass = full_mass_matrix(win);
    }
  } else {
    throw ConfigError("tune-step: unknown mode \"" + mode + "\"");
  }

  RngStream rng(hc.seed, 1000);
  StepTuneResult tuned = tune_step_size(*backend, mass, x_init, base, rng);
  Json j;
  j["mode"] = mode;
  j["h"] = tuned.h;
  j["m"] = tuned.m;
  j["rejection_rate"] = tuned.rejection_rate;
  Json scanned = Json::array();
  for (auto& [h, rate] : tuned.scanned)
    scanned.push_back(Json{{"h", h}, {"rejection_rate", rate}});
  j["scanned"] = scanned;
  fs::path dir = out_root / "tuning";
  fs::create_directories(dir);
  write_json(dir / ("tune-" + mode + ".json"), j);
  return j;
}

// --- diagnostics ------------------------------------------------------------------

struct LoadedRun {
  std::string name;
  fs::path dir;
  RunManifest manifest;
  Vector analysis;
  std::optional<Matrix> ensemble;
  std::optional<PodBasis> basis;
  Json ensemble_meta;
};

inline LoadedRun load_run(const fs::path& dir) {
  LoadedRun run;
  run.name = dir.filename().string();
  run.dir = dir;
  run.manifest = read_manifest(dir);
  run.analysis = read_vector(dir / "analysis.bin");
  if (fs::exists(dir / "ensemble.bin")) {
    run.ensemble = read_matrix(dir / "ensemble.bin");
    run.ensemble_meta = read_json(sidecar_path(dir / "ensemble.bin"));
  }
  // prefer the adapted basis the chain finished with, if one was saved
  if (fs::exists(dir / "basis-final.bin"))
    run.basis = load_basis(dir / "basis-final.bin");
  else if (fs::exists(dir / "basis.bin"))
    run.basis = load_basis(dir / "basis.bin");
  return run;
}

inline RunManifest cmd_diagnose(const ExperimentConfig& cfg,
                                const std::vector<fs::path>& run_dirs,
                                const fs::path& out_root) {
  require(!run_dirs.empty(), "diagnose: need at least one run directory");
  StageTimer stage_timer;
  TwinProblem tp = build_twin_problem(cfg, out_root);
  const AssimilationWindow& win = *tp.window;
  const int n_intervals = win.n_intervals();

  std::vector<LoadedRun> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));
  for (const auto& r : runs)
    require_dim(r.analysis.size(), win.state_dim(),
                "diagnose: analysis dimension of " + r.name);

  fs::path dir = out_root / "diagnostics";
  fs::create_directories(dir);
  RunManifest m;
  m.config_hash = config_hash(cfg);

  std::ostringstream report;
  report << "# one record per line; fields are space-separated key=value\n";

  const bool linear = win.model->is_linear();
  std::optional<PosteriorMoments> analytic;
  if (linear) analytic = linear_posterior_moments(win);

  // RMSE series per run, truth included as its own reference record.
  for (const auto& r : runs) {
    report << "record run name=" << r.name
           << " manifest_hash=" << r.manifest.deterministic_hash() << "\n";
    auto series = rmse_series(r.analysis, tp.truth_x0, *win.model, n_intervals,
                              win.steps_per_interval);
    std::string csv_name = "rmse_" + r.name + ".csv";
    std::ofstream csv(dir / csv_name);
    csv << "interval,rmse\n";
    for (std::size_t k = 0; k < series.size(); ++k)
      csv << k << "," << detail::fmt_double(series[k]) << "\n";
    csv.close();
    add_file(m, dir, csv_name);
    report << "record rmse run=" << r.name << " csv=" << csv_name
           << " initial=" << detail::fmt_double(series.front())
           << " final=" << detail::fmt_double(series.back()) << "\n";

    if (r.ensemble) {
      std::vector<Vector> samples;
      samples.reserve(r.ensemble->rows());
      for (Index i = 0; i < r.ensemble->rows(); ++i)
        samples.push_back(r.ensemble->row(i).transpose());
      PosteriorMoments em = ensemble_moments(samples);
      if (linear && analytic) {
        PosteriorMoments target = *analytic;
        std::string variant = "full";
        if (r.basis) {
          std::string backend =
              r.ensemble_meta.value("backend", std::string("full"));
          if (backend == "reduced") {
            PosteriorMoments red = reduced_posterior_moments(win, *r.basis);
            target.mean = r.basis->lift(red.mean);
            target.cov = r.basis->matrix() * red.cov *
                         r.basis->matrix().transpose();
            variant = "reduced";
          } else {
            target = approx_posterior_moments(win, *r.basis);
            variant = "approx";
          }
        }
        double mean_err = (em.mean - target.mean).norm() /
                          std::max(1e-300, target.mean.norm());
        double cov_err = (em.cov - target.cov).norm() /
                         std::max(1e-300, target.cov.norm());
        report << "record moments run=" << r.name << " variant=" << variant
               << " mean_rel_err=" << detail::fmt_double(mean_err)
               << " cov_fro_rel_err=" << detail::fmt_double(cov_err) << "\n";
      }
      if (r.basis) {
        double kl_est = kl_divergence_estimate(win, *r.basis, samples);
        report << "record kl_estimate run=" << r.name
               << " value=" << detail::fmt_double(kl_est) << "\n";
        if (linear && analytic) {
          double klp =
              kl_projected_vs_full(analytic->cov, analytic->mean, *r.basis);
          report << "record kl_projected run=" << r.name
                 << " value=" << detail::fmt_double(klp) << "\n";
        }
      }
    }
  }

  // covariance-equality tests: first run with an ensemble is the reference
  const LoadedRun* ref = nullptr;
  for (const auto& r : runs)
    if (r.ensemble) {
      ref = &r;
      break;
    }
  if (ref != nullptr) {
    auto cov_of = [](const Matrix& ens) {
      std::vector<Vector> xs;
      xs.reserve(ens.rows());
      for (Index i = 0; i < ens.rows(); ++i)
        xs.push_back(ens.row(i).transpose());
      return ensemble_moments(xs).cov;
    };
    Matrix s_ref = cov_of(*ref->ensemble);
    int n_ref = static_cast<int>(ref->ensemble->rows());
    CovTestReport self =
        schott_statistic(s_ref, s_ref, n_ref, n_ref, 0.01);
    report << "record schott_self ref=" << ref->name
           << " t_mn=" << detail::fmt_double(self.t_mn)
           << " theta_hat=" << detail::fmt_double(self.theta_hat)
           << " t_star=" << detail::fmt_double(self.t_star)
           << " reject=" << (self.reject ? "true" : "false") << "\n";
    for (const auto& r : runs) {
      if (!r.ensemble || &r == ref) continue;
      Matrix s = cov_of(*r.ensemble);
      CovTestReport rep = schott_statistic(
          s_ref, s, n_ref, static_cast<int>(r.ensemble->rows()), 0.01);
      report << "record schott ref=" << ref->name << " run=" << r.name
             << " t_mn=" << detail::fmt_double(rep.t_mn)
             << " theta_hat=" << detail::fmt_double(rep.theta_hat)
             << " t_star=" << detail::fmt_double(rep.t_star) << " n1=" << rep.n1
             << " n2=" << rep.n2 << " alpha=" << rep.alpha
             << " reject=" << (rep.reject ? "true" : "false") << "\n";
    }
  }

  {
    std::ofstream out(dir / "report.txt");
    out << report.str();
  }
  add_file(m, dir, "report.txt");

  // timing summary, kept out of the deterministic inventory
  {
    std::ofstream out(dir / "timing_summary.txt");
    out << "stage timings in seconds per run\n";
    out << std::left;
    out.width(28);
    out << "stage";
    for (const auto& r : runs) {
      out.width(18);
      out << r.name;
    }
    out << "\n";
    std::vector<std::string> stages = {"minimize", "initialize", "initial_basis",
                                       "chain", "assimilate"};
    for (const auto& s : stages) {
      out.width(28);
      out << s;
      for (const auto& r : runs) {
        auto it = r.manifest.stage_seconds.find(s);
        out.width(18);
        if (it == r.manifest.stage_seconds.end())
          out << "-";
        else
          out << it->second;
      }
      out << "\n";
    }
    out.width(28);
    out << "chain_per_sample";
    for (const auto& r : runs) {
      out.width(18);
      auto it = r.manifest.stage_seconds.find("chain");
      if (it == r.manifest.stage_seconds.end() || !r.ensemble)
        out << "-";
      else
        out << it->second / static_cast<double>(r.ensemble->rows());
    }
    out << "\n";
  }

  m.stage_seconds["diagnose"] = stage_timer.seconds();
  write_manifest(dir, m);
  return m;
}

}  // namespace da
