//! Config-driven experiment runner.
//!
//! Subcommands: validate-mobility, distance, evolve, cascade,
//! compare-oracle — each takes a config file path. Exit codes: 0 success,
//! 1 condition/invariant failure, 2 parse/config error, 3 solver
//! non-convergence. `FISHERFLOW_OUT` overrides the output directory,
//! `FISHERFLOW_THREADS` caps the cascade worker pool.

use crate::cascade::{self, CascadeError};
use crate::config::{ConfigError, RunConfig};
use crate::functionals::{fisher_energy, heat_entropy};
use crate::grid::DensityField;
use crate::jko::{self, JkoError, JkoOpts};
use crate::mobility::{Mobility, MobilityError};
use crate::oracle::{self, OracleError};
use crate::output::{self, Manifest};
use crate::transport::{self, TransportError, TransportOpts};
use std::path::{Path, PathBuf};

const USAGE: &str =
    "usage: fisherflow <validate-mobility|distance|evolve|cascade|compare-oracle> <config>";

enum Failure {
    Usage(String),
    Config(String),
    Condition(String),
    Solver(String),
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Config(_) => 2,
            Failure::Condition(_) => 1,
            Failure::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Condition(m) | Failure::Solver(m) => {
                m
            }
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<MobilityError> for Failure {
    fn from(e: MobilityError) -> Self {
        match e {
            MobilityError::NonConcave { .. } | MobilityError::NonPositive { .. } => {
                Failure::Condition(format!("condition (M) fails: {e}"))
            }
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<TransportError> for Failure {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::NoConvergence { .. } => Failure::Solver(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<JkoError> for Failure {
    fn from(e: JkoError) -> Self {
        match e {
            JkoError::InnerDivergence(inner) => inner.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<CascadeError> for Failure {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::Level { source, .. } => source.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::NewtonFailure { .. } => Failure::Solver(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run_cli(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("fisherflow: {}", f.message());
            f.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), Failure> {
    if args.len() != 2 {
        return Err(Failure::Usage(USAGE.into()));
    }
    let command = args[0].as_str();
    let cfg_path = &args[1];
    let text = std::fs::read_to_string(cfg_path)
        .map_err(|e| Failure::Config(format!("cannot read {cfg_path}: {e}")))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Ok(dir) = std::env::var("FISHERFLOW_OUT") {
        if !dir.is_empty() {
            cfg.output = dir;
        }
    }
    match command {
        "validate-mobility" => validate_mobility(&cfg),
        "distance" => distance(&cfg),
        "evolve" => evolve(&cfg, false),
        "cascade" => evolve(&cfg, true),
        "compare-oracle" => compare_oracle(&cfg),
        _ => Err(Failure::Usage(format!(
            "unknown subcommand `{command}`\n{USAGE}"
        ))),
    }
}

fn thread_cap() -> usize {
    std::env::var("FISHERFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|v| *v >= 1)
        .unwrap_or(2)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(&cfg.output);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    std::fs::write(path, body)
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))
}

fn build_initial(cfg: &RunConfig, m: &Mobility) -> Result<(DensityField, f64), Failure> {
    let grid = cfg.grid();
    let profile = cfg.initial.to_profile(grid)?;
    let (field, displacement) = profile
        .load(grid, cfg.initial.mass, m.ceiling())
        .map_err(|e| Failure::Config(e.to_string()))?;
    Ok((field, displacement))
}

fn transport_opts(cfg: &RunConfig) -> TransportOpts {
    TransportOpts {
        ns: cfg.slices,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        ..Default::default()
    }
}

fn jko_opts(cfg: &RunConfig) -> JkoOpts {
    JkoOpts {
        tol_outer: cfg.tol_outer,
        s0: cfg.s0,
        transport: transport_opts(cfg),
        ..Default::default()
    }
}

/// Route selection: mobilities with a bounded derivative evolve directly;
/// otherwise the boundary-singularity condition admits the regularized
/// cascade. Returns the route tag recorded in the manifest.
fn select_route(report: &crate::mobility::MobilityReport) -> Result<&'static str, Failure> {
    if report.lsc {
        Ok("Thm-1/LSC")
    } else if report.ms_ok {
        Ok("Thm-2/cascade")
    } else {
        Err(Failure::Condition(
            "condition (M-S) fails: the derivative singularity at the degenerate boundary is too strong for the cascade".into(),
        ))
    }
}

fn validate_mobility(cfg: &RunConfig) -> Result<(), Failure> {
    let m = cfg.mobility.build()?;
    let mesh = m.default_mesh(10_000);
    let report = m.validate(&mesh)?;
    println!("family = {}", m.family_name());
    println!("ceiling = {}", m.ceiling());
    println!("lsc = {}", report.lsc);
    println!("sup_m_prime = {:e}", report.sup_m_prime);
    match report.pg_exponents {
        Some((g0, g1)) => println!("pg_exponents = ({g0}, {g1})"),
        None => println!("pg_exponents = absent"),
    }
    println!("ms_ok = {}", report.ms_ok);
    println!("concavity_ok = {}", report.concavity_ok);
    println!("convexity_ratio_min = {:.12}", report.convexity_ratio_min);
    let route = select_route(&report)?;
    if route == "Thm-2/cascade" {
        println!("notice = cascade required (derivative unbounded at the degeneracy)");
    }
    println!("route = {route}");
    Ok(())
}

fn distance(cfg: &RunConfig) -> Result<(), Failure> {
    let m = cfg.mobility.build()?;
    let report = m.validate(&m.default_mesh(10_000))?;
    let route = select_route(&report)?;
    let grid = cfg.grid();
    let (u0, disp0) = build_initial(cfg, &m)?;
    let target_spec = cfg
        .target
        .as_ref()
        .ok_or_else(|| Failure::Config("distance requires a [target] section".into()))?;
    let (u1, disp1) = target_spec
        .to_profile(grid)?
        .load(grid, target_spec.mass, m.ceiling())
        .map_err(|e| Failure::Config(e.to_string()))?;

    let started = std::time::Instant::now();
    let (w2, path, stats) = transport::solve_distance(&u0, &u1, &m, transport_opts(cfg))?;
    let dir = out_dir(cfg)?;
    write_file(&dir.join("config.txt"), &cfg.serialize())?;
    write_file(&dir.join("path.csv"), &output::path_csv(&path))?;
    let mut manifest = Manifest::new("distance", &cfg.hash());
    manifest
        .field("mobility", m.family_name())
        .field("route", route)
        .field("grid", format!("L={} N={}", cfg.length, cfg.cells))
        .field("slices", path.ns)
        .float("w2", w2)
        .float("w", w2.sqrt())
        .field("iterations", stats.iterations)
        .float("gap", stats.gap)
        .float("continuity_residual", stats.continuity)
        .float("operator_norm", stats.operator_norm)
        .float("initial_projection_displacement", disp0)
        .float("target_projection_displacement", disp1)
        .field("files", "config.txt, path.csv");
    if !cfg.deterministic {
        manifest.field("elapsed_ms", started.elapsed().as_millis());
    }
    write_file(&dir.join("manifest.txt"), &manifest.finish())?;
    println!("W = {}", output::format_float(w2.sqrt()));
    println!("W2 = {}", output::format_float(w2));
    println!("iterations = {}", stats.iterations);
    Ok(())
}

fn evolve(cfg: &RunConfig, force_cascade: bool) -> Result<(), Failure> {
    let m = cfg.mobility.build()?;
    let mesh = m.default_mesh(10_000);
    let report = m.validate(&mesh)?;
    let route = select_route(&report)?;
    let (u0, displacement) = build_initial(cfg, &m)?;
    let opts = jko_opts(cfg);
    let started = std::time::Instant::now();
    let dir = out_dir(cfg)?;
    write_file(&dir.join("config.txt"), &cfg.serialize())?;

    if route == "Thm-2/cascade" || force_cascade {
        let schedule = if !cfg.delta_schedule.is_empty() {
            cfg.delta_schedule.clone()
        } else if let Some(levels) = cfg.delta_levels {
            cascade::default_schedule(&m, u0.mass() / cfg.length, levels)
        } else if force_cascade {
            cascade::default_schedule(&m, u0.mass() / cfg.length, 5)
        } else {
            return Err(Failure::Config(
                "this mobility has an unbounded derivative at the degeneracy: evolve needs a [delta] schedule (or use the cascade subcommand)"
                    .into(),
            ));
        };
        let result = cascade::run_cascade(
            &u0,
            &m,
            &schedule,
            cfg.tau,
            cfg.horizon,
            &opts,
            thread_cap(),
        )?;
        write_file(&dir.join("cascade.csv"), &output::cascade_csv(&result))?;
        let mut files = vec!["config.txt".to_string(), "cascade.csv".to_string()];
        for (k, level) in result.levels.iter().enumerate() {
            let name = format!("level_{k}.csv");
            write_file(&dir.join(&name), &output::run_csv(&level.trajectory))?;
            files.push(name);
        }
        let mut manifest = Manifest::new(
            if force_cascade { "cascade" } else { "evolve" },
            &cfg.hash(),
        );
        manifest
            .field("mobility", m.family_name())
            .field("route", "Thm-2/cascade")
            .field("grid", format!("L={} N={}", cfg.length, cfg.cells))
            .float("tau", cfg.tau)
            .float("horizon", cfg.horizon)
            .field("levels", result.levels.len())
            .float("reference_energy", result.reference_energy)
            .field("near_inadmissible", result.near_inadmissible)
            .float("initial_projection_displacement", displacement);
        for (k, level) in result.levels.iter().enumerate() {
            manifest.section(&format!("level_{k}"));
            manifest
                .float("delta", level.delta)
                .field("mobility", level.mobility.family_name())
                .float("initial_energy", level.initial_energy)
                .field(
                    "inner_descent",
                    level
                        .trajectory
                        .steps
                        .iter()
                        .map(|s| s.inner.outer_iterations)
                        .sum::<usize>(),
                )
                .field(
                    "transport_iterations",
                    level
                        .trajectory
                        .steps
                        .iter()
                        .map(|s| s.inner.transport_iterations)
                        .sum::<usize>(),
                )
                .field("minimizer_kind", "descent step")
                .field("estimates_ok", level.estimates.all_ok());
        }
        manifest.section("gaps");
        for (k, gap) in result.gaps.iter().enumerate() {
            manifest.float(&format!("gap_{k}_{}", k + 1), *gap);
        }
        manifest.field(
            "gaps_eventually_nonincreasing",
            result.gaps_eventually_nonincreasing(3),
        );
        manifest.field("files", files.join(", "));
        if !cfg.deterministic {
            manifest.field("elapsed_ms", started.elapsed().as_millis());
        }
        write_file(&dir.join("manifest.txt"), &manifest.finish())?;
        for (k, level) in result.levels.iter().enumerate() {
            if !level.estimates.all_ok() {
                return Err(Failure::Condition(format!(
                    "level {k} (delta={}) failed an a priori estimate",
                    level.delta
                )));
            }
        }
        println!("route = Thm-2/cascade");
        println!("levels = {}", result.levels.len());
        Ok(())
    } else {
        let traj = jko::run(&u0, cfg.tau, cfg.horizon, &m, &opts)?;
        let estimates = jko::check_estimates(&traj, &m, None).map_err(Failure::from)?;
        write_file(&dir.join("evolve.csv"), &output::run_csv(&traj))?;
        let mut manifest = Manifest::new("evolve", &cfg.hash());
        manifest
            .field("mobility", m.family_name())
            .field("route", "Thm-1/LSC")
            .field("grid", format!("L={} N={}", cfg.length, cfg.cells))
            .float("tau", cfg.tau)
            .float("horizon", cfg.horizon)
            .field("steps", traj.steps.len())
            .float("s0", traj.s0)
            .float("initial_projection_displacement", displacement)
            .field("minimizer_kind", "descent step")
            .field(
                "inner_descent",
                traj.steps
                    .iter()
                    .map(|s| s.inner.outer_iterations)
                    .sum::<usize>(),
            )
            .field(
                "transport_iterations",
                traj.steps
                    .iter()
                    .map(|s| s.inner.transport_iterations)
                    .sum::<usize>(),
            );
        manifest.estimates(&estimates);
        manifest.field("files", "config.txt, evolve.csv");
        if !cfg.deterministic {
            manifest.field("elapsed_ms", started.elapsed().as_millis());
        }
        write_file(&dir.join("manifest.txt"), &manifest.finish())?;
        if !estimates.all_ok() {
            let which = if !estimates.energy_monotone {
                "energy monotonicity"
            } else if !estimates.entropy_monotone {
                "entropy monotonicity"
            } else if !estimates.sum_w2_ok {
                "summed squared-distance bound"
            } else if !estimates.mass_ok {
                "mass conservation"
            } else {
                "density bounds"
            };
            return Err(Failure::Condition(format!("estimate failed: {which}")));
        }
        println!("route = Thm-1/LSC");
        println!("steps = {}", traj.steps.len());
        Ok(())
    }
}

fn compare_oracle(cfg: &RunConfig) -> Result<(), Failure> {
    let m = cfg.mobility.build()?;
    let mesh = m.default_mesh(10_000);
    let report = m.validate(&mesh)?;
    if !report.lsc {
        return Err(Failure::Config(
            "compare-oracle needs a bounded-derivative mobility (the reference integrator refuses degenerate data)".into(),
        ));
    }
    let (u0, _) = build_initial(cfg, &m)?;
    let opts = jko_opts(cfg);
    let started = std::time::Instant::now();
    let traj = jko::run(&u0, cfg.tau, cfg.horizon, &m, &opts)?;
    let estimates = jko::check_estimates(&traj, &m, None).map_err(Failure::from)?;
    let floor = cfg.oracle_floor_factor * u0.mass() / cfg.length;
    let reference = oracle::run(&u0, cfg.oracle_tau, cfg.horizon, &m, floor)?;
    let error = oracle::compare(&traj, &reference, cfg.horizon)
        .map_err(|e| Failure::Config(e.to_string()))?;

    let s0 = traj.s0;
    let fishers: Vec<f64> = reference
        .states
        .iter()
        .map(|s| fisher_energy(s, &m))
        .collect::<Result<_, _>>()
        .map_err(Failure::from)?;
    let entropies: Vec<f64> = reference
        .states
        .iter()
        .map(|s| heat_entropy(s, &m, s0))
        .collect::<Result<_, _>>()
        .map_err(Failure::from)?;

    let dir = out_dir(cfg)?;
    write_file(&dir.join("config.txt"), &cfg.serialize())?;
    write_file(&dir.join("evolve.csv"), &output::run_csv(&traj))?;
    write_file(
        &dir.join("oracle.csv"),
        &output::oracle_csv(&reference, &fishers, &entropies),
    )?;
    let mut manifest = Manifest::new("compare-oracle", &cfg.hash());
    manifest
        .field("mobility", m.family_name())
        .field("route", "Thm-1/LSC")
        .field("grid", format!("L={} N={}", cfg.length, cfg.cells))
        .float("tau", cfg.tau)
        .float("oracle_tau", cfg.oracle_tau)
        .float("horizon", cfg.horizon)
        .float("rel_l2_error_at_horizon", error)
        .field("minimizer_kind", "descent step");
    manifest.estimates(&estimates);
    manifest.field("files", "config.txt, evolve.csv, oracle.csv");
    if !cfg.deterministic {
        manifest.field("elapsed_ms", started.elapsed().as_millis());
    }
    write_file(&dir.join("manifest.txt"), &manifest.finish())?;
    if !estimates.all_ok() {
        return Err(Failure::Condition("an a priori estimate failed".into()));
    }
    println!("rel_l2_error = {}", output::format_float(error));
    Ok(())
}
