//! Command-line surface. Each subcommand takes one TOML configuration,
//! runs the corresponding study, writes its outputs plus a manifest under
//! the configured directory, and prints a one-line summary.
//!
//! Exit codes: 0 success, 1 numerical failure (divergence, fatal
//! non-convergence), 2 configuration error. LOGDISP_WORKERS caps the worker
//! pool; it never changes numerical output.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{parse_config, CliError, RunConfig, StudySection};
use logdisp::field::ComplexField;
use logdisp::mam::{mam_optimize, ExitTarget, MamProblem, TargetNorm};
use logdisp::noise::NoisePath;
use logdisp::rare_event::{
    delta_convergence_study, deviation_probe, dilation_equivalence_check, estimate_rows_csv,
    exit_mc, exit_records_csv, large_dispersion_study, weighted_exit_check, DeltaStudyConfig,
    DeviationProbeConfig, DilationConfig, DispersionStudyConfig, ExitConfig, WeightedExitConfig,
};
use logdisp::sde::{params_fingerprint, simulate, ObservableSet, SdeParams};
use logdisp::skeleton::{solve, Control, SolveOptions};
use logdisp::snapshot::write_snapshot;
use logdisp::util::fnv1a64;

#[derive(Parser)]
#[command(name = "logdisp", version, about = "Simulator and rare-event toolkit for log-Schroedinger dynamics with white-noise dispersion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// One stochastic trajectory; observables CSV and optional snapshots.
    Simulate(RunArgs),
    /// Controlled (noise-free) trajectory from [study] control values.
    Skeleton(RunArgs),
    /// Minimize the action subject to reaching the exit target.
    Mam(RunArgs),
    /// Exit-probability sweep over noise intensities.
    #[command(name = "exit-mc")]
    ExitMc(RunArgs),
    /// One-sided exit-exponent check in the spatial-moment seminorm.
    Prop53(RunArgs),
    /// Regularization convergence on coupled paths.
    #[command(name = "delta-study")]
    DeltaStudy(RunArgs),
    /// Dilation equivalence between intensities on rescaled boxes.
    #[command(name = "scaling-check")]
    ScalingCheck(RunArgs),
    /// Lebesgue-norm decay under growing dispersion strength.
    #[command(name = "disp-study")]
    DispStudy(RunArgs),
    /// Tube-deviation probabilities next to the optimizer's action.
    #[command(name = "ldp-probe")]
    LdpProbe(RunArgs),
    /// Parse the config, build grid and initial field, print norms.
    Validate(RunArgs),
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let workers = workers()?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&load(&a.config)?, workers),
        Command::Skeleton(a) => cmd_skeleton(&load(&a.config)?, workers),
        Command::Mam(a) => cmd_mam(&load(&a.config)?, workers),
        Command::ExitMc(a) => cmd_exit_mc(&load(&a.config)?, workers),
        Command::Prop53(a) => cmd_prop53(&load(&a.config)?, workers),
        Command::DeltaStudy(a) => cmd_delta_study(&load(&a.config)?, workers),
        Command::ScalingCheck(a) => cmd_scaling_check(&load(&a.config)?, workers),
        Command::DispStudy(a) => cmd_disp_study(&load(&a.config)?, workers),
        Command::LdpProbe(a) => cmd_ldp_probe(&load(&a.config)?, workers),
        Command::Validate(a) => cmd_validate(&load(&a.config)?),
    }
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    parse_config(&text, base)
}

fn workers() -> Result<usize, CliError> {
    Ok(match logdisp::exec::workers_from_env()? {
        Some(n) => n,
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    })
}

/// Study section access with the vocabulary check: the name must match the
/// subcommand and only its keys may be present.
fn study_checked<'a>(
    cfg: &'a RunConfig,
    command: &str,
    allowed: &[&str],
) -> Result<Option<&'a StudySection>, CliError> {
    let Some(study) = &cfg.study else {
        return Ok(None);
    };
    if study.name != command {
        return Err(CliError::Config(format!(
            "[study] name \"{}\" does not match subcommand {command}",
            study.name
        )));
    }
    for k in study.present_keys() {
        if !allowed.contains(&k) {
            return Err(CliError::Config(format!(
                "[study] key {k} is not used by {command}; valid keys: {}",
                allowed.join(", ")
            )));
        }
    }
    Ok(Some(study))
}

fn study_required<'a>(
    cfg: &'a RunConfig,
    command: &str,
    allowed: &[&str],
) -> Result<&'a StudySection, CliError> {
    study_checked(cfg, command, allowed)?.ok_or_else(|| {
        CliError::Config(format!(
            "[study] section with name = \"{command}\" required"
        ))
    })
}

fn require<T>(v: Option<T>, command: &str, key: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Config(format!("[study] {command} needs {key}")))
}

fn parse_norm(v: Option<&str>) -> Result<TargetNorm, CliError> {
    match v {
        None | Some("x1") => Ok(TargetNorm::X1),
        Some("weighted1") => Ok(TargetNorm::Weighted1),
        Some(other) => Err(CliError::Config(format!(
            "[study] norm must be x1 or weighted1, got \"{other}\""
        ))),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    write_text(path, &format!("{value:#}\n"))
}

/// Reproduction record: the full config echo plus seed and version pin the
/// run; workers and wall time are informational.
fn write_manifest(
    dir: &Path,
    study: &str,
    cfg: &RunConfig,
    workers: usize,
    u0: &ComplexField,
    outputs: serde_json::Value,
    started: Instant,
) -> Result<(), CliError> {
    let m = json!({
        "study": study,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.noise.seed,
        "workers": workers,
        "boundary_shell_max": u0.boundary_shell_max(),
        "wall_seconds": started.elapsed().as_secs_f64(),
        "config": serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))?,
        "outputs": outputs,
    });
    write_json(&dir.join("manifest.json"), &m)
}

fn cmd_validate(cfg: &RunConfig) -> Result<i32, CliError> {
    study_checked(cfg, "validate", &[])?;
    let u0 = cfg.initial_field()?;
    cfg.nonlinear()?; // constructs the kernel, catching file and grid issues
    println!(
        "validate ok: d={} n={} length={}; l2={:.6e} grad={:.6e} weighted1={:.6e} x1={:.6e} boundary_shell={:.3e}",
        cfg.grid.d,
        cfg.grid.n,
        cfg.grid.length,
        u0.l2_norm(),
        u0.grad_l2_norm(),
        u0.weighted_norm(1.0)?,
        u0.x1_norm(),
        u0.boundary_shell_max()
    );
    Ok(0)
}

fn cmd_simulate(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    study_checked(cfg, "simulate", &["splitting"])?;
    let started = Instant::now();
    let u0 = cfg.initial_field()?;
    let params = SdeParams {
        noise_intensity: cfg.noise.epsilon,
        nonlinear: cfg.nonlinear()?,
        dt: cfg.noise.dt,
        horizon: cfg.noise.horizon,
        splitting: cfg.splitting(),
        observables: ObservableSet::all(),
        snapshot_times: cfg.output.snapshots.clone(),
    };
    let path = NoisePath::sample(cfg.noise.seed, cfg.noise.horizon, cfg.noise.dt)?;
    let traj = simulate(&u0, &params, &path)?;

    let dir = out_dir(cfg)?;
    let hash = params_fingerprint(&u0, &params, cfg.noise.seed);
    write_text(&dir.join("observables.csv"), &traj.to_csv(hash)?)?;
    let mut snaps = Vec::new();
    for (i, (t, f)) in traj.snapshots.iter().enumerate() {
        let name = format!("snapshot_{i:03}.bin");
        write_snapshot(&dir.join(&name), f)?;
        snaps.push(json!({ "t": t, "file": name }));
    }
    let outputs = json!({
        "observables": "observables.csv",
        "snapshots": snaps,
        "final_l2": traj.final_field.l2_norm(),
        "boundary_shell_final": traj.final_field.boundary_shell_max(),
    });
    write_manifest(&dir, "simulate", cfg, workers, &u0, outputs, started)?;
    println!(
        "simulate: {} steps, final l2 {:.6e}, wrote {}",
        path.step_count(),
        traj.final_field.l2_norm(),
        dir.join("observables.csv").display()
    );
    Ok(0)
}

fn cmd_skeleton(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    let study = study_required(cfg, "skeleton", &["splitting", "control", "substeps"])?;
    let started = Instant::now();
    let values = require(study.control.clone(), "skeleton", "control")?;
    let control = Control::new(cfg.noise.horizon, values)?;
    let u0 = cfg.initial_field()?;
    let nl = cfg.nonlinear()?;
    let opts = SolveOptions {
        substeps: study.substeps.unwrap_or(4),
        splitting: cfg.splitting(),
        observables: ObservableSet::all(),
        snapshot_times: cfg.output.snapshots.clone(),
    };
    let traj = solve(&u0, &control, &nl, &opts)?;

    let dir = out_dir(cfg)?;
    let desc = format!(
        "skeleton;intervals={};substeps={};action={:e}",
        control.values().len(),
        opts.substeps,
        control.action()
    );
    write_text(
        &dir.join("observables.csv"),
        &traj.to_csv(fnv1a64(desc.as_bytes()))?,
    )?;
    let mut snaps = Vec::new();
    for (i, (t, f)) in traj.snapshots.iter().enumerate() {
        let name = format!("snapshot_{i:03}.bin");
        write_snapshot(&dir.join(&name), f)?;
        snaps.push(json!({ "t": t, "file": name }));
    }
    let outputs = json!({
        "observables": "observables.csv",
        "snapshots": snaps,
        "action": control.action(),
        "final_l2": traj.final_field.l2_norm(),
    });
    write_manifest(&dir, "skeleton", cfg, workers, &u0, outputs, started)?;
    println!(
        "skeleton: action {:.6e}, final l2 {:.6e}, wrote {}",
        control.action(),
        traj.final_field.l2_norm(),
        dir.join("observables.csv").display()
    );
    Ok(0)
}

fn cmd_mam(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    let allowed = [
        "splitting",
        "radius",
        "norm",
        "intervals",
        "substeps",
        "penalty_initial",
        "penalty_factor",
        "penalty_stages",
        "max_iterations",
    ];
    let study = study_required(cfg, "mam", &allowed)?;
    let started = Instant::now();
    let radius = require(study.radius, "mam", "radius")?;
    let intervals = require(study.intervals, "mam", "intervals")?;
    let norm = parse_norm(study.norm.as_deref())?;

    let u0 = cfg.initial_field()?;
    let mut problem = MamProblem::new(
        u0.clone(),
        cfg.nonlinear()?,
        cfg.noise.horizon,
        intervals,
        ExitTarget::ball(norm, radius),
    );
    problem.splitting = cfg.splitting();
    if let Some(s) = study.substeps {
        problem.substeps = s;
    }
    if let Some(v) = study.penalty_initial {
        problem.penalty.initial = v;
    }
    if let Some(v) = study.penalty_factor {
        problem.penalty.factor = v;
    }
    if let Some(v) = study.penalty_stages {
        problem.penalty.stages = v;
    }
    if let Some(v) = study.max_iterations {
        problem.descent.max_iterations = v;
    }

    let result = mam_optimize(&problem, workers)?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("mam_result.json"), &result.to_json())?;
    let outputs = json!({ "result": "mam_result.json" });
    write_manifest(&dir, "mam", cfg, workers, &u0, outputs, started)?;
    println!(
        "mam: converged={} action={:.6e} violation={:.3e} wrote {}",
        result.converged,
        result.action,
        result.violation,
        dir.join("mam_result.json").display()
    );
    Ok(if result.converged { 0 } else { 1 })
}

fn cmd_exit_mc(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    let study = study_required(
        cfg,
        "exit-mc",
        &["splitting", "radius", "norm", "eps_list", "ensemble"],
    )?;
    let started = Instant::now();
    let u0 = cfg.initial_field()?;
    let exit_cfg = ExitConfig {
        radius: require(study.radius, "exit-mc", "radius")?,
        norm: parse_norm(study.norm.as_deref())?,
        eps_list: require(study.eps_list.clone(), "exit-mc", "eps_list")?,
        ensemble: require(study.ensemble, "exit-mc", "ensemble")?,
        dt: cfg.noise.dt,
        horizon: cfg.noise.horizon,
        base_seed: cfg.noise.seed,
        nonlinear: cfg.nonlinear()?,
        splitting: cfg.splitting(),
    };
    let result = exit_mc(&u0, &exit_cfg, workers)?;

    let dir = out_dir(cfg)?;
    write_text(&dir.join("rows.csv"), &estimate_rows_csv(&result.rows))?;
    let mut cells = Vec::new();
    for (i, (row, records)) in result.rows.iter().zip(&result.records).enumerate() {
        let name = format!("records_{i}.csv");
        write_text(&dir.join(&name), &exit_records_csv(records))?;
        cells.push(json!({ "eps": row.eps, "records": name }));
    }
    let outputs = json!({ "rows": "rows.csv", "cells": cells });
    write_manifest(&dir, "exit-mc", cfg, workers, &u0, outputs, started)?;
    let p: Vec<f64> = result.rows.iter().map(|r| r.p_hat).collect();
    println!(
        "exit-mc: {} cells, p_hat {:?}, wrote {}",
        result.rows.len(),
        p,
        dir.join("rows.csv").display()
    );
    Ok(0)
}

fn cmd_prop53(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    let study = study_required(
        cfg,
        "prop53",
        &["splitting", "radius", "eps_list", "ensemble"],
    )?;
    if cfg.model.delta != 0.0 {
        return Err(CliError::Config(
            "[model] delta must be 0 for prop53 (the exponent is stated for the unregularized flow)".into(),
        ));
    }
    if cfg.has_potential() {
        return Err(CliError::Config(
            "[model] potential must be none for prop53".into(),
        ));
    }
    let started = Instant::now();
    let u0 = cfg.initial_field()?;
    let wcfg = WeightedExitConfig {
        radius: require(study.radius, "prop53", "radius")?,
        eps_list: require(study.eps_list.clone(), "prop53", "eps_list")?,
        ensemble: require(study.ensemble, "prop53", "ensemble")?,
        dt: cfg.noise.dt,
        horizon: cfg.noise.horizon,
        base_seed: cfg.noise.seed,
        coupling: cfg.model.lambda,
        damping: cfg.model.alpha1,
        splitting: cfg.splitting(),
    };
    let report = weighted_exit_check(&u0, &wcfg, workers)?;

    let dir = out_dir(cfg)?;
    write_json(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("rows.csv"), &report.to_csv())?;
    let outputs = json!({ "report": "report.json", "rows": "rows.csv" });
    write_manifest(&dir, "prop53", cfg, workers, &u0, outputs, started)?;
    println!(
        "prop53: level {:.4}, margin slope {:.4}, trend nonincreasing {}, wrote {}",
        report.level,
        report.margin_slope,
        report.trend_nonincreasing,
        dir.join("report.json").display()
    );
    Ok(0)
}

fn cmd_delta_study(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    let study = study_required(cfg, "delta-study", &["splitting", "deltas", "ensemble"])?;
    let started = Instant::now();
    let u0 = cfg.initial_field()?;
    let dcfg = DeltaStudyConfig {
        eps: cfg.noise.epsilon,
        deltas: require(study.deltas.clone(), "delta-study", "deltas")?,
        ensemble: require(study.ensemble, "delta-study", "ensemble")?,
        dt: cfg.noise.dt,
        horizon: cfg.noise.horizon,
        base_seed: cfg.noise.seed,
        coupling: cfg.model.lambda,
        damping: cfg.model.alpha1,
        potential: cfg.nonlinear()?.potential,
        splitting: cfg.splitting(),
    };
    let report = delta_convergence_study(&u0, &dcfg, workers)?;

    let dir = out_dir(cfg)?;
    write_json(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("medians.csv"), &report.to_csv())?;
    let outputs = json!({ "report": "report.json", "medians": "medians.csv" });
    write_manifest(&dir, "delta-study", cfg, workers, &u0, outputs, started)?;
    println!(
        "delta-study: slope {:.3}, monotone fraction {:.2}, wrote {}",
        report.slope,
        report.monotone_fraction,
        dir.join("report.json").display()
    );
    Ok(0)
}

fn cmd_scaling_check(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    study_checked(cfg, "scaling-check", &["splitting"])?;
    if cfg.has_potential() {
        return Err(CliError::Config(
            "[model] potential must be none for scaling-check (kernels do not transport across dilations)".into(),
        ));
    }
    let started = Instant::now();
    let u0 = cfg.initial_field()?;
    let dcfg = DilationConfig {
        eps: cfg.noise.epsilon,
        delta: cfg.model.delta,
        coupling: cfg.model.lambda,
        damping: cfg.model.alpha1,
        dt: cfg.noise.dt,
        horizon: cfg.noise.horizon,
        seed: cfg.noise.seed,
        splitting: cfg.splitting(),
    };
    let report = dilation_equivalence_check(&u0, &dcfg)?;

    let dir = out_dir(cfg)?;
    write_json(&dir.join("report.json"), &report.to_json())?;
    let outputs = json!({ "report": "report.json" });
    write_manifest(&dir, "scaling-check", cfg, workers, &u0, outputs, started)?;
    println!(
        "scaling-check: chain-rule sup {:.3e}, literal sup {:.3e}, aligned {}, wrote {}",
        report.chain_rule_sup,
        report.literal_sup,
        report.aligned,
        dir.join("report.json").display()
    );
    Ok(0)
}

fn cmd_disp_study(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    let study = study_required(
        cfg,
        "disp-study",
        &["splitting", "eps_list", "ensemble", "p"],
    )?;
    if cfg.model.delta != 0.0 || cfg.model.alpha1 != 0.0 || cfg.has_potential() {
        return Err(CliError::Config(
            "[model] disp-study fixes delta = 0, alpha1 = 0, potential = none".into(),
        ));
    }
    let started = Instant::now();
    let u0 = cfg.initial_field()?;
    let dcfg = DispersionStudyConfig {
        eps_list: require(study.eps_list.clone(), "disp-study", "eps_list")?,
        coupling: cfg.model.lambda,
        ensemble: require(study.ensemble, "disp-study", "ensemble")?,
        dt: cfg.noise.dt,
        horizon: cfg.noise.horizon,
        base_seed: cfg.noise.seed,
        p: study.p.unwrap_or(4.0),
        splitting: cfg.splitting(),
    };
    let report = large_dispersion_study(&u0, &dcfg, workers)?;

    let dir = out_dir(cfg)?;
    write_json(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("means.csv"), &report.to_csv())?;
    let outputs = json!({ "report": "report.json", "means": "means.csv" });
    write_manifest(&dir, "disp-study", cfg, workers, &u0, outputs, started)?;
    println!(
        "disp-study: slope {:.3} (stderr {:.3}), wrote {}",
        report.slope,
        report.slope_stderr,
        dir.join("report.json").display()
    );
    Ok(0)
}

fn cmd_ldp_probe(cfg: &RunConfig, workers: usize) -> Result<i32, CliError> {
    let study = study_required(
        cfg,
        "ldp-probe",
        &["splitting", "rho", "eps_list", "ensemble", "intervals"],
    )?;
    let started = Instant::now();
    let u0 = cfg.initial_field()?;
    let pcfg = DeviationProbeConfig {
        rho: require(study.rho, "ldp-probe", "rho")?,
        eps_list: require(study.eps_list.clone(), "ldp-probe", "eps_list")?,
        ensemble: require(study.ensemble, "ldp-probe", "ensemble")?,
        dt: cfg.noise.dt,
        horizon: cfg.noise.horizon,
        base_seed: cfg.noise.seed,
        nonlinear: cfg.nonlinear()?,
        splitting: cfg.splitting(),
        mam_intervals: study.intervals,
    };
    let report = deviation_probe(&u0, &pcfg, workers)?;

    let dir = out_dir(cfg)?;
    write_json(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("rows.csv"), &estimate_rows_csv(&report.rows))?;
    let outputs = json!({ "report": "report.json", "rows": "rows.csv" });
    write_manifest(&dir, "ldp-probe", cfg, workers, &u0, outputs, started)?;
    println!(
        "ldp-probe: {} cells, tube action {:?}, wrote {}",
        report.rows.len(),
        report.tube_exit_action,
        dir.join("report.json").display()
    );
    Ok(0)
}
