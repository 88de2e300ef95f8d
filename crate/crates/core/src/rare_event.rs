//! Monte Carlo studies over the stochastic flow: exit statistics and
//! exponents, regularization convergence, dilation equivalence, decay under
//! strong dispersion, and tube-deviation probabilities set against the
//! optimizer's action estimates.
//!
//! Every study is deterministic in its base seed: trajectory i always draws
//! the path with seed base + i, cells of a sweep share that path set
//! (common random numbers), and aggregation is in index order, so reruns
//! and different worker counts reproduce output bytes exactly.

use crate::exec::run_indexed;
use crate::field::{x1_distance, ComplexField, Grid};
use crate::mam::{mam_optimize, ExitTarget, MamProblem, TargetNorm};
use crate::noise::{checked_step_count, NoisePath};
use crate::nonlinear::{NonlinearParams, PotentialKernel};
use crate::sde::{coupled_simulate, simulate, ObservableSet, SdeParams, Splitting, Trajectory};
use crate::skeleton::Control;
use crate::util::{linear_fit, median};
use serde_json::json;

/// Two-sided 95% score value.
pub const WILSON_Z95: f64 = 1.959963984540054;

/// Wilson score interval for `successes` out of `n` trials.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> crate::Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(crate::Error::InvalidParameter(format!(
            "interval needs 0 <= successes <= n with n > 0, got {successes}/{n}"
        )));
    }
    if !z.is_finite() || z <= 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "score value must be positive, got {z}"
        )));
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    // at the boundary counts center and half agree to roundoff; pin the
    // endpoints exactly
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

/// One cell of a probability sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRow {
    pub eps: f64,
    pub exits: usize,
    pub ensemble: usize,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// eps * ln(p_hat); None when nothing exited (no log of zero).
    pub eps_log_p: Option<f64>,
}

impl EstimateRow {
    fn new(eps: f64, exits: usize, ensemble: usize) -> crate::Result<EstimateRow> {
        let (ci_lo, ci_hi) = wilson_interval(exits, ensemble, WILSON_Z95)?;
        let p_hat = exits as f64 / ensemble as f64;
        let eps_log_p = if exits > 0 { Some(eps * p_hat.ln()) } else { None };
        Ok(EstimateRow {
            eps,
            exits,
            ensemble,
            p_hat,
            ci_lo,
            ci_hi,
            eps_log_p,
        })
    }
}

/// Fixed-schema CSV for probability sweeps; the exponent column is empty
/// for zero-exit cells.
pub fn estimate_rows_csv(rows: &[EstimateRow]) -> String {
    let mut out = String::from("eps,exits,ensemble,p_hat,ci_lo,ci_hi,eps_log_p\n");
    for r in rows {
        let elp = r.eps_log_p.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{elp}\n",
            r.eps, r.exits, r.ensemble, r.p_hat, r.ci_lo, r.ci_hi
        ));
    }
    out
}

fn check_eps_decreasing(eps_list: &[f64], allow_zero: bool) -> crate::Result<()> {
    if eps_list.is_empty() {
        return Err(crate::Error::InvalidParameter(
            "intensity list must not be empty".into(),
        ));
    }
    let floor = if allow_zero { 0.0 } else { f64::MIN_POSITIVE };
    for e in eps_list {
        if !e.is_finite() || *e < floor {
            return Err(crate::Error::InvalidParameter(format!(
                "intensity {e} out of range"
            )));
        }
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(crate::Error::InvalidParameter(
            "intensity list must be strictly decreasing".into(),
        ));
    }
    Ok(())
}

fn check_ensemble(ensemble: usize) -> crate::Result<()> {
    if ensemble < 100 {
        return Err(crate::Error::InvalidParameter(format!(
            "ensemble must be at least 100, got {ensemble}"
        )));
    }
    Ok(())
}

/// First-exit sweep configuration. Cells share the trajectory seed set, so
/// estimates across intensities are coupled.
#[derive(Clone, Debug)]
pub struct ExitConfig {
    pub radius: f64,
    pub norm: TargetNorm,
    /// Strictly decreasing noise intensities (zero allowed: free flow).
    pub eps_list: Vec<f64>,
    pub ensemble: usize,
    pub dt: f64,
    pub horizon: f64,
    pub base_seed: u64,
    pub nonlinear: NonlinearParams,
    pub splitting: Splitting,
}

impl ExitConfig {
    fn validate(&self) -> crate::Result<()> {
        if !self.radius.is_finite() || self.radius <= 0.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "exit radius must be positive, got {}",
                self.radius
            )));
        }
        check_eps_decreasing(&self.eps_list, true)?;
        check_ensemble(self.ensemble)?;
        self.nonlinear.validate()?;
        checked_step_count(self.horizon, self.dt)?;
        Ok(())
    }
}

/// Outcome of one trajectory in an exit sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitRecord {
    pub index: usize,
    /// Solver node of first crossing; None when censored at the horizon.
    pub exit_step: Option<usize>,
    /// Norm at the crossing node, or the running maximum when censored.
    pub norm_at_detection: f64,
}

/// Detect the first node at or beyond the threshold. The series includes
/// t = 0, so starting outside the ball exits at step 0.
fn detect_exit(index: usize, series: &[f64], radius: f64) -> ExitRecord {
    let mut max = f64::NEG_INFINITY;
    for (n, v) in series.iter().enumerate() {
        if *v >= radius {
            return ExitRecord {
                index,
                exit_step: Some(n),
                norm_at_detection: *v,
            };
        }
        max = max.max(*v);
    }
    ExitRecord {
        index,
        exit_step: None,
        norm_at_detection: max,
    }
}

#[derive(Clone, Debug)]
pub struct ExitStudy {
    pub rows: Vec<EstimateRow>,
    /// records[c][i]: trajectory i of intensity cell c.
    pub records: Vec<Vec<ExitRecord>>,
}

impl ExitStudy {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "rows": self.rows.iter().map(row_json).collect::<Vec<_>>(),
        })
    }
}

fn row_json(r: &EstimateRow) -> serde_json::Value {
    json!({
        "eps": r.eps,
        "exits": r.exits,
        "ensemble": r.ensemble,
        "p_hat": r.p_hat,
        "ci": [r.ci_lo, r.ci_hi],
        "eps_log_p": r.eps_log_p,
    })
}

/// Per-trajectory records CSV; the step column is empty for censored runs.
pub fn exit_records_csv(records: &[ExitRecord]) -> String {
    let mut out = String::from("index,exit_step,norm_at_detection\n");
    for r in records {
        let step = r.exit_step.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{step},{}\n", r.index, r.norm_at_detection));
    }
    out
}

fn norm_series(traj: &Trajectory, norm: TargetNorm) -> crate::Result<&[f64]> {
    let missing = || {
        crate::Error::InvalidParameter("run did not record the requested norm".into())
    };
    match norm {
        TargetNorm::X1 => traj.x1.as_deref().ok_or_else(missing),
        TargetNorm::Weighted1 => traj.weighted1.as_deref().ok_or_else(missing),
    }
}

/// Estimate P(first exit before the horizon) for each intensity, on common
/// random numbers across cells.
pub fn exit_mc(
    u0: &ComplexField,
    config: &ExitConfig,
    workers: usize,
) -> crate::Result<ExitStudy> {
    config.validate()?;
    let observables = match config.norm {
        TargetNorm::X1 => ObservableSet::all(),
        TargetNorm::Weighted1 => ObservableSet::weighted_only(),
    };
    let mut rows = Vec::with_capacity(config.eps_list.len());
    let mut records = Vec::with_capacity(config.eps_list.len());
    for &eps in &config.eps_list {
        let params = SdeParams {
            noise_intensity: eps,
            nonlinear: config.nonlinear.clone(),
            dt: config.dt,
            horizon: config.horizon,
            splitting: config.splitting,
            observables,
            snapshot_times: Vec::new(),
        };
        let cell = run_indexed(config.ensemble, workers, |i| {
            let path = NoisePath::sample(config.base_seed + i as u64, config.horizon, config.dt)?;
            let traj = simulate(u0, &params, &path)?;
            Ok(detect_exit(i, norm_series(&traj, config.norm)?, config.radius))
        })?;
        let exits = cell.iter().filter(|r| r.exit_step.is_some()).count();
        rows.push(EstimateRow::new(eps, exits, config.ensemble)?);
        records.push(cell);
    }
    Ok(ExitStudy { rows, records })
}

/// Exit sweep in the pure spatial-moment seminorm sqrt(weighted1^2 - l2^2),
/// reported against the predicted small-noise exponent.
#[derive(Clone, Debug)]
pub struct WeightedExitConfig {
    pub radius: f64,
    /// Strictly decreasing, all positive.
    pub eps_list: Vec<f64>,
    pub ensemble: usize,
    pub dt: f64,
    pub horizon: f64,
    pub base_seed: u64,
    pub coupling: f64,
    pub damping: f64,
    pub splitting: Splitting,
}

#[derive(Clone, Debug)]
pub struct WeightedExitReport {
    pub rows: Vec<EstimateRow>,
    /// Seminorm of the initial state.
    pub start_seminorm: f64,
    /// -(radius^2 - start_seminorm^2), the predicted exponent level.
    pub level: f64,
    /// Fitted slope of the additive margin: the smallest c >= 0 such that
    /// eps*ln(p) <= level + c*eps holds on every cell with exits. The
    /// prefactor behind it is intensity-independent, so a modest value
    /// means the one-sided bound is visible at these intensities.
    pub margin_slope: f64,
    /// eps*ln(p) non-increasing over the cells with exits.
    pub trend_nonincreasing: bool,
    /// Intensities whose estimate sits in the non-asymptotic regime
    /// (p_hat > 1/2), where the exponent comparison says nothing yet.
    pub non_asymptotic: Vec<f64>,
}

impl WeightedExitReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "rows": self.rows.iter().map(row_json).collect::<Vec<_>>(),
            "start_seminorm": self.start_seminorm,
            "level": self.level,
            "margin_slope": self.margin_slope,
            "trend_nonincreasing": self.trend_nonincreasing,
            "non_asymptotic": self.non_asymptotic,
        })
    }

    /// CSV with the level and per-cell gap appended to the sweep columns.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("eps,exits,ensemble,p_hat,ci_lo,ci_hi,eps_log_p,level,gap\n");
        for r in &self.rows {
            let elp = r.eps_log_p.map(|v| v.to_string()).unwrap_or_default();
            let gap = r
                .eps_log_p
                .map(|v| (v - self.level).to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{elp},{},{gap}\n",
                r.eps, r.exits, r.ensemble, r.p_hat, r.ci_lo, r.ci_hi, self.level
            ));
        }
        out
    }
}

fn seminorm_series(traj: &Trajectory) -> crate::Result<Vec<f64>> {
    let w = traj
        .weighted1
        .as_ref()
        .ok_or_else(|| crate::Error::InvalidParameter("run did not record weighted norms".into()))?;
    Ok(w.iter()
        .zip(&traj.l2)
        .map(|(w, l)| (w * w - l * l).max(0.0).sqrt())
        .collect())
}

/// One-sided exponent check for exits in the spatial-moment seminorm.
/// Unregularized flow, no potential; requires damping > 2|coupling| and a
/// radius strictly above the initial seminorm.
pub fn weighted_exit_check(
    u0: &ComplexField,
    config: &WeightedExitConfig,
    workers: usize,
) -> crate::Result<WeightedExitReport> {
    if config.damping <= 2.0 * config.coupling.abs() {
        return Err(crate::Error::InvalidParameter(format!(
            "exponent check requires damping > 2|coupling|, got {} vs {}",
            config.damping, config.coupling
        )));
    }
    check_eps_decreasing(&config.eps_list, false)?;
    check_ensemble(config.ensemble)?;
    checked_step_count(config.horizon, config.dt)?;
    if !config.radius.is_finite() || config.radius <= 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "exit radius must be positive, got {}",
            config.radius
        )));
    }

    let w0 = u0.weighted_norm(1.0)?;
    let l0 = u0.l2_norm();
    let start_seminorm = (w0 * w0 - l0 * l0).max(0.0).sqrt();
    if config.radius <= start_seminorm {
        return Err(crate::Error::InvalidParameter(format!(
            "radius {} must exceed the initial seminorm {start_seminorm}",
            config.radius
        )));
    }
    let level = -(config.radius * config.radius - start_seminorm * start_seminorm);

    let nl = NonlinearParams::new(config.coupling, 0.0, config.damping);
    let mut rows = Vec::with_capacity(config.eps_list.len());
    for &eps in &config.eps_list {
        let params = SdeParams {
            noise_intensity: eps,
            nonlinear: nl.clone(),
            dt: config.dt,
            horizon: config.horizon,
            splitting: config.splitting,
            observables: ObservableSet::weighted_only(),
            snapshot_times: Vec::new(),
        };
        let exits: usize = run_indexed(config.ensemble, workers, |i| {
            let path = NoisePath::sample(config.base_seed + i as u64, config.horizon, config.dt)?;
            let traj = simulate(u0, &params, &path)?;
            let series = seminorm_series(&traj)?;
            Ok(usize::from(detect_exit(i, &series, config.radius).exit_step.is_some()))
        })?
        .into_iter()
        .sum();
        rows.push(EstimateRow::new(eps, exits, config.ensemble)?);
    }

    let observed: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.eps_log_p.map(|v| (r.eps, v)))
        .collect();
    let margin_slope = observed
        .iter()
        .map(|(eps, v)| (v - level) / eps)
        .fold(0.0f64, f64::max);
    let trend_nonincreasing = observed.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
    let non_asymptotic = rows
        .iter()
        .filter(|r| r.p_hat > 0.5)
        .map(|r| r.eps)
        .collect();

    Ok(WeightedExitReport {
        rows,
        start_seminorm,
        level,
        margin_slope,
        trend_nonincreasing,
        non_asymptotic,
    })
}

/// Regularization refinement against the unregularized flow on shared paths.
#[derive(Clone, Debug)]
pub struct DeltaStudyConfig {
    pub eps: f64,
    /// Strictly decreasing regularization levels (zero allowed, trivially
    /// giving a zero gap).
    pub deltas: Vec<f64>,
    pub ensemble: usize,
    pub dt: f64,
    pub horizon: f64,
    pub base_seed: u64,
    pub coupling: f64,
    pub damping: f64,
    pub potential: Option<PotentialKernel>,
    pub splitting: Splitting,
}

#[derive(Clone, Debug)]
pub struct DeltaStudyReport {
    pub deltas: Vec<f64>,
    /// per_path[i][k]: sup-over-time L2 gap of delta k's run on path i.
    pub per_path: Vec<Vec<f64>>,
    pub medians: Vec<f64>,
    /// Log-log fit of median gap against delta; NaN when a median is zero.
    pub slope: f64,
    pub slope_stderr: f64,
    /// Fraction of paths whose gaps decrease strictly along the delta list.
    pub monotone_fraction: f64,
}

impl DeltaStudyReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "deltas": self.deltas,
            "medians": self.medians,
            "slope": nullable(self.slope),
            "slope_stderr": nullable(self.slope_stderr),
            "monotone_fraction": self.monotone_fraction,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,median_sup_gap\n");
        for (d, m) in self.deltas.iter().zip(&self.medians) {
            out.push_str(&format!("{d},{m}\n"));
        }
        out
    }
}

fn nullable(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn delta_convergence_study(
    u0: &ComplexField,
    config: &DeltaStudyConfig,
    workers: usize,
) -> crate::Result<DeltaStudyReport> {
    if config.deltas.is_empty() {
        return Err(crate::Error::InvalidParameter(
            "regularization list must not be empty".into(),
        ));
    }
    for d in &config.deltas {
        if !d.is_finite() || *d < 0.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "regularization {d} out of range"
            )));
        }
    }
    if config.deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(crate::Error::InvalidParameter(
            "regularization list must be strictly decreasing".into(),
        ));
    }
    if config.ensemble == 0 {
        return Err(crate::Error::InvalidParameter(
            "ensemble must not be empty".into(),
        ));
    }
    checked_step_count(config.horizon, config.dt)?;

    let mk_params = |delta: f64| -> SdeParams {
        let mut nl = NonlinearParams::new(config.coupling, delta, config.damping);
        if let Some(k) = &config.potential {
            nl = nl.with_potential(k.clone());
        }
        SdeParams {
            noise_intensity: config.eps,
            nonlinear: nl,
            dt: config.dt,
            horizon: config.horizon,
            splitting: config.splitting,
            observables: ObservableSet::minimal(),
            snapshot_times: Vec::new(),
        }
    };
    let base = mk_params(0.0);

    let per_path = run_indexed(config.ensemble, workers, |i| {
        let path = NoisePath::sample(config.base_seed + i as u64, config.horizon, config.dt)?;
        let mut gaps = Vec::with_capacity(config.deltas.len());
        for &delta in &config.deltas {
            let run = coupled_simulate(u0, &mk_params(delta), &base, &path)?;
            gaps.push(run.sup_distance);
        }
        Ok(gaps)
    })?;

    let medians: Vec<f64> = (0..config.deltas.len())
        .map(|k| median(&per_path.iter().map(|g| g[k]).collect::<Vec<_>>()))
        .collect();
    let (slope, slope_stderr) = if medians.iter().all(|m| *m > 0.0) {
        let lx: Vec<f64> = config.deltas.iter().map(|d| d.ln()).collect();
        let ly: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
        let (s, _, se) = linear_fit(&lx, &ly);
        (s, se)
    } else {
        (f64::NAN, f64::NAN)
    };
    let monotone = per_path
        .iter()
        .filter(|g| g.windows(2).all(|w| w[1] < w[0]))
        .count();

    Ok(DeltaStudyReport {
        deltas: config.deltas.clone(),
        monotone_fraction: monotone as f64 / per_path.len() as f64,
        per_path,
        medians,
        slope,
        slope_stderr,
    })
}

/// Coupled dilation run: the physical intensity against the unit-intensity
/// flow on a rescaled box, driven by the same path.
#[derive(Clone, Debug)]
pub struct DilationConfig {
    pub eps: f64,
    pub delta: f64,
    pub coupling: f64,
    pub damping: f64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub splitting: Splitting,
}

#[derive(Clone, Debug)]
pub struct DilationReport {
    /// Sup over nodes and recorded times of |u - v o dilation| for the
    /// chain-rule convention (box stretched by eps^(-1/4), same samples).
    pub chain_rule_sup: f64,
    /// Same comparison for the literal convention (box shrunk by
    /// eps^(1/4)); reported, not asserted, since the dynamics do not
    /// satisfy it.
    pub literal_sup: f64,
    /// Final-time gradient-norm ratio of the chain-rule pair, next to the
    /// scaling the norm identity would require.
    pub grad_ratio: f64,
    pub claimed_grad_ratio: f64,
    pub l2_ratio: f64,
    /// Dilation factor is a power of two, so the rescaled wavenumbers are
    /// exact and the chain-rule comparison is meaningful to roundoff.
    pub aligned: bool,
}

impl DilationReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "chain_rule_sup": self.chain_rule_sup,
            "literal_sup": self.literal_sup,
            "grad_ratio": self.grad_ratio,
            "claimed_grad_ratio": self.claimed_grad_ratio,
            "l2_ratio": self.l2_ratio,
            "aligned": self.aligned,
        })
    }
}

pub fn dilation_equivalence_check(
    u0: &ComplexField,
    config: &DilationConfig,
) -> crate::Result<DilationReport> {
    if !config.eps.is_finite() || config.eps <= 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "intensity must be positive, got {}",
            config.eps
        )));
    }
    checked_step_count(config.horizon, config.dt)?;
    let nl = NonlinearParams::new(config.coupling, config.delta, config.damping);
    nl.validate()?;

    let path = NoisePath::sample(config.seed, config.horizon, config.dt)?;
    let factor = config.eps.powf(-0.25);
    let grid = u0.grid();
    let log2 = factor.log2();
    let aligned = (log2 - log2.round()).abs() < 1e-12;

    let solve_fields = |state0: &ComplexField, intensity: f64| -> crate::Result<(Vec<ComplexField>, Trajectory)> {
        let params = SdeParams {
            noise_intensity: intensity,
            nonlinear: nl.clone(),
            dt: config.dt,
            horizon: config.horizon,
            splitting: config.splitting,
            observables: ObservableSet::all(),
            snapshot_times: Vec::new(),
        };
        params.validate()?;
        let control = Control::from_path_increments(&path, intensity)?;
        let opts = crate::skeleton::SolveOptions {
            substeps: 1,
            splitting: config.splitting,
            observables: params.observables,
            snapshot_times: Vec::new(),
        };
        let mut fields = Vec::with_capacity(path.step_count() + 1);
        let traj = crate::skeleton::solve_hooked(state0, &control, &nl, &opts, &mut |_, _, f| {
            fields.push(f.clone());
            Ok(())
        })?;
        Ok((fields, traj))
    };

    let (u_fields, u_traj) = solve_fields(u0, config.eps)?;

    // Both conventions keep the sample values and rescale the box; node j
    // of the rescaled grid sits at factor * x_j (chain rule) or x_j / factor
    // (literal), so fields compare index by index.
    let compare = |length_scale: f64| -> crate::Result<(f64, Trajectory)> {
        let grid_v = Grid::new(grid.dim(), grid.n(), grid.length() * length_scale)?;
        let v0 = ComplexField::new(grid_v, u0.values().to_vec())?;
        let (v_fields, v_traj) = solve_fields(&v0, 1.0)?;
        let mut sup = 0.0f64;
        for (uf, vf) in u_fields.iter().zip(&v_fields) {
            for (a, b) in uf.values().iter().zip(vf.values()) {
                sup = sup.max((a - b).norm());
            }
        }
        Ok((sup, v_traj))
    };

    let (chain_rule_sup, v_traj) = compare(factor)?;
    let (literal_sup, _) = compare(1.0 / factor)?;

    let grad_u = u_traj.final_field.grad_l2_norm();
    let grad_v = v_traj.final_field.grad_l2_norm();
    Ok(DilationReport {
        chain_rule_sup,
        literal_sup,
        grad_ratio: grad_u / grad_v,
        claimed_grad_ratio: config.eps.powf(0.25),
        l2_ratio: u_traj.final_field.l2_norm() / v_traj.final_field.l2_norm(),
        aligned,
    })
}

/// Final-time Lebesgue-norm decay as the dispersion strength grows.
#[derive(Clone, Debug)]
pub struct DispersionStudyConfig {
    /// Strictly increasing dispersion strengths.
    pub eps_list: Vec<f64>,
    pub coupling: f64,
    pub ensemble: usize,
    pub dt: f64,
    pub horizon: f64,
    pub base_seed: u64,
    /// Lebesgue exponent, typically 4 or 6.
    pub p: f64,
    pub splitting: Splitting,
}

#[derive(Clone, Debug)]
pub struct DispersionStudyReport {
    pub eps: Vec<f64>,
    pub mean_lp: Vec<f64>,
    /// Log-log fit of the ensemble mean against the strength; exploratory.
    pub slope: f64,
    pub slope_stderr: f64,
}

impl DispersionStudyReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "eps": self.eps,
            "mean_lp": self.mean_lp,
            "slope": nullable(self.slope),
            "slope_stderr": nullable(self.slope_stderr),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,mean_lp\n");
        for (e, m) in self.eps.iter().zip(&self.mean_lp) {
            out.push_str(&format!("{e},{m}\n"));
        }
        out
    }
}

/// Undamped, unregularized, potential-free runs; records the discrete
/// Lebesgue norm of the final state per strength and fits the decay.
pub fn large_dispersion_study(
    u0: &ComplexField,
    config: &DispersionStudyConfig,
    workers: usize,
) -> crate::Result<DispersionStudyReport> {
    if config.eps_list.is_empty() {
        return Err(crate::Error::InvalidParameter(
            "strength list must not be empty".into(),
        ));
    }
    for e in &config.eps_list {
        if !e.is_finite() || *e <= 0.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "strength {e} out of range"
            )));
        }
    }
    if config.eps_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(crate::Error::InvalidParameter(
            "strength list must be strictly increasing".into(),
        ));
    }
    if config.ensemble == 0 {
        return Err(crate::Error::InvalidParameter(
            "ensemble must not be empty".into(),
        ));
    }
    checked_step_count(config.horizon, config.dt)?;

    let nl = NonlinearParams::new(config.coupling, 0.0, 0.0);
    let mut mean_lp = Vec::with_capacity(config.eps_list.len());
    for &eps in &config.eps_list {
        let params = SdeParams {
            noise_intensity: eps,
            nonlinear: nl.clone(),
            dt: config.dt,
            horizon: config.horizon,
            splitting: config.splitting,
            observables: ObservableSet::minimal(),
            snapshot_times: Vec::new(),
        };
        let norms = run_indexed(config.ensemble, workers, |i| {
            let path = NoisePath::sample(config.base_seed + i as u64, config.horizon, config.dt)?;
            let traj = simulate(u0, &params, &path)?;
            traj.final_field.lp_norm(config.p)
        })?;
        mean_lp.push(norms.iter().sum::<f64>() / norms.len() as f64);
    }

    let (slope, slope_stderr) = if mean_lp.iter().all(|m| *m > 0.0) {
        let lx: Vec<f64> = config.eps_list.iter().map(|e| e.ln()).collect();
        let ly: Vec<f64> = mean_lp.iter().map(|m| m.ln()).collect();
        let (s, _, se) = linear_fit(&lx, &ly);
        (s, se)
    } else {
        (f64::NAN, f64::NAN)
    };

    Ok(DispersionStudyReport {
        eps: config.eps_list.clone(),
        mean_lp,
        slope,
        slope_stderr,
    })
}

/// Probability of deviating from the deterministic path by rho anywhere on
/// the time grid, next to the optimizer's cost of forcing that deviation.
#[derive(Clone, Debug)]
pub struct DeviationProbeConfig {
    pub rho: f64,
    /// Strictly decreasing, all positive.
    pub eps_list: Vec<f64>,
    pub ensemble: usize,
    pub dt: f64,
    pub horizon: f64,
    pub base_seed: u64,
    /// Regularization must be positive here.
    pub nonlinear: NonlinearParams,
    pub splitting: Splitting,
    /// Control intervals for the companion action estimate; must divide the
    /// step count. None skips the estimate.
    pub mam_intervals: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct DeviationProbeReport {
    pub rows: Vec<EstimateRow>,
    /// Minimal action forcing the deviation at the final time, when the
    /// optimizer converged. Bounds the decay rate of the probabilities
    /// above from below (up to statistical error).
    pub tube_exit_action: Option<f64>,
    pub mam_converged: bool,
}

impl DeviationProbeReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "rows": self.rows.iter().map(row_json).collect::<Vec<_>>(),
            "tube_exit_action": self.tube_exit_action,
            "mam_converged": self.mam_converged,
        })
    }
}

pub fn deviation_probe(
    u0: &ComplexField,
    config: &DeviationProbeConfig,
    workers: usize,
) -> crate::Result<DeviationProbeReport> {
    if !config.rho.is_finite() || config.rho < 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "deviation size must be >= 0, got {}",
            config.rho
        )));
    }
    if config.nonlinear.regularization <= 0.0 {
        return Err(crate::Error::InvalidParameter(
            "deviation probe requires positive regularization".into(),
        ));
    }
    check_eps_decreasing(&config.eps_list, false)?;
    check_ensemble(config.ensemble)?;
    config.nonlinear.validate()?;
    let steps = checked_step_count(config.horizon, config.dt)?;

    // Deterministic reference: the zero-control flow on the same time grid.
    let zero = Control::zero(config.horizon, steps)?;
    let opts = crate::skeleton::SolveOptions {
        substeps: 1,
        splitting: config.splitting,
        observables: ObservableSet::minimal(),
        snapshot_times: Vec::new(),
    };
    let mut reference = Vec::with_capacity(steps + 1);
    crate::skeleton::solve_hooked(u0, &zero, &config.nonlinear, &opts, &mut |_, _, f| {
        reference.push(f.clone());
        Ok(())
    })?;

    let mut rows = Vec::with_capacity(config.eps_list.len());
    for &eps in &config.eps_list {
        let exits: usize = run_indexed(config.ensemble, workers, |i| {
            let path = NoisePath::sample(config.base_seed + i as u64, config.horizon, config.dt)?;
            let control = Control::from_path_increments(&path, eps)?;
            let mut sup = 0.0f64;
            crate::skeleton::solve_hooked(u0, &control, &config.nonlinear, &opts, &mut |n, _, f| {
                sup = sup.max(x1_distance(f, &reference[n])?);
                Ok(())
            })?;
            Ok(usize::from(sup >= config.rho))
        })?
        .into_iter()
        .sum();
        rows.push(EstimateRow::new(eps, exits, config.ensemble)?);
    }

    let (tube_exit_action, mam_converged) = match config.mam_intervals {
        None => (None, false),
        Some(m) => {
            if m == 0 || steps % m != 0 {
                return Err(crate::Error::InvalidParameter(format!(
                    "control intervals {m} must divide the step count {steps}"
                )));
            }
            let target = ExitTarget::deviation(
                TargetNorm::X1,
                config.rho,
                reference.last().expect("reference holds t = 0").clone(),
            );
            let mut problem = MamProblem::new(
                u0.clone(),
                config.nonlinear.clone(),
                config.horizon,
                m,
                target,
            );
            problem.substeps = steps / m;
            problem.splitting = config.splitting;
            let r = mam_optimize(&problem, workers)?;
            (r.converged.then_some(r.action), r.converged)
        }
    };

    Ok(DeviationProbeReport {
        rows,
        tube_exit_action,
        mam_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{gaussian, plane_wave};

    fn small_gaussian(n: usize, length: f64) -> ComplexField {
        let grid = Grid::new(1, n, length).unwrap();
        gaussian(grid, 1.0, 1.0, &[0.0])
    }

    fn exit_config(radius: f64, norm: TargetNorm, eps_list: Vec<f64>) -> ExitConfig {
        ExitConfig {
            radius,
            norm,
            eps_list,
            ensemble: 100,
            dt: 0.02,
            horizon: 0.4,
            base_seed: 41,
            nonlinear: NonlinearParams::new(0.25, 0.1, 1.0),
            splitting: Splitting::Strang,
        }
    }

    /// Exact binomial coverage of the Wilson interval, against tail sums.
    #[test]
    fn wilson_interval_matches_binomial_oracle() {
        let n = 1000usize;
        // log factorials up to n
        let mut logfact = vec![0.0f64; n + 1];
        for i in 1..=n {
            logfact[i] = logfact[i - 1] + (i as f64).ln();
        }
        for p in [0.01, 0.1] {
            let mut coverage = 0.0;
            for k in 0..=n {
                let (lo, hi) = wilson_interval(k, n, WILSON_Z95).unwrap();
                if lo <= p && p <= hi {
                    let logpmf = logfact[n] - logfact[k] - logfact[n - k]
                        + k as f64 * p.ln()
                        + (n - k) as f64 * (1.0 - p).ln();
                    coverage += logpmf.exp();
                }
            }
            assert!(
                (0.93..=0.98).contains(&coverage),
                "coverage {coverage} at p = {p}"
            );
        }
    }

    #[test]
    fn wilson_interval_edges() {
        let (lo, hi) = wilson_interval(0, 50, WILSON_Z95).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.1);
        let (lo, hi) = wilson_interval(50, 50, WILSON_Z95).unwrap();
        assert!(lo > 0.9 && lo < 1.0);
        assert_eq!(hi, 1.0);
        assert!(wilson_interval(3, 0, WILSON_Z95).is_err());
        assert!(wilson_interval(5, 4, WILSON_Z95).is_err());
    }

    #[test]
    fn exit_is_immediate_outside_the_ball() {
        let u0 = small_gaussian(16, 12.0);
        // x1 norm of the Gaussian is ~2.3; radius 1 starts outside
        let cfg = exit_config(1.0, TargetNorm::X1, vec![0.1]);
        let study = exit_mc(&u0, &cfg, 1).unwrap();
        assert_eq!(study.rows[0].p_hat, 1.0);
        assert!(study.records[0]
            .iter()
            .all(|r| r.exit_step == Some(0)));
        assert_eq!(study.rows[0].ci_hi, 1.0);
    }

    #[test]
    fn no_exit_without_noise_above_decaying_flow() {
        let u0 = small_gaussian(16, 12.0);
        // damping contracts the flow; a radius above the start is never hit
        let cfg = exit_config(3.0, TargetNorm::X1, vec![0.0]);
        let study = exit_mc(&u0, &cfg, 1).unwrap();
        assert_eq!(study.rows[0].exits, 0);
        assert_eq!(study.rows[0].p_hat, 0.0);
        assert!(study.rows[0].eps_log_p.is_none());
        assert_eq!(study.rows[0].ci_lo, 0.0);
        assert!(study.rows[0].ci_hi > 0.0);
    }

    #[test]
    fn exit_counts_non_increasing_in_intensity_on_shared_paths() {
        let u0 = small_gaussian(16, 12.0);
        let cfg = exit_config(2.6, TargetNorm::X1, vec![0.8, 0.4, 0.2]);
        let study = exit_mc(&u0, &cfg, 2).unwrap();
        let counts: Vec<usize> = study.rows.iter().map(|r| r.exits).collect();
        assert!(counts[0] > 0, "strongest cell should see exits");
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    }

    #[test]
    fn full_norm_exits_dominate_weighted_exits_pathwise() {
        let u0 = small_gaussian(16, 12.0);
        let cx = exit_config(2.6, TargetNorm::X1, vec![0.5]);
        let cw = exit_config(2.6, TargetNorm::Weighted1, vec![0.5]);
        let sx = exit_mc(&u0, &cx, 2).unwrap();
        let sw = exit_mc(&u0, &cw, 2).unwrap();
        // the full norm dominates, so its exit can only come earlier
        for (rx, rw) in sx.records[0].iter().zip(&sw.records[0]) {
            match (rx.exit_step, rw.exit_step) {
                (None, Some(_)) => panic!("weighted exit without full-norm exit"),
                (Some(a), Some(b)) => assert!(a <= b),
                _ => {}
            }
        }
        assert!(sx.rows[0].exits >= sw.rows[0].exits);
    }

    #[test]
    fn reruns_and_worker_counts_reproduce_bytes() {
        let u0 = small_gaussian(16, 12.0);
        let cfg = exit_config(2.6, TargetNorm::X1, vec![0.5, 0.25]);
        let a = exit_mc(&u0, &cfg, 1).unwrap();
        let b = exit_mc(&u0, &cfg, 3).unwrap();
        assert_eq!(estimate_rows_csv(&a.rows), estimate_rows_csv(&b.rows));
        assert_eq!(exit_records_csv(&a.records[0]), exit_records_csv(&b.records[0]));
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn csv_renders_zero_count_cells_without_logs() {
        let rows = vec![
            EstimateRow::new(0.5, 3, 100).unwrap(),
            EstimateRow::new(0.25, 0, 100).unwrap(),
        ];
        let csv = estimate_rows_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with(','), "empty exponent column: {}", lines[2]);
        assert!(!csv.contains("NaN") && !csv.contains("inf"));
    }

    #[test]
    fn weighted_exit_check_rejects_bad_hypotheses() {
        let u0 = small_gaussian(16, 12.0);
        let mut cfg = WeightedExitConfig {
            radius: 2.0,
            eps_list: vec![0.4, 0.2],
            ensemble: 100,
            dt: 0.02,
            horizon: 0.4,
            base_seed: 7,
            coupling: 0.25,
            damping: 1.0,
            splitting: Splitting::Strang,
        };
        cfg.damping = 0.5; // not above 2|coupling|
        assert!(weighted_exit_check(&u0, &cfg, 1).is_err());
        cfg.damping = 1.0;
        cfg.radius = 0.1; // below the initial seminorm
        assert!(weighted_exit_check(&u0, &cfg, 1).is_err());
    }

    #[test]
    fn weighted_exit_check_reports_level_and_margin() {
        let u0 = small_gaussian(16, 12.0);
        let cfg = WeightedExitConfig {
            radius: 1.6,
            eps_list: vec![0.6, 0.3],
            ensemble: 100,
            dt: 0.02,
            horizon: 0.4,
            base_seed: 7,
            coupling: 0.25,
            damping: 1.0,
            splitting: Splitting::Strang,
        };
        let report = weighted_exit_check(&u0, &cfg, 2).unwrap();
        let s0 = report.start_seminorm;
        assert!(
            (report.level + (cfg.radius * cfg.radius - s0 * s0)).abs() < 1e-14,
            "level arithmetic"
        );
        assert!(report.margin_slope >= 0.0);
        assert_eq!(report.rows.len(), 2);
        // fitted margin makes the one-sided bound hold on observed cells
        for r in &report.rows {
            if let Some(elp) = r.eps_log_p {
                assert!(elp <= report.level + report.margin_slope * r.eps + 1e-12);
            }
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("eps,exits,ensemble"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn delta_gaps_shrink_with_regularization() {
        let u0 = small_gaussian(32, 16.0);
        let cfg = DeltaStudyConfig {
            eps: 0.5,
            deltas: vec![1e-1, 1e-2, 1e-3],
            ensemble: 8,
            dt: 0.02,
            horizon: 0.4,
            base_seed: 11,
            coupling: 0.5,
            damping: 0.3,
            potential: None,
            splitting: Splitting::Strang,
        };
        let report = delta_convergence_study(&u0, &cfg, 2).unwrap();
        assert_eq!(report.monotone_fraction, 1.0, "{:?}", report.per_path);
        assert!(report.slope > 0.1, "slope {}", report.slope);
        assert!(report.medians.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(report.to_csv().lines().count(), 4);
    }

    #[test]
    fn delta_zero_gap_is_zero() {
        let u0 = small_gaussian(16, 12.0);
        let cfg = DeltaStudyConfig {
            eps: 0.5,
            deltas: vec![0.0],
            ensemble: 2,
            dt: 0.05,
            horizon: 0.2,
            base_seed: 3,
            coupling: 0.5,
            damping: 0.3,
            potential: None,
            splitting: Splitting::Strang,
        };
        let report = delta_convergence_study(&u0, &cfg, 1).unwrap();
        assert!(report.per_path.iter().all(|g| g[0] == 0.0));
        assert!(report.slope.is_nan());
        assert_eq!(report.to_json()["slope"], serde_json::Value::Null);
    }

    #[test]
    fn dilation_identity_at_unit_intensity() {
        let u0 = small_gaussian(32, 16.0);
        let cfg = DilationConfig {
            eps: 1.0,
            delta: 0.1,
            coupling: 0.25,
            damping: 1.0,
            dt: 0.05,
            horizon: 0.3,
            seed: 19,
            splitting: Splitting::Strang,
        };
        let report = dilation_equivalence_check(&u0, &cfg).unwrap();
        assert_eq!(report.chain_rule_sup, 0.0);
        assert_eq!(report.literal_sup, 0.0);
        assert_eq!(report.grad_ratio, 1.0);
        assert!(report.aligned);
    }

    #[test]
    fn dilation_chain_rule_holds_literal_does_not() {
        let u0 = small_gaussian(32, 12.0);
        let cfg = DilationConfig {
            eps: 1.0 / 16.0,
            delta: 0.1,
            coupling: 0.25,
            damping: 1.0,
            dt: 0.05,
            horizon: 0.3,
            seed: 19,
            splitting: Splitting::Strang,
        };
        let report = dilation_equivalence_check(&u0, &cfg).unwrap();
        assert!(report.aligned);
        assert!(
            report.chain_rule_sup <= 1e-8,
            "chain rule sup {}",
            report.chain_rule_sup
        );
        assert!(
            report.literal_sup > 1e-3,
            "literal convention should visibly fail, sup {}",
            report.literal_sup
        );
        assert!((report.claimed_grad_ratio - 0.5).abs() < 1e-15);

        // a strength without power-of-two dilation still compares well,
        // only the exactness flag drops
        let mut cfg2 = cfg;
        cfg2.eps = 0.2;
        let loose = dilation_equivalence_check(&u0, &cfg2).unwrap();
        assert!(!loose.aligned);
        assert!(loose.chain_rule_sup <= 1e-8, "sup {}", loose.chain_rule_sup);
    }

    #[test]
    fn dispersion_study_conserves_mass_and_decays() {
        let u0 = small_gaussian(32, 16.0);
        let cfg = DispersionStudyConfig {
            eps_list: vec![1.0, 10.0, 100.0],
            coupling: 0.5,
            ensemble: 16,
            dt: 0.01,
            horizon: 0.5,
            base_seed: 23,
            p: 4.0,
            splitting: Splitting::Strang,
        };
        let report = large_dispersion_study(&u0, &cfg, 2).unwrap();
        assert!(report.slope < 0.0, "slope {}", report.slope);
        assert_eq!(report.mean_lp.len(), 3);

        // no damping: the L2 norm of any run is conserved exactly
        let params = SdeParams {
            noise_intensity: 100.0,
            nonlinear: NonlinearParams::new(0.5, 0.0, 0.0),
            dt: 0.01,
            horizon: 0.5,
            splitting: Splitting::Strang,
            observables: ObservableSet::minimal(),
            snapshot_times: Vec::new(),
        };
        let path = NoisePath::sample(23, 0.5, 0.01).unwrap();
        let traj = simulate(&u0, &params, &path).unwrap();
        assert!((traj.final_field.l2_norm() - u0.l2_norm()).abs() < 1e-10);
    }

    #[test]
    fn dispersion_study_plane_wave_is_flat() {
        let grid = Grid::new(1, 16, 2.0 * std::f64::consts::PI).unwrap();
        let u0 = plane_wave(grid, &[2]);
        let cfg = DispersionStudyConfig {
            eps_list: vec![1.0, 10.0],
            coupling: 0.5,
            ensemble: 4,
            dt: 0.05,
            horizon: 0.2,
            base_seed: 5,
            p: 6.0,
            splitting: Splitting::Strang,
        };
        let report = large_dispersion_study(&u0, &cfg, 1).unwrap();
        // a single mode only ever picks up global phases
        assert!(
            (report.mean_lp[0] - report.mean_lp[1]).abs() < 1e-10,
            "{:?}",
            report.mean_lp
        );
    }

    #[test]
    fn deviation_probe_rho_zero_is_certain() {
        let u0 = small_gaussian(16, 12.0);
        let cfg = DeviationProbeConfig {
            rho: 0.0,
            eps_list: vec![0.4, 0.2],
            ensemble: 100,
            dt: 0.05,
            horizon: 0.2,
            base_seed: 31,
            nonlinear: NonlinearParams::new(0.25, 0.1, 1.0),
            splitting: Splitting::Strang,
            mam_intervals: None,
        };
        let report = deviation_probe(&u0, &cfg, 2).unwrap();
        assert!(report.rows.iter().all(|r| r.p_hat == 1.0));
        assert!(report.tube_exit_action.is_none());
    }

    #[test]
    fn deviation_probe_runs_with_action_companion() {
        let u0 = small_gaussian(16, 12.0);
        let cfg = DeviationProbeConfig {
            rho: 0.35,
            eps_list: vec![0.5, 0.25],
            ensemble: 100,
            dt: 0.05,
            horizon: 0.2,
            base_seed: 31,
            nonlinear: NonlinearParams::new(0.25, 0.1, 1.0),
            splitting: Splitting::Strang,
            mam_intervals: Some(2),
        };
        let report = deviation_probe(&u0, &cfg, 2).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows[0].exits >= report.rows[1].exits, "crn trend");
        if let Some(action) = report.tube_exit_action {
            assert!(action > 0.0 && action.is_finite());
        }
        // regularization is required here
        let mut bad = cfg.clone();
        bad.nonlinear = NonlinearParams::new(0.25, 0.0, 1.0);
        assert!(deviation_probe(&u0, &bad, 1).is_err());
        // interval count must divide the step grid
        let mut bad2 = cfg;
        bad2.mam_intervals = Some(3);
        assert!(deviation_probe(&u0, &bad2, 1).is_err());
    }
}
