//! Controlled evolution: the zero-noise dynamics driven by a deterministic
//! dispersion budget.
//!
//! A control is a piecewise-constant density h on [0, T]; its running
//! integral g replaces the Brownian path in the dispersion substep. The
//! stochastic integrator is this solver evaluated on the control whose
//! density is the path's increments over dt, so the two share one stepping
//! core by construction rather than by testing luck. The quadratic cost
//! (1/2) int h^2 dt of a control is the exponential price the noise pays to
//! imitate it.

use crate::field::ComplexField;
use crate::noise::NoisePath;
use crate::nonlinear::{nonlinear_flow_unchecked, NonlinearParams};
use crate::sde::{ObservableSet, Splitting, Trajectory, TrajectoryAccumulator};

/// Piecewise-constant control density on a uniform partition of [0, T].
#[derive(Clone, Debug, PartialEq)]
pub struct Control {
    interval_len: f64,
    values: Vec<f64>,
}

impl Control {
    /// Control with `values.len()` equal intervals covering [0, horizon].
    pub fn new(horizon: f64, values: Vec<f64>) -> crate::Result<Control> {
        if values.is_empty() {
            return Err(crate::Error::InvalidParameter(
                "control needs at least one interval".into(),
            ));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(crate::Error::InvalidParameter(format!(
                "control horizon must be positive, got {horizon}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::InvalidParameter(
                "control values must be finite".into(),
            ));
        }
        Ok(Control {
            interval_len: horizon / values.len() as f64,
            values,
        })
    }

    pub fn zero(horizon: f64, intervals: usize) -> crate::Result<Control> {
        Control::new(horizon, vec![0.0; intervals])
    }

    pub fn constant(horizon: f64, intervals: usize, h: f64) -> crate::Result<Control> {
        Control::new(horizon, vec![h; intervals])
    }

    /// The control whose integral retraces `path` scaled by
    /// sqrt(noise_intensity): density = scaled increment / dt per interval.
    pub fn from_path_increments(path: &NoisePath, noise_intensity: f64) -> crate::Result<Control> {
        if !(noise_intensity >= 0.0) {
            return Err(crate::Error::InvalidParameter(format!(
                "noise intensity must be >= 0, got {noise_intensity}"
            )));
        }
        let root = noise_intensity.sqrt();
        let dt = path.dt();
        let values = (0..path.step_count())
            .map(|n| root * path.increment(n) / dt)
            .collect();
        Ok(Control {
            interval_len: dt,
            values,
        })
    }

    pub fn interval_count(&self) -> usize {
        self.values.len()
    }

    pub fn interval_len(&self) -> f64 {
        self.interval_len
    }

    pub fn horizon(&self) -> f64 {
        self.interval_len * self.values.len() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Quadratic cost (1/2) sum h_m^2 * interval length.
    pub fn action(&self) -> f64 {
        0.5 * self.interval_len * self.values.iter().map(|h| h * h).sum::<f64>()
    }

    /// Integral of the density at the interval endpoints; starts at 0.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for &h in &self.values {
            acc += h * self.interval_len;
            out.push(acc);
        }
        out
    }

    /// Same density on a partition `factor` times finer (each value
    /// repeated). The integral and the action are unchanged; used to warm
    /// start refinements.
    pub fn refined(&self, factor: usize) -> crate::Result<Control> {
        if factor == 0 {
            return Err(crate::Error::InvalidParameter(
                "refinement factor must be >= 1".into(),
            ));
        }
        let mut values = Vec::with_capacity(self.values.len() * factor);
        for &h in &self.values {
            for _ in 0..factor {
                values.push(h);
            }
        }
        Ok(Control {
            interval_len: self.interval_len / factor as f64,
            values,
        })
    }

    /// CSV with columns m, h.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("m,h\n");
        for (m, h) in self.values.iter().enumerate() {
            s.push_str(&format!("{m},{h}\n"));
        }
        s
    }

    /// Parse the `to_csv` format.
    pub fn from_csv(text: &str, horizon: f64) -> crate::Result<Control> {
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with('m')) {
                continue;
            }
            let mut parts = line.split(',');
            let (midx, h) = (parts.next(), parts.next());
            let h = h
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    crate::Error::InvalidParameter(format!("control CSV line {} malformed", i + 1))
                })?;
            let midx = midx
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| {
                    crate::Error::InvalidParameter(format!("control CSV line {} malformed", i + 1))
                })?;
            if midx != values.len() {
                return Err(crate::Error::InvalidParameter(format!(
                    "control CSV indices must be consecutive from 0, got {midx}"
                )));
            }
            values.push(h);
        }
        Control::new(horizon, values)
    }
}

/// How the solver refines a control into time steps.
#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Solver steps per control interval.
    pub substeps: usize,
    pub splitting: Splitting,
    pub observables: ObservableSet,
    /// Times at which full fields are kept; each must sit on the solver grid.
    pub snapshot_times: Vec<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            substeps: 4,
            splitting: Splitting::Strang,
            observables: ObservableSet::all(),
            snapshot_times: Vec::new(),
        }
    }
}

/// Advance one solver step: the splitting applied to one dispersion
/// increment chi over dt. Shared verbatim by the stochastic integrator.
pub(crate) fn step_once(
    f: &mut ComplexField,
    chi: f64,
    dt: f64,
    nl: &NonlinearParams,
    splitting: Splitting,
) -> crate::Result<()> {
    match splitting {
        Splitting::Strang => {
            nonlinear_flow_unchecked(f, 0.5 * dt, nl)?;
            crate::dispersion::dispersion_flow_unchecked(f, chi);
            nonlinear_flow_unchecked(f, 0.5 * dt, nl)?;
        }
        Splitting::Lie => {
            crate::dispersion::dispersion_flow_unchecked(f, chi);
            nonlinear_flow_unchecked(f, dt, nl)?;
        }
    }
    Ok(())
}

/// Evolve `u0` under `control`. Records observables at every solver node,
/// t = 0 included.
pub fn solve(
    u0: &ComplexField,
    control: &Control,
    nl: &NonlinearParams,
    opts: &SolveOptions,
) -> crate::Result<Trajectory> {
    solve_hooked(u0, control, nl, opts, &mut |_, _, _| Ok(()))
}

/// Same as [`solve`] with a callback after each recorded state (step index,
/// time, field). Crate-internal: used for coupled runs that need the full
/// state sequence without storing it in the result.
pub(crate) fn solve_hooked(
    u0: &ComplexField,
    control: &Control,
    nl: &NonlinearParams,
    opts: &SolveOptions,
    hook: &mut dyn FnMut(usize, f64, &ComplexField) -> crate::Result<()>,
) -> crate::Result<Trajectory> {
    nl.validate()?;
    if let Some(k) = &nl.potential {
        if k.grid() != u0.grid() {
            return Err(crate::Error::GridMismatch(
                "potential kernel grid differs from the state grid".into(),
            ));
        }
    }
    if opts.substeps == 0 {
        return Err(crate::Error::InvalidParameter(
            "substeps per control interval must be >= 1".into(),
        ));
    }
    let sub_dt = control.interval_len() / opts.substeps as f64;
    let total_steps = control.interval_count() * opts.substeps;
    let snapshot_steps = resolve_snapshot_steps(&opts.snapshot_times, sub_dt, total_steps)?;

    let mut acc = TrajectoryAccumulator::new(opts.observables, total_steps);
    let mut state = u0.clone();

    let check_and_record = |step: usize,
                                state: &ComplexField,
                                acc: &mut TrajectoryAccumulator,
                                hook: &mut dyn FnMut(usize, f64, &ComplexField) -> crate::Result<()>|
     -> crate::Result<()> {
        let t = step as f64 * sub_dt;
        if state.has_non_finite() {
            return Err(crate::Error::Diverged { step, time: t });
        }
        acc.record(t, state)?;
        if snapshot_steps.contains(&step) {
            acc.snapshot(t, state.clone());
        }
        hook(step, t, state)
    };

    check_and_record(0, &state, &mut acc, hook)?;
    for step in 0..total_steps {
        let m = step / opts.substeps;
        let chi = control.values()[m] * sub_dt;
        step_once(&mut state, chi, sub_dt, nl, opts.splitting)?;
        check_and_record(step + 1, &state, &mut acc, hook)?;
    }
    Ok(acc.finish(state))
}

fn resolve_snapshot_steps(
    times: &[f64],
    sub_dt: f64,
    total_steps: usize,
) -> crate::Result<Vec<usize>> {
    let mut steps = Vec::with_capacity(times.len());
    for &t in times {
        let idx = (t / sub_dt).round();
        if idx < 0.0 || idx > total_steps as f64 || (t - idx * sub_dt).abs() > 1e-6 * sub_dt {
            return Err(crate::Error::InvalidParameter(format!(
                "snapshot time {t} does not sit on the solver grid (dt = {sub_dt})"
            )));
        }
        steps.push(idx as usize);
    }
    steps.sort_unstable();
    steps.dedup();
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{gaussian, l2_distance, Cx, Grid};
    use crate::sde::ObservableSet;

    fn grid() -> Grid {
        Grid::new(1, 64, 20.0).unwrap()
    }

    fn u0() -> ComplexField {
        gaussian(grid(), 1.0, 1.0, &[0.0])
    }

    #[test]
    fn action_examples() {
        let c = Control::constant(1.0, 4, 2.0).unwrap();
        assert_eq!(c.action(), 2.0);
        let z = Control::zero(3.0, 5).unwrap();
        assert_eq!(z.action(), 0.0);
    }

    #[test]
    fn action_quadratic_scaling() {
        let vals: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin() * 1.3).collect();
        let c = Control::new(2.0, vals.clone()).unwrap();
        for &scale in &[2.0, 0.5, -3.0] {
            let cs = Control::new(2.0, vals.iter().map(|v| v * scale).collect()).unwrap();
            let rel = (cs.action() - scale * scale * c.action()).abs() / c.action();
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn action_matches_direct_sum() {
        let vals = vec![1.0, -2.0, 0.5, 3.0, -0.25];
        let c = Control::new(2.5, vals.clone()).unwrap();
        let direct: f64 = vals.iter().map(|h| 0.5 * h * h * 0.5).sum();
        assert!((c.action() - direct).abs() < 1e-15);
    }

    #[test]
    fn refinement_preserves_integral_and_action() {
        let c = Control::new(1.0, vec![1.0, -0.5, 2.0, 0.25]).unwrap();
        let r = c.refined(4).unwrap();
        assert_eq!(r.interval_count(), 16);
        assert!((r.action() - c.action()).abs() < 1e-14);
        let gc = c.cumulative();
        let gr = r.cumulative();
        for i in 0..=4 {
            assert!((gc[i] - gr[4 * i]).abs() < 1e-14);
        }
    }

    #[test]
    fn csv_roundtrip() {
        let c = Control::new(1.5, vec![0.25, -1.0, 3.5]).unwrap();
        let text = c.to_csv();
        let back = Control::from_csv(&text, 1.5).unwrap();
        assert_eq!(c, back);
        assert!(Control::from_csv("m,h\n1,0.5\n", 1.0).is_err());
        assert!(Control::from_csv("m,h\n0,abc\n", 1.0).is_err());
    }

    #[test]
    fn control_validation() {
        assert!(Control::new(1.0, vec![]).is_err());
        assert!(Control::new(0.0, vec![1.0]).is_err());
        assert!(Control::new(-1.0, vec![1.0]).is_err());
        assert!(Control::new(1.0, vec![f64::NAN]).is_err());
        assert!(Control::from_path_increments(&NoisePath::sample(1, 1.0, 0.5).unwrap(), -1.0).is_err());
    }

    #[test]
    fn zero_control_matches_closed_form() {
        // with no dispersion budget, no potential and delta = 0, each node
        // evolves by the exact log-phase formula
        let u = u0();
        let lambda = 0.4;
        let a1 = 0.8;
        let nl = NonlinearParams::new(lambda, 0.0, a1);
        let horizon = 1.0;
        let c = Control::zero(horizon, 4).unwrap();
        let opts = SolveOptions {
            substeps: 8,
            ..Default::default()
        };
        let traj = solve(&u, &c, &nl, &opts).unwrap();
        let final_f = &traj.final_field;
        let decay = (-a1 * horizon).exp();
        for (a, b) in u.values().iter().zip(final_f.values()) {
            let s = a.norm_sqr();
            let phase = lambda * (horizon * s.ln() - a1 * horizon * horizon);
            let want = a * decay * Cx::new(phase.cos(), phase.sin());
            assert!((b - want).norm() < 1e-10, "{b} vs {want}");
        }
    }

    #[test]
    fn mass_decays_exactly() {
        let u = u0();
        let nl = NonlinearParams::new(1.0, 0.1, 0.6);
        let c = Control::new(2.0, vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        let traj = solve(&u, &c, &nl, &SolveOptions::default()).unwrap();
        let m0 = traj.l2[0];
        for (t, m) in traj.times.iter().zip(&traj.l2) {
            let want = m0 * (-0.6 * t).exp();
            assert!((m - want).abs() <= 1e-10 * m0, "t={t}: {m} vs {want}");
        }
    }

    #[test]
    fn solve_respects_substep_refinement() {
        // halving the solver step changes the result at second order only
        let u = u0();
        let nl = NonlinearParams::new(1.0, 0.1, 0.3);
        let c = Control::new(1.0, vec![1.2, -0.8, 0.5, 1.0]).unwrap();
        let run = |substeps| {
            let opts = SolveOptions {
                substeps,
                observables: ObservableSet::minimal(),
                ..Default::default()
            };
            solve(&u, &c, &nl, &opts).unwrap().final_field
        };
        let reference = run(256);
        let errs: Vec<f64> = [4usize, 8, 16, 32]
            .iter()
            .map(|&s| l2_distance(&run(s), &reference).unwrap())
            .collect();
        let logs: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let hs: Vec<f64> = [4f64, 8.0, 16.0, 32.0].iter().map(|s| (1.0 / s).ln()).collect();
        let (slope, _, _) = crate::util::linear_fit(&hs, &logs);
        assert!(
            (slope - 2.0).abs() < 0.3,
            "self-convergence order {slope}, errors {errs:?}"
        );
    }

    #[test]
    fn perturbation_response_is_stable_under_halving()
    {
        // continuity of the control-to-solution map: the response ratio
        // fitted at one perturbation size should not blow up when the
        // perturbation halves
        let u = u0();
        let nl = NonlinearParams::new(0.5, 0.1, 0.4);
        let base = Control::new(1.0, vec![1.0, -0.5, 0.75, 0.2]).unwrap();
        let sup_dist = |c2: &Control| {
            let opts = SolveOptions {
                observables: ObservableSet::minimal(),
                ..Default::default()
            };
            let mut fields = Vec::new();
            let _ = super::solve_hooked(&u, &base, &nl, &opts, &mut |_, _, f| {
                fields.push(f.clone());
                Ok(())
            })
            .unwrap();
            let mut worst = 0.0f64;
            let mut i = 0;
            let _ = super::solve_hooked(&u, c2, &nl, &opts, &mut |_, _, f| {
                worst = worst.max(l2_distance(f, &fields[i]).unwrap());
                i += 1;
                Ok(())
            })
            .unwrap();
            worst
        };
        let perturb = |eps: f64| {
            let vals: Vec<f64> = base
                .values()
                .iter()
                .enumerate()
                .map(|(i, &h)| h + eps * (1.0 + i as f64))
                .collect();
            Control::new(1.0, vals).unwrap()
        };
        // sup_t |g1 - g2| for the ramp perturbation below is eps * 10 / 4
        let sup_g = |eps: f64| {
            let g1 = base.cumulative();
            let g2 = perturb(eps).cumulative();
            g1.iter()
                .zip(&g2)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        };
        let eps = 0.02;
        let c_fit = sup_dist(&perturb(eps)) / sup_g(eps);
        let c_half = sup_dist(&perturb(eps / 2.0)) / sup_g(eps / 2.0);
        assert!(
            c_half <= 1.5 * c_fit + 1e-12,
            "response ratio exploded: {c_fit} -> {c_half}"
        );
        assert!(c_fit.is_finite() && c_fit > 0.0);
    }

    #[test]
    fn snapshots_only_on_grid() {
        let u = u0();
        let nl = NonlinearParams::new(1.0, 0.1, 0.0);
        let c = Control::zero(1.0, 4).unwrap();
        let mut opts = SolveOptions::default();
        opts.snapshot_times = vec![0.0, 0.5, 1.0];
        let traj = solve(&u, &c, &nl, &opts).unwrap();
        assert_eq!(traj.snapshots.len(), 3);
        assert_eq!(traj.snapshots[0].1.values(), u.values());

        opts.snapshot_times = vec![0.33];
        assert!(solve(&u, &c, &nl, &opts).is_err());
    }
}
