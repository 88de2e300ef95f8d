//! The stochastic integrator: an exact-substep splitting scheme driven by
//! sampled Brownian increments.
//!
//! One step over dt applies the nonlinear flow and the dispersion group
//! with increment sqrt(eps) * dB. Both substeps are exact, so the only
//! discretization error is the splitting commutator, and structural laws
//! (mass decay, dispersion unitarity) hold at machine precision for every
//! dt. Internally a run is the controlled solver applied to the control
//! whose density matches the path's increments; see [`crate::skeleton`].

use crate::field::{l2_distance, ComplexField};
use crate::noise::NoisePath;
use crate::nonlinear::NonlinearParams;
use crate::skeleton::{Control, SolveOptions};

/// Operator splitting order for one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Splitting {
    /// Dispersion then nonlinear flow; first order.
    Lie,
    /// Symmetric half-nonlinear sandwich; second order.
    Strang,
}

impl Splitting {
    pub fn parse(s: &str) -> crate::Result<Splitting> {
        match s {
            "lie" => Ok(Splitting::Lie),
            "strang" => Ok(Splitting::Strang),
            other => Err(crate::Error::InvalidParameter(format!(
                "unknown splitting '{other}', expected 'lie' or 'strang'"
            ))),
        }
    }
}

/// Which norms a run records at every step. The plain norm is always kept;
/// the gradient norm costs a transform per record, so studies that do not
/// need it switch it off.
#[derive(Clone, Copy, Debug)]
pub struct ObservableSet {
    pub grad: bool,
    pub weighted: bool,
}

impl ObservableSet {
    pub fn all() -> ObservableSet {
        ObservableSet {
            grad: true,
            weighted: true,
        }
    }

    pub fn minimal() -> ObservableSet {
        ObservableSet {
            grad: false,
            weighted: false,
        }
    }

    pub fn weighted_only() -> ObservableSet {
        ObservableSet {
            grad: false,
            weighted: true,
        }
    }
}

/// Per-step norm records of one run, plus requested full-field snapshots
/// and the final state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub l2: Vec<f64>,
    pub grad_l2: Option<Vec<f64>>,
    pub weighted1: Option<Vec<f64>>,
    /// sqrt(l2^2 + grad^2 + weighted^2); present when both parts are.
    pub x1: Option<Vec<f64>>,
    pub snapshots: Vec<(f64, ComplexField)>,
    pub final_field: ComplexField,
}

impl Trajectory {
    /// CSV with fixed columns t, l2, grad_l2, weighted1, x1 and a leading
    /// comment line carrying the run's parameter hash. Requires a run that
    /// recorded everything.
    pub fn to_csv(&self, params_hash: u64) -> crate::Result<String> {
        let (g, w, x) = match (&self.grad_l2, &self.weighted1, &self.x1) {
            (Some(g), Some(w), Some(x)) => (g, w, x),
            _ => {
                return Err(crate::Error::InvalidParameter(
                    "CSV export needs a run with all observables recorded".into(),
                ))
            }
        };
        let mut s = format!("# params={params_hash:016x}\n");
        s.push_str("t,l2,grad_l2,weighted1,x1\n");
        for i in 0..self.times.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.times[i], self.l2[i], g[i], w[i], x[i]
            ));
        }
        Ok(s)
    }
}

/// Builds a [`Trajectory`] record by record; shared by the solvers.
pub(crate) struct TrajectoryAccumulator {
    observables: ObservableSet,
    times: Vec<f64>,
    l2: Vec<f64>,
    grad: Vec<f64>,
    weighted: Vec<f64>,
    x1: Vec<f64>,
    snapshots: Vec<(f64, ComplexField)>,
}

impl TrajectoryAccumulator {
    pub(crate) fn new(observables: ObservableSet, steps: usize) -> TrajectoryAccumulator {
        let cap = steps + 1;
        TrajectoryAccumulator {
            observables,
            times: Vec::with_capacity(cap),
            l2: Vec::with_capacity(cap),
            grad: Vec::with_capacity(if observables.grad { cap } else { 0 }),
            weighted: Vec::with_capacity(if observables.weighted { cap } else { 0 }),
            x1: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, t: f64, f: &ComplexField) -> crate::Result<()> {
        self.times.push(t);
        let l2 = f.l2_norm();
        self.l2.push(l2);
        let mut g = None;
        if self.observables.grad {
            let v = f.grad_l2_norm();
            self.grad.push(v);
            g = Some(v);
        }
        if self.observables.weighted {
            let w = f.weighted_norm(1.0)?;
            self.weighted.push(w);
            if let Some(g) = g {
                self.x1.push((l2 * l2 + g * g + w * w).sqrt());
            }
        }
        Ok(())
    }

    pub(crate) fn snapshot(&mut self, t: f64, f: ComplexField) {
        self.snapshots.push((t, f));
    }

    pub(crate) fn finish(self, final_field: ComplexField) -> Trajectory {
        let both = self.observables.grad && self.observables.weighted;
        Trajectory {
            times: self.times,
            l2: self.l2,
            grad_l2: self.observables.grad.then_some(self.grad),
            weighted1: self.observables.weighted.then_some(self.weighted),
            x1: both.then_some(self.x1),
            snapshots: self.snapshots,
            final_field,
        }
    }
}

/// Parameters of a stochastic run.
#[derive(Clone, Debug)]
pub struct SdeParams {
    /// Noise intensity eps >= 0; the dispersion increment is sqrt(eps) dB.
    pub noise_intensity: f64,
    pub nonlinear: NonlinearParams,
    pub dt: f64,
    pub horizon: f64,
    pub splitting: Splitting,
    pub observables: ObservableSet,
    pub snapshot_times: Vec<f64>,
}

impl SdeParams {
    pub fn new(noise_intensity: f64, nonlinear: NonlinearParams, dt: f64, horizon: f64) -> SdeParams {
        SdeParams {
            noise_intensity,
            nonlinear,
            dt,
            horizon,
            splitting: Splitting::Strang,
            observables: ObservableSet::all(),
            snapshot_times: Vec::new(),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.nonlinear.validate()?;
        if !(self.noise_intensity >= 0.0) || !self.noise_intensity.is_finite() {
            return Err(crate::Error::InvalidParameter(format!(
                "noise intensity must be >= 0, got {}",
                self.noise_intensity
            )));
        }
        crate::noise::checked_step_count(self.horizon, self.dt)?;
        Ok(())
    }
}

/// One integrator step for the increment `db` over `params.dt`.
pub fn step(
    f: &ComplexField,
    db: f64,
    noise_intensity: f64,
    params: &SdeParams,
) -> crate::Result<ComplexField> {
    params.validate()?;
    if !(noise_intensity >= 0.0) {
        return Err(crate::Error::InvalidParameter(format!(
            "noise intensity must be >= 0, got {noise_intensity}"
        )));
    }
    if !db.is_finite() {
        return Err(crate::Error::InvalidParameter(format!(
            "increment must be finite, got {db}"
        )));
    }
    let mut out = f.clone();
    // density-then-increment mirrors the controlled solver bit for bit
    let chi = (noise_intensity.sqrt() * db / params.dt) * params.dt;
    crate::skeleton::step_once(&mut out, chi, params.dt, &params.nonlinear, params.splitting)?;
    if out.has_non_finite() {
        return Err(crate::Error::Diverged { step: 1, time: params.dt });
    }
    Ok(out)
}

fn check_path_grid(params: &SdeParams, path: &NoisePath) -> crate::Result<()> {
    let dt_ok = (path.dt() - params.dt).abs() <= 1e-12 * params.dt;
    let t_ok = (path.horizon() - params.horizon).abs() <= 1e-9 * params.horizon;
    if !dt_ok || !t_ok {
        return Err(crate::Error::InvalidParameter(format!(
            "path grid (dt = {}, T = {}) does not match parameters (dt = {}, T = {})",
            path.dt(),
            path.horizon(),
            params.dt,
            params.horizon
        )));
    }
    Ok(())
}

/// Integrate `u0` along `path`. The run is the controlled solver applied
/// to the path's increment density, so a skeleton solve on that control
/// reproduces it bit for bit.
pub fn simulate(
    u0: &ComplexField,
    params: &SdeParams,
    path: &NoisePath,
) -> crate::Result<Trajectory> {
    params.validate()?;
    check_path_grid(params, path)?;
    let control = Control::from_path_increments(path, params.noise_intensity)?;
    let opts = SolveOptions {
        substeps: 1,
        splitting: params.splitting,
        observables: params.observables,
        snapshot_times: params.snapshot_times.clone(),
    };
    crate::skeleton::solve(u0, &control, &params.nonlinear, &opts)
}

/// Two runs driven by the same path, with the per-step distance between
/// them. Used for coupling studies (regularization refinement, common
/// random numbers).
#[derive(Clone, Debug)]
pub struct CoupledRun {
    pub first: Trajectory,
    pub second: Trajectory,
    /// L2 distance at every shared node.
    pub distances: Vec<f64>,
    pub sup_distance: f64,
}

pub fn coupled_simulate(
    u0: &ComplexField,
    params1: &SdeParams,
    params2: &SdeParams,
    path: &NoisePath,
) -> crate::Result<CoupledRun> {
    params1.validate()?;
    params2.validate()?;
    check_path_grid(params1, path)?;
    check_path_grid(params2, path)?;
    if params1.splitting != params2.splitting {
        return Err(crate::Error::InvalidParameter(
            "coupled runs must share the splitting".into(),
        ));
    }
    let c1 = Control::from_path_increments(path, params1.noise_intensity)?;
    let c2 = Control::from_path_increments(path, params2.noise_intensity)?;
    let mk_opts = |p: &SdeParams| SolveOptions {
        substeps: 1,
        splitting: p.splitting,
        observables: p.observables,
        snapshot_times: p.snapshot_times.clone(),
    };
    let mut fields: Vec<ComplexField> = Vec::with_capacity(path.step_count() + 1);
    let first = crate::skeleton::solve_hooked(u0, &c1, &params1.nonlinear, &mk_opts(params1), &mut |_, _, f| {
        fields.push(f.clone());
        Ok(())
    })?;
    let mut distances = Vec::with_capacity(fields.len());
    let second = crate::skeleton::solve_hooked(u0, &c2, &params2.nonlinear, &mk_opts(params2), &mut |step, _, f| {
        distances.push(l2_distance(f, &fields[step])?);
        Ok(())
    })?;
    let sup_distance = distances.iter().cloned().fold(0.0f64, f64::max);
    Ok(CoupledRun {
        first,
        second,
        distances,
        sup_distance,
    })
}

/// Stable fingerprint of a run's numerical parameters, stamped into CSV
/// output so files can be traced back to their configuration.
pub fn params_fingerprint(u0: &ComplexField, params: &SdeParams, seed: u64) -> u64 {
    use std::fmt::Write;
    let g = u0.grid();
    let mut s = String::new();
    let _ = write!(
        s,
        "d={};n={};L={:e};eps={:e};dt={:e};T={:e};split={:?};lam={:e};delta={:e};a1={:e};seed={seed}",
        g.dim(),
        g.n(),
        g.length(),
        params.noise_intensity,
        params.dt,
        params.horizon,
        params.splitting,
        params.nonlinear.coupling,
        params.nonlinear.regularization,
        params.nonlinear.damping,
    );
    let mut h = crate::util::fnv1a64(s.as_bytes());
    if let Some(k) = &params.nonlinear.potential {
        for v in k.samples() {
            h ^= crate::util::fnv1a64(&v.to_le_bytes());
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
