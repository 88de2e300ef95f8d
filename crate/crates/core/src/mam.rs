//! Exit-action estimation: minimize the control cost subject to the
//! controlled flow leaving a norm ball by the final time.
//!
//! The optimizer is a penalty-continuation gradient descent. The endpoint
//! constraint "measure >= radius" enters as mu * max(0, radius - measure)^2
//! with mu growing geometrically across stages; gradients are central finite
//! differences in the control coefficients (one forward solve per
//! perturbation, run in parallel), and each descent step is Armijo
//! backtracking, so the objective is non-increasing along accepted steps.
//!
//! Two refinements around the plain penalty loop matter in practice. The
//! descent runs twice, from the starting control and from its negation:
//! the endpoint measure is noticeably asymmetric in the control sign, and a
//! single start converges to whichever boundary its sign basin offers. And
//! each pass finishes with a radial projection, a 1-d bisection in the
//! scale of the control, which lands the endpoint exactly on the threshold
//! and removes the feasibility slack a finite penalty weight always leaves.

use crate::exec::run_indexed;
use crate::field::ComplexField;
use crate::nonlinear::NonlinearParams;
use crate::sde::{ObservableSet, Splitting};
use crate::skeleton::{solve, Control, SolveOptions};
use serde_json::json;

/// Ball around the origin in the energy-weighted norm; exiting it is the
/// event whose minimal action the optimizer estimates.
#[derive(Clone, Copy, Debug)]
pub struct ExitDomain {
    radius: f64,
}

impl ExitDomain {
    pub fn new(radius: f64) -> crate::Result<ExitDomain> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "exit domain radius must be positive and finite, got {radius}"
            )));
        }
        Ok(ExitDomain { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Which norm the exit threshold is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetNorm {
    X1,
    Weighted1,
}

impl TargetNorm {
    fn of(&self, f: &ComplexField) -> crate::Result<f64> {
        match self {
            TargetNorm::X1 => Ok(f.x1_norm()),
            TargetNorm::Weighted1 => f.weighted_norm(1.0),
        }
    }
}

/// Endpoint event: the chosen norm of the final state (or of its deviation
/// from a reference state) reaches `radius`.
#[derive(Clone, Debug)]
pub struct ExitTarget {
    pub norm: TargetNorm,
    pub radius: f64,
    /// When present, measure the distance to this state instead of the size
    /// of the state itself (tube-exit targets).
    pub reference: Option<ComplexField>,
}

impl ExitTarget {
    pub fn ball(norm: TargetNorm, radius: f64) -> ExitTarget {
        ExitTarget {
            norm,
            radius,
            reference: None,
        }
    }

    pub fn deviation(norm: TargetNorm, radius: f64, reference: ComplexField) -> ExitTarget {
        ExitTarget {
            norm,
            radius,
            reference: Some(reference),
        }
    }

    /// The measured quantity the threshold applies to.
    pub fn measure(&self, f: &ComplexField) -> crate::Result<f64> {
        match &self.reference {
            None => self.norm.of(f),
            Some(r) => {
                if r.grid() != f.grid() {
                    return Err(crate::Error::GridMismatch(
                        "target reference lives on a different grid".into(),
                    ));
                }
                let diff: Vec<_> = f
                    .values()
                    .iter()
                    .zip(r.values())
                    .map(|(a, b)| a - b)
                    .collect();
                self.norm.of(&ComplexField::new(f.grid().clone(), diff)?)
            }
        }
    }
}

/// Geometric penalty weights: initial, initial*factor, ...
#[derive(Clone, Copy, Debug)]
pub struct PenaltySchedule {
    pub initial: f64,
    pub factor: f64,
    pub stages: usize,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule {
            initial: 10.0,
            factor: 10.0,
            stages: 5,
        }
    }
}

/// Armijo-backtracking gradient descent knobs.
#[derive(Clone, Copy, Debug)]
pub struct DescentOptions {
    pub max_iterations: usize,
    /// Stop a stage once the gradient 2-norm falls below this.
    pub grad_tolerance: f64,
    pub initial_step: f64,
    pub backtrack_shrink: f64,
    pub armijo_slope: f64,
    /// Central-difference increment per control coefficient.
    pub fd_step: f64,
    /// Endpoint shortfall below which an iterate counts as feasible.
    pub feasibility_tolerance: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            max_iterations: 80,
            grad_tolerance: 1e-6,
            initial_step: 0.5,
            backtrack_shrink: 0.5,
            armijo_slope: 1e-4,
            fd_step: 1e-5,
            feasibility_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MamProblem {
    pub initial: ComplexField,
    pub nonlinear: NonlinearParams,
    pub horizon: f64,
    /// Piecewise-constant control intervals.
    pub intervals: usize,
    /// Solver steps per control interval.
    pub substeps: usize,
    pub splitting: Splitting,
    pub target: ExitTarget,
    pub penalty: PenaltySchedule,
    pub descent: DescentOptions,
    /// Starting control; defaults to the constant 1. The zero control is a
    /// near-stationary point of the objective for real symmetric data, so it
    /// makes a poor start, but it is still evaluated once so that targets
    /// reachable by the free flow come back with zero action.
    pub initial_control: Option<Control>,
}

impl MamProblem {
    pub fn new(
        initial: ComplexField,
        nonlinear: NonlinearParams,
        horizon: f64,
        intervals: usize,
        target: ExitTarget,
    ) -> MamProblem {
        MamProblem {
            initial,
            nonlinear,
            horizon,
            intervals,
            substeps: 4,
            splitting: Splitting::Strang,
            target,
            penalty: PenaltySchedule::default(),
            descent: DescentOptions::default(),
            initial_control: None,
        }
    }

    fn validate(&self) -> crate::Result<()> {
        self.nonlinear.validate()?;
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        if self.intervals == 0 {
            return Err(crate::Error::InvalidParameter(
                "control must have at least one interval".into(),
            ));
        }
        if self.substeps == 0 {
            return Err(crate::Error::InvalidParameter(
                "substeps per control interval must be >= 1".into(),
            ));
        }
        if !self.target.radius.is_finite() || self.target.radius <= 0.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "target radius must be positive and finite, got {}",
                self.target.radius
            )));
        }
        let p = &self.penalty;
        if !(p.initial > 0.0) || !(p.factor > 1.0) || p.stages == 0 {
            return Err(crate::Error::InvalidParameter(
                "penalty schedule needs initial > 0, factor > 1, stages >= 1".into(),
            ));
        }
        let d = &self.descent;
        for (name, v) in [
            ("grad_tolerance", d.grad_tolerance),
            ("initial_step", d.initial_step),
            ("fd_step", d.fd_step),
            ("feasibility_tolerance", d.feasibility_tolerance),
            ("armijo_slope", d.armijo_slope),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(crate::Error::InvalidParameter(format!(
                    "descent option {name} must be positive, got {v}"
                )));
            }
        }
        if !(d.backtrack_shrink > 0.0 && d.backtrack_shrink < 1.0) {
            return Err(crate::Error::InvalidParameter(format!(
                "backtrack_shrink must lie in (0, 1), got {}",
                d.backtrack_shrink
            )));
        }
        if d.max_iterations == 0 {
            return Err(crate::Error::InvalidParameter(
                "max_iterations must be >= 1".into(),
            ));
        }
        if let Some(c) = &self.initial_control {
            if c.interval_count() != self.intervals {
                return Err(crate::Error::InvalidParameter(format!(
                    "initial control has {} intervals, problem expects {}",
                    c.interval_count(),
                    self.intervals
                )));
            }
            let t = self.horizon;
            if (c.horizon() - t).abs() > 1e-12 * t.max(1.0) {
                return Err(crate::Error::InvalidParameter(format!(
                    "initial control horizon {} does not match problem horizon {t}",
                    c.horizon()
                )));
            }
        }
        if let Some(r) = &self.target.reference {
            if r.grid() != self.initial.grid() {
                return Err(crate::Error::GridMismatch(
                    "target reference lives on a different grid".into(),
                ));
            }
        }
        if self.initial.has_non_finite() {
            return Err(crate::Error::InvalidParameter(
                "initial state contains non-finite values".into(),
            ));
        }
        Ok(())
    }
}

/// One penalty stage of the optimizer.
#[derive(Clone, Debug)]
pub struct StageRecord {
    pub mu: f64,
    pub iterations: usize,
    /// Objective value at each accepted iterate, initial point included.
    pub objective_history: Vec<f64>,
    pub objective: f64,
    pub action: f64,
    pub violation: f64,
    /// True when a forward solve blew up inside the stage.
    pub failed: bool,
}

#[derive(Clone, Debug)]
pub struct MamResult {
    pub control: Control,
    pub action: f64,
    /// Endpoint shortfall max(0, radius - measure) of the returned control.
    pub violation: f64,
    pub endpoint_measure: f64,
    /// A feasible iterate was found; the returned one is the cheapest.
    pub converged: bool,
    /// The initial state already satisfies the target, no optimization run.
    pub exit_at_start: bool,
    /// Stage records from every descent pass, in execution order.
    pub stages: Vec<StageRecord>,
}

impl MamResult {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "action": self.action,
            "violation": self.violation,
            "endpoint_measure": self.endpoint_measure,
            "converged": self.converged,
            "exit_at_start": self.exit_at_start,
            "horizon": self.control.horizon(),
            "intervals": self.control.interval_count(),
            "stages": self.stages.iter().map(|s| json!({
                "mu": s.mu,
                "iterations": s.iterations,
                "objective": s.objective,
                "action": s.action,
                "violation": s.violation,
                "failed": s.failed,
            })).collect::<Vec<_>>(),
        })
    }
}

/// One objective evaluation: forward solve plus bookkeeping.
#[derive(Clone, Copy, Debug)]
struct Eval {
    objective: f64,
    action: f64,
    measure: f64,
    violation: f64,
}

struct Evaluator<'a> {
    problem: &'a MamProblem,
    opts: SolveOptions,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a MamProblem) -> Evaluator<'a> {
        Evaluator {
            problem,
            opts: SolveOptions {
                substeps: problem.substeps,
                splitting: problem.splitting,
                observables: ObservableSet::minimal(),
                snapshot_times: Vec::new(),
            },
        }
    }

    fn eval(&self, values: &[f64], mu: f64) -> crate::Result<Eval> {
        let control = Control::new(self.problem.horizon, values.to_vec())?;
        let traj = solve(
            &self.problem.initial,
            &control,
            &self.problem.nonlinear,
            &self.opts,
        )?;
        let measure = self.problem.target.measure(&traj.final_field)?;
        let action = control.action();
        let violation = (self.problem.target.radius - measure).max(0.0);
        Ok(Eval {
            objective: action + mu * violation * violation,
            action,
            measure,
            violation,
        })
    }

    fn gradient(&self, values: &[f64], mu: f64, workers: usize) -> crate::Result<Vec<f64>> {
        let fd = self.problem.descent.fd_step;
        run_indexed(values.len(), workers, |m| {
            let mut plus = values.to_vec();
            let mut minus = values.to_vec();
            plus[m] += fd;
            minus[m] -= fd;
            Ok((self.eval(&plus, mu)?.objective - self.eval(&minus, mu)?.objective) / (2.0 * fd))
        })
    }
}

/// Track the cheapest iterate whose endpoint shortfall is within tolerance.
struct BestFeasible {
    values: Vec<f64>,
    eval: Eval,
}

fn consider(best: &mut Option<BestFeasible>, values: &[f64], eval: Eval, feas_tol: f64) {
    if eval.violation > feas_tol {
        return;
    }
    let better = match best {
        None => true,
        Some(b) => eval.action < b.eval.action,
    };
    if better {
        *best = Some(BestFeasible {
            values: values.to_vec(),
            eval,
        });
    }
}

/// One penalty-continuation pass from a fixed starting control. Returns the
/// final iterate; best feasible points seen along the way go into `best`.
fn run_continuation(
    ev: &Evaluator,
    start: Vec<f64>,
    problem: &MamProblem,
    workers: usize,
    best: &mut Option<BestFeasible>,
    stages: &mut Vec<StageRecord>,
) -> crate::Result<Vec<f64>> {
    let d = problem.descent;
    let feas_tol = d.feasibility_tolerance;
    let mut values = start;
    let mut mu = problem.penalty.initial;

    for _ in 0..problem.penalty.stages {
        let mut current = ev.eval(&values, mu)?;
        consider(best, &values, current, feas_tol);
        let mut history = vec![current.objective];
        let mut iterations = 0;
        let mut failed = false;

        while iterations < d.max_iterations {
            let grad = match ev.gradient(&values, mu, workers) {
                Ok(g) => g,
                Err(e) if e.is_numerical() => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let gnorm_sq: f64 = grad.iter().map(|g| g * g).sum();
            if gnorm_sq.sqrt() <= d.grad_tolerance {
                break;
            }

            // Armijo backtracking along the negative gradient.
            let mut step = d.initial_step;
            let mut accepted = None;
            while step > 1e-14 * d.initial_step {
                let candidate: Vec<f64> = values
                    .iter()
                    .zip(&grad)
                    .map(|(v, g)| v - step * g)
                    .collect();
                if candidate.iter().any(|v| !v.is_finite()) {
                    step *= d.backtrack_shrink;
                    continue;
                }
                match ev.eval(&candidate, mu) {
                    Ok(e) if e.objective <= current.objective - d.armijo_slope * step * gnorm_sq => {
                        accepted = Some((candidate, e));
                        break;
                    }
                    Ok(_) => {}
                    Err(err) if err.is_numerical() => {} // blown-up candidate: shrink further
                    Err(err) => return Err(err),
                }
                step *= d.backtrack_shrink;
            }
            let Some((cand, e)) = accepted else {
                break; // no acceptable step length left at this stage
            };
            debug_assert!(e.objective <= current.objective);
            values = cand;
            current = e;
            consider(best, &values, current, feas_tol);
            history.push(current.objective);
            iterations += 1;
        }

        stages.push(StageRecord {
            mu,
            iterations,
            objective: current.objective,
            action: current.action,
            violation: current.violation,
            objective_history: history,
            failed,
        });
        mu *= problem.penalty.factor;
    }
    Ok(values)
}

/// Scale a control until the endpoint sits exactly on the threshold: expand
/// outward if infeasible, shrink toward zero if feasible with slack, then
/// bisect. Returns the feasible end of the final bracket, or `None` when no
/// scale up to 64x crosses the threshold.
fn project_to_boundary(
    ev: &Evaluator,
    values: &[f64],
) -> crate::Result<Option<(Vec<f64>, Eval)>> {
    let scaled = |t: f64| -> Vec<f64> { values.iter().map(|v| v * t).collect() };
    let probe = |t: f64| -> crate::Result<Option<Eval>> {
        match ev.eval(&scaled(t), 0.0) {
            Ok(e) => Ok(Some(e)),
            Err(e) if e.is_numerical() => Ok(None),
            Err(e) => Err(e),
        }
    };
    let Some(at_one) = probe(1.0)? else {
        return Ok(None);
    };
    let (mut lo, mut hi, mut hi_eval) = if at_one.violation == 0.0 {
        match probe(0.0)? {
            // the free flow already exits: nothing cheaper than zero
            Some(e) if e.violation == 0.0 => return Ok(Some((scaled(0.0), e))),
            _ => (0.0, 1.0, at_one),
        }
    } else {
        let mut t = 1.0;
        let mut found = None;
        for _ in 0..6 {
            t *= 2.0;
            match probe(t)? {
                Some(e) if e.violation == 0.0 => {
                    found = Some((t, e));
                    break;
                }
                Some(_) => {}
                None => break, // blew up; larger scales will too
            }
        }
        match found {
            Some((t, e)) => (0.5 * t, t, e),
            None => return Ok(None),
        }
    };
    for _ in 0..80 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match probe(mid)? {
            Some(e) if e.violation == 0.0 => {
                hi = mid;
                hi_eval = e;
            }
            _ => lo = mid,
        }
    }
    Ok(Some((scaled(hi), hi_eval)))
}

/// Minimize the control cost subject to the endpoint constraint, via penalty
/// continuation from the starting control and from its negation. Returns
/// the cheapest feasible iterate seen; if none was feasible, the last
/// iterate with `converged` unset.
pub fn mam_optimize(problem: &MamProblem, workers: usize) -> crate::Result<MamResult> {
    problem.validate()?;
    let feas_tol = problem.descent.feasibility_tolerance;

    // Feasible before anything moves: the exit event is free.
    if problem.target.reference.is_none() {
        let start = problem.target.measure(&problem.initial)?;
        if start >= problem.target.radius - feas_tol {
            return Ok(MamResult {
                control: Control::zero(problem.horizon, problem.intervals)?,
                action: 0.0,
                violation: 0.0,
                endpoint_measure: start,
                converged: true,
                exit_at_start: true,
                stages: Vec::new(),
            });
        }
    }

    let ev = Evaluator::new(problem);
    let mut best: Option<BestFeasible> = None;

    // The free flow might already cross the threshold at the horizon; seed
    // the feasible set with the zero control so that case costs nothing.
    let zero = vec![0.0; problem.intervals];
    if let Ok(e) = ev.eval(&zero, problem.penalty.initial) {
        consider(&mut best, &zero, e, feas_tol);
    }

    let start = match &problem.initial_control {
        Some(c) => c.values().to_vec(),
        None => vec![1.0; problem.intervals],
    };
    let negated: Vec<f64> = start.iter().map(|v| -v).collect();
    let starts = if negated == start {
        vec![start]
    } else {
        vec![start, negated]
    };

    let mut stages = Vec::new();
    let mut last_values = zero.clone();
    for s in starts {
        let final_values = run_continuation(&ev, s, problem, workers, &mut best, &mut stages)?;
        if let Some((v, e)) = project_to_boundary(&ev, &final_values)? {
            consider(&mut best, &v, e, feas_tol);
        }
        last_values = final_values;
    }

    // Shave the slack off the winner too: descent fixed its direction, the
    // projection rescales it onto the boundary.
    if let Some(values) = best.as_ref().filter(|b| b.eval.action > 0.0).map(|b| b.values.clone()) {
        if let Some((v, e)) = project_to_boundary(&ev, &values)? {
            consider(&mut best, &v, e, feas_tol);
        }
    }

    match best {
        Some(b) => Ok(MamResult {
            control: Control::new(problem.horizon, b.values)?,
            action: b.eval.action,
            violation: b.eval.violation,
            endpoint_measure: b.eval.measure,
            converged: true,
            exit_at_start: false,
            stages,
        }),
        None => {
            let last = ev.eval(&last_values, problem.penalty.initial)?;
            Ok(MamResult {
                control: Control::new(problem.horizon, last_values)?,
                action: last.action,
                violation: last.violation,
                endpoint_measure: last.measure,
                converged: false,
                exit_at_start: false,
                stages,
            })
        }
    }
}

/// Rebuild `problem` with `factor` times as many control intervals, warm
/// started from an optimized control. Solver substeps shrink by the same
/// factor so the time grid (and hence the warm start's trajectory and
/// action) is reproduced exactly; the richer control class can then only
/// improve the result.
pub fn refine_intervals(
    problem: &MamProblem,
    result: &MamResult,
    factor: usize,
) -> crate::Result<MamProblem> {
    if factor < 2 {
        return Err(crate::Error::InvalidParameter(
            "refinement factor must be >= 2".into(),
        ));
    }
    if problem.substeps % factor != 0 {
        return Err(crate::Error::InvalidParameter(format!(
            "substeps {} not divisible by refinement factor {factor}",
            problem.substeps
        )));
    }
    let mut refined = problem.clone();
    refined.intervals = problem.intervals * factor;
    refined.substeps = problem.substeps / factor;
    refined.initial_control = Some(result.control.refined(factor)?);
    Ok(refined)
}

#[derive(Clone, Debug)]
pub struct QuasipotentialEstimate {
    /// One optimizer run per horizon, in the order given.
    pub per_horizon: Vec<(f64, MamResult)>,
    /// Cheapest converged action, if any horizon converged.
    pub value: Option<f64>,
    pub best_horizon: Option<f64>,
    /// False when nothing converged or any stage blew up.
    pub reliable: bool,
}

/// Estimate the minimal exit action from `domain` by minimizing over the
/// given horizons. Each horizon is optimized independently from the
/// template's starting control, so enlarging the horizon list can only
/// lower the estimate.
pub fn quasipotential_estimate(
    domain: ExitDomain,
    template: &MamProblem,
    horizons: &[f64],
    workers: usize,
) -> crate::Result<QuasipotentialEstimate> {
    if horizons.is_empty() {
        return Err(crate::Error::InvalidParameter(
            "horizon list must not be empty".into(),
        ));
    }
    let mut per_horizon = Vec::with_capacity(horizons.len());
    let mut reliable = true;
    for &t in horizons {
        let mut p = template.clone();
        p.horizon = t;
        p.target = ExitTarget::ball(TargetNorm::X1, domain.radius());
        p.initial_control = None;
        let r = mam_optimize(&p, workers)?;
        if r.stages.iter().any(|s| s.failed) {
            reliable = false;
        }
        per_horizon.push((t, r));
    }
    let mut value = None;
    let mut best_horizon = None;
    for (t, r) in &per_horizon {
        if r.converged && value.map_or(true, |v| r.action < v) {
            value = Some(r.action);
            best_horizon = Some(*t);
        }
    }
    if value.is_none() {
        reliable = false;
    }
    Ok(QuasipotentialEstimate {
        per_horizon,
        value,
        best_horizon,
        reliable,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ActionBound {
    pub value: f64,
    /// The damping margin 2*damping - 4|coupling| is below 1e-6; the formula
    /// value is returned but barely constrains anything.
    pub near_degenerate: bool,
}

/// Certified lower bound on any exit action from a ball of radius
/// `domain.radius()`, valid when trajectories stay inside the ambient ball
/// of radius `ambient_radius` and the damping dominates the coupling
/// (damping > 2|coupling|). Any feasible optimizer output must sit above it.
pub fn exit_action_lower_bound(
    domain: ExitDomain,
    ambient_radius: f64,
    damping: f64,
    coupling: f64,
) -> crate::Result<ActionBound> {
    if !ambient_radius.is_finite() || ambient_radius <= 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "ambient radius must be positive and finite, got {ambient_radius}"
        )));
    }
    let margin = 2.0 * damping - 4.0 * coupling.abs();
    if margin <= 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "bound requires damping > 2|coupling|, got damping {damping}, coupling {coupling}"
        )));
    }
    let ratio = domain.radius() * domain.radius()
        / (32.0 * ambient_radius * ambient_radius * margin.sqrt());
    Ok(ActionBound {
        value: 0.5 * ratio * ratio,
        near_degenerate: margin < 1e-6,
    })
}
