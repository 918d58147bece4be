//! Shrinking-horizon stochastic NMPC for the semi-batch reactor. One optimal
//! control problem is shared by three controller flavors that differ only in how
//! scenario responses are turned into moments: chaos-trend GP estimates over a
//! deterministic design, an unscented transform over sigma points, or a single
//! nominal scenario with soft constraints.
//!
//! Transcription is single shooting: the decision vector stacks the remaining
//! control moves and the total batch time, everything scaled to the unit box so
//! the solver tolerances are meaningful across units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gppce::{estimate, sigma_points, unscented_moments, GppcePrecompute};
use crate::nlp::{solve_box_al, SolveReport, SolveStatus, SolverOpts};
use crate::reactor::{
    catalyst_split, constraint_namw, constraint_path, constraint_ppm, integrate_interval,
    kinetics, objective_increment, theta_to_params, ControlInput, PlantConstants, ReactorState,
    UncertainParams, COOL_BOUNDS, FEED_BOUNDS,
};
use crate::sampling::SampleDesign;

/// Default decision bounds on the batch time, s.
pub const T_BATCH_BOUNDS: (f64, f64) = (1000.0, 40000.0);

/// Scales dividing each constraint family inside the solver, chosen at the
/// natural magnitude of the raw values so a unit of violation means roughly the
/// same everywhere.
const PATH_SCALE: f64 = 100.0;
const NAMW_SCALE: f64 = 1500.0;
const PPM_SCALE: f64 = 1000.0;

/// Objective values are divided by the batch-time upper bound.
const OBJ_SCALE: f64 = T_BATCH_BOUNDS.1;

/// Plateau value returned for decision vectors whose rollout cannot be
/// evaluated at all. It must dominate every legitimate merit value, soft
/// penalties included, or the plateau turns into an attractor.
const WALL: f64 = 1e12;

/// Chebyshev tightening factor: a constraint holding at mean + kappa standard
/// deviations is violated with probability at most epsilon, for any distribution.
pub fn chebyshev_kappa(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Invalid(format!(
            "violation probability must lie in (0, 1), got {epsilon}"
        )));
    }
    Ok(((1.0 - epsilon) / epsilon).sqrt())
}

/// mean + kappa * sqrt(var), the robustified constraint value.
pub fn tightened(mean: f64, var: f64, kappa: f64) -> f64 {
    mean + kappa * var.max(0.0).sqrt()
}

/// The four response families the controller estimates moments for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Path,
    Namw,
    Ppm,
    Objective,
}

/// Per-family estimator bundles sharing one sample design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEstimators {
    pub path: GppcePrecompute,
    pub namw: GppcePrecompute,
    pub ppm: GppcePrecompute,
    pub objective: GppcePrecompute,
}

impl FamilyEstimators {
    fn get(&self, family: Family) -> &GppcePrecompute {
        match family {
            Family::Path => &self.path,
            Family::Namw => &self.namw,
            Family::Ppm => &self.ppm,
            Family::Objective => &self.objective,
        }
    }

    /// All four bundles must be built on the same design.
    pub fn validate(&self) -> Result<()> {
        let design = &self.path.config().design;
        for pre in [&self.namw, &self.ppm, &self.objective] {
            pre.validate()?;
            if &pre.config().design != design {
                return Err(Error::Invalid(
                    "estimator families must share one sample design".into(),
                ));
            }
        }
        self.path.validate()
    }
}

/// How scenario responses become (mean, variance) pairs inside the OCP.
#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyModel {
    /// GP/chaos estimates over the rows of the shared sample design.
    Gppce { design: SampleDesign, families: Box<FamilyEstimators> },
    /// Unscented transform over 2n+1 sigma points.
    Unscented { kappa_ut: f64 },
    /// Single theta = 0 scenario; variance identically zero.
    Nominal,
}

impl UncertaintyModel {
    /// Scenario inputs rolled out by every OCP evaluation.
    pub fn thetas(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            UncertaintyModel::Gppce { design, .. } => {
                Ok(design.rows().map(|r| r.to_vec()).collect())
            }
            UncertaintyModel::Unscented { kappa_ut } => Ok(sigma_points(3, *kappa_ut)?.0),
            UncertaintyModel::Nominal => Ok(vec![vec![0.0; 3]]),
        }
    }

    /// Moment estimate for one family's scenario responses.
    pub fn moments(&self, family: Family, z: &[f64]) -> Result<(f64, f64)> {
        match self {
            UncertaintyModel::Gppce { families, .. } => {
                let est = estimate(families.get(family), z)?;
                Ok((est.mean, est.var_gp))
            }
            UncertaintyModel::Unscented { kappa_ut } => {
                let (_, weights) = sigma_points(3, *kappa_ut)?;
                unscented_moments(z, &weights)
            }
            UncertaintyModel::Nominal => {
                if z.len() != 1 {
                    return Err(Error::Dim(format!(
                        "nominal model expects one scenario, got {}",
                        z.len()
                    )));
                }
                Ok((z[0], 0.0))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            UncertaintyModel::Gppce { design, families } => {
                if design.n_dim() != 3 {
                    return Err(Error::Dim(format!(
                        "reactor uncertainty is 3-dimensional, design has {}",
                        design.n_dim()
                    )));
                }
                if &families.path.config().design != design {
                    return Err(Error::Invalid(
                        "model design differs from the estimator design".into(),
                    ));
                }
                families.validate()
            }
            UncertaintyModel::Unscented { kappa_ut } => sigma_points(3, *kappa_ut).map(|_| ()),
            UncertaintyModel::Nominal => Ok(()),
        }
    }
}

/// Hard chance constraints, or soft quadratic penalties on raw violations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ConstraintMode {
    Hard,
    Soft { weight: f64 },
}

/// One shrinking-horizon OCP instance: everything that varies between solves.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSpec {
    /// Total horizon N in intervals.
    pub horizon: usize,
    /// First open interval index t; the remaining horizon is N - t intervals.
    pub start: usize,
    pub state: ReactorState,
    /// Seconds already realized in intervals 0..t.
    pub elapsed: f64,
    /// Last applied input; anchors the first control-move penalty when t > 0.
    pub u_prev: ControlInput,
    pub epsilon: f64,
    pub omega: f64,
    pub t_batch_bounds: (f64, f64),
    pub substeps: usize,
    pub solver: SolverOpts,
    pub mode: ConstraintMode,
}

impl OcpSpec {
    fn validate(&self) -> Result<()> {
        if self.start > self.horizon {
            return Err(Error::Invalid(format!(
                "start index {} beyond horizon {}",
                self.start, self.horizon
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(Error::Invalid(format!(
                "epsilon must lie in (0, 0.5], got {}",
                self.epsilon
            )));
        }
        if !(self.t_batch_bounds.0 > 0.0 && self.t_batch_bounds.1 > self.t_batch_bounds.0) {
            return Err(Error::Invalid("batch-time bounds must be ordered and positive".into()));
        }
        if !(self.omega >= 0.0) || !self.elapsed.is_finite() || self.elapsed < 0.0 {
            return Err(Error::Invalid("omega and elapsed must be nonnegative".into()));
        }
        Ok(())
    }

    /// Shortest admissible interval, from the batch-time lower bound.
    fn dt_min(&self) -> f64 {
        self.t_batch_bounds.0 / self.horizon as f64
    }

    /// Effective batch-time lower bound once `elapsed` seconds are spent.
    fn t_batch_floor(&self, n_rem: usize) -> f64 {
        let floor = self.elapsed + n_rem as f64 * self.dt_min();
        floor.max(self.t_batch_bounds.0).min(self.t_batch_bounds.1)
    }
}

/// Solver output mapped back to physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub controls: Vec<ControlInput>,
    pub t_batch: f64,
    /// Unscaled objective estimate (batch time, move penalties, variance weight,
    /// soft penalties if active).
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Largest scaled constraint violation at the solution.
    pub max_violation: f64,
    /// Scaled tightened constraint values, path constraints first, then the two
    /// terminal constraints. Empty in soft mode.
    pub slacks: Vec<f64>,
}

/// Shared-input scenario rollouts: every theta row is integrated under the same
/// control sequence, one state per interval endpoint.
pub fn rollout_scenarios(
    c: &PlantConstants,
    x0: &ReactorState,
    thetas: &[Vec<f64>],
    controls: &[ControlInput],
    dt: f64,
    substeps: usize,
) -> Result<Vec<Vec<ReactorState>>> {
    let params: Vec<UncertainParams> = thetas
        .iter()
        .map(|t| theta_to_params(t))
        .collect::<Result<_>>()?;
    rollout_params(c, x0, &params, controls, dt, substeps)
}

/// Bounds on the per-step size of prediction rollouts, in seconds.
const H_CAP_MIN: f64 = 0.25;
const H_CAP_MAX: f64 = 25.0;

/// Step-size cap for one prediction interval. Monomer consumption is the stiff
/// direction: its loss rate at the hottest temperature the interval can reach,
/// the start temperature plus the adiabatic rise of everything burnable (the
/// stored charge and the monomer fed over the interval), bounds the largest
/// classical RK4 step that stays stable. Quiescent intervals run at the coarse
/// cap; an igniting charge drives the cap below a second.
pub(crate) fn interval_h_cap(
    c: &PlantConstants,
    p: &UncertainParams,
    x: &ReactorState,
    u: &ControlInput,
    dt: f64,
) -> f64 {
    let c_pb = kinetics(c, p.a_p, x.temp).c_pb;
    let burnable = x.monomer.max(0.0) + u.feed.max(0.0) * dt;
    let t_hot = x.temp - c.dh_p * burnable / (x.mass * c_pb);
    let k = kinetics(c, p.a_p, t_hot);
    let (g0, gg0) = catalyst_split(p.n_c, x.x0.max(0.0), x.gx0.max(0.0));
    let vol = x.mass / c.rho_bulk;
    let loss = (k.k_h * x.water.max(0.0) + k.k_i * g0 + k.k_p * gg0 + k.k_t * (g0 + gg0)) / vol;
    (2.0 / loss.max(1e-12)).clamp(H_CAP_MIN, H_CAP_MAX)
}

/// Substep count giving steps no longer than `h_cap` over an interval of `dt`.
pub(crate) fn substeps_for(dt: f64, base: usize, h_cap: f64) -> usize {
    base.max((dt / h_cap).ceil() as usize)
}

/// One prediction interval at the cap chosen from its start state, retried at
/// the finest cap when the first attempt leaves the RK4 stability region. The
/// static rule can misjudge an interval where cooling loses to a strong feed
/// mid-way; the retry keeps the response defined there, and the resulting hot
/// trajectory carries its own constraint violations.
pub(crate) fn integrate_capped(
    c: &PlantConstants,
    x: &ReactorState,
    u: &ControlInput,
    dt: f64,
    p: &UncertainParams,
    substeps: usize,
) -> Result<ReactorState> {
    let cap = interval_h_cap(c, p, x, u, dt);
    let first = integrate_interval(c, x, u, dt, p, substeps_for(dt, substeps, cap));
    match first {
        Ok(next) => Ok(next),
        Err(_) if cap > H_CAP_MIN => {
            integrate_interval(c, x, u, dt, p, substeps_for(dt, substeps, H_CAP_MIN))
        }
        Err(e) => Err(e),
    }
}

fn rollout_params(
    c: &PlantConstants,
    x0: &ReactorState,
    params: &[UncertainParams],
    controls: &[ControlInput],
    dt: f64,
    substeps: usize,
) -> Result<Vec<Vec<ReactorState>>> {
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let mut traj = Vec::with_capacity(controls.len());
        let mut x = *x0;
        for u in controls {
            x = integrate_capped(c, &x, u, dt, p, substeps)?;
            traj.push(x);
        }
        out.push(traj);
    }
    Ok(out)
}

/// Robustified constraint from scenario responses through one estimator bundle.
pub fn tightened_constraint(z: &[f64], pre: &GppcePrecompute, kappa: f64) -> Result<f64> {
    let est = estimate(pre, z)?;
    Ok(tightened(est.mean, est.var_gp, kappa))
}

/// Probabilistic objective: mean plus omega times the variance of the scenario
/// objective values.
pub fn build_objective(z: &[f64], pre: &GppcePrecompute, omega: f64) -> Result<f64> {
    let est = estimate(pre, z)?;
    Ok(est.mean + omega * est.var_gp)
}

struct Assessment {
    objective_scaled: f64,
    objective_raw: f64,
    cons_scaled: Vec<f64>,
}

/// Evaluates one candidate decision (controls and batch time) for the spec.
fn assess(
    c: &PlantConstants,
    model: &UncertaintyModel,
    spec: &OcpSpec,
    params: &[UncertainParams],
    kappa: f64,
    controls: &[ControlInput],
    t_batch: f64,
) -> Result<Assessment> {
    let n_rem = controls.len();
    let dt = (t_batch - spec.elapsed) / n_rem as f64;
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("nonpositive interval length {dt}")));
    }
    let trajs = rollout_params(c, &spec.state, params, controls, dt, spec.substeps)?;
    let n_scen = trajs.len();

    // Objective: identical across scenarios by construction (shared inputs and
    // batch time), but routed through the estimator to keep one code path.
    let mut move_cost = 0.0;
    let mut prev = if spec.start == 0 { controls[0] } else { spec.u_prev };
    for u in controls {
        move_cost += objective_increment(u, &prev);
        prev = *u;
    }
    let z_obj = vec![t_batch + move_cost; n_scen];
    let (obj_mean, obj_var) = model.moments(Family::Objective, &z_obj)?;
    let mut objective_raw = obj_mean + spec.omega * obj_var;

    // Path constraint at every interval endpoint, then the two terminal ones.
    let mut cons_scaled = Vec::new();
    let mut soft_penalty = 0.0;
    let mut z = vec![0.0; n_scen];
    for k in 0..n_rem {
        for (s, traj) in trajs.iter().enumerate() {
            z[s] = constraint_path(&traj[k]);
        }
        let (mean, var) = model.moments(Family::Path, &z)?;
        let value = tightened(mean, var, kappa);
        match spec.mode {
            ConstraintMode::Hard => cons_scaled.push(value / PATH_SCALE),
            ConstraintMode::Soft { weight } => {
                soft_penalty += weight * (value / PATH_SCALE).max(0.0).powi(2);
            }
        }
    }
    for (family, scale) in [(Family::Namw, NAMW_SCALE), (Family::Ppm, PPM_SCALE)] {
        for (s, traj) in trajs.iter().enumerate() {
            let last = traj.last().expect("nonempty horizon");
            z[s] = match family {
                Family::Namw => constraint_namw(c, last)?,
                Family::Ppm => constraint_ppm(c, last),
                _ => unreachable!(),
            };
        }
        let (mean, var) = model.moments(family, &z)?;
        let value = tightened(mean, var, kappa);
        match spec.mode {
            ConstraintMode::Hard => cons_scaled.push(value / scale),
            ConstraintMode::Soft { weight } => {
                soft_penalty += weight * (value / scale).max(0.0).powi(2);
            }
        }
    }
    // The soft penalty lives in the scaled-objective units, so the weight
    // trades normalized violation directly against normalized batch time.
    objective_raw += soft_penalty * OBJ_SCALE;

    Ok(Assessment {
        objective_scaled: objective_raw / OBJ_SCALE,
        objective_raw,
        cons_scaled,
    })
}

fn unscale(x: &[f64], n_rem: usize, t_floor: f64, t_max: f64) -> (Vec<ControlInput>, f64) {
    let mut controls = Vec::with_capacity(n_rem);
    for i in 0..n_rem {
        controls.push(ControlInput {
            feed: FEED_BOUNDS.0 + x[2 * i] * (FEED_BOUNDS.1 - FEED_BOUNDS.0),
            t_cool: COOL_BOUNDS.0 + x[2 * i + 1] * (COOL_BOUNDS.1 - COOL_BOUNDS.0),
        });
    }
    let t_batch = t_floor + x[2 * n_rem] * (t_max - t_floor);
    (controls, t_batch)
}

fn scale_into(controls: &[ControlInput], t_batch: f64, t_floor: f64, t_max: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 * controls.len() + 1);
    for u in controls {
        x.push(((u.feed - FEED_BOUNDS.0) / (FEED_BOUNDS.1 - FEED_BOUNDS.0)).clamp(0.0, 1.0));
        x.push(((u.t_cool - COOL_BOUNDS.0) / (COOL_BOUNDS.1 - COOL_BOUNDS.0)).clamp(0.0, 1.0));
    }
    let span = (t_max - t_floor).max(1e-9);
    x.push(((t_batch - t_floor) / span).clamp(0.0, 1.0));
    x
}

/// Fallback first guess when no warm start is available: gentle feed, strong
/// cooling, mid-range batch time.
const INIT_FEED: f64 = 0.03;
const INIT_COOL: f64 = 310.0;
const INIT_T_BATCH: f64 = 8000.0;

/// Solves the shrinking-horizon OCP by projected quasi-Newton augmented
/// Lagrangian over the scaled decision box.
pub fn solve_ocp(
    c: &PlantConstants,
    model: &UncertaintyModel,
    spec: &OcpSpec,
    warm: Option<&OcpSolution>,
) -> Result<OcpSolution> {
    spec.validate()?;
    model.validate()?;
    let n_rem = spec.horizon - spec.start;
    if n_rem == 0 {
        let t_batch = warm.map_or(spec.elapsed.max(spec.t_batch_bounds.0), |w| w.t_batch);
        return Ok(OcpSolution {
            controls: Vec::new(),
            t_batch,
            objective: t_batch,
            status: SolveStatus::Converged,
            iterations: 0,
            max_violation: 0.0,
            slacks: Vec::new(),
        });
    }

    let thetas = model.thetas()?;
    let params: Vec<UncertainParams> = thetas
        .iter()
        .map(|t| theta_to_params(t))
        .collect::<Result<_>>()?;
    let kappa = chebyshev_kappa(spec.epsilon)?;
    let t_floor = spec.t_batch_floor(n_rem);
    let t_max = spec.t_batch_bounds.1;
    let n_cons = match spec.mode {
        ConstraintMode::Hard => n_rem + 2,
        ConstraintMode::Soft { .. } => 0,
    };

    let x0 = match warm {
        Some(w) if w.controls.len() == n_rem => {
            scale_into(&w.controls, w.t_batch, t_floor, t_max)
        }
        _ => {
            let guess = vec![
                ControlInput { feed: INIT_FEED, t_cool: INIT_COOL };
                n_rem
            ];
            scale_into(&guess, INIT_T_BATCH, t_floor, t_max)
        }
    };

    let dim = 2 * n_rem + 1;
    let lo = vec![0.0; dim];
    let hi = vec![1.0; dim];
    let mut eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let (controls, t_batch) = unscale(x, n_rem, t_floor, t_max);
        match assess(c, model, spec, &params, kappa, &controls, t_batch) {
            Ok(a) => (a.objective_scaled, a.cons_scaled),
            Err(_) => (WALL, vec![WALL; n_cons]),
        }
    };
    let report: SolveReport = solve_box_al(&mut eval, n_cons, &x0, &lo, &hi, &spec.solver)?;

    let (controls, t_batch) = unscale(&report.x, n_rem, t_floor, t_max);
    let (objective, slacks) = match assess(c, model, spec, &params, kappa, &controls, t_batch) {
        Ok(a) => (a.objective_raw, a.cons_scaled),
        Err(_) => (f64::INFINITY, vec![WALL; n_cons]),
    };
    Ok(OcpSolution {
        controls,
        t_batch,
        objective,
        status: report.status,
        iterations: report.iterations,
        max_violation: report.max_violation,
        slacks,
    })
}

/// Controller configuration reused across the whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub constants: PlantConstants,
    pub model: UncertaintyModel,
    pub horizon: usize,
    pub epsilon: f64,
    pub omega: f64,
    pub t_batch_bounds: (f64, f64),
    pub substeps: usize,
    pub solver: SolverOpts,
    pub mode: ConstraintMode,
}

/// Outcome of one controller step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub applied: ControlInput,
    /// Realized length of the applied interval, s.
    pub dt: f64,
    pub solution: OcpSolution,
    /// True when the solver failed and the previous plan was shifted instead.
    pub fallback: bool,
}

impl Controller {
    pub fn new(
        constants: PlantConstants,
        model: UncertaintyModel,
        horizon: usize,
        epsilon: f64,
        omega: f64,
        mode: ConstraintMode,
        solver: SolverOpts,
        substeps: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Invalid("horizon must be at least one interval".into()));
        }
        model.validate()?;
        Ok(Controller {
            constants,
            model,
            horizon,
            epsilon,
            omega,
            t_batch_bounds: T_BATCH_BOUNDS,
            substeps,
            solver,
            mode,
        })
    }

    pub fn spec_at(
        &self,
        state: ReactorState,
        t: usize,
        elapsed: f64,
        u_prev: ControlInput,
    ) -> OcpSpec {
        OcpSpec {
            horizon: self.horizon,
            start: t,
            state,
            elapsed,
            u_prev,
            epsilon: self.epsilon,
            omega: self.omega,
            t_batch_bounds: self.t_batch_bounds,
            substeps: self.substeps,
            solver: self.solver.clone(),
            mode: self.mode,
        }
    }

    /// Shifts the previous solution one interval forward as a warm start.
    fn shifted(prev: &OcpSolution) -> OcpSolution {
        let mut next = prev.clone();
        if !next.controls.is_empty() {
            next.controls.remove(0);
        }
        next
    }

    /// Solves at time t and returns the input to apply. A solver error falls
    /// back to the shifted previous plan when one exists.
    pub fn step(
        &self,
        state: ReactorState,
        t: usize,
        elapsed: f64,
        u_prev: ControlInput,
        prev: Option<&OcpSolution>,
    ) -> Result<StepResult> {
        if t >= self.horizon {
            return Err(Error::Invalid(format!(
                "step index {t} outside horizon {}",
                self.horizon
            )));
        }
        let n_rem = self.horizon - t;
        let spec = self.spec_at(state, t, elapsed, u_prev);
        let warm = prev.map(Controller::shifted);
        match solve_ocp(&self.constants, &self.model, &spec, warm.as_ref()) {
            Ok(solution) => {
                let dt = (solution.t_batch - elapsed) / n_rem as f64;
                Ok(StepResult {
                    applied: solution.controls[0].clamped(),
                    dt,
                    solution,
                    fallback: false,
                })
            }
            Err(e) => {
                let Some(solution) = warm else { return Err(e) };
                if solution.controls.is_empty() {
                    return Err(e);
                }
                let dt = ((solution.t_batch - elapsed) / n_rem as f64).max(spec.dt_min());
                Ok(StepResult {
                    applied: solution.controls[0].clamped(),
                    dt,
                    solution,
                    fallback: true,
                })
            }
        }
    }
}
