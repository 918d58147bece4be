//! Monte Carlo experiment drivers: brute-force moment truth for the reactor
//! constraint functions, the estimator-accuracy study over random control
//! settings, closed-loop controller comparisons with per-run RNG streams, and
//! kernel density estimation for the report curves.
//!
//! Everything here is reproducible from a master seed. Run records are keyed by
//! run id and merged in id order, so results are independent of worker count;
//! wall-clock fields are the single documented exception and stay out of the
//! deterministic CSV outputs.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gppce::{
    estimate, pce_estimate, precompute, sigma_points, unscented_moments, GppceConfig,
    GppcePrecompute,
};
use crate::gp::median_heuristic;
use crate::reactor::{
    constraint_namw, constraint_path, constraint_ppm, objective_increment, theta_to_params,
    ControlInput, PlantConstants, ReactorState, COOL_BOUNDS, FEED_BOUNDS,
};
use crate::sampling::{make_design, probit, Scheme};
use crate::snmpc::{integrate_capped, Controller, FamilyEstimators, OcpSolution, rollout_scenarios};

/// Constraint functions evaluated at the end of the batch in the accuracy study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyFunction {
    /// Temperature ceiling margin at the final interval.
    PathEnd,
    /// Molecular-weight shortfall.
    Namw,
    /// Residual monomer excess.
    Ppm,
}

impl StudyFunction {
    pub const ALL: [StudyFunction; 3] =
        [StudyFunction::PathEnd, StudyFunction::Namw, StudyFunction::Ppm];

    pub fn as_str(self) -> &'static str {
        match self {
            StudyFunction::PathEnd => "g_path_end",
            StudyFunction::Namw => "g_namw",
            StudyFunction::Ppm => "g_ppm",
        }
    }
}

fn sample_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    // Welford's recurrence; a constant sample yields exactly zero variance,
    // which the KDE relies on to flag degenerate inputs.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    if n < 2 {
        return (mean, 0.0);
    }
    (mean, m2 / (n - 1) as f64)
}

/// Evaluates the three terminal functions for one uncertainty draw under the
/// shared control sequence. Used by both the truth estimator and the study.
/// `substeps` is the floor; the stiffness cap raises the count where needed.
fn terminal_values(
    c: &PlantConstants,
    theta: &[f64],
    controls: &[ControlInput],
    dt: f64,
    substeps: usize,
) -> Result<[f64; 3]> {
    let p = theta_to_params(theta)?;
    let mut x = c.init;
    for u in controls {
        x = integrate_capped(c, &x, u, dt, &p, substeps)?;
    }
    Ok([constraint_path(&x), constraint_namw(c, &x)?, constraint_ppm(c, &x)])
}

/// Plain Monte Carlo truth for all three terminal functions at once; the
/// trajectories are shared across the functions.
pub fn mc_truth_all(
    c: &PlantConstants,
    controls: &[ControlInput],
    t_batch: f64,
    n_mc: usize,
    seed: u64,
    substeps: usize,
) -> Result<[(f64, f64); 3]> {
    if controls.is_empty() {
        return Err(Error::Invalid("need at least one control interval".into()));
    }
    if n_mc < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {n_mc}")));
    }
    let dt = t_batch / controls.len() as f64;
    let thetas = make_design(n_mc, 3, Scheme::Mc, seed)?;
    let mut cols: [Vec<f64>; 3] = [
        Vec::with_capacity(n_mc),
        Vec::with_capacity(n_mc),
        Vec::with_capacity(n_mc),
    ];
    for theta in thetas.rows() {
        let vals = terminal_values(c, theta, controls, dt, substeps)?;
        for (col, v) in cols.iter_mut().zip(vals) {
            col.push(v);
        }
    }
    Ok([
        sample_moments(&cols[0]),
        sample_moments(&cols[1]),
        sample_moments(&cols[2]),
    ])
}

/// Single-function view of `mc_truth_all`.
pub fn mc_truth(
    c: &PlantConstants,
    controls: &[ControlInput],
    t_batch: f64,
    function: StudyFunction,
    n_mc: usize,
    seed: u64,
    substeps: usize,
) -> Result<(f64, f64)> {
    let all = mc_truth_all(c, controls, t_batch, n_mc, seed, substeps)?;
    Ok(match function {
        StudyFunction::PathEnd => all[0],
        StudyFunction::Namw => all[1],
        StudyFunction::Ppm => all[2],
    })
}

/// One estimator-by-function cell of the accuracy study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub u_id: usize,
    pub function: String,
    pub estimator: String,
    pub mean_est: f64,
    pub var_est: f64,
    pub mean_true: f64,
    pub var_true: f64,
    pub rel_err_mean: f64,
    pub rel_err_var: f64,
    pub ok: bool,
}

/// Study configuration. Designs are Sobol with the given sizes; the paper-shaped
/// anisotropic lengthscales come from the supplied 15-point family bundles and
/// are reused for the larger designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyOptions {
    pub n_u: usize,
    pub n_mc: usize,
    pub master_seed: u64,
    /// Fixed batch time for the open-loop study, s.
    pub t_batch: f64,
    pub horizon: usize,
    pub substeps: usize,
    pub design_sizes: Vec<usize>,
    pub order: usize,
}

impl Default for AccuracyOptions {
    fn default() -> Self {
        AccuracyOptions {
            n_u: 20,
            n_mc: 100_000,
            master_seed: 0,
            t_batch: 7000.0,
            horizon: 12,
            substeps: 20,
            design_sizes: vec![15, 25, 40],
            order: 2,
        }
    }
}

struct StudyEstimator {
    name: String,
    kind: EstimatorKind,
}

enum EstimatorKind {
    /// One precompute per study function, matching the family lengthscales.
    Gppce([GppcePrecompute; 3]),
    /// Chaos regression on a design, same responses as the GPPCE estimators.
    Pce { design_size: usize, order: usize },
    Unscented,
}

/// Random control sequence within bounds from a dedicated RNG stream.
fn random_controls(rng: &mut ChaCha12Rng, horizon: usize) -> Vec<ControlInput> {
    (0..horizon)
        .map(|_| ControlInput {
            feed: FEED_BOUNDS.0 + rng.random::<f64>() * (FEED_BOUNDS.1 - FEED_BOUNDS.0),
            t_cool: COOL_BOUNDS.0 + rng.random::<f64>() * (COOL_BOUNDS.1 - COOL_BOUNDS.0),
        })
        .collect()
}

fn study_lambda(families: &FamilyEstimators, function: StudyFunction) -> Vec<f64> {
    match function {
        StudyFunction::PathEnd => families.path.config().lambda.clone(),
        StudyFunction::Namw => families.namw.config().lambda.clone(),
        StudyFunction::Ppm => families.ppm.config().lambda.clone(),
    }
}

/// Builds the estimator grid: anisotropic and isotropic GPPCE at each design
/// size, a constant-trend GP at the smallest size, chaos regression, and the
/// unscented transform.
fn build_grid(families: &FamilyEstimators, opts: &AccuracyOptions) -> Result<Vec<StudyEstimator>> {
    let mut grid = Vec::new();
    let base_size = *opts.design_sizes.first().ok_or_else(|| {
        Error::Invalid("accuracy study needs at least one design size".into())
    })?;
    for &n_s in &opts.design_sizes {
        let design = make_design(n_s, 3, Scheme::Sobol, 0)?;
        let mk3 = |order: usize, lambdas: [Vec<f64>; 3]| -> Result<[GppcePrecompute; 3]> {
            let [la, lb, lc] = lambdas;
            Ok([
                precompute(&GppceConfig { design: design.clone(), order, lambda: la })?,
                precompute(&GppceConfig { design: design.clone(), order, lambda: lb })?,
                precompute(&GppceConfig { design: design.clone(), order, lambda: lc })?,
            ])
        };
        let aniso = [
            study_lambda(families, StudyFunction::PathEnd),
            study_lambda(families, StudyFunction::Namw),
            study_lambda(families, StudyFunction::Ppm),
        ];
        grid.push(StudyEstimator {
            name: format!("gppce-{n_s}-aniso"),
            kind: EstimatorKind::Gppce(mk3(opts.order, aniso)?),
        });
        let iso = median_heuristic(&design)?;
        let iso3 = [iso.clone(), iso.clone(), iso];
        grid.push(StudyEstimator {
            name: format!("gppce-{n_s}-iso"),
            kind: EstimatorKind::Gppce(mk3(opts.order, iso3)?),
        });
        if n_s == base_size {
            let aniso = [
                study_lambda(families, StudyFunction::PathEnd),
                study_lambda(families, StudyFunction::Namw),
                study_lambda(families, StudyFunction::Ppm),
            ];
            grid.push(StudyEstimator {
                name: format!("gp-{n_s}"),
                kind: EstimatorKind::Gppce(mk3(0, aniso)?),
            });
            grid.push(StudyEstimator {
                name: format!("pce-{n_s}"),
                kind: EstimatorKind::Pce { design_size: n_s, order: opts.order },
            });
        }
    }
    grid.push(StudyEstimator { name: "ut-7".into(), kind: EstimatorKind::Unscented });
    Ok(grid)
}

/// Runs the accuracy study: for each random control setting, every estimator in
/// the grid against the Monte Carlo truth. Per-cell failures are recorded with
/// `ok = false` rather than aborting the study.
pub fn accuracy_study(
    c: &PlantConstants,
    families: &FamilyEstimators,
    opts: &AccuracyOptions,
) -> Result<Vec<AccuracyRecord>> {
    let grid = build_grid(families, opts)?;
    let ut_kappa = 0.0;
    let mut records = Vec::new();
    for u_id in 0..opts.n_u {
        let mut rng = ChaCha12Rng::seed_from_u64(opts.master_seed);
        rng.set_stream(1 + u_id as u64);
        let controls = random_controls(&mut rng, opts.horizon);
        let dt = opts.t_batch / opts.horizon as f64;

        let truth = mc_truth_all(
            c,
            &controls,
            opts.t_batch,
            opts.n_mc,
            opts.master_seed ^ 0x5eed_0000 ^ u_id as u64,
            opts.substeps,
        )?;

        for est in &grid {
            let results: [Result<(f64, f64)>; 3] = match &est.kind {
                EstimatorKind::Gppce(pres) => {
                    let design = &pres[0].config().design;
                    let z = design_responses(c, design, &controls, dt, opts.substeps);
                    match z {
                        Ok(cols) => [
                            estimate(&pres[0], &cols[0]).map(|e| (e.mean, e.var_gp)),
                            estimate(&pres[1], &cols[1]).map(|e| (e.mean, e.var_gp)),
                            estimate(&pres[2], &cols[2]).map(|e| (e.mean, e.var_gp)),
                        ],
                        Err(e) => [
                            Err(Error::Invalid(e.to_string())),
                            Err(Error::Invalid(e.to_string())),
                            Err(Error::Invalid(e.to_string())),
                        ],
                    }
                }
                EstimatorKind::Pce { design_size, order } => {
                    let design = make_design(*design_size, 3, Scheme::Sobol, 0)?;
                    match design_responses(c, &design, &controls, dt, opts.substeps) {
                        Ok(cols) => [
                            pce_estimate(&design, *order, &cols[0], 0.0),
                            pce_estimate(&design, *order, &cols[1], 0.0),
                            pce_estimate(&design, *order, &cols[2], 0.0),
                        ],
                        Err(e) => [
                            Err(Error::Invalid(e.to_string())),
                            Err(Error::Invalid(e.to_string())),
                            Err(Error::Invalid(e.to_string())),
                        ],
                    }
                }
                EstimatorKind::Unscented => {
                    let (points, weights) = sigma_points(3, ut_kappa)?;
                    let mut cols: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
                    let mut failure = None;
                    for p in &points {
                        match terminal_values(c, p, &controls, dt, opts.substeps) {
                            Ok(vals) => {
                                for (col, v) in cols.iter_mut().zip(vals) {
                                    col.push(v);
                                }
                            }
                            Err(e) => {
                                failure = Some(e);
                                break;
                            }
                        }
                    }
                    match failure {
                        None => [
                            unscented_moments(&cols[0], &weights),
                            unscented_moments(&cols[1], &weights),
                            unscented_moments(&cols[2], &weights),
                        ],
                        Some(e) => [
                            Err(Error::Invalid(e.to_string())),
                            Err(Error::Invalid(e.to_string())),
                            Err(Error::Invalid(e.to_string())),
                        ],
                    }
                }
            };
            for (fi, function) in StudyFunction::ALL.iter().enumerate() {
                let (mean_true, var_true) = truth[fi];
                match &results[fi] {
                    Ok((mean_est, var_est)) => records.push(AccuracyRecord {
                        u_id,
                        function: function.as_str().into(),
                        estimator: est.name.clone(),
                        mean_est: *mean_est,
                        var_est: *var_est,
                        mean_true,
                        var_true,
                        rel_err_mean: (mean_est - mean_true).abs()
                            / mean_true.abs().max(f64::MIN_POSITIVE),
                        rel_err_var: (var_est - var_true).abs()
                            / var_true.abs().max(f64::MIN_POSITIVE),
                        ok: true,
                    }),
                    Err(_) => records.push(AccuracyRecord {
                        u_id,
                        function: function.as_str().into(),
                        estimator: est.name.clone(),
                        mean_est: f64::NAN,
                        var_est: f64::NAN,
                        mean_true,
                        var_true,
                        rel_err_mean: f64::NAN,
                        rel_err_var: f64::NAN,
                        ok: false,
                    }),
                }
            }
        }
    }
    Ok(records)
}

/// Responses of the three terminal functions on every design row; columns are
/// per-function response vectors.
fn design_responses(
    c: &PlantConstants,
    design: &crate::sampling::SampleDesign,
    controls: &[ControlInput],
    dt: f64,
    substeps: usize,
) -> Result<[Vec<f64>; 3]> {
    let thetas: Vec<Vec<f64>> = design.rows().map(|r| r.to_vec()).collect();
    let trajs = rollout_scenarios(c, &c.init, &thetas, controls, dt, substeps)?;
    let mut cols: [Vec<f64>; 3] = [
        Vec::with_capacity(thetas.len()),
        Vec::with_capacity(thetas.len()),
        Vec::with_capacity(thetas.len()),
    ];
    for traj in &trajs {
        let last = traj.last().expect("nonempty horizon");
        cols[0].push(constraint_path(last));
        cols[1].push(constraint_namw(c, last)?);
        cols[2].push(constraint_ppm(c, last));
    }
    Ok(cols)
}

/// Per-step solver telemetry; wall times are non-deterministic by nature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveLog {
    pub step: usize,
    pub iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub wall_s: f64,
    pub fallback: bool,
}

/// Everything recorded about one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRunRecord {
    pub run_id: u64,
    pub theta: [f64; 3],
    pub controller: String,
    pub inputs: Vec<ControlInput>,
    /// Interval-endpoint states, one per applied input.
    pub states: Vec<ReactorState>,
    pub dts: Vec<f64>,
    pub batch_time: f64,
    pub objective: f64,
    pub max_path_g: f64,
    pub g1n: f64,
    pub g2n: f64,
    pub violated_path: bool,
    pub violated_namw: bool,
    pub violated_ppm: bool,
    pub fallback_steps: usize,
    pub failed: bool,
    pub fail_reason: String,
    pub solve_logs: Vec<SolveLog>,
}

/// Wall-clock statistics; excluded from determinism guarantees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub solve_wall_mean_s: f64,
    pub solve_wall_max_s: f64,
    pub total_wall_s: f64,
}

/// Aggregate over one closed-loop Monte Carlo batch. Violation fractions are
/// over successful runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub schema: String,
    pub controller: String,
    pub n_runs: usize,
    pub n_failed: usize,
    pub violation_fraction_path: f64,
    pub violation_fraction_namw: f64,
    pub violation_fraction_ppm: f64,
    pub batch_time_mean: f64,
    pub batch_time_std: f64,
    pub objective_mean: f64,
    pub fallback_steps_total: usize,
    pub timing: TimingStats,
}

/// Closed-loop Monte Carlo options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub n_runs: usize,
    pub master_seed: u64,
    pub controller_label: String,
}

fn draw_theta(rng: &mut ChaCha12Rng) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for v in &mut out {
        // random::<f64>() lies in [0, 1); reject the endpoint for the probit.
        let mut u = rng.random::<f64>();
        while u <= 0.0 {
            u = rng.random::<f64>();
        }
        *v = probit(u)?;
    }
    Ok(out)
}

fn run_single(ctrl: &Controller, opts: &McOptions, run_id: u64) -> McRunRecord {
    let mut record = McRunRecord {
        run_id,
        theta: [0.0; 3],
        controller: opts.controller_label.clone(),
        inputs: Vec::new(),
        states: Vec::new(),
        dts: Vec::new(),
        batch_time: 0.0,
        objective: 0.0,
        max_path_g: f64::NEG_INFINITY,
        g1n: f64::NAN,
        g2n: f64::NAN,
        violated_path: false,
        violated_namw: false,
        violated_ppm: false,
        fallback_steps: 0,
        failed: false,
        fail_reason: String::new(),
        solve_logs: Vec::new(),
    };

    let mut rng = ChaCha12Rng::seed_from_u64(opts.master_seed);
    rng.set_stream(run_id);
    let theta = match draw_theta(&mut rng) {
        Ok(t) => t,
        Err(e) => {
            record.failed = true;
            record.fail_reason = e.to_string();
            return record;
        }
    };
    record.theta = theta;
    let params = match theta_to_params(&theta) {
        Ok(p) => p,
        Err(e) => {
            record.failed = true;
            record.fail_reason = e.to_string();
            return record;
        }
    };

    let c = &ctrl.constants;
    let mut x = c.init;
    let mut elapsed = 0.0;
    let mut u_prev = ControlInput { feed: 0.0, t_cool: COOL_BOUNDS.0 };
    let mut prev_sol: Option<OcpSolution> = None;
    let mut move_cost = 0.0;

    for t in 0..ctrl.horizon {
        let clock = Instant::now();
        let step = match ctrl.step(x, t, elapsed, u_prev, prev_sol.as_ref()) {
            Ok(s) => s,
            Err(e) => {
                record.failed = true;
                record.fail_reason = format!("solver failed at step {t}: {e}");
                break;
            }
        };
        record.solve_logs.push(SolveLog {
            step: t,
            iterations: step.solution.iterations,
            objective: step.solution.objective,
            max_violation: step.solution.max_violation,
            wall_s: clock.elapsed().as_secs_f64(),
            fallback: step.fallback,
        });
        if step.fallback {
            record.fallback_steps += 1;
        }
        x = match integrate_capped(c, &x, &step.applied, step.dt, &params, ctrl.substeps) {
            Ok(next) => next,
            Err(e) => {
                record.failed = true;
                record.fail_reason = format!("plant integration failed at step {t}: {e}");
                break;
            }
        };
        if t > 0 {
            move_cost += objective_increment(&step.applied, &u_prev);
        }
        elapsed += step.dt;
        u_prev = step.applied;
        prev_sol = Some(step.solution);
        record.inputs.push(step.applied);
        record.states.push(x);
        record.dts.push(step.dt);
        let g = constraint_path(&x);
        if g > record.max_path_g {
            record.max_path_g = g;
        }
    }

    record.batch_time = elapsed;
    record.objective = elapsed + move_cost;
    record.violated_path = record.max_path_g > 0.0;
    if !record.failed {
        match constraint_namw(c, &x) {
            Ok(g1n) => {
                record.g1n = g1n;
                record.violated_namw = g1n > 0.0;
            }
            Err(e) => {
                record.failed = true;
                record.fail_reason = e.to_string();
            }
        }
        record.g2n = constraint_ppm(c, &x);
        record.violated_ppm = record.g2n > 0.0;
    }
    record
}

/// Runs `n_runs` independent closed-loop simulations. The per-run uncertainty
/// draw comes from stream `run_id` of the master seed, so results do not depend
/// on the worker count or execution order.
pub fn closed_loop_mc(ctrl: &Controller, opts: &McOptions) -> Result<(Vec<McRunRecord>, McSummary)> {
    if opts.n_runs == 0 {
        return Err(Error::Invalid("need at least one run".into()));
    }
    let start = Instant::now();
    let records: Vec<McRunRecord> = (0..opts.n_runs as u64)
        .into_par_iter()
        .map(|run_id| run_single(ctrl, opts, run_id))
        .collect();

    let ok: Vec<&McRunRecord> = records.iter().filter(|r| !r.failed).collect();
    let n_ok = ok.len().max(1) as f64;
    let frac = |f: fn(&&McRunRecord) -> bool| ok.iter().filter(|r| f(r)).count() as f64 / n_ok;
    let batch_times: Vec<f64> = ok.iter().map(|r| r.batch_time).collect();
    let (bt_mean, bt_var) = sample_moments(&batch_times);
    let objectives: Vec<f64> = ok.iter().map(|r| r.objective).collect();
    let walls: Vec<f64> = records
        .iter()
        .flat_map(|r| r.solve_logs.iter().map(|l| l.wall_s))
        .collect();
    let summary = McSummary {
        schema: "mc-summary/1".into(),
        controller: opts.controller_label.clone(),
        n_runs: opts.n_runs,
        n_failed: records.iter().filter(|r| r.failed).count(),
        violation_fraction_path: frac(|r| r.violated_path),
        violation_fraction_namw: frac(|r| r.violated_namw),
        violation_fraction_ppm: frac(|r| r.violated_ppm),
        batch_time_mean: bt_mean,
        batch_time_std: bt_var.sqrt(),
        objective_mean: sample_moments(&objectives).0,
        fallback_steps_total: records.iter().map(|r| r.fallback_steps).sum(),
        timing: TimingStats {
            solve_wall_mean_s: sample_moments(&walls).0,
            solve_wall_max_s: walls.iter().cloned().fold(0.0, f64::max),
            total_wall_s: start.elapsed().as_secs_f64(),
        },
    };
    Ok((records, summary))
}

/// Kernel density estimate on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    /// True when the sample had zero spread; the curve is then a single point
    /// marking the spike location.
    pub degenerate: bool,
}

/// Gaussian-kernel KDE with Silverman's bandwidth by default; 512 grid points
/// spanning the data plus three bandwidths each side.
pub fn kde(samples: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    if samples.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("density samples must be finite".into()));
    }
    let n = samples.len() as f64;
    let (mean, var) = sample_moments(samples);
    let sd = var.sqrt();
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::Invalid(format!("bandwidth must be positive, got {h}"))),
        None => 1.06 * sd * n.powf(-0.2),
    };
    if h == 0.0 {
        return Ok(KdeCurve {
            grid: vec![mean],
            density: vec![1.0],
            bandwidth: 0.0,
            degenerate: true,
        });
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let points = 512usize;
    let step = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut grid = Vec::with_capacity(points);
    let mut density = Vec::with_capacity(points);
    for i in 0..points {
        let x = lo + i as f64 * step;
        let mut d = 0.0;
        for s in samples {
            let u = (x - s) / h;
            d += (-0.5 * u * u).exp();
        }
        grid.push(x);
        density.push(norm * d);
    }
    Ok(KdeCurve { grid, density, bandwidth: h, degenerate: false })
}

/// Writes `accuracy.csv`. Row order is (control setting, estimator, function),
/// matching the study's generation order.
pub fn write_accuracy_csv(path: &Path, records: &[AccuracyRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        "u_id,function,estimator,mean_est,var_est,mean_true,var_true,rel_err_mean,rel_err_var,ok\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.u_id,
            r.function,
            r.estimator,
            r.mean_est,
            r.var_est,
            r.mean_true,
            r.var_true,
            r.rel_err_mean,
            r.rel_err_var,
            r.ok
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the deterministic per-run table `mc_runs.csv`.
pub fn write_runs_csv(path: &Path, records: &[McRunRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        "run_id,theta1,theta2,theta3,controller,batch_time_s,objective,max_path_g,g1n,g2n,\
         violated_path,violated_namw,violated_ppm,fallback_steps,failed\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.theta[0],
            r.theta[1],
            r.theta[2],
            r.controller,
            r.batch_time,
            r.objective,
            r.max_path_g,
            r.g1n,
            r.g2n,
            r.violated_path,
            r.violated_namw,
            r.violated_ppm,
            r.fallback_steps,
            r.failed
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the per-step solver log `ocp_log.csv`. Contains wall-clock fields, so
/// this file is intentionally outside the byte-reproducibility guarantee.
pub fn write_ocp_log_csv(path: &Path, records: &[McRunRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str("run_id,step,iterations,objective,max_violation,wall_s,fallback\n");
    for r in records {
        for l in &r.solve_logs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.run_id, l.step, l.iterations, l.objective, l.max_violation, l.wall_s, l.fallback
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes one KDE curve as `x,density` rows.
pub fn write_kde_csv(path: &Path, curve: &KdeCurve) -> Result<()> {
    let mut out = String::new();
    out.push_str("x,density\n");
    for (x, d) in curve.grid.iter().zip(&curve.density) {
        out.push_str(&format!("{x},{d}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the full closed-loop output set into `dir`: runs table, summary JSON,
/// solver log, and KDE curves for batch time and the terminal constraints.
pub fn write_mc_outputs(
    dir: &Path,
    records: &[McRunRecord],
    summary: &McSummary,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_runs_csv(&dir.join("mc_runs.csv"), records)?;
    write_ocp_log_csv(&dir.join("ocp_log.csv"), records)?;
    let json = serde_json::to_string_pretty(summary)?;
    let mut f = fs::File::create(dir.join("mc_summary.json"))?;
    writeln!(f, "{json}")?;

    let ok: Vec<&McRunRecord> = records.iter().filter(|r| !r.failed).collect();
    if ok.len() >= 2 {
        let batch: Vec<f64> = ok.iter().map(|r| r.batch_time).collect();
        let g1n: Vec<f64> = ok.iter().map(|r| r.g1n).collect();
        let g2n: Vec<f64> = ok.iter().map(|r| r.g2n).collect();
        for (name, samples) in [("batch_time", batch), ("g1n", g1n), ("g2n", g2n)] {
            write_kde_csv(&dir.join(format!("kde_{name}.csv")), &kde(&samples, None)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::SolverOpts;
    use crate::snmpc::{ConstraintMode, UncertaintyModel};
    use approx::assert_relative_eq;

    fn tiny_controller() -> Controller {
        let mut ctrl = Controller::new(
            PlantConstants::default(),
            UncertaintyModel::Nominal,
            3,
            0.05,
            0.0,
            ConstraintMode::Soft { weight: 1e4 },
            SolverOpts { max_iter: 60, fd_step: 1e-4, ..SolverOpts::default() },
            10,
        )
        .unwrap();
        ctrl.t_batch_bounds = (300.0, 6000.0);
        ctrl
    }

    #[test]
    fn sample_moments_basics() {
        assert_eq!(sample_moments(&[4.2; 50]), (4.2, 0.0));
        let (m, v) = sample_moments(&[1.0, 2.0, 3.0]);
        assert_relative_eq!(m, 2.0, max_relative = 1e-12);
        assert_relative_eq!(v, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn mc_truth_converges_with_sample_size() {
        let c = PlantConstants::default();
        let controls = vec![ControlInput { feed: 0.02, t_cool: 320.0 }; 6];
        let a = mc_truth(&c, &controls, 3000.0, StudyFunction::PathEnd, 1500, 9, 10).unwrap();
        let b = mc_truth(&c, &controls, 3000.0, StudyFunction::PathEnd, 3000, 10, 10).unwrap();
        // Means agree within 3 pooled standard errors.
        let se = (a.1 / 1500.0 + b.1 / 3000.0).sqrt();
        assert!(
            (a.0 - b.0).abs() <= 3.0 * se,
            "means {} vs {} with pooled se {se}",
            a.0,
            b.0
        );
    }

    #[test]
    fn mc_truth_is_deterministic() {
        let c = PlantConstants::default();
        let controls = vec![ControlInput { feed: 0.02, t_cool: 320.0 }; 4];
        let a = mc_truth_all(&c, &controls, 2400.0, 500, 3, 10).unwrap();
        let b = mc_truth_all(&c, &controls, 2400.0, 500, 3, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kde_matches_standard_normal_density() {
        let design = make_design(10_000, 1, Scheme::Mc, 11).unwrap();
        let samples: Vec<f64> = design.rows().map(|r| r[0]).collect();
        let curve = kde(&samples, None).unwrap();
        // Density at zero within 10% of the analytic value.
        let at_zero = curve
            .grid
            .iter()
            .zip(&curve.density)
            .min_by(|a, b| a.0.abs().partial_cmp(&b.0.abs()).unwrap())
            .map(|(_, d)| *d)
            .unwrap();
        assert!((at_zero - 0.3989).abs() < 0.04, "density at 0 = {at_zero}");
        // Mass normalization within 1% by the trapezoid rule.
        let step = curve.grid[1] - curve.grid[0];
        let mass: f64 = curve.density.iter().sum::<f64>() * step
            - 0.5 * step * (curve.density[0] + curve.density.last().unwrap());
        assert!((mass - 1.0).abs() < 0.01, "mass = {mass}");
    }

    #[test]
    fn kde_two_point_symmetry() {
        let curve = kde(&[-1.0, 1.0], None).unwrap();
        let n = curve.density.len();
        for i in 0..n / 2 {
            assert_relative_eq!(curve.density[i], curve.density[n - 1 - i], max_relative = 1e-9);
        }
    }

    #[test]
    fn kde_degenerate_sample_is_marked() {
        let curve = kde(&[2.5; 10], None).unwrap();
        assert!(curve.degenerate);
        assert_eq!(curve.grid, vec![2.5]);
        assert!(kde(&[1.0], None).is_err());
        assert!(kde(&[1.0, f64::NAN], None).is_err());
        assert!(kde(&[1.0, 2.0], Some(-0.1)).is_err());
    }

    #[test]
    fn closed_loop_records_are_consistent() {
        let ctrl = tiny_controller();
        let opts = McOptions { n_runs: 3, master_seed: 42, controller_label: "nominal".into() };
        let (records, summary) = closed_loop_mc(&ctrl, &opts).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(summary.n_runs, 3);
        for r in &records {
            assert!(!r.failed, "run {} failed: {}", r.run_id, r.fail_reason);
            assert_eq!(r.inputs.len(), 3);
            assert_eq!(r.states.len(), 3);
            assert_relative_eq!(r.dts.iter().sum::<f64>(), r.batch_time, max_relative = 1e-12);
            assert!(r.batch_time >= 300.0 && r.batch_time <= 6000.0);
            // Distinct runs draw distinct uncertainty vectors.
        }
        assert_ne!(records[0].theta, records[1].theta);
        assert_ne!(records[1].theta, records[2].theta);
    }

    #[test]
    fn closed_loop_is_deterministic_across_thread_counts() {
        let ctrl = tiny_controller();
        let opts = McOptions { n_runs: 4, master_seed: 7, controller_label: "nominal".into() };
        let strip = |records: Vec<McRunRecord>| -> Vec<McRunRecord> {
            records
                .into_iter()
                .map(|mut r| {
                    for l in &mut r.solve_logs {
                        l.wall_s = 0.0;
                    }
                    r
                })
                .collect()
        };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let (r1, _) = pool1.install(|| closed_loop_mc(&ctrl, &opts)).unwrap();
        let (r2, _) = pool2.install(|| closed_loop_mc(&ctrl, &opts)).unwrap();
        assert_eq!(strip(r1), strip(r2));
    }

    #[test]
    fn output_files_are_byte_stable() {
        let ctrl = tiny_controller();
        let opts = McOptions { n_runs: 3, master_seed: 5, controller_label: "nominal".into() };
        let (records, summary) = closed_loop_mc(&ctrl, &opts).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_mc_outputs(dir_a.path(), &records, &summary).unwrap();
        write_mc_outputs(dir_b.path(), &records, &summary).unwrap();
        for name in ["mc_runs.csv", "kde_batch_time.csv", "kde_g1n.csv", "kde_g2n.csv"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "file {name} differs");
        }
    }

    #[test]
    fn accuracy_study_smoke() {
        let c = PlantConstants::default();
        let design = make_design(15, 3, Scheme::Sobol, 0).unwrap();
        let mk = |lambda: [f64; 3]| {
            precompute(&GppceConfig {
                design: design.clone(),
                order: 2,
                lambda: lambda.to_vec(),
            })
            .unwrap()
        };
        let families = FamilyEstimators {
            path: mk([0.22, 0.77, 0.55]),
            namw: mk([0.31, 0.87, 0.44]),
            ppm: mk([0.30, 0.75, 0.45]),
            objective: mk([0.65, 0.65, 0.65]),
        };
        let opts = AccuracyOptions {
            n_u: 2,
            n_mc: 400,
            master_seed: 1,
            t_batch: 4000.0,
            horizon: 4,
            substeps: 10,
            design_sizes: vec![15],
            order: 2,
        };
        let records = accuracy_study(&c, &families, &opts).unwrap();
        // 2 settings x 3 functions x (gppce aniso + gppce iso + gp + pce + ut).
        assert_eq!(records.len(), 2 * 3 * 5);
        for r in &records {
            assert!(r.ok, "cell {}/{} failed", r.estimator, r.function);
            assert!(r.mean_true.is_finite() && r.var_true >= 0.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("accuracy.csv");
        write_accuracy_csv(&path, &records).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + records.len());
        assert!(text.starts_with("u_id,function,estimator,"));
    }
}
