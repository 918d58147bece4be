//! Run configuration: one JSON document with full defaulting so an empty object
//! is a valid desk-scale experiment, and every key that affects results is
//! pinned in a single reproducible artifact. Unknown keys are rejected to catch
//! typos before they silently fall back to defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_lengthscales, median_heuristic};
use crate::gppce::{precompute, GppceConfig};
use crate::mc::{AccuracyOptions, McOptions};
use crate::nlp::SolverOpts;
use crate::pce::PceBasis;
use crate::reactor::{constraint_namw, constraint_path, constraint_ppm, ControlInput, PlantConstants};
use crate::sampling::{make_design, SampleDesign, Scheme};
use crate::snmpc::{
    rollout_scenarios, ConstraintMode, Controller, FamilyEstimators, UncertaintyModel,
};

/// Sample design recipe for the estimator training points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSection {
    pub n_s: usize,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for DesignSection {
    fn default() -> Self {
        DesignSection { n_s: 15, scheme: Scheme::Sobol, seed: 0 }
    }
}

/// How per-family lengthscales are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// Use the fixed per-family vectors below.
    AnisotropicFixed,
    /// One isotropic value from the median pairwise design distance.
    MedianIso,
    /// Maximum-likelihood fit on responses from a nominal-guess rollout.
    Fit,
}

/// Estimator options: chaos order and lengthscale policy. The fixed vectors
/// default to values fitted for this reactor at the reference design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GppceSection {
    pub order: usize,
    pub lambda_mode: LambdaMode,
    pub lambda_path: Vec<f64>,
    pub lambda_namw: Vec<f64>,
    pub lambda_ppm: Vec<f64>,
    pub lambda_objective: Vec<f64>,
}

impl Default for GppceSection {
    fn default() -> Self {
        GppceSection {
            order: 2,
            lambda_mode: LambdaMode::AnisotropicFixed,
            lambda_path: vec![0.22, 0.77, 0.55],
            lambda_namw: vec![0.31, 0.87, 0.44],
            lambda_ppm: vec![0.30, 0.75, 0.45],
            lambda_objective: vec![0.65, 0.65, 0.65],
        }
    }
}

/// Controller and optimal-control options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpSection {
    pub horizon: usize,
    pub epsilon: f64,
    pub omega: f64,
    pub t_batch_min: f64,
    pub t_batch_max: f64,
    /// RK4 substeps per control interval, shared by controller and plant.
    pub substeps: usize,
    /// Quadratic penalty weight for the soft-constrained nominal baseline.
    pub soft_weight: f64,
    /// Sigma-point spread parameter for the unscented controller variant.
    pub kappa_ut: f64,
    pub solver: SolverOpts,
}

impl Default for OcpSection {
    fn default() -> Self {
        OcpSection {
            horizon: 12,
            epsilon: 0.05,
            omega: 0.0,
            t_batch_min: 1000.0,
            t_batch_max: 40000.0,
            substeps: 20,
            soft_weight: 1e4,
            kappa_ut: 0.0,
            // The coarse difference step rides over the substep-count jitter
            // that integration introduces into the rollout responses.
            solver: SolverOpts { fd_step: 1e-4, ..SolverOpts::default() },
        }
    }
}

/// Monte Carlo scales for the accuracy study and the closed-loop comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub n_runs: usize,
    pub n_mc: usize,
    pub n_u: usize,
    pub master_seed: u64,
    /// Fixed batch time for the open-loop accuracy study, s.
    pub accuracy_t_batch: f64,
    pub accuracy_sizes: Vec<usize>,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            n_runs: 50,
            n_mc: 100_000,
            n_u: 20,
            master_seed: 0,
            accuracy_t_batch: 7000.0,
            accuracy_sizes: vec![15, 25, 40],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

/// The whole experiment in one document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantConstants,
    pub design: DesignSection,
    pub gppce: GppceSection,
    pub ocp: OcpSection,
    pub mc: McSection,
    pub output: OutputSection,
}

/// Which controller flavor a closed-loop experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Snmpc,
    Nominal,
    Unscented,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Snmpc => "snmpc",
            ControllerKind::Nominal => "nominal",
            ControllerKind::Unscented => "unscented",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snmpc" => Ok(ControllerKind::Snmpc),
            "nominal" => Ok(ControllerKind::Nominal),
            "unscented" => Ok(ControllerKind::Unscented),
            other => Err(Error::Invalid(format!(
                "unknown controller {other:?}, expected snmpc, nominal, or unscented"
            ))),
        }
    }
}

impl RunConfig {
    /// Parses a config file; parse errors carry the path and serde's line and
    /// column diagnostics.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Invalid(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Invalid(format!("config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.design.n_s < 2 {
            return Err(Error::Invalid(format!(
                "design needs at least 2 points, got {}",
                self.design.n_s
            )));
        }
        for (name, lambda) in [
            ("lambda_path", &self.gppce.lambda_path),
            ("lambda_namw", &self.gppce.lambda_namw),
            ("lambda_ppm", &self.gppce.lambda_ppm),
            ("lambda_objective", &self.gppce.lambda_objective),
        ] {
            if lambda.len() != 3 {
                return Err(Error::Invalid(format!(
                    "{name} needs 3 entries, got {}",
                    lambda.len()
                )));
            }
            if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                return Err(Error::Invalid(format!("{name} entries must be positive")));
            }
        }
        if self.ocp.horizon == 0 {
            return Err(Error::Invalid("horizon must be at least one interval".into()));
        }
        if !(self.ocp.epsilon > 0.0 && self.ocp.epsilon <= 0.5) {
            return Err(Error::Invalid(format!(
                "epsilon must lie in (0, 0.5], got {}",
                self.ocp.epsilon
            )));
        }
        if !(self.ocp.t_batch_min > 0.0 && self.ocp.t_batch_max > self.ocp.t_batch_min) {
            return Err(Error::Invalid("batch-time bounds must be ordered and positive".into()));
        }
        if self.ocp.substeps == 0 {
            return Err(Error::Invalid("substeps must be positive".into()));
        }
        if self.mc.n_runs == 0 || self.mc.n_mc < 2 || self.mc.n_u == 0 {
            return Err(Error::Invalid("mc scales must be positive".into()));
        }
        if self.mc.accuracy_sizes.is_empty() {
            return Err(Error::Invalid("accuracy study needs at least one design size".into()));
        }
        Ok(())
    }

    /// Bumps the Monte Carlo scales to the sizes used for the published study:
    /// 100 random control settings and 400 closed-loop runs.
    pub fn apply_paper_scale(&mut self) {
        self.mc.n_u = 100;
        self.mc.n_runs = 400;
    }

    /// The training design for the estimator families.
    pub fn design(&self) -> Result<SampleDesign> {
        make_design(self.design.n_s, 3, self.design.scheme, self.design.seed)
    }

    /// Per-family lengthscales under the configured policy. The fit policy
    /// trains on responses from a rollout at the default initial control guess.
    pub fn family_lambdas(&self, design: &SampleDesign) -> Result<[Vec<f64>; 4]> {
        match self.gppce.lambda_mode {
            LambdaMode::AnisotropicFixed => Ok([
                self.gppce.lambda_path.clone(),
                self.gppce.lambda_namw.clone(),
                self.gppce.lambda_ppm.clone(),
                self.gppce.lambda_objective.clone(),
            ]),
            LambdaMode::MedianIso => {
                let iso = median_heuristic(design)?;
                Ok([iso.clone(), iso.clone(), iso.clone(), iso])
            }
            LambdaMode::Fit => {
                let basis = PceBasis::new(3, self.gppce.order)?;
                let controls = vec![
                    ControlInput { feed: 0.03, t_cool: 310.0 };
                    self.ocp.horizon
                ];
                let dt = 8000.0 / self.ocp.horizon as f64;
                let thetas: Vec<Vec<f64>> = design.rows().map(|r| r.to_vec()).collect();
                let trajs = rollout_scenarios(
                    &self.plant,
                    &self.plant.init,
                    &thetas,
                    &controls,
                    dt,
                    self.ocp.substeps,
                )?;
                let mut z_path = Vec::with_capacity(trajs.len());
                let mut z_namw = Vec::with_capacity(trajs.len());
                let mut z_ppm = Vec::with_capacity(trajs.len());
                for traj in &trajs {
                    let last = traj.last().expect("nonempty horizon");
                    z_path.push(constraint_path(last));
                    z_namw.push(constraint_namw(&self.plant, last)?);
                    z_ppm.push(constraint_ppm(&self.plant, last));
                }
                // The objective is scenario-independent; a constant response
                // sends the fit to its median-heuristic fallback.
                let z_obj = vec![8000.0; trajs.len()];
                Ok([
                    fit_lengthscales(design, &basis, &z_path)?,
                    fit_lengthscales(design, &basis, &z_namw)?,
                    fit_lengthscales(design, &basis, &z_ppm)?,
                    fit_lengthscales(design, &basis, &z_obj)?,
                ])
            }
        }
    }

    /// Builds the four estimator bundles on the configured design.
    pub fn build_families(&self) -> Result<FamilyEstimators> {
        let design = self.design()?;
        let [path, namw, ppm, objective] = self.family_lambdas(&design)?;
        let mk = |lambda: Vec<f64>| {
            precompute(&GppceConfig { design: design.clone(), order: self.gppce.order, lambda })
        };
        Ok(FamilyEstimators {
            path: mk(path)?,
            namw: mk(namw)?,
            ppm: mk(ppm)?,
            objective: mk(objective)?,
        })
    }

    /// Assembles a controller. The stochastic flavor requires the precomputed
    /// families; the other flavors ignore them.
    pub fn build_controller(
        &self,
        kind: ControllerKind,
        families: Option<FamilyEstimators>,
    ) -> Result<Controller> {
        let (model, mode) = match kind {
            ControllerKind::Snmpc => {
                let families = families.ok_or_else(|| {
                    Error::Invalid(
                        "stochastic controller needs estimator bundles; run the precompute \
                         command first"
                            .into(),
                    )
                })?;
                let design = families.path.config().design.clone();
                (
                    UncertaintyModel::Gppce { design, families: Box::new(families) },
                    ConstraintMode::Hard,
                )
            }
            ControllerKind::Nominal => (
                UncertaintyModel::Nominal,
                ConstraintMode::Soft { weight: self.ocp.soft_weight },
            ),
            ControllerKind::Unscented => (
                UncertaintyModel::Unscented { kappa_ut: self.ocp.kappa_ut },
                ConstraintMode::Hard,
            ),
        };
        let mut ctrl = Controller::new(
            self.plant.clone(),
            model,
            self.ocp.horizon,
            self.ocp.epsilon,
            self.ocp.omega,
            mode,
            self.ocp.solver,
            self.ocp.substeps,
        )?;
        ctrl.t_batch_bounds = (self.ocp.t_batch_min, self.ocp.t_batch_max);
        Ok(ctrl)
    }

    pub fn accuracy_options(&self) -> AccuracyOptions {
        AccuracyOptions {
            n_u: self.mc.n_u,
            n_mc: self.mc.n_mc,
            master_seed: self.mc.master_seed,
            t_batch: self.mc.accuracy_t_batch,
            horizon: self.ocp.horizon,
            substeps: self.ocp.substeps,
            design_sizes: self.mc.accuracy_sizes.clone(),
            order: self.gppce.order,
        }
    }

    pub fn mc_options(&self, kind: ControllerKind) -> McOptions {
        McOptions {
            n_runs: self.mc.n_runs,
            master_seed: self.mc.master_seed,
            controller_label: kind.as_str().into(),
        }
    }
}
