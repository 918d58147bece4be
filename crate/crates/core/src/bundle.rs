//! Versioned JSON containers for artifacts that must survive a process
//! boundary: estimator precompute bundles and fitted GP models. Every file
//! carries a schema tag, a version, and a kind, so a stale or mislabeled
//! artifact fails loudly instead of producing silently wrong numbers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::gppce::GppcePrecompute;
use crate::pce::PceBasis;
use crate::sampling::SampleDesign;
use crate::snmpc::FamilyEstimators;

pub const BUNDLE_SCHEMA: &str = "gppce-bundle";
pub const BUNDLE_VERSION: u32 = 1;

const KIND_PRECOMPUTE: &str = "estimator-precompute";
const KIND_GP_MODEL: &str = "gp-model";

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema: String,
    version: u32,
    kind: String,
    payload: T,
}

fn save_envelope<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let env = Envelope {
        schema: BUNDLE_SCHEMA.to_string(),
        version: BUNDLE_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let text = serde_json::to_string(&env)?;
    fs::write(path, text)?;
    Ok(())
}

fn load_envelope<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Invalid(format!(
            "cannot read bundle {}: {e}; run the precompute command first",
            path.display()
        ))
    })?;
    let env: Envelope<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Invalid(format!("bundle {}: {e}", path.display())))?;
    if env.schema != BUNDLE_SCHEMA {
        return Err(Error::Invalid(format!(
            "bundle {} has schema {:?}, expected {BUNDLE_SCHEMA:?}",
            path.display(),
            env.schema
        )));
    }
    if env.version > BUNDLE_VERSION {
        return Err(Error::Invalid(format!(
            "bundle {} is version {}, this build reads up to {BUNDLE_VERSION}",
            path.display(),
            env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::Invalid(format!(
            "bundle {} holds a {:?}, expected a {kind:?}",
            path.display(),
            env.kind
        )));
    }
    Ok(env.payload)
}

/// Writes one estimator precompute bundle.
pub fn save_precompute(path: &Path, pre: &GppcePrecompute) -> Result<()> {
    save_envelope(path, KIND_PRECOMPUTE, pre)
}

/// Reads and revalidates one estimator precompute bundle.
pub fn load_precompute(path: &Path) -> Result<GppcePrecompute> {
    let pre: GppcePrecompute = load_envelope(path, KIND_PRECOMPUTE)?;
    pre.validate()?;
    Ok(pre)
}

/// Bundle file names for the four constraint families, in (path, namw, ppm,
/// objective) order.
pub fn family_paths(dir: &Path) -> [PathBuf; 4] {
    [
        dir.join("precompute_path.json"),
        dir.join("precompute_namw.json"),
        dir.join("precompute_ppm.json"),
        dir.join("precompute_objective.json"),
    ]
}

/// Writes all four family bundles into `dir`, creating it if needed.
pub fn save_families(dir: &Path, families: &FamilyEstimators) -> Result<[PathBuf; 4]> {
    fs::create_dir_all(dir)?;
    let paths = family_paths(dir);
    save_precompute(&paths[0], &families.path)?;
    save_precompute(&paths[1], &families.namw)?;
    save_precompute(&paths[2], &families.ppm)?;
    save_precompute(&paths[3], &families.objective)?;
    Ok(paths)
}

/// Loads the four family bundles and checks they share one design.
pub fn load_families(dir: &Path) -> Result<FamilyEstimators> {
    let paths = family_paths(dir);
    let families = FamilyEstimators {
        path: load_precompute(&paths[0])?,
        namw: load_precompute(&paths[1])?,
        ppm: load_precompute(&paths[2])?,
        objective: load_precompute(&paths[3])?,
    };
    families.validate()?;
    Ok(families)
}

/// Portable GP representation: the fit inputs rather than the factored model.
/// Loading refits deterministically, so equality with the original is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModelRepr {
    pub design: SampleDesign,
    pub order: usize,
    pub lambda: Vec<f64>,
    pub z: Vec<f64>,
}

impl GpModelRepr {
    pub fn of(model: &GpModel) -> GpModelRepr {
        GpModelRepr {
            design: model.design().clone(),
            order: model.basis().order(),
            lambda: model.lambda().to_vec(),
            z: model.z().iter().cloned().collect(),
        }
    }

    pub fn fit(self) -> Result<GpModel> {
        let basis = PceBasis::new(self.design.n_dim(), self.order)?;
        GpModel::fit(self.design, basis, self.lambda, self.z)
    }
}

pub fn save_gp(path: &Path, model: &GpModel) -> Result<()> {
    save_envelope(path, KIND_GP_MODEL, &GpModelRepr::of(model))
}

pub fn load_gp(path: &Path) -> Result<GpModel> {
    load_envelope::<GpModelRepr>(path, KIND_GP_MODEL)?.fit()
}
