//! Deterministic sample designs on the unit cube and their images under the
//! standard normal quantile map. A design is identified by (n_points, n_dim,
//! scheme, seed) and reproduces bit-identically for the same tuple.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Low-discrepancy or pseudo-random placement rule for the unit-cube points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Sobol sequence in Gray-code order with the all-zeros origin skipped.
    Sobol,
    /// Latin hypercube: one uniform draw per stratum, strata shuffled per axis.
    Lhs,
    /// Plain pseudo-random uniforms.
    Mc,
}

/// Points in standard-normal space together with the recipe that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDesign {
    n_points: usize,
    n_dim: usize,
    scheme: Scheme,
    seed: u64,
    /// Row-major, `n_points` rows of `n_dim` coordinates.
    points: Vec<f64>,
}

impl SampleDesign {
    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Coordinates of point `i`.
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.n_dim..(i + 1) * self.n_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.n_dim)
    }

    #[cfg(test)]
    pub(crate) fn from_raw(n_dim: usize, points: Vec<f64>) -> Self {
        let n_points = points.len() / n_dim;
        Self { n_points, n_dim, scheme: Scheme::Mc, seed: 0, points }
    }
}

/// Standard normal CDF via the complementary error function.
fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF; p must lie strictly inside (0, 1). The upper
/// half reduces to the lower by antisymmetry, with 1 - p exact in floating
/// point there, so the whole range enjoys the relative precision that erfc
/// delivers on the nonpositive axis.
pub fn probit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid(format!("probit argument {p} outside (0, 1)")));
    }
    if p > 0.5 {
        return Ok(-probit_half(1.0 - p));
    }
    Ok(probit_half(p))
}

/// Inverse CDF on (0, 0.5]: rational initial guess (P. Acklam, relative error
/// below 1.15e-9) polished by two Newton steps against the erfc-based CDF.
fn probit_half(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf == 0.0 {
            break;
        }
        x -= (normal_cdf(x) - p) / pdf;
    }
    x
}

/// Joe-Kuo direction numbers (new-joe-kuo-6 ordering); axis 0 is the van der
/// Corput sequence, encoded as an all-ones m so the recurrence never engages.
const SOBOL_AXES: [(u32, &[u32]); 8] = [
    (0, &[1; 32]),
    (0, &[1]),
    (1, &[1, 3]),
    (1, &[1, 3, 1]),
    (2, &[1, 1, 1]),
    (1, &[1, 1, 3, 3]),
    (4, &[1, 3, 5, 13]),
    (2, &[1, 1, 5, 5, 17]),
];

const SOBOL_BITS: usize = 31;

fn sobol_direction_numbers(axis: usize) -> [u32; SOBOL_BITS + 1] {
    let (a, m) = SOBOL_AXES[axis];
    let mut v = [0u32; SOBOL_BITS + 1];
    for (i, &mi) in m.iter().take(SOBOL_BITS + 1).enumerate() {
        v[i] = mi << (31 - i);
    }
    let s = m.len();
    for i in s..=SOBOL_BITS {
        let j = i - s;
        v[i] = v[j] ^ (v[j] >> s);
        for k in 0..(s - 1) {
            if ((a >> k) & 1) != 0 {
                v[i] ^= v[j + 1 + k];
            }
        }
    }
    v
}

fn sobol_unit(n: usize, d: usize, out: &mut Vec<f64>) -> Result<()> {
    if d > SOBOL_AXES.len() {
        return Err(Error::Invalid(format!(
            "sobol direction-number table covers {} dimensions, requested {d}",
            SOBOL_AXES.len()
        )));
    }
    if n >= (1usize << SOBOL_BITS) {
        return Err(Error::Invalid(format!("sobol sequence limited to 2^{SOBOL_BITS} points")));
    }
    let v: Vec<[u32; SOBOL_BITS + 1]> = (0..d).map(sobol_direction_numbers).collect();
    let mut x = vec![0u32; d];
    const SCALE: f64 = 1.0 / 4294967296.0;
    for i in 0..n as u32 {
        // Gray-code advance; the first emitted point is v[0], so the origin is skipped.
        let bit = i.trailing_ones() as usize;
        for (k, xk) in x.iter_mut().enumerate() {
            *xk ^= v[k][bit];
            out.push(*xk as f64 * SCALE);
        }
    }
    Ok(())
}

fn lhs_unit(n: usize, d: usize, seed: u64, out: &mut Vec<f64>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Column-wise strata, transposed into row-major at the end.
    let mut cols = vec![vec![0.0f64; n]; d];
    let mut strata: Vec<usize> = (0..n).collect();
    for col in cols.iter_mut() {
        strata.shuffle(&mut rng);
        for (i, &s) in strata.iter().enumerate() {
            col[i] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    for i in 0..n {
        for col in &cols {
            out.push(col[i]);
        }
    }
}

fn mc_unit(n: usize, d: usize, seed: u64, out: &mut Vec<f64>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..n * d {
        // Reject exact zeros so the probit map stays defined.
        let u = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        out.push(u);
    }
}

/// Points in the open unit cube, row-major. The seed is ignored by the Sobol rule.
pub fn unit_design(n: usize, d: usize, scheme: Scheme, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Invalid("design needs at least one point".into()));
    }
    if d == 0 {
        return Err(Error::Invalid("design dimension must be positive".into()));
    }
    let mut out = Vec::with_capacity(n * d);
    match scheme {
        Scheme::Sobol => sobol_unit(n, d, &mut out)?,
        Scheme::Lhs => lhs_unit(n, d, seed, &mut out),
        Scheme::Mc => mc_unit(n, d, seed, &mut out),
    }
    Ok(out)
}

/// Unit-cube design pushed through the probit map into standard-normal space.
pub fn make_design(n: usize, d: usize, scheme: Scheme, seed: u64) -> Result<SampleDesign> {
    let mut points = unit_design(n, d, scheme, seed)?;
    for u in points.iter_mut() {
        *u = probit(*u)?;
    }
    Ok(SampleDesign { n_points: n, n_dim: d, scheme, seed, points })
}
