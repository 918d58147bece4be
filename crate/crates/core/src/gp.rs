//! Gaussian process regression with a Hermite-chaos trend and an anisotropic
//! squared-exponential correlation. Trend coefficients and the signal variance
//! have closed-form maximum-likelihood estimates given the lengthscales; the
//! lengthscales themselves are fitted by maximizing the concentrated likelihood.
//!
//! The kernel is kept in correlation form, k = alpha^2 * r with r(theta, theta) = 1,
//! so every precomputed expectation downstream is scale-free and the fitted
//! alpha^2 multiplies back in at the end.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlp::nelder_mead;
use crate::pce::PceBasis;
use crate::sampling::SampleDesign;

/// Lengthscale search window used by `fit_lengthscales`.
pub const LAMBDA_BOUNDS: (f64, f64) = (0.05, 10.0);

const JITTER: f64 = 1e-8;
const JITTER_FALLBACK: f64 = 1e-6;

/// Squared-exponential kernel parameters: per-dimension lengthscales and the
/// signal variance multiplying the correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lambda: Vec<f64>,
    pub alpha2: f64,
}

/// Squared-exponential correlation exp(-1/2 * sum_k ((a_k - b_k)/lambda_k)^2).
/// Lengthscales must be positive; callers validate once per design.
pub fn se_corr(a: &[f64], b: &[f64], lambda: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), lambda.len());
    let mut q = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / lambda[i];
        q += d * d;
    }
    (-0.5 * q).exp()
}

fn check_lambda(n_dim: usize, lambda: &[f64]) -> Result<()> {
    if lambda.len() != n_dim {
        return Err(Error::Dim(format!(
            "{} lengthscales for a {n_dim}-dimensional design",
            lambda.len()
        )));
    }
    if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::Invalid("lengthscales must be positive and finite".into()));
    }
    Ok(())
}

/// Correlation matrix of the design with `jitter` added to the diagonal.
pub fn corr_matrix(design: &SampleDesign, lambda: &[f64], jitter: f64) -> Result<DMatrix<f64>> {
    check_lambda(design.n_dim(), lambda)?;
    let n = design.n_points();
    let mut sigma = DMatrix::zeros(n, n);
    for i in 0..n {
        sigma[(i, i)] = 1.0 + jitter;
        for j in 0..i {
            let r = se_corr(design.point(i), design.point(j), lambda);
            sigma[(i, j)] = r;
            sigma[(j, i)] = r;
        }
    }
    Ok(sigma)
}

/// Builds and factors the design correlation, escalating the jitter once before
/// giving up on a numerically singular matrix.
pub(crate) fn corr_cholesky(
    design: &SampleDesign,
    lambda: &[f64],
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>, f64)> {
    for jitter in [JITTER, JITTER_FALLBACK] {
        let sigma = corr_matrix(design, lambda, jitter)?;
        if let Some(chol) = sigma.clone().cholesky() {
            return Ok((sigma, chol, jitter));
        }
    }
    Err(Error::LinAlg(
        "design correlation is not positive definite, points may be duplicated".into(),
    ))
}

/// Closed-form generalized least squares at fixed lengthscales.
#[derive(Debug, Clone)]
pub struct GlsFit {
    /// Trend coefficients (Phi' Sigma^-1 Phi)^-1 Phi' Sigma^-1 z.
    pub beta: DVector<f64>,
    /// Residual z - Phi beta.
    pub nu: DVector<f64>,
    /// Signal variance nu' Sigma^-1 nu / n_s.
    pub alpha2: f64,
    /// Projection matrix a with beta = a z, shape n_phi x n_s.
    pub a: DMatrix<f64>,
    /// Cholesky factor of S = Phi' Sigma^-1 Phi.
    pub chol_s: Cholesky<f64, Dyn>,
}

/// Maximum-likelihood trend and signal variance given the factored correlation.
pub fn mle_closed_form(
    phi: &DMatrix<f64>,
    chol_sigma: &Cholesky<f64, Dyn>,
    z: &DVector<f64>,
) -> Result<GlsFit> {
    let n_s = phi.nrows();
    if z.len() != n_s {
        return Err(Error::Dim(format!("{} observations for {n_s} design points", z.len())));
    }
    let sig_inv_phi = chol_sigma.solve(phi);
    let s = phi.transpose() * &sig_inv_phi;
    let chol_s = s.cholesky().ok_or_else(|| {
        Error::LinAlg("trend normal matrix is singular, need n_s > n_phi with informative points".into())
    })?;
    let a = chol_s.solve(&sig_inv_phi.transpose());
    let beta = &a * z;
    let nu = z - phi * &beta;
    let sig_inv_nu = chol_sigma.solve(&nu);
    let alpha2 = (nu.dot(&sig_inv_nu) / n_s as f64).max(0.0);
    Ok(GlsFit { beta, nu, alpha2, a, chol_s })
}

/// Isotropic lengthscale set to the median pairwise Euclidean distance.
pub fn median_heuristic(design: &SampleDesign) -> Result<Vec<f64>> {
    let n = design.n_points();
    if n < 2 {
        return Err(Error::Invalid("median heuristic needs at least two points".into()));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            let d: f64 = design
                .point(i)
                .iter()
                .zip(design.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dists.push(d);
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
    if med <= 0.0 {
        return Err(Error::Invalid("median pairwise distance is zero, points coincide".into()));
    }
    Ok(vec![med; design.n_dim()])
}

/// Concentrated log likelihood at fixed lengthscales, maximized over the trend
/// and signal variance analytically. Returns None where the factorization or the
/// variance degenerates.
fn concentrated_ll(
    design: &SampleDesign,
    basis: &PceBasis,
    z: &DVector<f64>,
    lambda: &[f64],
) -> Option<f64> {
    let sigma = corr_matrix(design, lambda, JITTER).ok()?;
    let chol = sigma.cholesky()?;
    let half_log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let phi = design_matrix(design, basis).ok()?;
    let fit = mle_closed_form(&phi, &chol, z).ok()?;
    if fit.alpha2 < 1e-280 {
        return None;
    }
    let n = design.n_points() as f64;
    Some(-0.5 * n * fit.alpha2.ln() - half_log_det)
}

/// Evaluates the basis at every design point, rows indexed by point.
pub fn design_matrix(design: &SampleDesign, basis: &PceBasis) -> Result<DMatrix<f64>> {
    let mut phi = DMatrix::zeros(design.n_points(), basis.len());
    for (i, row) in design.rows().enumerate() {
        let v = basis.eval(row)?;
        for (j, &p) in v.iter().enumerate() {
            phi[(i, j)] = p;
        }
    }
    Ok(phi)
}

/// Fits anisotropic lengthscales by multi-start Nelder-Mead on the concentrated
/// likelihood in log-lengthscale space, windowed to `LAMBDA_BOUNDS`. A constant
/// response carries no lengthscale information and falls back to the median
/// heuristic, as does a surface with no admissible likelihood evaluation.
pub fn fit_lengthscales(
    design: &SampleDesign,
    basis: &PceBasis,
    z: &[f64],
) -> Result<Vec<f64>> {
    if z.len() != design.n_points() {
        return Err(Error::Dim(format!(
            "{} observations for {} design points",
            z.len(),
            design.n_points()
        )));
    }
    let med = median_heuristic(design)?;
    let zv = DVector::from_column_slice(z);
    let mean = zv.sum() / zv.len() as f64;
    let var = zv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / zv.len() as f64;
    if var < 1e-24 * (1.0 + mean * mean) {
        return Ok(med);
    }

    let d = design.n_dim();
    let (lo, hi) = (LAMBDA_BOUNDS.0.ln(), LAMBDA_BOUNDS.1.ln());
    let neg_ll = |t: &[f64]| -> f64 {
        if t.iter().any(|&x| x < lo || x > hi) {
            return f64::INFINITY;
        }
        let lambda: Vec<f64> = t.iter().map(|&x| x.exp()).collect();
        match concentrated_ll(design, basis, &zv, &lambda) {
            Some(ll) => -ll,
            None => f64::INFINITY,
        }
    };

    let base: Vec<f64> = med.iter().map(|l| l.ln().clamp(lo, hi)).collect();
    let mut starts = vec![base.clone()];
    for shift in [-1.2f64, 1.2] {
        starts.push(base.iter().map(|&b| (b + shift).clamp(lo, hi)).collect());
    }
    for parity in [0usize, 1] {
        starts.push(
            base.iter()
                .enumerate()
                .map(|(i, &b)| (b + if i % 2 == parity { 0.8 } else { -0.8 }).clamp(lo, hi))
                .collect(),
        );
    }

    let mut best = (base.clone(), neg_ll(&base));
    for s in starts {
        let (x, f) = nelder_mead(neg_ll, &s, 0.4, 250 * d);
        if f < best.1 {
            best = (x, f);
        }
    }
    if !best.1.is_finite() {
        return Ok(med);
    }
    Ok(best.0.iter().map(|&t| t.exp().clamp(LAMBDA_BOUNDS.0, LAMBDA_BOUNDS.1)).collect())
}

/// Fitted Gaussian process with cached factorizations for posterior queries.
#[derive(Debug, Clone)]
pub struct GpModel {
    design: SampleDesign,
    basis: PceBasis,
    lambda: Vec<f64>,
    jitter: f64,
    z: DVector<f64>,
    phi: DMatrix<f64>,
    beta: DVector<f64>,
    nu: DVector<f64>,
    alpha2: f64,
    sig_inv_nu: DVector<f64>,
    chol_sigma: Cholesky<f64, Dyn>,
    chol_s: Cholesky<f64, Dyn>,
}

impl GpModel {
    /// Fits trend and signal variance on the design at fixed lengthscales.
    /// Requires strictly more points than basis functions.
    pub fn fit(
        design: SampleDesign,
        basis: PceBasis,
        lambda: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self> {
        if basis.n_dim() != design.n_dim() {
            return Err(Error::Dim(format!(
                "basis dimension {} differs from design dimension {}",
                basis.n_dim(),
                design.n_dim()
            )));
        }
        if z.len() != design.n_points() {
            return Err(Error::Dim(format!(
                "{} observations for {} design points",
                z.len(),
                design.n_points()
            )));
        }
        if design.n_points() <= basis.len() {
            return Err(Error::Invalid(format!(
                "need n_s > n_phi, got n_s = {} with n_phi = {}",
                design.n_points(),
                basis.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observations contain non-finite values".into()));
        }
        let (_, chol_sigma, jitter) = corr_cholesky(&design, &lambda)?;
        let phi = design_matrix(&design, &basis)?;
        let zv = DVector::from_vec(z);
        let fit = mle_closed_form(&phi, &chol_sigma, &zv)?;
        let sig_inv_nu = chol_sigma.solve(&fit.nu);
        Ok(Self {
            design,
            basis,
            lambda,
            jitter,
            z: zv,
            phi,
            beta: fit.beta,
            nu: fit.nu,
            alpha2: fit.alpha2,
            sig_inv_nu,
            chol_sigma,
            chol_s: fit.chol_s,
        })
    }

    pub fn design(&self) -> &SampleDesign {
        &self.design
    }

    pub fn basis(&self) -> &PceBasis {
        &self.basis
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn kernel_params(&self) -> KernelParams {
        KernelParams { lambda: self.lambda.clone(), alpha2: self.alpha2 }
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }

    pub fn alpha2(&self) -> f64 {
        self.alpha2
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior mean and variance at a query point; the variance is clamped at
    /// zero after the universal-kriging correction.
    pub fn posterior(&self, theta: &[f64]) -> Result<(f64, f64)> {
        let (mean, var_raw) = self.posterior_raw(theta)?;
        Ok((mean, var_raw.max(0.0)))
    }

    /// Same as `posterior` but without the variance clamp, for diagnostics.
    pub(crate) fn posterior_raw(&self, theta: &[f64]) -> Result<(f64, f64)> {
        let phi_q = DVector::from_vec(self.basis.eval(theta)?);
        let n = self.design.n_points();
        let mut r = DVector::zeros(n);
        for i in 0..n {
            r[i] = se_corr(theta, self.design.point(i), &self.lambda);
        }
        let mean = phi_q.dot(&self.beta) + r.dot(&self.sig_inv_nu);
        let sig_inv_r = self.chol_sigma.solve(&r);
        let q = r.dot(&sig_inv_r);
        // Universal kriging: kappa' K^-1 kappa = r' Sigma^-1 r - u' S^-1 u with
        // u = phi - Phi' Sigma^-1 r, so the trend uncertainty enters with sign +.
        let u = phi_q - self.phi.transpose() * sig_inv_r;
        let w = u.dot(&self.chol_s.solve(&u));
        let var_raw = self.alpha2 * (1.0 - q + w);
        Ok((mean, var_raw))
    }

    /// Full log likelihood at arbitrary trend and signal variance, used to check
    /// stationarity of the closed-form estimates.
    pub fn log_likelihood(&self, beta: &DVector<f64>, alpha2: f64) -> f64 {
        let n = self.design.n_points() as f64;
        let nu = &self.z - &self.phi * beta;
        let quad = nu.dot(&self.chol_sigma.solve(&nu));
        let half_log_det: f64 =
            self.chol_sigma.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * n * (2.0 * std::f64::consts::PI * alpha2).ln() - half_log_det
            - quad / (2.0 * alpha2)
    }
}
