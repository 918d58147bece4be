//! Moment estimation for zeta = f(theta), theta ~ N(0, I), from function values on
//! a small deterministic design. A Gaussian process with a Hermite-chaos trend is
//! fitted to the design values; expectations of the resulting posterior against the
//! input measure have closed forms, so E[zeta] and V[zeta] reduce to a few cached
//! matrix-vector products per response vector.
//!
//! All kernel expectations are taken in correlation form (the signal variance is
//! divided out) and multiplied back by the fitted alpha^2 online.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{corr_cholesky, design_matrix};
use crate::pce::{expectation_phi_gaussian, PceBasis};
use crate::sampling::SampleDesign;

/// Design, trend order, and lengthscales identifying one estimator family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GppceConfig {
    pub design: SampleDesign,
    /// Total degree of the Hermite-chaos trend.
    pub order: usize,
    pub lambda: Vec<f64>,
}

/// Mean and variance estimates for a transformed standard-normal variable.
/// `var_mean` is the variance of the posterior-mean surrogate alone; `var_gp`
/// adds the averaged posterior variance and is never smaller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub var_mean: f64,
    pub var_gp: f64,
    pub alpha2: f64,
}

/// E[r(theta, theta_i)] over theta ~ N(0, I) for every design point, with
/// r the squared-exponential correlation.
pub fn exp_corr_vec(design: &SampleDesign, lambda: &[f64]) -> Result<Vec<f64>> {
    check_lambda(design, lambda)?;
    let mut out = Vec::with_capacity(design.n_points());
    for p in design.rows() {
        let mut log_v = 0.0;
        for (k, &l) in lambda.iter().enumerate() {
            let l2 = l * l;
            log_v += -p[k] * p[k] / (2.0 * (1.0 + l2)) - 0.5 * (1.0 + 1.0 / l2).ln();
        }
        out.push(log_v.exp());
    }
    Ok(out)
}

/// M_rr[i][j] = E[r(theta, theta_i) r(theta, theta_j)], assembled per dimension in
/// log space; the factors span hundreds of orders of magnitude at short
/// lengthscales even though every entry lies in (0, 1].
pub fn exp_corr_outer(design: &SampleDesign, lambda: &[f64]) -> Result<DMatrix<f64>> {
    check_lambda(design, lambda)?;
    let n = design.n_points();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (pi, pj) = (design.point(i), design.point(j));
            let mut log_v = 0.0;
            for (k, &l) in lambda.iter().enumerate() {
                let l2 = l * l;
                let r_cap = 1.0 + 2.0 / l2;
                let lin = (pi[k] + pj[k]) / l2;
                log_v += -(pi[k] * pi[k] + pj[k] * pj[k]) / (2.0 * l2)
                    + lin * lin / (2.0 * r_cap)
                    - 0.5 * r_cap.ln();
            }
            let v = log_v.exp();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// E[m(theta)^2] = sum_i beta_i^2 E[phi_i^2] for a chaos trend with orthogonal
/// basis functions.
pub fn exp_mean_sq(beta: &DVector<f64>, norms: &[f64]) -> Result<f64> {
    if beta.len() != norms.len() {
        return Err(Error::Dim(format!(
            "{} coefficients against {} norms",
            beta.len(),
            norms.len()
        )));
    }
    Ok(beta.iter().zip(norms).map(|(b, n)| b * b * n).sum())
}

/// Cross expectations Exm[j][i] = E[phi_j(theta) r(theta, theta_i)]. The product
/// of the correlation with the standard normal density is an unnormalized Gaussian
/// centered at theta_i / (1 + lambda^2), so each column is E[r] times the chaos
/// expectations under that tilted Gaussian.
pub fn exp_mean_times_corr(
    design: &SampleDesign,
    basis: &PceBasis,
    lambda: &[f64],
) -> Result<DMatrix<f64>> {
    check_lambda(design, lambda)?;
    if basis.n_dim() != design.n_dim() {
        return Err(Error::Dim(format!(
            "basis dimension {} differs from design dimension {}",
            basis.n_dim(),
            design.n_dim()
        )));
    }
    let mu_r = exp_corr_vec(design, lambda)?;
    let d = design.n_dim();
    let mut sigma_tilt = DMatrix::zeros(d, d);
    for (k, &l) in lambda.iter().enumerate() {
        let l2 = l * l;
        sigma_tilt[(k, k)] = l2 / (1.0 + l2);
    }
    let mut out = DMatrix::zeros(basis.len(), design.n_points());
    for (i, p) in design.rows().enumerate() {
        let mu_tilt: Vec<f64> = p
            .iter()
            .zip(lambda)
            .map(|(&t, &l)| t / (1.0 + l * l))
            .collect();
        let e_phi = expectation_phi_gaussian(basis, &mu_tilt, &sigma_tilt)?;
        for (j, &v) in e_phi.iter().enumerate() {
            out[(j, i)] = mu_r[i] * v;
        }
    }
    Ok(out)
}

/// Second-moment matrix of the joined vector kappa = [phi(theta); r(theta, .)]:
/// diag of basis norms, the cross block, and M_rr.
pub fn exp_kappa_outer(
    design: &SampleDesign,
    basis: &PceBasis,
    lambda: &[f64],
) -> Result<DMatrix<f64>> {
    let n_phi = basis.len();
    let n_s = design.n_points();
    let exm = exp_mean_times_corr(design, basis, lambda)?;
    let m_rr = exp_corr_outer(design, lambda)?;
    let mut m = DMatrix::zeros(n_phi + n_s, n_phi + n_s);
    for (j, &norm) in basis.norms().iter().enumerate() {
        m[(j, j)] = norm;
    }
    for j in 0..n_phi {
        for i in 0..n_s {
            m[(j, n_phi + i)] = exm[(j, i)];
            m[(n_phi + i, j)] = exm[(j, i)];
        }
    }
    for i in 0..n_s {
        for j in 0..n_s {
            m[(n_phi + i, n_phi + j)] = m_rr[(i, j)];
        }
    }
    Ok(m)
}

fn check_lambda(design: &SampleDesign, lambda: &[f64]) -> Result<()> {
    if lambda.len() != design.n_dim() {
        return Err(Error::Dim(format!(
            "{} lengthscales for a {}-dimensional design",
            lambda.len(),
            design.n_dim()
        )));
    }
    if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::Invalid("lengthscales must be positive and finite".into()));
    }
    Ok(())
}

/// Offline matrices turning a response vector into moment estimates. Everything
/// here depends only on the design, trend order, and lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GppcePrecompute {
    config: GppceConfig,
    basis: PceBasis,
    /// Basis evaluated on the design, n_s x n_phi.
    phi: DMatrix<f64>,
    /// Trend projection, beta = a z, n_phi x n_s.
    a: DMatrix<f64>,
    /// Sigma^-1 mu_r; contributes the posterior-correction to the mean.
    b: DVector<f64>,
    /// tr(M_kappa_kappa K^-1), the averaged fraction of explained variance.
    c: f64,
    /// Exm Sigma^-1, n_phi x n_s. The classical row vector d depends on beta and
    /// is recovered online as beta' * d_cross.
    d_cross: DMatrix<f64>,
    /// Sigma^-1 / n_s; the residual quadratic form yields alpha2.
    e_mat: DMatrix<f64>,
    /// Sigma^-1 M_rr Sigma^-1.
    f_mat: DMatrix<f64>,
    phi_norms: Vec<f64>,
    jitter: f64,
}

/// Builds the offline bundle for one estimator family. Requires strictly more
/// design points than basis functions so the residual variance is identified.
pub fn precompute(config: &GppceConfig) -> Result<GppcePrecompute> {
    let design = &config.design;
    let basis = PceBasis::new(design.n_dim(), config.order)?;
    check_lambda(design, &config.lambda)?;
    let n_s = design.n_points();
    let n_phi = basis.len();
    if n_s <= n_phi {
        return Err(Error::Invalid(format!(
            "need n_s > n_phi, got n_s = {n_s} with n_phi = {n_phi}"
        )));
    }

    let (sigma, chol, jitter) = corr_cholesky(design, &config.lambda)?;
    let phi = design_matrix(design, &basis)?;

    let sig_inv_phi = chol.solve(&phi);
    let s = phi.transpose() * &sig_inv_phi;
    let chol_s = s.cholesky().ok_or_else(|| {
        Error::LinAlg("trend normal matrix is singular on this design".into())
    })?;
    let a = chol_s.solve(&sig_inv_phi.transpose());

    let mu_r = DVector::from_vec(exp_corr_vec(design, &config.lambda)?);
    let b = chol.solve(&mu_r);

    let m_rr = exp_corr_outer(design, &config.lambda)?;
    let f_half = chol.solve(&m_rr);
    let f_mat = chol.solve(&f_half.transpose());
    let f_mat = (&f_mat + f_mat.transpose()) * 0.5;

    let exm = exp_mean_times_corr(design, &basis, &config.lambda)?;
    let d_cross = chol.solve(&exm.transpose()).transpose();

    let e_mat = chol.inverse() / n_s as f64;

    // c through one indefinite solve of the bordered system K = [[0, Phi'], [Phi, Sigma]].
    let dim = n_phi + n_s;
    let mut k = DMatrix::zeros(dim, dim);
    for i in 0..n_s {
        for j in 0..n_phi {
            k[(n_phi + i, j)] = phi[(i, j)];
            k[(j, n_phi + i)] = phi[(i, j)];
        }
        for j in 0..n_s {
            k[(n_phi + i, n_phi + j)] = sigma[(i, j)];
        }
    }
    let m_kk = exp_kappa_outer(design, &basis, &config.lambda)?;
    let lu = k.lu();
    let solved = lu
        .solve(&m_kk)
        .ok_or_else(|| Error::LinAlg("bordered kernel system is singular".into()))?;
    let c = solved.trace();

    let pre = GppcePrecompute {
        config: config.clone(),
        phi_norms: basis.norms().to_vec(),
        basis,
        phi,
        a,
        b,
        c,
        d_cross,
        e_mat,
        f_mat,
        jitter,
    };
    if !pre.all_finite() {
        return Err(Error::NonFinite("precompute produced non-finite entries".into()));
    }
    Ok(pre)
}

impl GppcePrecompute {
    pub fn config(&self) -> &GppceConfig {
        &self.config
    }

    pub fn basis(&self) -> &PceBasis {
        &self.basis
    }

    pub fn n_points(&self) -> usize {
        self.config.design.n_points()
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn phi_norms(&self) -> &[f64] {
        &self.phi_norms
    }

    fn all_finite(&self) -> bool {
        self.phi.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.c.is_finite()
            && self.d_cross.iter().all(|v| v.is_finite())
            && self.e_mat.iter().all(|v| v.is_finite())
            && self.f_mat.iter().all(|v| v.is_finite())
    }

    /// Structural consistency of a deserialized bundle.
    pub fn validate(&self) -> Result<()> {
        let n_s = self.config.design.n_points();
        let n_phi = self.basis.len();
        let ok = self.phi.shape() == (n_s, n_phi)
            && self.a.shape() == (n_phi, n_s)
            && self.b.len() == n_s
            && self.d_cross.shape() == (n_phi, n_s)
            && self.e_mat.shape() == (n_s, n_s)
            && self.f_mat.shape() == (n_s, n_s)
            && self.phi_norms.len() == n_phi
            && self.basis.n_dim() == self.config.design.n_dim()
            && self.basis.order() == self.config.order;
        if !ok {
            return Err(Error::Invalid("precompute bundle shapes are inconsistent".into()));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("precompute bundle has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Turns design responses into moment estimates using the offline bundle.
pub fn estimate(pre: &GppcePrecompute, z: &[f64]) -> Result<MomentEstimate> {
    let n_s = pre.config.design.n_points();
    if z.len() != n_s {
        return Err(Error::Dim(format!("{} responses for {n_s} design points", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("responses contain non-finite values".into()));
    }
    let zv = DVector::from_column_slice(z);
    let beta = &pre.a * &zv;
    let nu = &zv - &pre.phi * &beta;
    let alpha2 = nu.dot(&(&pre.e_mat * &nu)).max(0.0);
    let mean = beta[0] + pre.b.dot(&nu);
    let mu_m2: f64 = beta
        .iter()
        .zip(&pre.phi_norms)
        .map(|(b, n)| b * b * n)
        .sum();
    let cross = 2.0 * beta.dot(&(&pre.d_cross * &nu));
    let quad = nu.dot(&(&pre.f_mat * &nu));
    let var_mean = (mu_m2 + cross + quad - mean * mean).max(0.0);
    let var_gp = var_mean + alpha2 * (1.0 - pre.c).max(0.0);
    Ok(MomentEstimate { mean, var_mean, var_gp, alpha2 })
}

/// Plain chaos regression on the design: ridge least squares for the coefficients,
/// then mean = c_0 and variance = sum_{i>0} c_i^2 E[phi_i^2].
pub fn pce_estimate(
    design: &SampleDesign,
    order: usize,
    z: &[f64],
    ridge: f64,
) -> Result<(f64, f64)> {
    if z.len() != design.n_points() {
        return Err(Error::Dim(format!(
            "{} responses for {} design points",
            z.len(),
            design.n_points()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Invalid("ridge must be nonnegative".into()));
    }
    let basis = PceBasis::new(design.n_dim(), order)?;
    let phi = design_matrix(design, &basis)?;
    let mut normal = phi.transpose() * &phi;
    for i in 0..normal.nrows() {
        normal[(i, i)] += ridge;
    }
    let chol = normal.cholesky().ok_or_else(|| {
        Error::LinAlg("normal equations are singular; increase ridge or enlarge the design".into())
    })?;
    let coeff = chol.solve(&(phi.transpose() * DVector::from_column_slice(z)));
    let mean = coeff[0];
    let var: f64 = coeff
        .iter()
        .zip(basis.norms())
        .skip(1)
        .map(|(c, n)| c * c * n)
        .sum();
    Ok((mean, var))
}

/// Symmetric sigma-point set: the origin plus +-sqrt(n + kappa) along each axis.
/// Weights are kappa/(n+kappa) at the center and 1/(2(n+kappa)) elsewhere.
pub fn sigma_points(n_dim: usize, kappa: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if n_dim == 0 {
        return Err(Error::Invalid("sigma points need at least one dimension".into()));
    }
    let shift = n_dim as f64 + kappa;
    if shift <= 0.0 {
        return Err(Error::Invalid(format!(
            "n + kappa must be positive, got {shift}"
        )));
    }
    let step = shift.sqrt();
    let mut points = vec![vec![0.0; n_dim]];
    let mut weights = vec![kappa / shift];
    for i in 0..n_dim {
        for sign in [1.0, -1.0] {
            let mut p = vec![0.0; n_dim];
            p[i] = sign * step;
            points.push(p);
            weights.push(0.5 / shift);
        }
    }
    Ok((points, weights))
}

/// Weighted mean and variance from values at sigma points; the variance is
/// clamped at zero to absorb negative center weights.
pub fn unscented_moments(values: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if values.len() != weights.len() {
        return Err(Error::Dim(format!(
            "{} values for {} weights",
            values.len(),
            weights.len()
        )));
    }
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    let var: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum();
    Ok((mean, var.max(0.0)))
}

/// Unscented transform of `f` under N(0, I). The default spread parameter is
/// kappa = 3 - n_dim, matching fourth moments on each axis.
pub fn unscented_estimate(
    n_dim: usize,
    kappa: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(f64, f64)> {
    let (points, weights) = sigma_points(n_dim, kappa)?;
    let mut values = Vec::with_capacity(points.len());
    for p in &points {
        values.push(f(p)?);
    }
    unscented_moments(&values, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{corr_matrix, fit_lengthscales, se_corr};
    use crate::sampling::{make_design, Scheme};
    use approx::assert_relative_eq;

    fn reference_config(n_s: usize, order: usize) -> GppceConfig {
        GppceConfig {
            design: make_design(n_s, 3, Scheme::Sobol, 0).unwrap(),
            order,
            lambda: vec![0.22, 0.77, 0.55],
        }
    }

    #[test]
    fn exp_corr_vec_unit_lengthscale_values() {
        let d = SampleDesign::from_raw(1, vec![0.0, 2.0]);
        let v = exp_corr_vec(&d, &[1.0]).unwrap();
        assert_relative_eq!(v[0], 0.5f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(v[1], 0.5f64.sqrt() * (-1.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn exp_corr_vec_long_lengthscale_tends_to_one() {
        let d = SampleDesign::from_raw(2, vec![1.0, -2.0]);
        let v = exp_corr_vec(&d, &[1e6, 1e6]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exp_corr_outer_origin_unit_lengthscale() {
        let d = SampleDesign::from_raw(1, vec![0.0]);
        let m = exp_corr_outer(&d, &[1.0]).unwrap();
        assert_relative_eq!(m[(0, 0)], 1.0 / 3.0f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn exp_corr_outer_symmetric_bounded_and_finite_at_short_lengthscale() {
        let d = make_design(10, 3, Scheme::Sobol, 0).unwrap();
        for lambda in [[0.05, 0.05, 0.05], [0.22, 0.77, 0.55]] {
            let m = exp_corr_outer(&d, &lambda).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    assert_eq!(m[(i, j)], m[(j, i)]);
                    // Entries between distant points underflow to zero at the
                    // shortest lengthscale.
                    assert!(m[(i, j)].is_finite() && m[(i, j)] >= 0.0 && m[(i, j)] <= 1.0);
                }
            }
        }
    }

    #[test]
    fn closed_form_expectations_match_monte_carlo() {
        let design = make_design(6, 2, Scheme::Sobol, 0).unwrap();
        let lambda = [0.6, 1.1];
        let basis = PceBasis::new(2, 2).unwrap();
        let mu_r = exp_corr_vec(&design, &lambda).unwrap();
        let m_rr = exp_corr_outer(&design, &lambda).unwrap();
        let exm = exp_mean_times_corr(&design, &basis, &lambda).unwrap();

        let n = 200_000usize;
        let samples = make_design(n, 2, Scheme::Mc, 31).unwrap();
        let mut mc_mu = vec![0.0; 6];
        let mut mc_mu2 = vec![0.0; 6];
        let mut mc_rr: DMatrix<f64> = DMatrix::zeros(6, 6);
        let mut mc_exm: DMatrix<f64> = DMatrix::zeros(basis.len(), 6);
        for s in samples.rows() {
            let r: Vec<f64> = (0..6)
                .map(|i| se_corr(s, design.point(i), &lambda))
                .collect();
            let phi = basis.eval(s).unwrap();
            for i in 0..6 {
                mc_mu[i] += r[i];
                mc_mu2[i] += r[i] * r[i];
                for j in 0..6 {
                    mc_rr[(i, j)] += r[i] * r[j];
                }
                for (jp, &p) in phi.iter().enumerate() {
                    mc_exm[(jp, i)] += p * r[i];
                }
            }
        }
        let nf = n as f64;
        for i in 0..6 {
            let mean = mc_mu[i] / nf;
            let se = ((mc_mu2[i] / nf - mean * mean).max(0.0) / nf).sqrt();
            assert!(
                (mu_r[i] - mean).abs() <= 4.0 * se + 1e-9,
                "mu_r[{i}]: closed {} vs mc {mean} (se {se})",
                mu_r[i]
            );
            for j in 0..6 {
                // Second moments get a generous band; their spread is larger.
                let mc = mc_rr[(i, j)] / nf;
                assert!(
                    (m_rr[(i, j)] - mc).abs() <= 6.0 * se.max(1e-4),
                    "m_rr[({i},{j})]: closed {} vs mc {mc}",
                    m_rr[(i, j)]
                );
            }
            for jp in 0..basis.len() {
                let mc = mc_exm[(jp, i)] / nf;
                assert!(
                    (exm[(jp, i)] - mc).abs() <= 0.01,
                    "exm[({jp},{i})]: closed {} vs mc {mc}",
                    exm[(jp, i)]
                );
            }
        }
    }

    #[test]
    fn exp_mean_sq_examples() {
        let norms = [1.0, 1.0, 2.0];
        let only_const = DVector::from_vec(vec![2.5, 0.0, 0.0]);
        assert_eq!(exp_mean_sq(&only_const, &norms).unwrap(), 6.25);
        let beta = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(exp_mean_sq(&beta, &norms).unwrap(), 1.0 + 4.0 + 18.0);
        assert!(exp_mean_sq(&beta, &norms[..2]).is_err());
    }

    #[test]
    fn exp_mean_times_corr_order_zero_row_is_exp_corr() {
        let design = make_design(8, 3, Scheme::Sobol, 0).unwrap();
        let lambda = [0.5, 0.9, 0.7];
        let basis = PceBasis::new(3, 0).unwrap();
        let exm = exp_mean_times_corr(&design, &basis, &lambda).unwrap();
        let mu_r = exp_corr_vec(&design, &lambda).unwrap();
        for i in 0..8 {
            assert_relative_eq!(exm[(0, i)], mu_r[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn exp_mean_times_corr_odd_rows_vanish_at_origin_point() {
        let design = SampleDesign::from_raw(2, vec![0.0, 0.0]);
        let basis = PceBasis::new(2, 2).unwrap();
        let exm = exp_mean_times_corr(&design, &basis, &[0.8, 1.2]).unwrap();
        // Tilted Gaussian centered at zero keeps odd Hermite expectations at zero.
        for (j, alpha) in basis.indices().iter().enumerate() {
            if alpha.iter().sum::<usize>() % 2 == 1 {
                assert!(exm[(j, 0)].abs() < 1e-14, "row {j} = {}", exm[(j, 0)]);
            }
        }
    }

    #[test]
    fn exp_kappa_outer_blocks() {
        let design = make_design(5, 2, Scheme::Sobol, 0).unwrap();
        let lambda = [0.7, 1.3];
        let basis = PceBasis::new(2, 2).unwrap();
        let m = exp_kappa_outer(&design, &basis, &lambda).unwrap();
        let n_phi = basis.len();
        for i in 0..n_phi {
            for j in 0..n_phi {
                let want = if i == j { basis.norms()[i] } else { 0.0 };
                assert_eq!(m[(i, j)], want);
            }
        }
        let exm = exp_mean_times_corr(&design, &basis, &lambda).unwrap();
        let m_rr = exp_corr_outer(&design, &lambda).unwrap();
        for j in 0..n_phi {
            for i in 0..5 {
                assert_eq!(m[(j, n_phi + i)], exm[(j, i)]);
                assert_eq!(m[(n_phi + i, j)], exm[(j, i)]);
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[(n_phi + i, n_phi + j)], m_rr[(i, j)]);
            }
        }
    }

    #[test]
    fn precompute_reference_shapes_and_invariants() {
        let pre = precompute(&reference_config(15, 2)).unwrap();
        assert_eq!(pre.basis().len(), 10);
        // E and F are symmetric positive semidefinite by construction.
        for m in [&pre.e_mat, &pre.f_mat] {
            let sym = (m - m.transpose()).amax();
            assert!(sym < 1e-10, "asymmetry {sym}");
            let min_eig = m
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min_eig > -1e-10, "min eigenvalue {min_eig}");
        }
        // The explained-variance trace stays below one; its complement feeds var_gp.
        // Short lengthscales push it far below zero, which is legitimate.
        assert!(pre.c() < 1.0 + 1e-9, "c = {}", pre.c());
        // The trace equals the average of kappa' K^-1 kappa over the input
        // measure, so a Monte Carlo average through an independently assembled
        // bordered solve must agree with it.
        let config = pre.config();
        let basis = pre.basis();
        let n_phi = basis.len();
        let n_s = config.design.n_points();
        let sigma = corr_matrix(&config.design, &config.lambda, pre.jitter()).unwrap();
        let phi = design_matrix(&config.design, basis).unwrap();
        let dim = n_phi + n_s;
        let mut k = DMatrix::zeros(dim, dim);
        for i in 0..n_s {
            for j in 0..n_phi {
                k[(n_phi + i, j)] = phi[(i, j)];
                k[(j, n_phi + i)] = phi[(i, j)];
            }
            for j in 0..n_s {
                k[(n_phi + i, n_phi + j)] = sigma[(i, j)];
            }
        }
        let lu = k.lu();
        let n = 40_000usize;
        let draws = make_design(n, 3, Scheme::Mc, 5).unwrap();
        let (mut acc, mut acc2) = (0.0, 0.0);
        for t in draws.rows() {
            let mut kappa = DVector::zeros(dim);
            for (j, &p) in basis.eval(t).unwrap().iter().enumerate() {
                kappa[j] = p;
            }
            for i in 0..n_s {
                kappa[n_phi + i] = se_corr(t, config.design.point(i), &config.lambda);
            }
            let v = kappa.dot(&lu.solve(&kappa).unwrap());
            acc += v;
            acc2 += v * v;
        }
        let mc = acc / n as f64;
        let se = ((acc2 / n as f64 - mc * mc).max(0.0) / n as f64).sqrt();
        assert!(
            (pre.c() - mc).abs() <= 5.0 * se + 1e-6,
            "c = {} vs mc {mc} (se {se})",
            pre.c()
        );
    }

    #[test]
    fn precompute_rejects_small_designs() {
        assert!(precompute(&reference_config(10, 2)).is_err());
        assert!(precompute(&reference_config(9, 2)).is_err());
    }

    #[test]
    fn precompute_is_bit_deterministic() {
        let a = precompute(&reference_config(15, 2)).unwrap();
        let b = precompute(&reference_config(15, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn estimate_is_exact_on_trend_polynomials() {
        let pre = precompute(&reference_config(15, 2)).unwrap();
        let basis = pre.basis().clone();
        let beta_true: Vec<f64> = (0..basis.len()).map(|i| 1.0 - 0.37 * i as f64).collect();
        let z: Vec<f64> = pre
            .config()
            .design
            .rows()
            .map(|p| {
                basis
                    .eval(p)
                    .unwrap()
                    .iter()
                    .zip(&beta_true)
                    .map(|(phi, b)| phi * b)
                    .sum()
            })
            .collect();
        let est = estimate(&pre, &z).unwrap();
        let want_mean = beta_true[0];
        let want_var: f64 = beta_true
            .iter()
            .zip(basis.norms())
            .skip(1)
            .map(|(b, n)| b * b * n)
            .sum();
        assert_relative_eq!(est.mean, want_mean, max_relative = 1e-8);
        assert_relative_eq!(est.var_mean, want_var, max_relative = 1e-8);
        assert!(est.alpha2 < 1e-12, "alpha2 {}", est.alpha2);
        assert_relative_eq!(est.var_gp, est.var_mean, max_relative = 1e-8);
    }

    #[test]
    fn estimate_known_quadratic_moments() {
        // zeta = 1 + 2 He_1(t1) + 3 He_2(t2): mean 1, variance 4 + 18 = 22.
        let pre = precompute(&reference_config(15, 2)).unwrap();
        let z: Vec<f64> = pre
            .config()
            .design
            .rows()
            .map(|p| 1.0 + 2.0 * p[0] + 3.0 * (p[1] * p[1] - 1.0))
            .collect();
        let est = estimate(&pre, &z).unwrap();
        assert_relative_eq!(est.mean, 1.0, max_relative = 1e-8, epsilon = 1e-8);
        assert_relative_eq!(est.var_mean, 22.0, max_relative = 1e-7);
        assert_relative_eq!(est.var_gp, 22.0, max_relative = 1e-7);
    }

    #[test]
    fn estimate_tracks_smooth_nonpolynomial_target() {
        // Ground truth from a large Monte Carlo; with lengthscales fitted to the
        // response, the 25-point estimator should land close on this gentle
        // surface.
        let design = make_design(25, 3, Scheme::Sobol, 0).unwrap();
        let f = |p: &[f64]| (0.9 * p[0]).sin() + 0.3 * p[1] * p[2] + 0.2 * p[2];
        let z: Vec<f64> = design.rows().map(f).collect();
        let basis = PceBasis::new(3, 2).unwrap();
        let lambda = fit_lengthscales(&design, &basis, &z).unwrap();
        let config = GppceConfig { design, order: 2, lambda };
        let pre = precompute(&config).unwrap();
        let est = estimate(&pre, &z).unwrap();

        let n = 200_000usize;
        let mc = make_design(n, 3, Scheme::Mc, 77).unwrap();
        let vals: Vec<f64> = mc.rows().map(f).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;

        assert!((est.mean - mean).abs() < 0.02 * (1.0 + mean.abs()), "{} vs {mean}", est.mean);
        assert!(
            (est.var_gp - var).abs() < 0.15 * var,
            "var_gp {} vs mc {var}",
            est.var_gp
        );
    }

    #[test]
    fn estimate_variance_ordering_and_nonnegativity() {
        let pre = precompute(&reference_config(15, 2)).unwrap();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            // SplitMix64 step, plenty for test fodder.
            state = state.wrapping_add(0x9e3779b97f4a7c15);
            let mut x = state;
            x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
            ((x ^ (x >> 31)) as f64 / u64::MAX as f64) * 6.0 - 3.0
        };
        for _ in 0..200 {
            let z: Vec<f64> = (0..15).map(|_| next()).collect();
            let est = estimate(&pre, &z).unwrap();
            assert!(est.var_mean >= 0.0);
            assert!(est.var_gp >= est.var_mean);
            assert!(est.alpha2 >= 0.0);
        }
    }

    #[test]
    fn estimate_affine_equivariance() {
        let pre = precompute(&reference_config(15, 2)).unwrap();
        let z: Vec<f64> = pre
            .config()
            .design
            .rows()
            .map(|p| (1.3 * p[0]).cos() + 0.4 * p[1] - 0.1 * p[2].powi(3))
            .collect();
        let base = estimate(&pre, &z).unwrap();
        for (a, b) in [(2.0, -1.5), (-0.7, 3.0), (0.5, 0.0)] {
            let zt: Vec<f64> = z.iter().map(|v| a * v + b).collect();
            let est = estimate(&pre, &zt).unwrap();
            assert_relative_eq!(est.mean, a * base.mean + b, max_relative = 1e-9, epsilon = 1e-9);
            assert_relative_eq!(est.var_mean, a * a * base.var_mean, max_relative = 1e-9);
            assert_relative_eq!(est.var_gp, a * a * base.var_gp, max_relative = 1e-9);
        }
    }

    #[test]
    fn estimate_rejects_bad_input() {
        let pre = precompute(&reference_config(15, 2)).unwrap();
        assert!(estimate(&pre, &vec![0.0; 14]).is_err());
        let mut z = vec![0.0; 15];
        z[3] = f64::NAN;
        assert!(estimate(&pre, &z).is_err());
    }

    #[test]
    fn order_zero_estimate_matches_constant_trend_gp_formulas() {
        // Independent route: plain-GP moments with a constant trend are
        // mean = beta0 + mu_r' Sigma^-1 nu and var_mean = nu' Sigma^-1 M_rr Sigma^-1 nu
        // plus the beta0 cancellation; compare against the bundled estimator.
        let design = make_design(12, 3, Scheme::Sobol, 0).unwrap();
        let lambda = vec![0.6, 0.9, 0.7];
        let config = GppceConfig { design: design.clone(), order: 0, lambda: lambda.clone() };
        let pre = precompute(&config).unwrap();
        let z: Vec<f64> = design.rows().map(|p| (0.8 * p[0]).sin() + p[1] * 0.2).collect();
        let est = estimate(&pre, &z).unwrap();

        let sigma = crate::gp::corr_matrix(&design, &lambda, pre.jitter()).unwrap();
        let sigma_inv = sigma.try_inverse().unwrap();
        let ones = DVector::from_element(12, 1.0);
        let zv = DVector::from_column_slice(&z);
        let denom = (ones.transpose() * &sigma_inv * &ones)[(0, 0)];
        let beta0 = (ones.transpose() * &sigma_inv * &zv)[(0, 0)] / denom;
        let nu = &zv - &ones * beta0;
        let mu_r = DVector::from_vec(exp_corr_vec(&design, &lambda).unwrap());
        let mean = beta0 + (mu_r.transpose() * &sigma_inv * &nu)[(0, 0)];
        let m_rr = exp_corr_outer(&design, &lambda).unwrap();
        let w = &sigma_inv * &nu;
        let second = beta0 * beta0 + 2.0 * beta0 * (mu_r.transpose() * &w)[(0, 0)]
            + (w.transpose() * &m_rr * &w)[(0, 0)];
        let var_mean = second - mean * mean;

        assert_relative_eq!(est.mean, mean, max_relative = 1e-8);
        assert_relative_eq!(est.var_mean, var_mean.max(0.0), max_relative = 1e-6, epsilon = 1e-10);
    }

    #[test]
    fn pce_estimate_recovers_polynomials() {
        let design = make_design(15, 3, Scheme::Sobol, 0).unwrap();
        let basis = PceBasis::new(3, 2).unwrap();
        let coeff: Vec<f64> = (0..10).map(|i| 0.5 - 0.2 * i as f64).collect();
        let z: Vec<f64> = design
            .rows()
            .map(|p| basis.eval(p).unwrap().iter().zip(&coeff).map(|(a, b)| a * b).sum())
            .collect();
        let (mean, var) = pce_estimate(&design, 2, &z, 0.0).unwrap();
        let want_var: f64 = coeff
            .iter()
            .zip(basis.norms())
            .skip(1)
            .map(|(c, n)| c * c * n)
            .sum();
        assert_relative_eq!(mean, coeff[0], max_relative = 1e-9);
        assert_relative_eq!(var, want_var, max_relative = 1e-9);
        // A small ridge moves the answer only marginally.
        let (mean_r, var_r) = pce_estimate(&design, 2, &z, 1e-8).unwrap();
        assert_relative_eq!(mean_r, mean, max_relative = 1e-6);
        assert_relative_eq!(var_r, var, max_relative = 1e-6);
    }

    #[test]
    fn pce_estimate_constant_response() {
        let design = make_design(12, 2, Scheme::Sobol, 0).unwrap();
        let (mean, var) = pce_estimate(&design, 2, &vec![3.25; 12], 0.0).unwrap();
        assert_relative_eq!(mean, 3.25, max_relative = 1e-12);
        assert!(var < 1e-18);
    }

    #[test]
    fn pce_estimate_singular_without_ridge() {
        // Duplicated points make Phi rank deficient at n_s = n_phi.
        let design = SampleDesign::from_raw(1, vec![0.5, 0.5, -0.5]);
        let z = vec![1.0, 1.0, 0.0];
        assert!(pce_estimate(&design, 2, &z, 0.0).is_err());
        assert!(pce_estimate(&design, 2, &z, 1e-6).is_ok());
    }

    #[test]
    fn sigma_points_weights_and_spread() {
        let (pts, w) = sigma_points(3, 0.0).unwrap();
        assert_eq!(pts.len(), 7);
        assert_eq!(w[0], 0.0);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(pts[1][0].abs(), 3.0f64.sqrt(), max_relative = 1e-12);
        assert!(sigma_points(3, -3.0).is_err());
        assert!(sigma_points(0, 1.0).is_err());
    }

    #[test]
    fn unscented_exact_for_linear_maps() {
        let c = [0.7, -1.2, 0.4];
        let (mean, var) =
            unscented_estimate(3, 0.0, |p| Ok(1.5 + c[0] * p[0] + c[1] * p[1] + c[2] * p[2]))
                .unwrap();
        assert_relative_eq!(mean, 1.5, max_relative = 1e-12);
        let want: f64 = c.iter().map(|v| v * v).sum();
        assert_relative_eq!(var, want, max_relative = 1e-12);
    }

    #[test]
    fn unscented_matches_square_moments_in_one_dimension() {
        let (mean, var) = unscented_estimate(1, 2.0, |p| Ok(p[0] * p[0])).unwrap();
        assert_relative_eq!(mean, 1.0, max_relative = 1e-12);
        assert_relative_eq!(var, 2.0, max_relative = 1e-12);
    }
}
