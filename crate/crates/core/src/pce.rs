//! Truncated multivariate polynomial chaos basis over probabilists' Hermite
//! polynomials. A basis function is the product He_{a_1}(x_1) * ... * He_{a_d}(x_d)
//! for a multi-index a with |a| <= order; under the standard normal measure the
//! family is orthogonal with E[phi_i phi_j] = delta_ij * prod_k (a_k)!.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Evaluates the probabilists' Hermite polynomial He_n at x by the three-term
/// recurrence He_{n+1} = x He_n - n He_{n-1}.
pub fn hermite_eval(n: usize, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = x;
    for k in 1..n {
        let next = x * cur - (k as f64) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Monomial coefficients of He_n, index = power of x. Integer-valued, exact in f64
/// for the small orders used here.
fn hermite_coeffs(n: usize) -> Vec<f64> {
    let mut prev = vec![1.0];
    if n == 0 {
        return prev;
    }
    let mut cur = vec![0.0, 1.0];
    for k in 1..n {
        // next = shift(cur) - k * prev
        let mut next = vec![0.0; k + 2];
        for (p, &c) in cur.iter().enumerate() {
            next[p + 1] += c;
        }
        for (p, &c) in prev.iter().enumerate() {
            next[p] -= k as f64 * c;
        }
        prev = cur;
        cur = next;
    }
    cur
}

/// All multi-indices of length `n_dim` with total degree <= `order`, graded by
/// total degree and lexicographically within each grade, constant term first.
pub fn gen_multi_indices(n_dim: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(n_dim);
    for total in 0..=order {
        push_compositions(total, n_dim, &mut prefix, &mut out);
    }
    out
}

fn push_compositions(total: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if slots == 0 {
        if total == 0 {
            out.push(prefix.clone());
        }
        return;
    }
    if slots == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        push_compositions(total - first, slots - 1, prefix, out);
        prefix.pop();
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Truncated Hermite chaos basis in `n_dim` variables up to total degree `order`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PceBasis {
    n_dim: usize,
    order: usize,
    indices: Vec<Vec<usize>>,
    norms: Vec<f64>,
}

impl PceBasis {
    /// Builds the basis; `n_dim` must be positive.
    pub fn new(n_dim: usize, order: usize) -> Result<Self> {
        if n_dim == 0 {
            return Err(Error::Invalid("basis dimension must be positive".into()));
        }
        let indices = gen_multi_indices(n_dim, order);
        let norms = indices
            .iter()
            .map(|a| a.iter().map(|&k| factorial(k)).product())
            .collect();
        Ok(Self { n_dim, order, indices, norms })
    }

    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of basis functions, equal to C(n_dim + order, order).
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Multi-indices in enumeration order; index 0 is the constant term.
    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    /// Squared norms E[phi_i^2] under the standard normal measure.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Evaluates every basis function at `theta`.
    pub fn eval(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.n_dim {
            return Err(Error::Dim(format!(
                "basis expects {} coordinates, got {}",
                self.n_dim,
                theta.len()
            )));
        }
        // He values per dimension up to the max order, reused across indices.
        let mut he = vec![vec![0.0; self.order + 1]; self.n_dim];
        for (d, row) in he.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = hermite_eval(k, theta[d]);
            }
        }
        Ok(self
            .indices
            .iter()
            .map(|a| a.iter().enumerate().map(|(d, &k)| he[d][k]).product())
            .collect())
    }
}

fn check_gaussian_args(dim: usize, mu: &[f64], sigma: &DMatrix<f64>) -> Result<()> {
    if mu.len() != dim || sigma.nrows() != dim || sigma.ncols() != dim {
        return Err(Error::Dim(format!(
            "moment arguments disagree: dim {}, mu {}, sigma {}x{}",
            dim,
            mu.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let scale = sigma.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..dim {
        for j in (i + 1)..dim {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Invalid("covariance must be symmetric".into()));
            }
        }
    }
    let eig = sigma.clone().symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * scale {
        return Err(Error::Invalid(format!(
            "covariance is not positive semidefinite (min eigenvalue {min:.3e})"
        )));
    }
    Ok(())
}

/// E[prod_i y_i^{k_i}] for centered jointly Gaussian y with covariance `sigma`,
/// by summing over pairings. `vars` lists each variable index with multiplicity.
fn central_moment(vars: &[usize], sigma: &DMatrix<f64>) -> f64 {
    if vars.is_empty() {
        return 1.0;
    }
    if vars.len() % 2 == 1 {
        return 0.0;
    }
    let v0 = vars[0];
    let mut acc = 0.0;
    for j in 1..vars.len() {
        let s = sigma[(v0, vars[j])];
        if s == 0.0 {
            continue;
        }
        let rest: Vec<usize> = vars[1..]
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j - 1)
            .map(|(_, &v)| v)
            .collect();
        acc += s * central_moment(&rest, sigma);
    }
    acc
}

fn moment_unchecked(alpha: &[usize], mu: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let d = alpha.len();
    // Binomial expansion of prod (y_i + mu_i)^{alpha_i} over sub-indices k <= alpha.
    let mut k = vec![0usize; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for i in 0..d {
            w *= binomial(alpha[i], k[i]) * mu[i].powi((alpha[i] - k[i]) as i32);
        }
        if w != 0.0 {
            let mut vars = Vec::with_capacity(k.iter().sum());
            for (i, &ki) in k.iter().enumerate() {
                vars.extend(std::iter::repeat(i).take(ki));
            }
            total += w * central_moment(&vars, sigma);
        }
        // Mixed-radix increment of k within 0..=alpha.
        let mut pos = 0;
        loop {
            if pos == d {
                return total;
            }
            if k[pos] < alpha[pos] {
                k[pos] += 1;
                break;
            }
            k[pos] = 0;
            pos += 1;
        }
    }
}

/// E[prod_i x_i^{alpha_i}] for x ~ N(mu, sigma), exact via Isserlis pairings of the
/// centered variable and binomial expansion of the mean shift.
pub fn gaussian_moment(alpha: &[usize], mu: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    check_gaussian_args(alpha.len(), mu, sigma)?;
    Ok(moment_unchecked(alpha, mu, sigma))
}

/// E[phi_i(x)] for every basis function, x ~ N(mu, sigma), by expanding each
/// Hermite product into monomials.
pub fn expectation_phi_gaussian(
    basis: &PceBasis,
    mu: &[f64],
    sigma: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    check_gaussian_args(basis.n_dim(), mu, sigma)?;
    let coeffs: Vec<Vec<f64>> = (0..=basis.order()).map(hermite_coeffs).collect();
    let mut out = Vec::with_capacity(basis.len());
    for alpha in basis.indices() {
        // Iterate the monomials of prod_d He_{alpha_d}(x_d): powers k_d <= alpha_d
        // with coefficient prod_d coeffs[alpha_d][k_d].
        let d = alpha.len();
        let mut k = vec![0usize; d];
        let mut acc = 0.0;
        loop {
            let mut c = 1.0;
            for i in 0..d {
                c *= coeffs[alpha[i]][k[i]];
            }
            if c != 0.0 {
                acc += c * moment_unchecked(&k, mu, sigma);
            }
            let mut pos = 0;
            let done = loop {
                if pos == d {
                    break true;
                }
                if k[pos] < alpha[pos] {
                    k[pos] += 1;
                    break false;
                }
                k[pos] = 0;
                pos += 1;
            };
            if done {
                break;
            }
        }
        out.push(acc);
    }
    Ok(out)
}
