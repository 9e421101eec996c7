//! Conditional-maximization updates for the factor loadings and noise under the
//! eight PGMM constraint patterns, plus free-parameter counting.
//!
//! With `B_g = Lambda_g' Sigma_g^-1` and
//! `Theta_g = I - B_g Lambda_g + B_g S_g B_g'`, the unconstrained update is
//! `Lambda_g = S_g B_g' Theta_g^-1` and `Psi_g = diag(S_g - Lambda_g B_g S_g)`.
//! Shared loadings or noise replace per-component statistics by pooled ones
//! weighted by `n_g / n`. The updates only ever touch `S_g` through products
//! `S_g M` with thin `M` and through `diag(S_g)`, which is what [`ScatterStats`]
//! exposes; the engine uses the factored form so no `p x p` matrix is built.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{PgmmError, Result};
use crate::mixture::{MixtureParams, Responsibilities, PSI_FLOOR};
use crate::structure::CovarianceStructure;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Access to the weighted scatter matrices `S_g` and their counts `n_g`.
pub trait ScatterStats {
    fn components(&self) -> usize;
    fn dim(&self) -> usize;
    fn counts(&self) -> &DVector<f64>;
    /// `diag(S_g)`.
    fn diagonal(&self, g: usize) -> DVector<f64>;
    /// `S_g m` for a `p x k` matrix `m`.
    fn times(&self, g: usize, m: &DMatrix<f64>) -> DMatrix<f64>;
    /// Leading `k` eigenpairs of `sum_g w_g S_g`, eigenvalues descending.
    fn pooled_top_eigen(&self, weights: &[f64], k: usize) -> (DVector<f64>, DMatrix<f64>);

    fn pooled_weights(&self) -> Vec<f64> {
        let n: f64 = self.counts().sum();
        self.counts().iter().map(|c| c / n).collect()
    }
}

/// Dense scatter matrices `S_g = (1/n_g) sum_i z_ig (x_i - mu_g)(x_i - mu_g)'`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentScatter {
    matrices: Vec<DMatrix<f64>>,
    counts: DVector<f64>,
}

impl ComponentScatter {
    pub fn new(matrices: Vec<DMatrix<f64>>, counts: DVector<f64>) -> Result<Self> {
        if matrices.len() != counts.len() || matrices.is_empty() {
            return Err(PgmmError::contract("one scatter matrix per count required"));
        }
        let p = matrices[0].nrows();
        for m in &matrices {
            if m.nrows() != p || m.ncols() != p {
                return Err(PgmmError::contract("scatter matrices must be square and equal-sized"));
            }
            if (m - m.transpose()).amax() > 1e-10 * (1.0 + m.amax()) {
                return Err(PgmmError::contract("scatter matrix is not symmetric"));
            }
        }
        if counts.iter().any(|&c| !(c >= 0.0)) {
            return Err(PgmmError::contract("counts must be non-negative"));
        }
        Ok(ComponentScatter { matrices, counts })
    }

    pub fn matrix(&self, g: usize) -> &DMatrix<f64> {
        &self.matrices[g]
    }
}

impl ScatterStats for ComponentScatter {
    fn components(&self) -> usize {
        self.matrices.len()
    }

    fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    fn counts(&self) -> &DVector<f64> {
        &self.counts
    }

    fn diagonal(&self, g: usize) -> DVector<f64> {
        self.matrices[g].diagonal()
    }

    fn times(&self, g: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrices[g] * m
    }

    fn pooled_top_eigen(&self, weights: &[f64], k: usize) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.dim();
        let mut pooled = DMatrix::zeros(p, p);
        for (m, w) in self.matrices.iter().zip(weights) {
            pooled += m * *w;
        }
        top_eigen(pooled, k)
    }
}

/// Scatter held as `S_g = F_g' F_g / n_g` with rows of `F_g` equal to
/// `sqrt(z_ig) (x_i - mu_g)`.
#[derive(Debug, Clone)]
pub struct FactoredScatter {
    factors: Vec<DMatrix<f64>>,
    counts: DVector<f64>,
}

impl FactoredScatter {
    /// Materializes the dense equivalent. Only for small `p`.
    pub fn to_dense(&self) -> ComponentScatter {
        ComponentScatter {
            matrices: self
                .factors
                .iter()
                .zip(self.counts.iter())
                .map(|(f, c)| f.transpose() * f / *c)
                .collect(),
            counts: self.counts.clone(),
        }
    }
}

impl ScatterStats for FactoredScatter {
    fn components(&self) -> usize {
        self.factors.len()
    }

    fn dim(&self) -> usize {
        self.factors[0].ncols()
    }

    fn counts(&self) -> &DVector<f64> {
        &self.counts
    }

    fn diagonal(&self, g: usize) -> DVector<f64> {
        let f = &self.factors[g];
        let c = self.counts[g];
        DVector::from_iterator(f.ncols(), f.column_iter().map(|col| col.norm_squared() / c))
    }

    fn times(&self, g: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        let f = &self.factors[g];
        f.transpose() * (f * m) / self.counts[g]
    }

    fn pooled_top_eigen(&self, weights: &[f64], k: usize) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.dim();
        let rows: usize = self.factors.iter().map(|f| f.nrows()).sum();
        let mut stacked = DMatrix::zeros(rows, p);
        let mut offset = 0;
        for ((f, w), c) in self.factors.iter().zip(weights).zip(self.counts.iter()) {
            stacked
                .rows_mut(offset, f.nrows())
                .copy_from(&(f * (w / c).sqrt()));
            offset += f.nrows();
        }
        if p <= rows {
            return top_eigen(stacked.transpose() * &stacked, k);
        }
        // Gram trick: eigenvectors of A'A from those of AA'
        let (values, u) = top_eigen(&stacked * stacked.transpose(), k);
        let mut vectors = stacked.transpose() * u;
        for (c, mut col) in vectors.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm > 0.0 && values[c] > 0.0 {
                col /= norm;
            } else {
                col.fill(0.0);
                col[c.min(p - 1)] = 1.0;
            }
        }
        (values.map(|v| v.max(0.0)), vectors)
    }
}

fn top_eigen(mut m: DMatrix<f64>, k: usize) -> (DVector<f64>, DMatrix<f64>) {
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = k.min(order.len());
    let values = DVector::from_fn(k, |c, _| eig.eigenvalues[order[c]]);
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), k, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn check_scatter_inputs(data: &DataMatrix, resp: &Responsibilities, means: &DMatrix<f64>) -> Result<DVector<f64>> {
    if resp.n() != data.n() || means.nrows() != resp.g() || means.ncols() != data.p() {
        return Err(PgmmError::contract(format!(
            "scatter inputs disagree: data {}x{}, responsibilities {}x{}, means {}x{}",
            data.n(),
            data.p(),
            resp.n(),
            resp.g(),
            means.nrows(),
            means.ncols()
        )));
    }
    let counts = resp.counts();
    if let Some((g, &mass)) = counts.iter().enumerate().find(|(_, &c)| c < 1.0) {
        return Err(PgmmError::EmptyComponent { component: g, mass });
    }
    Ok(counts)
}

/// Rows `sqrt(z_ig) (x_i - mu_g)`.
fn scatter_factor(data: &DataMatrix, resp: &Responsibilities, means: &DMatrix<f64>, g: usize) -> DMatrix<f64> {
    let x = data.values();
    let z = resp.values();
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        z[(i, g)].sqrt() * (x[(i, j)] - means[(g, j)])
    })
}

/// Dense weighted scatter about the supplied means.
pub fn weighted_scatter(data: &DataMatrix, resp: &Responsibilities, means: &DMatrix<f64>) -> Result<ComponentScatter> {
    let counts = check_scatter_inputs(data, resp, means)?;
    let matrices = (0..resp.g())
        .map(|g| {
            let f = scatter_factor(data, resp, means, g);
            let s = f.transpose() * &f / counts[g];
            (&s + s.transpose()) * 0.5
        })
        .collect();
    Ok(ComponentScatter { matrices, counts })
}

/// Same statistics as [`weighted_scatter`] without forming `p x p` matrices.
pub fn factored_scatter(data: &DataMatrix, resp: &Responsibilities, means: &DMatrix<f64>) -> Result<FactoredScatter> {
    let counts = check_scatter_inputs(data, resp, means)?;
    let factors = (0..resp.g())
        .map(|g| scatter_factor(data, resp, means, g))
        .collect();
    Ok(FactoredScatter { factors, counts })
}

/// `Lambda' Sigma^-1` via the Woodbury identity, `q x p`.
fn regression(loadings: &DMatrix<f64>, noise: &DVector<f64>, g: usize) -> Result<DMatrix<f64>> {
    let q = loadings.ncols();
    let mut scaled_t = loadings.transpose();
    for (j, mut col) in scaled_t.column_iter_mut().enumerate() {
        col /= noise[j];
    }
    let mut cap = &scaled_t * loadings;
    for k in 0..q {
        cap[(k, k)] += 1.0;
    }
    let chol = Cholesky::new(cap)
        .ok_or_else(|| PgmmError::numerical(Some(g), "capacitance matrix is not positive definite"))?;
    Ok(chol.solve(&scaled_t))
}

struct ComponentMoments {
    /// `S_g B_g'`, `p x q`.
    sb: DMatrix<f64>,
    theta: DMatrix<f64>,
    diag: DVector<f64>,
}

fn moments(
    scatter: &impl ScatterStats,
    g: usize,
    loadings: &DMatrix<f64>,
    noise: &DVector<f64>,
) -> Result<ComponentMoments> {
    let beta = regression(loadings, noise, g)?;
    let sb = scatter.times(g, &beta.transpose());
    let theta = theta(&beta, loadings, &sb);
    Ok(ComponentMoments {
        sb,
        theta,
        diag: scatter.diagonal(g),
    })
}

fn theta(beta: &DMatrix<f64>, loadings: &DMatrix<f64>, sb: &DMatrix<f64>) -> DMatrix<f64> {
    let q = beta.nrows();
    let mut t = beta * sb - beta * loadings;
    for k in 0..q {
        t[(k, k)] += 1.0;
    }
    (&t + t.transpose()) * 0.5
}

/// Solves `X theta = rhs` for `X` with symmetric positive-definite `theta`.
fn right_solve(rhs: &DMatrix<f64>, theta: &DMatrix<f64>, g: Option<usize>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(theta.clone())
        .ok_or_else(|| PgmmError::numerical(g, "latent second-moment matrix is singular"))?;
    Ok(chol.solve(&rhs.transpose()).transpose())
}

fn row_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |j, _| a.row(j).dot(&b.row(j)))
}

fn floored(v: DVector<f64>) -> DVector<f64> {
    v.map(|x| if x.is_finite() { x.max(PSI_FLOOR) } else { x })
}

fn isotropic(v: &DVector<f64>) -> DVector<f64> {
    let mean = v.mean().max(PSI_FLOOR);
    DVector::from_element(v.len(), mean)
}

fn check_finite(loadings: &[DMatrix<f64>], noise: &[DVector<f64>]) -> Result<()> {
    if loadings.iter().flatten().chain(noise.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(PgmmError::numerical(None, "covariance update produced non-finite values"));
    }
    Ok(())
}

/// One conditional-maximization step for loadings and noise.
pub fn update_covariance(
    structure: CovarianceStructure,
    scatter: &impl ScatterStats,
    current: &MixtureParams,
) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>)> {
    let g_count = current.g();
    let p = current.p();
    if structure != current.structure() {
        return Err(PgmmError::contract(format!(
            "parameters have structure {} but update requested {structure}",
            current.structure()
        )));
    }
    if scatter.components() != g_count || scatter.dim() != p {
        return Err(PgmmError::contract("scatter does not match parameter dimensions"));
    }
    let counts = scatter.counts().clone();
    let pi = scatter.pooled_weights();

    let (loadings, noise) = match (structure.loadings_shared(), structure.noise_shared()) {
        (false, _) => {
            let mut loadings = Vec::with_capacity(g_count);
            let mut residuals = Vec::with_capacity(g_count);
            for g in 0..g_count {
                let m = moments(scatter, g, current.loading(g), current.noise(g))?;
                let l = right_solve(&m.sb, &m.theta, Some(g))?;
                residuals.push(&m.diag - row_dot(&l, &m.sb));
                loadings.push(l);
            }
            let noise = if structure.noise_shared() {
                let pooled = residuals
                    .iter()
                    .zip(&pi)
                    .fold(DVector::zeros(p), |acc, (r, w)| acc + r * *w);
                vec![pooled]
            } else {
                residuals
            };
            (loadings, noise)
        }
        (true, true) => {
            let l_old = current.loading(0);
            let beta = regression(l_old, current.noise(0), 0)?;
            let beta_t = beta.transpose();
            let mut sb = DMatrix::zeros(p, l_old.ncols());
            let mut diag = DVector::zeros(p);
            for g in 0..g_count {
                sb += scatter.times(g, &beta_t) * pi[g];
                diag += scatter.diagonal(g) * pi[g];
            }
            let th = theta(&beta, l_old, &sb);
            let l = right_solve(&sb, &th, None)?;
            let resid = &diag - row_dot(&l, &sb);
            (vec![l], vec![resid])
        }
        (true, false) => {
            let l_old = current.loading(0);
            let q = l_old.ncols();
            let comps: Vec<ComponentMoments> = (0..g_count)
                .map(|g| moments(scatter, g, l_old, current.noise(g)))
                .collect::<Result<_>>()?;
            let l = if structure.isotropic() {
                let mut lhs = DMatrix::zeros(q, q);
                let mut rhs = DMatrix::zeros(p, q);
                for (g, m) in comps.iter().enumerate() {
                    let scale = counts[g] / current.noise(g)[0];
                    lhs += &m.theta * scale;
                    rhs += &m.sb * scale;
                }
                right_solve(&rhs, &lhs, None)?
            } else {
                // row-wise: each row of Lambda solves its own q x q system
                let mut l = DMatrix::zeros(p, q);
                for j in 0..p {
                    let mut lhs = DMatrix::zeros(q, q);
                    let mut rhs = DMatrix::zeros(1, q);
                    for (g, m) in comps.iter().enumerate() {
                        let scale = counts[g] / current.noise(g)[j];
                        lhs += &m.theta * scale;
                        rhs += m.sb.row(j) * scale;
                    }
                    l.row_mut(j).copy_from(&right_solve(&rhs, &lhs, None)?);
                }
                l
            };
            let noise = comps
                .iter()
                .map(|m| {
                    let lt = &l * &m.theta;
                    &m.diag - row_dot(&l, &m.sb) * 2.0 + row_dot(&lt, &l)
                })
                .collect();
            (vec![l], noise)
        }
    };

    let noise: Vec<DVector<f64>> = noise
        .into_iter()
        .map(|v| if structure.isotropic() { isotropic(&v) } else { floored(v) })
        .collect();
    check_finite(&loadings, &noise)?;
    Ok((loadings, noise))
}

/// Starting loadings and noise from the leading eigenpairs of the pooled scatter.
///
/// `Lambda = V_q (D_q - s I)^{1/2}` with `s` the mean of the discarded
/// eigenvalue mass, and `Psi` the residual diagonal of the pooled scatter.
pub fn initial_covariance(
    structure: CovarianceStructure,
    scatter: &impl ScatterStats,
    q: usize,
) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>)> {
    let p = scatter.dim();
    let g_count = scatter.components();
    if q == 0 || q >= p {
        return Err(PgmmError::contract(format!("need 1 <= q < p, got q={q}, p={p}")));
    }
    let pi = scatter.pooled_weights();
    let diag = (0..g_count).fold(DVector::zeros(p), |acc, g| acc + scatter.diagonal(g) * pi[g]);
    let (values, vectors) = scatter.pooled_top_eigen(&pi, q);
    let trace = diag.sum();
    let residual_level = ((trace - values.sum()) / (p - q) as f64).max(0.0);
    let mut l = vectors;
    for (c, mut col) in l.column_iter_mut().enumerate() {
        col *= (values[c] - residual_level).max(0.0).sqrt();
    }
    let resid = DVector::from_fn(p, |j, _| diag[j] - l.row(j).norm_squared());
    let psi = if structure.isotropic() {
        isotropic(&floored(resid))
    } else {
        floored(resid)
    };
    let loadings = vec![l; structure.loading_slices(g_count)];
    let noise = vec![psi; structure.noise_slices(g_count)];
    check_finite(&loadings, &noise)?;
    Ok((loadings, noise))
}

/// Stage-2 expected complete-data log-likelihood
/// `sum_g n_g [-p/2 log 2pi - 1/2 log|Sigma_g| - 1/2 tr(Sigma_g^-1 S_g)]`.
pub fn stage2_objective(scatter: &impl ScatterStats, params: &MixtureParams) -> Result<f64> {
    let p = params.p();
    let mut total = 0.0;
    for g in 0..params.g() {
        let l = params.loading(g);
        let psi = params.noise(g);
        let beta = regression(l, psi, g)?;
        // tr(Sigma^-1 S) = tr(Psi^-1 S) - tr(Psi^-1 L B S)
        let d = scatter.diagonal(g);
        let tr_psi: f64 = d.iter().zip(psi.iter()).map(|(s, v)| s / v).sum();
        let sb = scatter.times(g, &beta.transpose());
        let mut l_scaled = l.clone();
        for (j, mut row) in l_scaled.row_iter_mut().enumerate() {
            row /= psi[j];
        }
        let tr_corr: f64 = row_dot(&l_scaled, &sb).sum();
        let mut cap = l.transpose() * &l_scaled;
        for k in 0..l.ncols() {
            cap[(k, k)] += 1.0;
        }
        let log_det = cap.determinant().ln() + psi.iter().map(|v| v.ln()).sum::<f64>();
        total += scatter.counts()[g] * -0.5 * (p as f64 * LN_2PI + log_det + tr_psi - tr_corr);
    }
    Ok(total)
}

/// Free-parameter count of a fitted PGMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub mean_params: usize,
    pub weight_params: usize,
    pub covariance_params: usize,
}

pub fn param_count(structure: CovarianceStructure, p: usize, q: usize, g: usize) -> Result<ParamCount> {
    if g == 0 {
        return Err(PgmmError::contract("need G >= 1"));
    }
    if q == 0 || q >= p {
        return Err(PgmmError::contract(format!("need 1 <= q < p, got q={q}, p={p}")));
    }
    let per_loading = p * q - q * (q - 1) / 2;
    let loading_params = per_loading * structure.loading_slices(g);
    let per_noise = if structure.isotropic() { 1 } else { p };
    let noise_params = per_noise * structure.noise_slices(g);
    let covariance_params = loading_params + noise_params;
    let mean_params = g * p;
    let weight_params = g - 1;
    Ok(ParamCount {
        total: mean_params + weight_params + covariance_params,
        mean_params,
        weight_params,
        covariance_params,
    })
}
