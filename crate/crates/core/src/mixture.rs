//! Mixture parameters, factor-structured Gaussian densities and log-likelihoods.
//!
//! Component covariances have the form `Lambda Lambda' + Psi` with `Lambda` of
//! shape `p x q` and `Psi` diagonal. Every density goes through the Woodbury
//! identity and the matrix-determinant lemma, so the only dense factorization
//! is of the `q x q` matrix `I + Lambda' Psi^-1 Lambda`. Work is `O(p q^2)` per
//! component plus `O(p q)` per observation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::DataMatrix;
use crate::error::{PgmmError, Result};
use crate::penalty::PenaltySpec;
use crate::structure::CovarianceStructure;

/// Lower bound applied to every noise variance.
pub const PSI_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameters of a `G`-component parsimonious Gaussian mixture.
///
/// Shared loadings (or shared noise) are stored as a single slice; `loading(g)`
/// and `noise(g)` resolve the slice for a component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    weights: DVector<f64>,
    means: DMatrix<f64>,
    loadings: Vec<DMatrix<f64>>,
    noise: Vec<DVector<f64>>,
    structure: CovarianceStructure,
}

impl MixtureParams {
    pub fn new(
        weights: DVector<f64>,
        means: DMatrix<f64>,
        loadings: Vec<DMatrix<f64>>,
        noise: Vec<DVector<f64>>,
        structure: CovarianceStructure,
    ) -> Result<Self> {
        let g = weights.len();
        let p = means.ncols();
        if g == 0 || means.nrows() != g {
            return Err(PgmmError::contract(format!(
                "{g} weights but {} mean rows",
                means.nrows()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(PgmmError::contract("mixing weights must be positive"));
        }
        if (weights.sum() - 1.0).abs() > 1e-12 {
            return Err(PgmmError::contract(format!(
                "mixing weights sum to {}",
                weights.sum()
            )));
        }
        if loadings.len() != structure.loading_slices(g) {
            return Err(PgmmError::contract(format!(
                "{structure} with G={g} needs {} loading slices, got {}",
                structure.loading_slices(g),
                loadings.len()
            )));
        }
        if noise.len() != structure.noise_slices(g) {
            return Err(PgmmError::contract(format!(
                "{structure} with G={g} needs {} noise slices, got {}",
                structure.noise_slices(g),
                noise.len()
            )));
        }
        let q = loadings[0].ncols();
        if q == 0 || q >= p {
            return Err(PgmmError::contract(format!(
                "need 1 <= q < p, got q={q}, p={p}"
            )));
        }
        for l in &loadings {
            if l.nrows() != p || l.ncols() != q {
                return Err(PgmmError::contract("loading slices must all be p x q"));
            }
        }
        for psi in &noise {
            if psi.len() != p {
                return Err(PgmmError::contract("noise slices must have length p"));
            }
            if psi.iter().any(|&v| !(v >= PSI_FLOOR) || !v.is_finite()) {
                return Err(PgmmError::contract(format!(
                    "noise variances must be finite and >= {PSI_FLOOR}"
                )));
            }
            if structure.isotropic() && psi.iter().any(|&v| v != psi[0]) {
                return Err(PgmmError::contract(format!(
                    "{structure} requires isotropic noise"
                )));
            }
        }
        if means.iter().any(|v| !v.is_finite()) || loadings.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(PgmmError::contract("means and loadings must be finite"));
        }
        Ok(MixtureParams {
            weights,
            means,
            loadings,
            noise,
            structure,
        })
    }

    pub fn g(&self) -> usize {
        self.weights.len()
    }

    pub fn p(&self) -> usize {
        self.means.ncols()
    }

    pub fn q(&self) -> usize {
        self.loadings[0].ncols()
    }

    pub fn structure(&self) -> CovarianceStructure {
        self.structure
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn mean(&self, g: usize) -> DVector<f64> {
        self.means.row(g).transpose()
    }

    pub fn loading(&self, g: usize) -> &DMatrix<f64> {
        &self.loadings[if self.structure.loadings_shared() { 0 } else { g }]
    }

    pub fn noise(&self, g: usize) -> &DVector<f64> {
        &self.noise[if self.structure.noise_shared() { 0 } else { g }]
    }

    pub fn loading_slices(&self) -> &[DMatrix<f64>] {
        &self.loadings
    }

    pub fn noise_slices(&self) -> &[DVector<f64>] {
        &self.noise
    }

    /// Dense `Lambda_g Lambda_g' + Psi_g`. Only for small `p`.
    pub fn covariance(&self, g: usize) -> DMatrix<f64> {
        let l = self.loading(g);
        let mut s = l * l.transpose();
        for (j, v) in self.noise(g).iter().enumerate() {
            s[(j, j)] += v;
        }
        s
    }

    /// Mask of entries of the mean matrix that are not exactly zero.
    pub fn nonzero_mask(&self) -> Vec<Vec<bool>> {
        (0..self.g())
            .map(|g| self.means.row(g).iter().map(|&m| m != 0.0).collect())
            .collect()
    }

    pub(crate) fn set_weights_and_means(&mut self, weights: DVector<f64>, means: DMatrix<f64>) {
        self.weights = weights;
        self.means = means;
    }

    pub(crate) fn set_covariance(&mut self, loadings: Vec<DMatrix<f64>>, noise: Vec<DVector<f64>>) {
        self.loadings = loadings;
        self.noise = noise;
    }

    /// Reorders components by `perm` (new component `k` is old component `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<MixtureParams> {
        let g = self.g();
        let mut seen = vec![false; g];
        if perm.len() != g || perm.iter().any(|&k| k >= g || std::mem::replace(&mut seen[k], true)) {
            return Err(PgmmError::contract("not a permutation of the components"));
        }
        let weights = DVector::from_fn(g, |k, _| self.weights[perm[k]]);
        let means = DMatrix::from_fn(g, self.p(), |k, j| self.means[(perm[k], j)]);
        let loadings = if self.structure.loadings_shared() {
            self.loadings.clone()
        } else {
            perm.iter().map(|&k| self.loadings[k].clone()).collect()
        };
        let noise = if self.structure.noise_shared() {
            self.noise.clone()
        } else {
            perm.iter().map(|&k| self.noise[k].clone()).collect()
        };
        MixtureParams::new(weights, means, loadings, noise, self.structure)
    }
}

/// Row-stochastic `n x G` matrix of posterior membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    values: DMatrix<f64>,
}

impl Responsibilities {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        for (i, row) in values.row_iter().enumerate() {
            if row.iter().any(|&z| !(0.0..=1.0).contains(&z)) {
                return Err(PgmmError::contract(format!(
                    "responsibility row {i} has entries outside [0, 1]"
                )));
            }
            if (row.sum() - 1.0).abs() > 1e-10 {
                return Err(PgmmError::contract(format!(
                    "responsibility row {i} sums to {}",
                    row.sum()
                )));
            }
        }
        Ok(Responsibilities { values })
    }

    pub(crate) fn new_unchecked(values: DMatrix<f64>) -> Self {
        Responsibilities { values }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn g(&self) -> usize {
        self.values.ncols()
    }

    /// Column sums `n_g`.
    pub fn counts(&self) -> DVector<f64> {
        DVector::from_iterator(self.g(), self.values.column_iter().map(|c| c.sum()))
    }
}

/// Precomputed Woodbury factors of one factor-analytic Gaussian.
#[derive(Debug, Clone)]
pub struct FactorGaussian {
    mean: DVector<f64>,
    psi_inv: DVector<f64>,
    /// `Lambda' Psi^-1`, `q x p`.
    scaled_loadings_t: DMatrix<f64>,
    capacitance: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl FactorGaussian {
    pub fn new(
        mean: &DVector<f64>,
        loadings: &DMatrix<f64>,
        noise: &DVector<f64>,
        component: Option<usize>,
    ) -> Result<Self> {
        let p = mean.len();
        if loadings.nrows() != p || noise.len() != p {
            return Err(PgmmError::contract(format!(
                "mean has length {p} but loadings are {}x{} and noise has length {}",
                loadings.nrows(),
                loadings.ncols(),
                noise.len()
            )));
        }
        if noise.iter().any(|&v| !(v > 0.0)) {
            return Err(PgmmError::contract("noise variances must be positive"));
        }
        let q = loadings.ncols();
        let psi_inv = noise.map(|v| 1.0 / v);
        let mut scaled_loadings_t = loadings.transpose();
        for (j, mut col) in scaled_loadings_t.column_iter_mut().enumerate() {
            col *= psi_inv[j];
        }
        let mut capacitance = &scaled_loadings_t * loadings;
        for k in 0..q {
            capacitance[(k, k)] += 1.0;
        }
        let capacitance = Cholesky::new(capacitance).ok_or_else(|| {
            PgmmError::numerical(component, "capacitance matrix is not positive definite")
        })?;
        let log_det = 2.0 * capacitance.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
            + noise.iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(PgmmError::numerical(component, "log-determinant is not finite"));
        }
        Ok(FactorGaussian {
            mean: mean.clone(),
            psi_inv,
            scaled_loadings_t,
            capacitance,
            log_det,
        })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Lambda' Sigma^-1 = (I + Lambda' Psi^-1 Lambda)^-1 Lambda' Psi^-1`, `q x p`.
    pub fn regression(&self) -> DMatrix<f64> {
        self.capacitance.solve(&self.scaled_loadings_t)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let quad_diag: f64 = d.iter().zip(self.psi_inv.iter()).map(|(a, w)| a * a * w).sum();
        let mut proj = &self.scaled_loadings_t * &d;
        self.capacitance.l_dirty().solve_lower_triangular_mut(&mut proj);
        let quad = quad_diag - proj.norm_squared();
        -0.5 * (self.mean.len() as f64 * LN_2PI + self.log_det + quad)
    }

    /// Log-density of every row of `x`.
    pub fn log_density_rows(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let n = x.nrows();
        let p = x.ncols();
        let mut centred = x.clone();
        for (j, mut col) in centred.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
        }
        let mut quad = DVector::<f64>::zeros(n);
        for (j, col) in centred.column_iter().enumerate() {
            let w = self.psi_inv[j];
            for (qi, v) in quad.iter_mut().zip(col.iter()) {
                *qi += v * v * w;
            }
        }
        // n x q projections onto L^-1 Lambda' Psi^-1
        let mut whitened = self.scaled_loadings_t.clone();
        self.capacitance.l_dirty().solve_lower_triangular_mut(&mut whitened);
        let proj = centred * whitened.transpose();
        for col in proj.column_iter() {
            for (qi, v) in quad.iter_mut().zip(col.iter()) {
                *qi -= v * v;
            }
        }
        let constant = p as f64 * LN_2PI + self.log_det;
        quad.map(|qi| -0.5 * (constant + qi))
    }
}

/// `log phi(x | mean, loadings loadings' + diag(noise))`.
pub fn log_component_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    loadings: &DMatrix<f64>,
    noise: &DVector<f64>,
) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(PgmmError::contract("observation and mean lengths differ"));
    }
    if loadings.ncols() >= mean.len() && mean.len() > 1 {
        return Err(PgmmError::contract("need q < p"));
    }
    let value = FactorGaussian::new(mean, loadings, noise, None)?.log_density(x);
    if !value.is_finite() {
        return Err(PgmmError::numerical(None, "log-density is not finite"));
    }
    Ok(value)
}

/// `n x G` matrix of `log pi_g + log phi(x_i | mu_g, Sigma_g)`.
pub fn weighted_log_densities(data: &DataMatrix, params: &MixtureParams) -> Result<DMatrix<f64>> {
    if data.p() != params.p() {
        return Err(PgmmError::contract(format!(
            "data has {} columns but parameters have p={}",
            data.p(),
            params.p()
        )));
    }
    let mut out = DMatrix::zeros(data.n(), params.g());
    for g in 0..params.g() {
        let comp = FactorGaussian::new(&params.mean(g), params.loading(g), params.noise(g), Some(g))?;
        let log_w = params.weights()[g].ln();
        let col = comp.log_density_rows(data.values());
        if col.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(PgmmError::numerical(Some(g), "component log-density is not finite"));
        }
        out.column_mut(g).copy_from(&col.add_scalar(log_w));
    }
    Ok(out)
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-observation log-likelihood contributions and normalized responsibilities
/// from a matrix of weighted log-densities.
pub(crate) fn normalize_log_densities(
    log_dens: &DMatrix<f64>,
) -> Result<(DVector<f64>, Responsibilities)> {
    let n = log_dens.nrows();
    let mut contributions = DVector::zeros(n);
    let mut z = DMatrix::zeros(n, log_dens.ncols());
    for i in 0..n {
        let row = log_dens.row(i);
        let lse = log_sum_exp(row.iter().copied());
        if !lse.is_finite() {
            return Err(PgmmError::Numerical {
                component: None,
                row: Some(i),
                reason: "every component density underflowed".into(),
            });
        }
        contributions[i] = lse;
        for (g, v) in row.iter().enumerate() {
            z[(i, g)] = (v - lse).exp();
        }
        let s = z.row(i).sum();
        z.row_mut(i).unscale_mut(s);
    }
    Ok((contributions, Responsibilities::new_unchecked(z)))
}

/// `log L = sum_i log sum_g pi_g phi(x_i | mu_g, Sigma_g)`.
pub fn mixture_loglik(data: &DataMatrix, params: &MixtureParams) -> Result<f64> {
    let log_dens = weighted_log_densities(data, params)?;
    let (contrib, _) = normalize_log_densities(&log_dens)?;
    Ok(contrib.sum())
}

/// Posterior membership probabilities, computed in log space.
pub fn responsibilities(data: &DataMatrix, params: &MixtureParams) -> Result<Responsibilities> {
    let log_dens = weighted_log_densities(data, params)?;
    Ok(normalize_log_densities(&log_dens)?.1)
}

/// `n lambda_n sum_g pi_g sum_j w_gj |mu_gj|`.
pub fn penalty_value(n: usize, params: &MixtureParams, penalty: &PenaltySpec) -> Result<f64> {
    let w = penalty.weights();
    if w.nrows() != params.g() || w.ncols() != params.p() {
        return Err(PgmmError::contract(format!(
            "penalty weights are {}x{}, parameters need {}x{}",
            w.nrows(),
            w.ncols(),
            params.g(),
            params.p()
        )));
    }
    if penalty.lambda() == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for g in 0..params.g() {
        let row: f64 = params
            .means()
            .row(g)
            .iter()
            .zip(w.row(g).iter())
            .map(|(m, w)| w * m.abs())
            .sum();
        total += params.weights()[g] * row;
    }
    Ok(n as f64 * penalty.lambda() * total)
}

/// Log-likelihood minus the adaptive-LASSO penalty on the means.
pub fn penalized_loglik(
    data: &DataMatrix,
    params: &MixtureParams,
    penalty: &PenaltySpec,
) -> Result<f64> {
    let pen = penalty_value(data.n(), params, penalty)?;
    Ok(mixture_loglik(data, params)? - pen)
}
