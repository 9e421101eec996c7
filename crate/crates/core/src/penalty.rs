//! Adaptive-LASSO penalty on the component means.
//!
//! The penalty is `n lambda_n sum_g pi_g sum_j w_gj |mu_gj|`, with weights
//! `w_gj = |pilot_gj|^-gamma` taken from an unpenalized pilot fit and frozen for
//! the penalized run. `gamma = 0` gives the plain LASSO (all weights one).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PgmmError, Result};
use crate::mixture::MixtureParams;

pub const DEFAULT_WEIGHT_CAP: f64 = 1e8;

/// Tuning constants of the penalty, independent of any particular fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyControls {
    pub lambda: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub weight_cap: f64,
}

impl PenaltyControls {
    /// Controls with `lambda` from [`lambda_schedule`].
    pub fn from_schedule(n: usize, p: usize, gamma: f64, c: f64, weight_cap: f64) -> Result<Self> {
        let schedule = lambda_schedule(n, p, gamma, c)?;
        let controls = PenaltyControls {
            lambda: schedule.lambda,
            gamma,
            kappa: schedule.kappa,
            weight_cap,
        };
        controls.validate()?;
        Ok(controls)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(PgmmError::contract(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(PgmmError::contract(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.weight_cap > 0.0) {
            return Err(PgmmError::contract("weight cap must be positive"));
        }
        if !(self.kappa >= 0.0) {
            return Err(PgmmError::contract("kappa must be >= 0"));
        }
        Ok(())
    }

    /// Freezes weights computed from pilot means.
    pub fn with_pilot(&self, pilot_means: &DMatrix<f64>) -> Result<PenaltySpec> {
        let weights = compute_weights(pilot_means, self.gamma, self.weight_cap)?;
        PenaltySpec::new(self.lambda, self.gamma, weights, self.kappa, self.weight_cap)
    }
}

/// A fully specified penalty: tuning constants plus a `G x p` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    controls: PenaltyControls,
    weights: DMatrix<f64>,
}

impl PenaltySpec {
    pub fn new(
        lambda: f64,
        gamma: f64,
        weights: DMatrix<f64>,
        kappa: f64,
        weight_cap: f64,
    ) -> Result<Self> {
        let controls = PenaltyControls {
            lambda,
            gamma,
            kappa,
            weight_cap,
        };
        controls.validate()?;
        if weights.iter().any(|&w| !(w > 0.0 && w <= weight_cap)) {
            return Err(PgmmError::contract(format!(
                "penalty weights must lie in (0, {weight_cap}]"
            )));
        }
        Ok(PenaltySpec { controls, weights })
    }

    pub fn lambda(&self) -> f64 {
        self.controls.lambda
    }

    pub fn gamma(&self) -> f64 {
        self.controls.gamma
    }

    pub fn kappa(&self) -> f64 {
        self.controls.kappa
    }

    pub fn weight_cap(&self) -> f64 {
        self.controls.weight_cap
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn controls(&self) -> PenaltyControls {
        self.controls
    }

    /// Same spec with a different tuning parameter.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        PenaltySpec::new(lambda, self.gamma(), self.weights.clone(), self.kappa(), self.weight_cap())
    }

    /// Same spec with every weight set to one (the plain LASSO).
    pub fn with_unit_weights(&self) -> Self {
        let mut out = self.clone();
        out.weights.fill(1.0);
        out
    }
}

/// Entrywise `w_gj sign(mu_gj)`; zero exactly where the mean is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyDirection {
    values: DMatrix<f64>,
}

impl PenaltyDirection {
    pub fn new(means: &DMatrix<f64>, weights: &DMatrix<f64>) -> Result<Self> {
        if means.shape() != weights.shape() {
            return Err(PgmmError::contract("means and weights differ in shape"));
        }
        Ok(PenaltyDirection {
            values: means.zip_map(weights, |m, w| w * sign(m)),
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Output of [`lambda_schedule`].
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSchedule {
    pub lambda: f64,
    pub kappa: f64,
    /// Set when the rate conditions cannot both hold (the `gamma = 0` case).
    pub warning: Option<String>,
}

/// `kappa = max(0, log p / log n)`.
pub fn dimension_rate(n: usize, p: usize) -> Result<f64> {
    if n < 2 {
        return Err(PgmmError::contract(format!("need n >= 2, got {n}")));
    }
    if p == 0 {
        return Err(PgmmError::contract("need p >= 1"));
    }
    Ok(((p as f64).ln() / (n as f64).ln()).max(0.0))
}

/// `lambda_n = c (log n)^(1/2) n^-((gamma + 2 kappa + 1) / 2)`.
///
/// For `gamma > 0` this satisfies both rate conditions of the oracle result;
/// for `gamma = 0` the second ratio stays at `c` rather than vanishing, and a
/// warning is attached.
pub fn lambda_schedule(n: usize, p: usize, gamma: f64, c: f64) -> Result<LambdaSchedule> {
    let kappa = dimension_rate(n, p)?;
    if !(c >= 0.0) || !c.is_finite() {
        return Err(PgmmError::contract(format!("schedule constant must be >= 0, got {c}")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(PgmmError::contract(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let nf = n as f64;
    let lambda = c * nf.ln().sqrt() * nf.powf(-(gamma + 2.0 * kappa + 1.0) / 2.0);
    let warning = (gamma == 0.0).then(|| {
        "gamma = 0 (plain LASSO): the two rate conditions on lambda_n cannot hold simultaneously"
            .to_string()
    });
    Ok(LambdaSchedule {
        lambda,
        kappa,
        warning,
    })
}

/// `w_gj = min(|pilot_gj|^-gamma, weight_cap)`.
pub fn compute_weights(pilot_means: &DMatrix<f64>, gamma: f64, weight_cap: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(PgmmError::contract(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if !(weight_cap > 0.0) {
        return Err(PgmmError::contract("weight cap must be positive"));
    }
    if gamma == 0.0 {
        return Ok(DMatrix::from_element(pilot_means.nrows(), pilot_means.ncols(), 1.0));
    }
    Ok(pilot_means.map(|m| {
        let a = m.abs();
        if a == 0.0 {
            weight_cap
        } else {
            a.powf(-gamma).min(weight_cap)
        }
    }))
}

/// Soft-thresholded mean update.
///
/// `mu_gj = sign(m_gj) [ |m_gj| - lambda |(Sigma_g b_g)_j| ]_+` where `m` are the
/// responsibility-weighted means and `b_gj = w_gj sign(m_gj)`. `Sigma_g` comes
/// from the current loadings and noise in `params`.
pub fn soft_threshold_means(
    unpenalized_means: &DMatrix<f64>,
    params: &MixtureParams,
    spec: &PenaltySpec,
) -> Result<DMatrix<f64>> {
    let (g_count, p) = unpenalized_means.shape();
    if g_count != params.g() || p != params.p() || spec.weights().shape() != (g_count, p) {
        return Err(PgmmError::contract("soft threshold inputs differ in shape"));
    }
    let lambda = spec.lambda();
    if lambda == 0.0 {
        return Ok(unpenalized_means.clone());
    }
    let direction = PenaltyDirection::new(unpenalized_means, spec.weights())?;
    let mut out = unpenalized_means.clone();
    for g in 0..g_count {
        let b = direction.values().row(g).transpose();
        let l = params.loading(g);
        let sigma_b = l * (l.transpose() * &b) + params.noise(g).component_mul(&b);
        for j in 0..p {
            let m = unpenalized_means[(g, j)];
            let shrunk = (m.abs() - lambda * sigma_b[j].abs()).max(0.0);
            out[(g, j)] = sign(m) * shrunk;
        }
    }
    Ok(out)
}

/// Diagonal of the inverse unit information for a component mean, taken as
/// `diag(Lambda Lambda' + Psi)`.
pub fn unit_information_inverse_diag(loadings: &DMatrix<f64>, noise: &DVector<f64>) -> Result<DVector<f64>> {
    if loadings.nrows() != noise.len() {
        return Err(PgmmError::contract("loadings and noise differ in length"));
    }
    if noise.iter().any(|&v| !(v > 0.0)) {
        return Err(PgmmError::contract("noise variances must be positive"));
    }
    Ok(DVector::from_fn(noise.len(), |j, _| {
        loadings.row(j).norm_squared() + noise[j]
    }))
}

/// `G x p` matrix whose row `g` is [`unit_information_inverse_diag`] of component `g`.
pub fn information_inverse_diagonals(params: &MixtureParams) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(params.g(), params.p());
    for g in 0..params.g() {
        let d = unit_information_inverse_diag(params.loading(g), params.noise(g))?;
        out.row_mut(g).copy_from(&d.transpose());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::CovarianceStructure;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn scalar_params(sigma: f64) -> MixtureParams {
        // q must be < p, so p = 2 with the second coordinate unused
        MixtureParams::new(
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, 2),
            vec![DMatrix::zeros(2, 1)],
            vec![DVector::from_element(2, sigma)],
            CovarianceStructure::CCC,
        )
        .unwrap()
    }

    #[test]
    fn schedule_values() {
        let s = lambda_schedule(100, 1, 1.0, 1.0).unwrap();
        assert_eq!(s.kappa, 0.0);
        let expected = (100f64.ln()).sqrt() / 100.0;
        assert!((s.lambda - expected).abs() < 1e-15);
        assert!((s.lambda - 0.02146).abs() < 1e-5);
        assert!(s.warning.is_none());

        let doubled = lambda_schedule(100, 1, 1.0, 2.0).unwrap();
        assert_eq!(doubled.lambda, 2.0 * s.lambda);

        assert!(lambda_schedule(1, 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn lasso_schedule_warns_and_ratio_stays_constant() {
        let c = 0.7;
        for n in [100usize, 10_000, 1_000_000] {
            let s = lambda_schedule(n, 1, 0.0, c).unwrap();
            assert!(s.warning.is_some());
            let nf = n as f64;
            let ratio = nf.sqrt() * s.lambda / nf.ln().sqrt();
            assert!((ratio - c).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_schedule_meets_rate_conditions() {
        // first ratio must shrink, second must stay bounded
        let (gamma, c) = (1.0, 1.0);
        let mut prev = f64::INFINITY;
        for n in [100usize, 1_000, 10_000, 100_000] {
            let p = 50;
            let s = lambda_schedule(n, p, gamma, c).unwrap();
            let nf = n as f64;
            let first = nf.powf((2.0 * s.kappa + 1.0) / 2.0) * s.lambda / nf.ln().sqrt();
            let second = nf.powf((gamma + 2.0 * s.kappa + 1.0) / 2.0) * s.lambda / nf.ln().sqrt();
            assert!(first < prev);
            assert!((second - c).abs() < 1e-9);
            prev = first;
        }
    }

    #[test]
    fn kappa_from_dimensions() {
        assert!((dimension_rate(100, 10).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(dimension_rate(100, 1).unwrap(), 0.0);
    }

    #[test]
    fn weights() {
        let pilot = dmatrix![0.5, -0.25, 0.0];
        assert_eq!(compute_weights(&pilot, 0.0, 1e8).unwrap(), dmatrix![1.0, 1.0, 1.0]);
        assert_eq!(compute_weights(&pilot, 1.0, 1e8).unwrap(), dmatrix![2.0, 4.0, 1e8]);
        assert_eq!(compute_weights(&pilot, 1.0, 3.0).unwrap(), dmatrix![2.0, 3.0, 3.0]);
        assert!(compute_weights(&pilot, 1.5, 1e8).is_err());
    }

    #[test]
    fn capped_weight_forces_zero_under_default_schedule() {
        let params = scalar_params(1.0);
        let controls = PenaltyControls::from_schedule(100, 1, 1.0, 1.0, DEFAULT_WEIGHT_CAP).unwrap();
        let spec = controls.with_pilot(&dmatrix![0.0, 1.0]).unwrap();
        assert_eq!(spec.weights()[(0, 0)], DEFAULT_WEIGHT_CAP);
        let out = soft_threshold_means(&dmatrix![0.8, 1.0], &params, &spec).unwrap();
        assert_eq!(out[(0, 0)], 0.0);
    }

    #[test]
    fn soft_threshold_hand_values() {
        let params = scalar_params(1.0);
        let spec = PenaltySpec::new(0.5, 1.0, dmatrix![1.0, 1.0], 0.0, 1e8).unwrap();
        let out = soft_threshold_means(&dmatrix![2.0, -2.0], &params, &spec).unwrap();
        assert!((out[(0, 0)] - 1.5).abs() < 1e-15);
        assert!((out[(0, 1)] + 1.5).abs() < 1e-15);

        let spec = PenaltySpec::new(0.1, 1.0, dmatrix![4.0, 1.0], 0.0, 1e8).unwrap();
        let out = soft_threshold_means(&dmatrix![0.2, 0.0], &params, &spec).unwrap();
        assert_eq!(out[(0, 0)], 0.0);

        let spec = PenaltySpec::new(0.0, 1.0, dmatrix![4.0, 1.0], 0.0, 1e8).unwrap();
        let input = dmatrix![0.2, -3.0];
        assert_eq!(soft_threshold_means(&input, &params, &spec).unwrap(), input);
    }

    #[test]
    fn information_diagonal() {
        let d = unit_information_inverse_diag(&DMatrix::zeros(2, 1), &DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert_eq!(d, DVector::from_vec(vec![2.0, 3.0]));
        let d = unit_information_inverse_diag(&dmatrix![1.0; 2.0], &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(d, DVector::from_vec(vec![2.0, 5.0]));
    }

    #[test]
    fn direction_zero_where_mean_zero() {
        let d = PenaltyDirection::new(&dmatrix![0.0, -2.0, 3.0], &dmatrix![5.0, 2.0, 0.5]).unwrap();
        assert_eq!(d.values(), &dmatrix![0.0, -2.0, 0.5]);
    }

    fn random_setup(seed: u64, p: usize) -> (MixtureParams, DMatrix<f64>, DMatrix<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = 2;
        let params = MixtureParams::new(
            DVector::from_vec(vec![0.4, 0.6]),
            DMatrix::zeros(g, p),
            (0..g).map(|_| DMatrix::from_fn(p, 1, |_, _| rng.random_range(-1.0..1.0))).collect(),
            (0..g).map(|_| DVector::from_fn(p, |_, _| rng.random_range(0.2..2.0))).collect(),
            CovarianceStructure::UUU,
        )
        .unwrap();
        let means = DMatrix::from_fn(g, p, |_, _| rng.random_range(-1.0..1.0));
        let weights = DMatrix::from_fn(g, p, |_, _| rng.random_range(0.1..5.0));
        (params, means, weights)
    }

    proptest! {
        #[test]
        fn shrinkage_and_sign(seed in any::<u64>(), lambda in 0.0f64..0.5) {
            let p = 6;
            let (params, means, weights) = random_setup(seed, p);
            let spec = PenaltySpec::new(lambda, 1.0, weights.clone(), 0.0, 1e8).unwrap();
            let out = soft_threshold_means(&means, &params, &spec).unwrap();
            for (m, o) in means.iter().zip(out.iter()) {
                prop_assert!(o.abs() <= m.abs());
                if *o != 0.0 {
                    prop_assert_eq!(sign(*o), sign(*m));
                }
            }
            if lambda > 0.0 {
                prop_assert!(out.iter().zip(means.iter()).all(|(o, m)| o.abs() < m.abs() || *m == 0.0));
            }
        }

        #[test]
        fn sparsity_monotone_in_lambda(seed in any::<u64>()) {
            let (params, means, weights) = random_setup(seed, 8);
            let mut prev = usize::MAX;
            for k in 0..20 {
                let lambda = k as f64 * 0.05;
                let spec = PenaltySpec::new(lambda, 1.0, weights.clone(), 0.0, 1e8).unwrap();
                let nz = soft_threshold_means(&means, &params, &spec).unwrap().iter().filter(|v| **v != 0.0).count();
                prop_assert!(nz <= prev);
                prev = nz;
            }
        }

        #[test]
        fn lasso_weights_are_ones(seed in any::<u64>()) {
            let (_, means, _) = random_setup(seed, 5);
            let w = compute_weights(&means, 0.0, 1e8).unwrap();
            prop_assert!(w.iter().all(|&v| v == 1.0));
        }

        #[test]
        fn information_matches_dense(seed in any::<u64>(), p in 2usize..=10) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = rng.random_range(1..p);
            let l = DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
            let psi = DVector::from_fn(p, |_, _| rng.random_range(0.1..2.0));
            let mut dense = &l * l.transpose();
            for j in 0..p { dense[(j, j)] += psi[j]; }
            let d = unit_information_inverse_diag(&l, &psi).unwrap();
            for j in 0..p {
                prop_assert!((d[j] - dense[(j, j)]).abs() < 1e-12);
            }
        }
    }
}
