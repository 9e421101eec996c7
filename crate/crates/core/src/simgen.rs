//! Seeded generators for the three-component simulation design and for sparse
//! mean recovery checks.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aecm::derive_seed;
use crate::data::DataMatrix;
use crate::error::{PgmmError, Result};

pub const BENCHMARK_COMPONENTS: usize = 3;
pub const BENCHMARK_P: usize = 200;
pub const AR_RHO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    pub p: usize,
    pub ratios: Vec<usize>,
    pub seed: u64,
    /// Multiplier on `p` for reduced-size runs.
    pub scale: Option<f64>,
}

impl ScenarioSpec {
    pub fn new(n: usize, p: usize, ratios: Vec<usize>, seed: u64) -> Self {
        ScenarioSpec {
            n,
            p,
            ratios,
            seed,
            scale: None,
        }
    }

    pub fn effective_p(&self) -> usize {
        match self.scale {
            Some(s) => ((self.p as f64 * s).round() as usize).max(1),
            None => self.p,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ratios.len() != BENCHMARK_COMPONENTS {
            return Err(PgmmError::contract("the scenario needs three ratio entries"));
        }
        if let Some(s) = self.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(PgmmError::contract("scale must be positive"));
            }
        }
        if self.p == 0 {
            return Err(PgmmError::contract("p must be positive"));
        }
        component_sizes(self.n, &self.ratios).map(|_| ())
    }
}

/// Splits `n` by `ratios` with largest-remainder rounding; ties in the
/// remainder go to the earlier component.
pub fn component_sizes(n: usize, ratios: &[usize]) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().any(|&r| r == 0) {
        return Err(PgmmError::contract("ratios must be positive"));
    }
    if n < ratios.len() {
        return Err(PgmmError::contract(format!("n={n} is smaller than the number of components")));
    }
    let total: usize = ratios.iter().sum();
    let mut sizes: Vec<usize> = ratios.iter().map(|&r| n * r / total).collect();
    let mut remainders: Vec<(usize, usize)> = ratios.iter().enumerate().map(|(k, &r)| (n * r % total, k)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - sizes.iter().sum::<usize>();
    for &(_, k) in remainders.iter().take(short) {
        sizes[k] += 1;
    }
    Ok(sizes)
}

pub fn ar1_covariance(p: usize, rho: f64) -> Result<DMatrix<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(PgmmError::contract("AR(1) correlation must lie in (-1, 1)"));
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32)))
}

/// True component means and covariances of the three-component design.
pub fn benchmark_mixture_truth(spec: &ScenarioSpec) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    spec.validate()?;
    let p = spec.effective_p();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, 1]));
    let variances = DVector::from_fn(p, |_, _| rng.random_range(0.5..=1.5));
    Ok(vec![
        (DVector::from_element(p, -5.5), DMatrix::identity(p, p)),
        (DVector::from_element(p, 2.0), DMatrix::from_diagonal(&variances)),
        (DVector::from_element(p, 3.0), ar1_covariance(p, AR_RHO)?),
    ])
}

fn sample_rows(
    rng: &mut ChaCha8Rng,
    components: &[(DVector<f64>, DMatrix<f64>)],
    sizes: &[usize],
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let p = components[0].0.len();
    let n: usize = sizes.iter().sum();
    let mut values = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (k, ((mean, cov), &size)) in components.iter().zip(sizes).enumerate() {
        let factor = cov
            .clone()
            .cholesky()
            .ok_or_else(|| PgmmError::numerical(Some(k), "covariance is not positive definite"))?
            .unpack();
        for _ in 0..size {
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = mean + &factor * z;
            values.row_mut(row).copy_from(&x.transpose());
            labels.push(k);
            row += 1;
        }
    }
    Ok((values, labels))
}

/// Rows are grouped by component: isotropic at -5.5, diagonal at 2, AR(1) at 3.
pub fn generate_benchmark_mixture(spec: &ScenarioSpec) -> Result<DataMatrix> {
    let truth = benchmark_mixture_truth(spec)?;
    let sizes = component_sizes(spec.n, &spec.ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, 2]));
    let (values, labels) = sample_rows(&mut rng, &truth, &sizes)?;
    DataMatrix::new(values)?.with_labels(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMixture {
    pub data: DataMatrix,
    /// G x p true means with exact zeros.
    pub means: DMatrix<f64>,
}

/// Equal-sized components with identity covariance. Each mean has
/// `ceil(zero_fraction * p)` zeros at seeded positions and `+-separation` elsewhere.
pub fn generate_sparse_mixture(
    n: usize,
    p: usize,
    g: usize,
    zero_fraction: f64,
    separation: f64,
    seed: u64,
) -> Result<SparseMixture> {
    if !(0.0..1.0).contains(&zero_fraction) {
        return Err(PgmmError::contract("zero fraction must lie in [0, 1)"));
    }
    if p == 0 || g == 0 {
        return Err(PgmmError::contract("p and G must be positive"));
    }
    let sizes = component_sizes(n, &vec![1; g])?;
    let zeros = (zero_fraction * p as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = DMatrix::zeros(g, p);
    let mut positions: Vec<usize> = (0..p).collect();
    for k in 0..g {
        positions.shuffle(&mut rng);
        for &j in &positions[zeros..] {
            means[(k, j)] = if rng.random::<bool>() { separation } else { -separation };
        }
    }
    let components: Vec<(DVector<f64>, DMatrix<f64>)> = (0..g)
        .map(|k| (means.row(k).transpose(), DMatrix::identity(p, p)))
        .collect();
    let (values, labels) = sample_rows(&mut rng, &components, &sizes)?;
    Ok(SparseMixture {
        data: DataMatrix::new(values)?.with_labels(labels)?,
        means,
    })
}
