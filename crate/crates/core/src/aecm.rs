//! Two-stage alternating ECM estimation.
//!
//! Each iteration runs an E-step, updates the mixing proportions and the
//! (optionally soft-thresholded) means, runs a second E-step, then updates the
//! loadings and noise under the requested constraint pattern. Penalized fits
//! pair every start with an unpenalized pilot run from the same initial
//! responsibilities; the pilot's means supply the adaptive weights.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::covariance::{factored_scatter, initial_covariance, update_covariance};
use crate::data::DataMatrix;
use crate::error::{PgmmError, Result};
use crate::mixture::{
    normalize_log_densities, penalty_value, weighted_log_densities, MixtureParams, Responsibilities,
};
use crate::penalty::{soft_threshold_means, PenaltyControls, PenaltySpec};
use crate::structure::CovarianceStructure;

pub const DEFAULT_MAX_ITERATIONS: usize = 1000;
pub const DEFAULT_TOLERANCE: f64 = 1e-2;
pub const DEFAULT_STARTS: usize = 20;

const INIT_ATTEMPTS: usize = 10;
const KMEANS_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Each row drawn from a flat Dirichlet.
    RandomResponsibilities,
    /// Hard assignments from a seeded k-means++ pass.
    Kmeans,
}

impl std::str::FromStr for InitStrategy {
    type Err = PgmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random-responsibilities" => Ok(InitStrategy::RandomResponsibilities),
            "kmeans" => Ok(InitStrategy::Kmeans),
            other => Err(PgmmError::contract(format!("unknown initialization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub g: usize,
    pub q: usize,
    pub structure: CovarianceStructure,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub init: InitStrategy,
}

impl FitConfig {
    pub fn new(g: usize, q: usize, structure: CovarianceStructure) -> Self {
        FitConfig {
            g,
            q,
            structure,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            n_starts: DEFAULT_STARTS,
            seed: 0,
            init: InitStrategy::Kmeans,
        }
    }

    fn validate(&self, data: &DataMatrix) -> Result<()> {
        if self.g == 0 {
            return Err(PgmmError::contract("need G >= 1"));
        }
        if self.q == 0 || self.q >= data.p() {
            return Err(PgmmError::contract(format!(
                "need 1 <= q < p, got q={}, p={}",
                self.q,
                data.p()
            )));
        }
        if self.n_starts == 0 {
            return Err(PgmmError::contract("need at least one start"));
        }
        if self.g > data.n() {
            return Err(PgmmError::contract(format!(
                "G={} exceeds the number of observations {}",
                self.g,
                data.n()
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(PgmmError::contract("tolerance must be positive"));
        }
        Ok(())
    }

    /// Seed of the initial responsibilities for start `index`.
    pub fn start_seed(&self, index: usize) -> u64 {
        derive_seed(&[self.seed, index as u64])
    }
}

/// Outcome of one AECM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: MixtureParams,
    pub resp: Responsibilities,
    /// Unpenalized log-likelihood at the final parameters.
    pub loglik: f64,
    /// Penalized objective at the final parameters; equals `loglik` for pilot fits.
    pub penalized_loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub nonzero_mask: Vec<Vec<bool>>,
    pub converged: bool,
    pub iterations: usize,
    pub pilot_means: Option<DMatrix<f64>>,
    /// Penalty used for the fit, with the frozen weights.
    pub penalty: Option<PenaltySpec>,
    /// Index of the start that produced this fit.
    pub start: usize,
    /// Starts that failed before this one won.
    pub failed_starts: usize,
}

impl FitResult {
    pub fn n(&self) -> usize {
        self.resp.n()
    }

    pub fn zero_means(&self) -> usize {
        self.nonzero_mask.iter().flatten().filter(|nz| !**nz).count()
    }
}

/// SplitMix64 fold over the parts; stable across platforms and releases.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &part in parts {
        state ^= part;
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// Aitken-accelerated stopping rule on the last three trace entries.
pub fn aitken_converged(trace: &[f64], tolerance: f64) -> bool {
    if trace.len() < 3 {
        return false;
    }
    let l0 = trace[trace.len() - 3];
    let l1 = trace[trace.len() - 2];
    let l2 = trace[trace.len() - 1];
    let (prev_step, step) = (l1 - l0, l2 - l1);
    if prev_step == 0.0 {
        return step == 0.0;
    }
    let a = step / prev_step;
    if !(a < 1.0) {
        return false;
    }
    let projected = l1 + step / (1.0 - a);
    let gap = projected - l2;
    (0.0..tolerance).contains(&gap)
}

/// Starting responsibilities, deterministic in `seed`.
pub fn initialize_responsibilities(
    data: &DataMatrix,
    g: usize,
    strategy: InitStrategy,
    seed: u64,
) -> Result<Responsibilities> {
    let n = data.n();
    if g == 0 {
        return Err(PgmmError::contract("need G >= 1"));
    }
    if g == 1 {
        return Ok(Responsibilities::new_unchecked(DMatrix::from_element(n, 1, 1.0)));
    }
    if g > n {
        return Err(PgmmError::contract(format!("G={g} exceeds n={n}")));
    }
    let min_mass = 0.01 * n as f64 / g as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_mass = 0.0;
    for _ in 0..INIT_ATTEMPTS {
        let z = match strategy {
            InitStrategy::RandomResponsibilities => random_rows(&mut rng, n, g),
            InitStrategy::Kmeans => kmeans_assignments(data, g, &mut rng),
        };
        let smallest = z
            .column_iter()
            .map(|c| c.sum())
            .fold(f64::INFINITY, f64::min);
        if smallest >= min_mass {
            return Ok(Responsibilities::new_unchecked(z));
        }
        last_mass = smallest;
    }
    Err(PgmmError::Initialization {
        attempts: INIT_ATTEMPTS,
        reason: format!("smallest component mass {last_mass:.3e} below {min_mass:.3e}"),
    })
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, g: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, g);
    for i in 0..n {
        let mut total = 0.0;
        for k in 0..g {
            let v: f64 = Exp1.sample(rng);
            z[(i, k)] = v;
            total += v;
        }
        z.row_mut(i).unscale_mut(total);
    }
    z
}

fn squared_distance(data: &DMatrix<f64>, i: usize, center: &DVector<f64>) -> f64 {
    data.row(i)
        .iter()
        .zip(center.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn kmeans_assignments(data: &DataMatrix, g: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let x = data.values();
    let n = data.n();
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(g);
    centers.push(data.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| squared_distance(x, i, &centers[0])).collect();
    while centers.len() < g {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            nearest
                .iter()
                .position(|d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(pick);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(x, i, &c));
        }
        centers.push(c);
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..g)
                .map(|k| (k, squared_distance(x, i, &centers[k])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap_or(0);
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            let mut sum = DVector::zeros(data.p());
            for &i in &members {
                sum += x.row(i).transpose();
            }
            *center = sum / members.len() as f64;
        }
    }
    DMatrix::from_fn(n, g, |i, k| if labels[i] == k { 1.0 } else { 0.0 })
}

fn weighted_means(data: &DataMatrix, resp: &Responsibilities) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let counts = resp.counts();
    if let Some((g, &mass)) = counts.iter().enumerate().find(|(_, &c)| c < 1.0) {
        return Err(PgmmError::EmptyComponent { component: g, mass });
    }
    let mut means = resp.values().transpose() * data.values();
    for (g, mut row) in means.row_iter_mut().enumerate() {
        row /= counts[g];
    }
    let n = data.n() as f64;
    let mut weights = counts / n;
    let total = weights.sum();
    weights /= total;
    Ok((weights, means))
}

/// Parameters implied by a set of responsibilities: weighted means and
/// proportions, covariance from the pooled scatter eigenpairs.
pub fn params_from_responsibilities(
    data: &DataMatrix,
    resp: &Responsibilities,
    q: usize,
    structure: CovarianceStructure,
) -> Result<MixtureParams> {
    let (weights, means) = weighted_means(data, resp)?;
    let scatter = factored_scatter(data, resp, &means)?;
    let (loadings, noise) = initial_covariance(structure, &scatter, q)?;
    MixtureParams::new(weights, means, loadings, noise, structure)
}

/// Runs AECM from the given starting responsibilities.
pub fn run_from(
    data: &DataMatrix,
    config: &FitConfig,
    initial: &Responsibilities,
    penalty: Option<&PenaltySpec>,
) -> Result<FitResult> {
    config.validate(data)?;
    if initial.n() != data.n() || initial.g() != config.g {
        return Err(PgmmError::contract("initial responsibilities have the wrong shape"));
    }
    if let Some(spec) = penalty {
        if spec.weights().shape() != (config.g, data.p()) {
            return Err(PgmmError::contract(format!(
                "penalty weights must be {}x{}",
                config.g,
                data.p()
            )));
        }
    }
    let n = data.n();
    let mut params = params_from_responsibilities(data, initial, config.q, config.structure)?;
    let (mut contributions, mut resp) = normalize_log_densities(&weighted_log_densities(data, &params)?)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;

        // stage 1: proportions and means
        let (weights, unpenalized) = weighted_means(data, &resp)?;
        let means = match penalty {
            Some(spec) => soft_threshold_means(&unpenalized, &params, spec)?,
            None => unpenalized,
        };
        params.set_weights_and_means(weights, means);

        // stage 2: loadings and noise under fresh responsibilities
        let (_, resp_mid) = normalize_log_densities(&weighted_log_densities(data, &params)?)?;
        let scatter = factored_scatter(data, &resp_mid, params.means())?;
        let (loadings, noise) = update_covariance(config.structure, &scatter, &params)?;
        params.set_covariance(loadings, noise);

        let evaluated = normalize_log_densities(&weighted_log_densities(data, &params)?)?;
        contributions = evaluated.0;
        resp = evaluated.1;
        let loglik = contributions.sum();
        let objective = match penalty {
            Some(spec) => loglik - penalty_value(n, &params, spec)?,
            None => loglik,
        };
        if !objective.is_finite() {
            return Err(PgmmError::numerical(None, format!("objective became {objective} at iteration {iterations}")));
        }
        trace.push(objective);
        if aitken_converged(&trace, config.tolerance) {
            converged = true;
            break;
        }
    }

    let loglik = contributions.sum();
    let penalized_loglik = match penalty {
        Some(spec) => loglik - penalty_value(n, &params, spec)?,
        None => loglik,
    };
    let nonzero_mask = params.nonzero_mask();
    Ok(FitResult {
        params,
        resp,
        loglik,
        penalized_loglik,
        loglik_trace: trace,
        nonzero_mask,
        converged,
        iterations,
        pilot_means: None,
        penalty: penalty.cloned(),
        start: 0,
        failed_starts: 0,
    })
}

/// Best pilot fit and best penalized fit per set of controls over all starts.
#[derive(Debug, Clone)]
pub struct MultiStartFit {
    pub pilot: FitResult,
    /// One entry per requested set of penalty controls, in order.
    pub penalized: Vec<Result<FitResult>>,
    pub failures: Vec<String>,
}

fn better(candidate: &FitResult, incumbent: &Option<FitResult>) -> bool {
    match incumbent {
        None => true,
        Some(best) => candidate.penalized_loglik > best.penalized_loglik,
    }
}

/// Multi-start fitting that shares one pilot run per start across all penalty
/// controls. Penalized run `k` of start `s` uses weights from pilot `s` and
/// starts from the same responsibilities.
pub fn fit_multi_start(
    data: &DataMatrix,
    config: &FitConfig,
    controls: &[PenaltyControls],
) -> Result<MultiStartFit> {
    config.validate(data)?;
    for c in controls {
        c.validate()?;
    }
    let mut best_pilot: Option<FitResult> = None;
    let mut best_penalized: Vec<Option<FitResult>> = vec![None; controls.len()];
    let mut penalized_failures: Vec<Vec<String>> = vec![Vec::new(); controls.len()];
    let mut failures = Vec::new();

    for start in 0..config.n_starts {
        let attempt = (|| -> Result<(Responsibilities, FitResult)> {
            let initial = initialize_responsibilities(data, config.g, config.init, config.start_seed(start))?;
            let pilot = run_from(data, config, &initial, None)?;
            Ok((initial, pilot))
        })();
        let (initial, mut pilot) = match attempt {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                failures.push(format!("start {start}: {e}"));
                continue;
            }
            Err(e) => return Err(e),
        };
        pilot.start = start;
        pilot.failed_starts = failures.len();
        pilot.pilot_means = Some(pilot.params.means().clone());

        for (k, c) in controls.iter().enumerate() {
            let outcome = c
                .with_pilot(pilot.params.means())
                .and_then(|spec| run_from(data, config, &initial, Some(&spec)));
            match outcome {
                Ok(mut fit) => {
                    fit.start = start;
                    fit.failed_starts = penalized_failures[k].len();
                    fit.pilot_means = Some(pilot.params.means().clone());
                    if better(&fit, &best_penalized[k]) {
                        best_penalized[k] = Some(fit);
                    }
                }
                Err(e) if e.is_numerical() => penalized_failures[k].push(format!("start {start}: {e}")),
                Err(e) => return Err(e),
            }
        }
        if better(&pilot, &best_pilot) {
            best_pilot = Some(pilot);
        }
    }

    let pilot = best_pilot.ok_or_else(|| PgmmError::FitFailure {
        starts: config.n_starts,
        first: failures.first().cloned().unwrap_or_default(),
        failures: failures.clone(),
    })?;
    let penalized = best_penalized
        .into_iter()
        .zip(penalized_failures)
        .map(|(best, fails)| {
            best.ok_or_else(|| PgmmError::FitFailure {
                starts: config.n_starts,
                first: fails.first().cloned().unwrap_or_default(),
                failures: fails,
            })
        })
        .collect();
    Ok(MultiStartFit {
        pilot,
        penalized,
        failures,
    })
}

/// Multi-start AECM. Without a penalty this returns the best unpenalized fit;
/// with one, the best penalized fit, each start using weights from its own pilot.
pub fn run_aecm(data: &DataMatrix, config: &FitConfig, penalty: Option<&PenaltyControls>) -> Result<FitResult> {
    match penalty {
        None => Ok(fit_multi_start(data, config, &[])?.pilot),
        Some(c) => fit_multi_start(data, config, std::slice::from_ref(c))?
            .penalized
            .pop()
            .expect("one penalized result per control"),
    }
}
