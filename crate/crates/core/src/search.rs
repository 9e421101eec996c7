//! Grid search over `(G, q, structure)` and replicated simulation studies.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aecm::{derive_seed, fit_multi_start, FitConfig, FitResult};
use crate::criteria::{fit_penalized_bic, Criterion, CriterionReport, SignTerm};
use crate::data::DataMatrix;
use crate::error::{PgmmError, Result};
use crate::metrics::{adjusted_rand_index, map_labels};
use crate::penalty::{PenaltyControls, DEFAULT_WEIGHT_CAP};
use crate::simgen::{generate_benchmark_mixture, ScenarioSpec, BENCHMARK_COMPONENTS};
use crate::structure::CovarianceStructure;

/// How the penalized fits of each cell are configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTemplate {
    /// When false no penalized fits run and the penalized criteria use `lambda = 0`.
    pub enabled: bool,
    pub adaptive_gamma: f64,
    pub lasso_gamma: f64,
    /// Multipliers of the default schedule; each criterion keeps its best value.
    pub c_grid: Vec<f64>,
    pub weight_cap: f64,
    pub sign_term: SignTerm,
}

impl Default for PenaltyTemplate {
    fn default() -> Self {
        PenaltyTemplate {
            enabled: true,
            adaptive_gamma: 1.0,
            lasso_gamma: 0.0,
            c_grid: vec![0.5, 1.0, 2.0],
            weight_cap: DEFAULT_WEIGHT_CAP,
            sign_term: SignTerm::Verbatim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub g_values: Vec<usize>,
    pub q_values: Vec<usize>,
    pub structures: Vec<CovarianceStructure>,
    /// Template for every cell; `g`, `q`, `structure` and `seed` are overwritten.
    pub fit_config: FitConfig,
    pub penalty: PenaltyTemplate,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl SearchGrid {
    pub fn new(g_values: Vec<usize>, q_values: Vec<usize>, structures: Vec<CovarianceStructure>) -> Self {
        SearchGrid {
            g_values,
            q_values,
            structures,
            fit_config: FitConfig::new(1, 1, CovarianceStructure::CCC),
            penalty: PenaltyTemplate::default(),
            threads: None,
        }
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.g_values.is_empty() || self.q_values.is_empty() || self.structures.is_empty() {
            return Err(PgmmError::contract("search grid has an empty axis"));
        }
        if self.g_values.contains(&0) || self.q_values.contains(&0) {
            return Err(PgmmError::contract("G and q values must be positive"));
        }
        if let Some(&q) = self.q_values.iter().max() {
            if q >= p {
                return Err(PgmmError::contract(format!("q={q} must be smaller than p={p}")));
            }
        }
        if self.penalty.enabled && self.penalty.c_grid.is_empty() {
            return Err(PgmmError::contract("penalized search needs at least one c value"));
        }
        if self.threads == Some(0) {
            return Err(PgmmError::contract("thread count must be positive"));
        }
        Ok(())
    }

    /// Cells in a fixed order: G, then q, then structure.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &g in &self.g_values {
            for &q in &self.q_values {
                for &structure in &self.structures {
                    out.push(CellKey { g, q, structure });
                }
            }
        }
        out
    }

    pub fn cell_seed(&self, key: &CellKey) -> u64 {
        let code = CovarianceStructure::ALL.iter().position(|s| *s == key.structure).unwrap_or(0) as u64;
        derive_seed(&[self.fit_config.seed, key.g as u64, key.q as u64, code])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub g: usize,
    pub q: usize,
    pub structure: CovarianceStructure,
}

/// The three fits behind a cell's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFits {
    pub pilot: FitResult,
    pub adaptive: FitResult,
    pub lasso: FitResult,
}

/// Compact, serializable view of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub loglik: f64,
    pub penalized_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub start: usize,
    pub zero_means: usize,
    pub lambda: Option<f64>,
}

impl From<&FitResult> for FitSummary {
    fn from(fit: &FitResult) -> Self {
        FitSummary {
            loglik: fit.loglik,
            penalized_loglik: fit.penalized_loglik,
            converged: fit.converged,
            iterations: fit.iterations,
            start: fit.start,
            zero_means: fit.zero_means(),
            lambda: fit.penalty.as_ref().map(|p| p.lambda()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    pub criteria: CriterionReport,
    pub adaptive_c: Option<f64>,
    pub lasso_c: Option<f64>,
    pub pilot: FitSummary,
    pub adaptive: FitSummary,
    pub lasso: FitSummary,
    pub failed_starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchCell {
    pub key: CellKey,
    pub seed: u64,
    pub scores: Option<CellScores>,
    pub error: Option<String>,
    #[serde(skip)]
    pub fits: Option<CellFits>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub cell: usize,
    pub key: CellKey,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub cells: Vec<SearchCell>,
    pub best_per_criterion: BTreeMap<Criterion, Selection>,
    pub ari_per_criterion: Option<BTreeMap<Criterion, f64>>,
}

impl SearchReport {
    /// Fit whose responsibilities back the given criterion's selection.
    pub fn selected_fit(&self, criterion: Criterion) -> Option<&FitResult> {
        let cell = &self.cells[self.best_per_criterion.get(&criterion)?.cell];
        let fits = cell.fits.as_ref()?;
        Some(fit_for(fits, criterion))
    }
}

fn fit_for(fits: &CellFits, criterion: Criterion) -> &FitResult {
    match criterion {
        Criterion::Alpbic => &fits.adaptive,
        Criterion::Lpbic => &fits.lasso,
        _ => &fits.pilot,
    }
}

/// Candidate entry for the arg-max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub value: f64,
    pub rho: usize,
    pub key: CellKey,
}

/// Index of the largest value; ties go to smaller rho, then G, then q, then the
/// structure order. Non-finite values are never selected.
pub fn best_candidate(candidates: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if !c.value.is_finite() {
            continue;
        }
        let replace = match best {
            None => true,
            Some(b) => {
                let inc = &candidates[b];
                c.value
                    .total_cmp(&inc.value)
                    .then(inc.rho.cmp(&c.rho))
                    .then(inc.key.g.cmp(&c.key.g))
                    .then(inc.key.q.cmp(&c.key.q))
                    .then(inc.key.structure.cmp(&c.key.structure))
                    .is_gt()
            }
        };
        if replace {
            best = Some(i);
        }
    }
    best
}

fn pick_best<'a>(
    fits: impl Iterator<Item = (f64, &'a Result<FitResult>)>,
    sign_term: SignTerm,
    unit_weights: bool,
) -> Result<Option<(f64, FitResult)>> {
    let mut best: Option<(f64, f64, FitResult)> = None;
    let mut first_error = None;
    for (c, fit) in fits {
        match fit {
            Ok(fit) => {
                let score = fit_penalized_bic(fit, sign_term, unit_weights)?;
                if best.as_ref().is_none_or(|b| score > b.1) {
                    best = Some((c, score, fit.clone()));
                }
            }
            Err(e) => {
                first_error.get_or_insert_with(|| e.clone());
            }
        }
    }
    match (best, first_error) {
        (Some((c, _, fit)), _) => Ok(Some((c, fit))),
        (None, Some(e)) => Err(e),
        (None, None) => Ok(None),
    }
}

fn fit_cell(data: &DataMatrix, grid: &SearchGrid, key: CellKey) -> SearchCell {
    let seed = grid.cell_seed(&key);
    let outcome = (|| -> Result<(CellScores, CellFits)> {
        let mut config = grid.fit_config.clone();
        config.g = key.g;
        config.q = key.q;
        config.structure = key.structure;
        config.seed = seed;
        let t = &grid.penalty;
        let (n, p) = (data.n(), data.p());
        let mut controls = Vec::new();
        if t.enabled {
            for &c in &t.c_grid {
                controls.push(PenaltyControls::from_schedule(n, p, t.adaptive_gamma, c, t.weight_cap)?);
                controls.push(PenaltyControls::from_schedule(n, p, t.lasso_gamma, c, t.weight_cap)?);
            }
        }
        let multi = fit_multi_start(data, &config, &controls)?;
        let (adaptive_c, adaptive, lasso_c, lasso) = if t.enabled {
            let adaptive_fits = t.c_grid.iter().copied().zip(multi.penalized.iter().step_by(2));
            let lasso_fits = t.c_grid.iter().copied().zip(multi.penalized.iter().skip(1).step_by(2));
            let (ac, a) = pick_best(adaptive_fits, t.sign_term, false)?.expect("non-empty c grid");
            let (lc, l) = pick_best(lasso_fits, t.sign_term, true)?.expect("non-empty c grid");
            (Some(ac), a, Some(lc), l)
        } else {
            (None, multi.pilot.clone(), None, multi.pilot.clone())
        };
        let criteria = CriterionReport::from_fits(&multi.pilot, &adaptive, &lasso, t.sign_term)?;
        let scores = CellScores {
            criteria,
            adaptive_c,
            lasso_c,
            pilot: (&multi.pilot).into(),
            adaptive: (&adaptive).into(),
            lasso: (&lasso).into(),
            failed_starts: multi.failures.len(),
        };
        Ok((
            scores,
            CellFits {
                pilot: multi.pilot,
                adaptive,
                lasso,
            },
        ))
    })();
    match outcome {
        Ok((scores, fits)) => SearchCell {
            key,
            seed,
            scores: Some(scores),
            error: None,
            fits: Some(fits),
        },
        Err(e) => SearchCell {
            key,
            seed,
            scores: None,
            error: Some(e.to_string()),
            fits: None,
        },
    }
}

/// Best successful cell for each criterion.
pub fn select_best(cells: &[SearchCell]) -> BTreeMap<Criterion, Selection> {
    let successful: Vec<(usize, &SearchCell, &CellScores)> = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.scores.as_ref().map(|s| (i, c, s)))
        .collect();
    let mut out = BTreeMap::new();
    for criterion in Criterion::ALL {
        let candidates: Vec<Candidate> = successful
            .iter()
            .map(|(_, cell, s)| Candidate {
                value: s.criteria.value(criterion),
                rho: match criterion {
                    Criterion::Alpbic => s.criteria.rho_tilde,
                    Criterion::Lpbic => s.criteria.lpbic_rho_tilde,
                    _ => s.criteria.rho,
                },
                key: cell.key,
            })
            .collect();
        if let Some(k) = best_candidate(&candidates) {
            let (index, cell, _) = successful[k];
            out.insert(
                criterion,
                Selection {
                    cell: index,
                    key: cell.key,
                    value: candidates[k].value,
                },
            );
        }
    }
    out
}

/// Fits every cell of the grid and records the winner under each criterion.
pub fn run_search(data: &DataMatrix, grid: &SearchGrid) -> Result<SearchReport> {
    grid.validate(data.p())?;
    let keys = grid.cells();
    let cells: Vec<SearchCell> = match grid.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| PgmmError::contract(format!("cannot build worker pool: {e}")))?
            .install(|| keys.par_iter().map(|&k| fit_cell(data, grid, k)).collect()),
        None => keys.par_iter().map(|&k| fit_cell(data, grid, k)).collect(),
    };
    if cells.iter().all(|c| c.scores.is_none()) {
        return Err(PgmmError::SearchFailure {
            cells: cells.len(),
            reasons: cells
                .iter()
                .map(|c| format!("G={} q={} {}: {}", c.key.g, c.key.q, c.key.structure, c.error.as_deref().unwrap_or("")))
                .collect(),
        });
    }
    let best_per_criterion = select_best(&cells);
    let mut report = SearchReport {
        cells,
        best_per_criterion,
        ari_per_criterion: None,
    };
    if let Some(labels) = data.labels() {
        let mut aris = BTreeMap::new();
        for criterion in Criterion::ALL {
            if let Some(fit) = report.selected_fit(criterion) {
                aris.insert(criterion, adjusted_rand_index(&map_labels(&fit.resp), labels)?);
            }
        }
        report.ari_per_criterion = Some(aris);
    }
    Ok(report)
}

/// What one replicate selected under one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateChoice {
    pub key: CellKey,
    pub ari: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub data_seed: u64,
    pub search_seed: u64,
    /// `None` marks a replicate whose search failed under that criterion.
    pub choices: BTreeMap<Criterion, Option<ReplicateChoice>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CriterionAggregate {
    pub correct_g: usize,
    pub q_counts: BTreeMap<usize, usize>,
    pub structure_counts: BTreeMap<CovarianceStructure, usize>,
    pub mean_ari: Option<f64>,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateStudy {
    pub scenario: ScenarioSpec,
    pub true_g: usize,
    pub replicates: Vec<ReplicateOutcome>,
    pub aggregates: BTreeMap<Criterion, CriterionAggregate>,
}

/// Per-criterion summaries recomputed from the replicate outcomes alone.
pub fn aggregate(replicates: &[ReplicateOutcome], true_g: usize) -> BTreeMap<Criterion, CriterionAggregate> {
    let mut out = BTreeMap::new();
    for criterion in Criterion::ALL {
        let mut agg = CriterionAggregate::default();
        let mut ari_sum = 0.0;
        let mut ari_count = 0usize;
        for r in replicates {
            match r.choices.get(&criterion).and_then(|c| c.as_ref()) {
                Some(choice) => {
                    if choice.key.g == true_g {
                        agg.correct_g += 1;
                    }
                    *agg.q_counts.entry(choice.key.q).or_insert(0) += 1;
                    *agg.structure_counts.entry(choice.key.structure).or_insert(0) += 1;
                    ari_sum += choice.ari;
                    ari_count += 1;
                }
                None => agg.missing += 1,
            }
        }
        agg.mean_ari = (ari_count > 0).then(|| ari_sum / ari_count as f64);
        out.insert(criterion, agg);
    }
    out
}

/// Seeds of replicate `r`: data and search streams derived from the scenario seed.
pub fn replicate_seeds(scenario: &ScenarioSpec, r: usize) -> (u64, u64) {
    (derive_seed(&[scenario.seed, r as u64, 0]), derive_seed(&[scenario.seed, r as u64, 1]))
}

/// Outcome of one replicate search, reduced to its selections.
pub fn replicate_outcome(replicate: usize, data_seed: u64, search_seed: u64, result: Result<SearchReport>) -> ReplicateOutcome {
    match result {
        Ok(report) => {
            let aris = report.ari_per_criterion.clone().unwrap_or_default();
            let choices = Criterion::ALL
                .into_iter()
                .map(|c| {
                    let choice = report.best_per_criterion.get(&c).map(|s| ReplicateChoice {
                        key: s.key,
                        ari: aris.get(&c).copied().unwrap_or(f64::NAN),
                    });
                    (c, choice)
                })
                .collect();
            ReplicateOutcome {
                replicate,
                data_seed,
                search_seed,
                choices,
                error: None,
            }
        }
        Err(e) => ReplicateOutcome {
            replicate,
            data_seed,
            search_seed,
            choices: Criterion::ALL.into_iter().map(|c| (c, None)).collect(),
            error: Some(e.to_string()),
        },
    }
}

/// Simulates `replicates` data sets from the three-component design and runs
/// the grid on each.
pub fn replicate_study(scenario: &ScenarioSpec, replicates: usize, grid: &SearchGrid) -> Result<ReplicateStudy> {
    if replicates == 0 {
        return Err(PgmmError::contract("need at least one replicate"));
    }
    let mut outcomes = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let (data_seed, search_seed) = replicate_seeds(scenario, r);
        let mut spec = scenario.clone();
        spec.seed = data_seed;
        let data = generate_benchmark_mixture(&spec)?;
        let mut cell_grid = grid.clone();
        cell_grid.fit_config.seed = search_seed;
        let result = run_search(&data, &cell_grid);
        if let Err(e @ PgmmError::Contract(_)) = &result {
            return Err(e.clone());
        }
        outcomes.push(replicate_outcome(r, data_seed, search_seed, result));
    }
    Ok(ReplicateStudy {
        scenario: scenario.clone(),
        true_g: BENCHMARK_COMPONENTS,
        aggregates: aggregate(&outcomes, BENCHMARK_COMPONENTS),
        replicates: outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(g: usize, q: usize) -> CellKey {
        CellKey {
            g,
            q,
            structure: CovarianceStructure::CCC,
        }
    }

    #[test]
    fn ties_resolve_to_smaller_rho_then_g_then_q() {
        let tie = [
            Candidate { value: 1.0, rho: 9, key: key(1, 1) },
            Candidate { value: 1.0, rho: 7, key: key(3, 2) },
        ];
        assert_eq!(best_candidate(&tie), Some(1));
        let tie = [
            Candidate { value: 1.0, rho: 7, key: key(3, 2) },
            Candidate { value: 1.0, rho: 7, key: key(2, 4) },
            Candidate { value: 1.0, rho: 7, key: key(2, 3) },
        ];
        assert_eq!(best_candidate(&tie), Some(2));
        let nan = [
            Candidate { value: f64::NAN, rho: 1, key: key(1, 1) },
            Candidate { value: -5.0, rho: 7, key: key(3, 2) },
        ];
        assert_eq!(best_candidate(&nan), Some(1));
        assert_eq!(best_candidate(&[]), None);
    }

    #[test]
    fn argmax_invariant_to_shift() {
        let base: Vec<Candidate> = (0..12)
            .map(|i| Candidate {
                value: ((i * 7) % 5) as f64 * 0.5,
                rho: 10 + i % 3,
                key: key(1 + i % 4, 1 + i / 4),
            })
            .collect();
        let best = best_candidate(&base);
        for shift in [-1e3, -1.0, 0.25, 1e3] {
            let shifted: Vec<Candidate> = base.iter().map(|c| Candidate { value: c.value + shift, ..*c }).collect();
            assert_eq!(best_candidate(&shifted), best);
        }
    }

    #[test]
    fn aggregate_counts() {
        let choice = |g, q, ari| {
            Some(ReplicateChoice {
                key: CellKey { g, q, structure: CovarianceStructure::CUU },
                ari,
            })
        };
        let outcome = |choices: Vec<Option<ReplicateChoice>>| ReplicateOutcome {
            replicate: 0,
            data_seed: 0,
            search_seed: 0,
            choices: Criterion::ALL.into_iter().zip(choices).collect(),
            error: None,
        };
        let reps = vec![
            outcome(vec![choice(3, 4, 0.8), choice(2, 1, 0.5), None, choice(3, 1, 1.0), choice(3, 4, 0.9)]),
            outcome(vec![choice(2, 4, 0.4), choice(3, 2, 0.7), None, choice(3, 1, 1.0), choice(3, 4, 0.7)]),
        ];
        let agg = aggregate(&reps, 3);
        assert_eq!(agg[&Criterion::Bic].correct_g, 1);
        assert_eq!(agg[&Criterion::Bic].q_counts, BTreeMap::from([(4, 2)]));
        assert!((agg[&Criterion::Bic].mean_ari.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(agg[&Criterion::Caic].missing, 2);
        assert_eq!(agg[&Criterion::Caic].mean_ari, None);
        assert_eq!(agg[&Criterion::Alpbic].correct_g, 2);
    }

    #[test]
    fn grid_validation() {
        let data = DataMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let grid = SearchGrid::new(vec![1], vec![2], vec![CovarianceStructure::CCC]);
        assert!(matches!(run_search(&data, &grid), Err(PgmmError::Contract(_))));
        let grid = SearchGrid::new(vec![], vec![1], vec![CovarianceStructure::CCC]);
        assert!(run_search(&data, &grid).is_err());
    }
}
