//! Command implementations. Each returns after writing its outputs once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pgmm::metrics::{adjusted_rand_index, map_labels};
use pgmm::search::{run_search, replicate_study, CellKey, CriterionAggregate, ReplicateStudy, SearchGrid, SearchReport};
use pgmm::simgen::{component_sizes, generate_benchmark_mixture, generate_sparse_mixture, ScenarioSpec, BENCHMARK_P};
use pgmm::{CovarianceStructure, Criterion, CriterionReport, DataMatrix, VERSION};
use serde::Serialize;

use crate::config::{
    parse_range, parse_ratios, parse_structures, resolve_threads, AriArgs, Command, DataFlags, FitArgs, GridFlags,
    ReplicateArgs, ResolvedEstimation, SearchArgs, SimulateArgs,
};
use crate::io::{format_data, format_labels, read_data, read_labels, write_file};

pub const TOOL: &str = "pgmm";

const DEFAULT_SIM_N: usize = 100;
const DEFAULT_RATIOS: &str = "4:3:3";
const DEFAULT_SPARSE_P: usize = 30;
const DEFAULT_SPARSE_G: usize = 2;
const DEFAULT_ZERO_FRACTION: f64 = 0.5;
const DEFAULT_SEPARATION: f64 = 3.0;
const DEFAULT_G_RANGE: &str = "1-5";
const DEFAULT_Q_RANGE: &str = "1-6";
const DEFAULT_REPLICATE_N: [usize; 4] = [40, 100, 200, 500];
const DEFAULT_REPLICATE_RATIOS: &str = "4:3:3,3:4:3,3:3:4";
const DEFAULT_REPLICATES: usize = 25;

/// Envelope shared by every JSON report. Field order is the output key order.
#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: C,
    result: R,
    wall_clock_seconds: f64,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => simulate(args.merged()?),
        Command::Fit(args) => fit(args.merged()?),
        Command::Search(args) => search(args.merged()?),
        Command::Replicate(args) => replicate(args.merged()?),
        Command::Ari(args) => ari(args),
    }
}

pub fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Simulate(_) => "simulate",
        Command::Fit(_) => "fit",
        Command::Search(_) => "search",
        Command::Replicate(_) => "replicate",
        Command::Ari(_) => "ari",
    }
}

fn emit<C: Serialize, R: Serialize>(command: &str, config: C, result: R, started: Instant, out: Option<&Path>) -> Result<()> {
    let report = Report {
        tool: TOOL,
        version: VERSION,
        command,
        config,
        result,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct ResolvedData {
    data: PathBuf,
    labels: Option<PathBuf>,
    header: bool,
    standardize: bool,
    n: usize,
    p: usize,
}

fn load_data(flags: &DataFlags) -> Result<(DataMatrix, ResolvedData)> {
    let Some(path) = &flags.data else {
        bail!("--data is required");
    };
    let mut data = read_data(path, flags.header)?;
    if flags.standardize {
        data = data.standardized();
    }
    if let Some(labels_path) = &flags.labels {
        let labels = read_labels(labels_path)?;
        data = data
            .with_labels(labels)
            .with_context(|| format!("labels in {} do not match the data", labels_path.display()))?;
    }
    let resolved = ResolvedData {
        data: path.clone(),
        labels: flags.labels.clone(),
        header: flags.header,
        standardize: flags.standardize,
        n: data.n(),
        p: data.p(),
    };
    Ok((data, resolved))
}

fn parse_structure(text: &str) -> Result<CovarianceStructure> {
    Ok(text.trim().parse::<CovarianceStructure>()?)
}

// ---- simulate ----

#[derive(Serialize)]
#[serde(tag = "design", rename_all = "kebab-case")]
enum SimulateConfig {
    Benchmark {
        scenario: ScenarioSpec,
        component_sizes: Vec<usize>,
    },
    Sparse {
        n: usize,
        p: usize,
        #[serde(rename = "G")]
        g: usize,
        zero_fraction: f64,
        separation: f64,
        seed: u64,
    },
}

#[derive(Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: SimulateConfig,
    files: Vec<String>,
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let o = &args.options;
    let Some(out) = &o.out else {
        bail!("--out directory is required");
    };
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let n = o.n.unwrap_or(DEFAULT_SIM_N);
    let seed = o.seed.unwrap_or(0);
    let mut files = vec!["data.csv".to_string(), "labels.csv".to_string()];
    let (data, config, means) = if args.sparse {
        let p = o.p.unwrap_or(DEFAULT_SPARSE_P);
        let g = o.g.unwrap_or(DEFAULT_SPARSE_G);
        let zero_fraction = o.zero_fraction.unwrap_or(DEFAULT_ZERO_FRACTION);
        let separation = o.separation.unwrap_or(DEFAULT_SEPARATION);
        let sim = generate_sparse_mixture(n, p, g, zero_fraction, separation, seed)?;
        let config = SimulateConfig::Sparse {
            n,
            p,
            g,
            zero_fraction,
            separation,
            seed,
        };
        files.push("means.csv".to_string());
        (sim.data, config, Some(sim.means))
    } else {
        let ratios = parse_ratios(o.ratios.as_deref().unwrap_or(DEFAULT_RATIOS))?;
        let mut scenario = ScenarioSpec::new(n, o.p.unwrap_or(BENCHMARK_P), ratios, seed);
        scenario.scale = o.scale;
        let data = generate_benchmark_mixture(&scenario)?;
        let sizes = component_sizes(n, &scenario.ratios)?;
        (
            data,
            SimulateConfig::Benchmark {
                scenario,
                component_sizes: sizes,
            },
            None,
        )
    };
    write_file(&out.join("data.csv"), &format_data(&data))?;
    write_file(&out.join("labels.csv"), &format_labels(data.labels().unwrap_or_default()))?;
    if let Some(means) = means {
        let m = DataMatrix::new(means)?;
        write_file(&out.join("means.csv"), &format_data(&m))?;
    }
    files.push("provenance.json".to_string());
    let provenance = Provenance {
        tool: TOOL,
        version: VERSION,
        command: "simulate",
        config,
        files,
    };
    let mut text = serde_json::to_string_pretty(&provenance)?;
    text.push('\n');
    write_file(&out.join("provenance.json"), &text)
}

// ---- fit ----

#[derive(Serialize)]
struct FitConfigEcho {
    input: ResolvedData,
    #[serde(rename = "G")]
    g: usize,
    q: usize,
    structure: CovarianceStructure,
    cell_seed: u64,
    estimation: ResolvedEstimation,
}

#[derive(Serialize)]
struct FitSummaryResult {
    criteria: CriterionReport,
    converged: bool,
    iterations: usize,
    loglik: f64,
    penalized_loglik: f64,
    nonzero_means: usize,
    zero_means: usize,
    adaptive_c: Option<f64>,
    lasso_c: Option<f64>,
    lambda: Option<f64>,
    failed_starts: usize,
    pilot: pgmm::search::FitSummary,
    adaptive: pgmm::search::FitSummary,
    lasso: pgmm::search::FitSummary,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    labels: Vec<usize>,
    ari: Option<f64>,
}

fn fit(args: FitArgs) -> Result<()> {
    let started = Instant::now();
    let (data, input) = load_data(&args.data)?;
    let Some(g) = args.model.g else {
        bail!("--G is required");
    };
    let Some(q) = args.model.q else {
        bail!("--q is required");
    };
    let structure = parse_structure(args.model.structure.as_deref().unwrap_or("CUU"))?;
    let estimation = args.estimation.resolve()?;
    let mut grid = SearchGrid::new(vec![g], vec![q], vec![structure]);
    grid.fit_config = estimation.fit_config(g, q, structure);
    grid.penalty = estimation.penalty.clone();
    grid.threads = Some(1);
    let key = CellKey { g, q, structure };
    let cell_seed = grid.cell_seed(&key);
    let report = run_search(&data, &grid)?;
    let cell = &report.cells[0];
    let (scores, fits) = match (&cell.scores, &cell.fits) {
        (Some(s), Some(f)) => (s, f),
        _ => unreachable!("a single-cell search either fails or scores its cell"),
    };
    // The adaptive fit is the sparse estimate behind ALPBIC; with the penalty off
    // it is the pilot fit itself.
    let best = &fits.adaptive;
    let labels = map_labels(&best.resp);
    let ari = match data.labels() {
        Some(truth) => Some(adjusted_rand_index(&labels, truth)?),
        None => None,
    };
    let means = best.params.means();
    let result = FitSummaryResult {
        criteria: scores.criteria.clone(),
        converged: best.converged,
        iterations: best.iterations,
        loglik: best.loglik,
        penalized_loglik: best.penalized_loglik,
        nonzero_means: means.len() - best.zero_means(),
        zero_means: best.zero_means(),
        adaptive_c: scores.adaptive_c,
        lasso_c: scores.lasso_c,
        lambda: scores.adaptive.lambda,
        failed_starts: scores.failed_starts,
        pilot: scores.pilot.clone(),
        adaptive: scores.adaptive.clone(),
        lasso: scores.lasso.clone(),
        weights: best.params.weights().iter().copied().collect(),
        means: (0..means.nrows()).map(|r| means.row(r).iter().copied().collect()).collect(),
        labels,
        ari,
    };
    let config = FitConfigEcho {
        input,
        g,
        q,
        structure,
        cell_seed,
        estimation,
    };
    emit("fit", config, result, started, args.out.as_deref())
}

// ---- search ----

#[derive(Serialize)]
struct ResolvedGrid {
    #[serde(rename = "G")]
    g: Vec<usize>,
    q: Vec<usize>,
    structures: Vec<CovarianceStructure>,
    threads: Option<usize>,
}

fn resolve_grid(flags: &GridFlags) -> Result<ResolvedGrid> {
    Ok(ResolvedGrid {
        g: parse_range(flags.g.as_deref().unwrap_or(DEFAULT_G_RANGE), "G")?,
        q: parse_range(flags.q.as_deref().unwrap_or(DEFAULT_Q_RANGE), "q")?,
        structures: parse_structures(flags.structures.as_deref().unwrap_or("all"))?,
        threads: resolve_threads(flags.threads)?,
    })
}

fn build_grid(resolved: &ResolvedGrid, estimation: &ResolvedEstimation) -> SearchGrid {
    let mut grid = SearchGrid::new(resolved.g.clone(), resolved.q.clone(), resolved.structures.clone());
    grid.fit_config = estimation.fit_config(1, 1, CovarianceStructure::CCC);
    grid.penalty = estimation.penalty.clone();
    grid.threads = resolved.threads;
    grid
}

#[derive(Serialize)]
struct SearchConfigEcho {
    input: ResolvedData,
    grid: ResolvedGrid,
    estimation: ResolvedEstimation,
    cells_csv: Option<PathBuf>,
}

fn search(args: SearchArgs) -> Result<()> {
    let started = Instant::now();
    let (data, input) = load_data(&args.data)?;
    let resolved = resolve_grid(&args.grid)?;
    let estimation = args.estimation.resolve()?;
    let grid = build_grid(&resolved, &estimation);
    let report = run_search(&data, &grid)?;
    if let Some(path) = &args.cells_csv {
        write_file(path, &cells_table(&report)?)?;
    }
    let config = SearchConfigEcho {
        input,
        grid: resolved,
        estimation,
        cells_csv: args.cells_csv.clone(),
    };
    emit("search", config, &report, started, args.out.as_deref())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per grid cell; failed cells keep their key and reason.
pub fn cells_table(report: &SearchReport) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record([
        "G", "q", "structure", "seed", "status", "bic", "aic", "caic", "lpbic", "alpbic", "rho", "rho_tilde",
        "lpbic_rho_tilde", "pilot_loglik", "converged", "iterations", "adaptive_c", "lasso_c", "zero_means", "error",
    ])?;
    for cell in &report.cells {
        let k = cell.key;
        let mut row = vec![k.g.to_string(), k.q.to_string(), k.structure.to_string(), cell.seed.to_string()];
        match &cell.scores {
            Some(s) => {
                let c = &s.criteria;
                row.push("ok".into());
                row.extend([c.bic, c.aic, c.caic, c.lpbic, c.alpbic].map(|v| v.to_string()));
                row.extend([c.rho, c.rho_tilde, c.lpbic_rho_tilde].map(|v| v.to_string()));
                row.push(s.pilot.loglik.to_string());
                row.push(s.pilot.converged.to_string());
                row.push(s.pilot.iterations.to_string());
                row.push(opt(s.adaptive_c));
                row.push(opt(s.lasso_c));
                row.push(s.adaptive.zero_means.to_string());
                row.push(String::new());
            }
            None => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 14));
                row.push(cell.error.clone().unwrap_or_default());
            }
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)?)
}

// ---- replicate ----

#[derive(Serialize)]
struct ScenarioEcho {
    n: Vec<usize>,
    p: usize,
    scale: Option<f64>,
    ratios: Vec<Vec<usize>>,
    replicates: usize,
}

#[derive(Serialize)]
struct ReplicateConfigEcho {
    scenario: ScenarioEcho,
    grid: ResolvedGrid,
    estimation: ResolvedEstimation,
}

/// One line of the plot-ready summary: a setting and a criterion.
#[derive(Serialize)]
struct SummaryRow {
    n: usize,
    ratios: String,
    criterion: Criterion,
    replicates: usize,
    correct_g: usize,
    mean_ari: Option<f64>,
    missing: usize,
    q_counts: BTreeMap<usize, usize>,
    structure_counts: BTreeMap<CovarianceStructure, usize>,
}

#[derive(Serialize)]
struct ReplicateResult {
    summary: Vec<SummaryRow>,
    studies: Vec<ReplicateStudy>,
}

fn ratio_label(ratios: &[usize]) -> String {
    ratios.iter().map(usize::to_string).collect::<Vec<_>>().join(":")
}

fn replicate(args: ReplicateArgs) -> Result<()> {
    let started = Instant::now();
    let s = &args.scenario;
    let ns = s.n.clone().unwrap_or(DEFAULT_REPLICATE_N.to_vec());
    if ns.is_empty() {
        bail!("--n needs at least one sample size");
    }
    let ratio_sets = s
        .ratios
        .as_deref()
        .unwrap_or(DEFAULT_REPLICATE_RATIOS)
        .split(',')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(parse_ratios)
        .collect::<Result<Vec<_>>>()?;
    if ratio_sets.is_empty() {
        bail!("--ratios needs at least one setting");
    }
    let p = s.p.unwrap_or(BENCHMARK_P);
    let replicates = s.replicates.unwrap_or(DEFAULT_REPLICATES);
    let resolved = resolve_grid(&args.grid)?;
    let estimation = args.estimation.resolve()?;
    let grid = build_grid(&resolved, &estimation);

    let mut studies = Vec::new();
    let mut summary = Vec::new();
    for &n in &ns {
        for ratios in &ratio_sets {
            // Settings share the base seed but never the data: n and the
            // ratios enter the scenario seed.
            let mut key = vec![estimation.seed, n as u64];
            key.extend(ratios.iter().map(|&r| r as u64));
            let mut scenario = ScenarioSpec::new(n, p, ratios.clone(), pgmm::aecm::derive_seed(&key));
            scenario.scale = s.scale;
            let study = replicate_study(&scenario, replicates, &grid)?;
            for (criterion, agg) in &study.aggregates {
                let CriterionAggregate {
                    correct_g,
                    q_counts,
                    structure_counts,
                    mean_ari,
                    missing,
                } = agg.clone();
                summary.push(SummaryRow {
                    n,
                    ratios: ratio_label(ratios),
                    criterion: *criterion,
                    replicates,
                    correct_g,
                    mean_ari,
                    missing,
                    q_counts,
                    structure_counts,
                });
            }
            studies.push(study);
        }
    }
    let config = ReplicateConfigEcho {
        scenario: ScenarioEcho {
            n: ns,
            p,
            scale: s.scale,
            ratios: ratio_sets,
            replicates,
        },
        grid: resolved,
        estimation,
    };
    emit("replicate", config, ReplicateResult { summary, studies }, started, args.out.as_deref())
}

// ---- ari ----

fn ari(args: AriArgs) -> Result<()> {
    let a = read_labels(&args.first)?;
    let b = read_labels(&args.second)?;
    if a.len() != b.len() {
        bail!(
            "{} has {} labels but {} has {}",
            args.first.display(),
            a.len(),
            args.second.display(),
            b.len()
        );
    }
    println!("{:.6}", adjusted_rand_index(&a, &b)?);
    Ok(())
}
