//! Command-line flags, config files and their resolution.
//!
//! Every flag can also be given in a TOML file passed with `--config`, under the
//! same long name. Flags on the command line win over file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pgmm::aecm::{DEFAULT_MAX_ITERATIONS, DEFAULT_STARTS, DEFAULT_TOLERANCE};
use pgmm::search::PenaltyTemplate;
use pgmm::{CovarianceStructure, FitConfig, InitStrategy, SignTerm};
use serde::{Deserialize, Serialize};

pub const THREADS_ENV: &str = "PGMM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "pgmm", version, about = "Parsimonious mixtures of factor analyzers with penalized model selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a simulated data set, its labels and a provenance record.
    Simulate(SimulateArgs),
    /// Fit a single (G, q, structure) model and report all criteria.
    Fit(FitArgs),
    /// Fit a grid of models and report the best per criterion.
    Search(SearchArgs),
    /// Repeat a grid search over simulated data sets.
    Replicate(ReplicateArgs),
    /// Adjusted Rand index between two label files.
    Ari(AriArgs),
}

macro_rules! merge_options {
    ($flags:expr, $file:expr; $($field:ident),* ; $($flag:ident),*) => {{
        $( if $flags.$field.is_none() { $flags.$field = $file.$field.clone(); } )*
        $( $flags.$flag |= $file.$flag; )*
    }};
}

fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimationFlags {
    /// Random starts per model.
    #[arg(long)]
    pub starts: Option<usize>,
    /// Base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initialization: `kmeans` or `random`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Aitken stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// `on` (default) or `off`; off skips the penalized fits.
    #[arg(long)]
    pub penalty: Option<String>,
    /// Multipliers of the default lambda schedule, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lambda_c: Option<Vec<f64>>,
    /// Weight exponent for ALPBIC fits.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub weight_cap: Option<f64>,
    /// `verbatim` or `minus-one`.
    #[arg(long)]
    pub sign_term: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataFlags {
    /// Data CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Optional true labels, one integer per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Skip one header row.
    #[arg(long)]
    pub header: bool,
    /// Z-score every column before fitting.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Three-component design (default).
    #[arg(long, conflicts_with = "sparse")]
    pub paper: bool,
    /// Sparse-mean design with identity covariances.
    #[arg(long)]
    pub sparse: bool,
    #[command(flatten)]
    pub options: SimulateOptions,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SimulateOptions {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Component size ratios, e.g. `4:3:3`.
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Multiplier on p.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Components of the sparse design.
    #[arg(long = "G", visible_alias = "g")]
    #[serde(rename = "G", alias = "g")]
    pub g: Option<usize>,
    #[arg(long)]
    pub zero_fraction: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub estimation: EstimationFlags,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    #[arg(long = "G", visible_alias = "g")]
    pub g: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub structure: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub estimation: EstimationFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional per-cell CSV table.
    #[arg(long)]
    pub cells_csv: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GridFlags {
    /// Component counts, e.g. `1-5` or `1,2,4`.
    #[arg(long = "G", visible_alias = "g")]
    pub g: Option<String>,
    /// Latent factor counts.
    #[arg(long)]
    pub q: Option<String>,
    /// Comma-separated structure codes or `all`.
    #[arg(long)]
    pub structures: Option<String>,
    /// Worker threads (default from PGMM_THREADS, else all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplicateArgs {
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub estimation: EstimationFlags,
    #[command(flatten)]
    pub scenario: ReplicateScenario,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ReplicateScenario {
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Ratio settings separated by commas, e.g. `4:3:3,3:4:3`.
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AriArgs {
    pub first: PathBuf,
    pub second: PathBuf,
}

// Config files are flat tables of long flag names. serde's `flatten` cannot be
// combined with `deny_unknown_fields`, so each command reads its own flat struct.
#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct FitConfigFile {
    data: Option<PathBuf>,
    labels: Option<PathBuf>,
    #[serde(default)]
    header: bool,
    #[serde(default)]
    standardize: bool,
    #[serde(rename = "G", alias = "g")]
    g: Option<usize>,
    q: Option<usize>,
    structure: Option<String>,
    starts: Option<usize>,
    seed: Option<u64>,
    init: Option<String>,
    max_iter: Option<usize>,
    tol: Option<f64>,
    penalty: Option<String>,
    lambda_c: Option<Vec<f64>>,
    gamma: Option<f64>,
    weight_cap: Option<f64>,
    sign_term: Option<String>,
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct SearchConfigFile {
    data: Option<PathBuf>,
    labels: Option<PathBuf>,
    #[serde(default)]
    header: bool,
    #[serde(default)]
    standardize: bool,
    #[serde(rename = "G", alias = "g")]
    g: Option<String>,
    q: Option<String>,
    structures: Option<String>,
    threads: Option<usize>,
    starts: Option<usize>,
    seed: Option<u64>,
    init: Option<String>,
    max_iter: Option<usize>,
    tol: Option<f64>,
    penalty: Option<String>,
    lambda_c: Option<Vec<f64>>,
    gamma: Option<f64>,
    weight_cap: Option<f64>,
    sign_term: Option<String>,
    out: Option<PathBuf>,
    cells_csv: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ReplicateConfigFile {
    #[serde(rename = "G", alias = "g")]
    g: Option<String>,
    q: Option<String>,
    structures: Option<String>,
    threads: Option<usize>,
    starts: Option<usize>,
    seed: Option<u64>,
    init: Option<String>,
    max_iter: Option<usize>,
    tol: Option<f64>,
    penalty: Option<String>,
    lambda_c: Option<Vec<f64>>,
    gamma: Option<f64>,
    weight_cap: Option<f64>,
    sign_term: Option<String>,
    n: Option<Vec<usize>>,
    p: Option<usize>,
    scale: Option<f64>,
    ratios: Option<String>,
    replicates: Option<usize>,
    out: Option<PathBuf>,
}

fn merge_estimation(flags: &mut EstimationFlags, file: EstimationFlags) {
    merge_options!(flags, file; starts, seed, init, max_iter, tol, penalty, lambda_c, gamma, weight_cap, sign_term;);
}

impl SimulateArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = &self.config {
            let file: SimulateOptions = load(path)?;
            merge_options!(self.options, file; n, p, ratios, seed, scale, g, zero_fraction, separation, out;);
        }
        Ok(self)
    }
}

impl FitArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = &self.config {
            let f: FitConfigFile = load(path)?;
            let data = DataFlags { data: f.data, labels: f.labels, header: f.header, standardize: f.standardize };
            merge_options!(self.data, data; data, labels; header, standardize);
            let model = ModelFlags { g: f.g, q: f.q, structure: f.structure };
            merge_options!(self.model, model; g, q, structure;);
            merge_estimation(
                &mut self.estimation,
                EstimationFlags {
                    starts: f.starts,
                    seed: f.seed,
                    init: f.init,
                    max_iter: f.max_iter,
                    tol: f.tol,
                    penalty: f.penalty,
                    lambda_c: f.lambda_c,
                    gamma: f.gamma,
                    weight_cap: f.weight_cap,
                    sign_term: f.sign_term,
                },
            );
            if self.out.is_none() {
                self.out = f.out;
            }
        }
        Ok(self)
    }
}

impl SearchArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = &self.config {
            let f: SearchConfigFile = load(path)?;
            let data = DataFlags { data: f.data, labels: f.labels, header: f.header, standardize: f.standardize };
            merge_options!(self.data, data; data, labels; header, standardize);
            let grid = GridFlags { g: f.g, q: f.q, structures: f.structures, threads: f.threads };
            merge_options!(self.grid, grid; g, q, structures, threads;);
            merge_estimation(
                &mut self.estimation,
                EstimationFlags {
                    starts: f.starts,
                    seed: f.seed,
                    init: f.init,
                    max_iter: f.max_iter,
                    tol: f.tol,
                    penalty: f.penalty,
                    lambda_c: f.lambda_c,
                    gamma: f.gamma,
                    weight_cap: f.weight_cap,
                    sign_term: f.sign_term,
                },
            );
            if self.out.is_none() {
                self.out = f.out;
            }
            if self.cells_csv.is_none() {
                self.cells_csv = f.cells_csv;
            }
        }
        Ok(self)
    }
}

impl ReplicateArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = &self.config {
            let f: ReplicateConfigFile = load(path)?;
            let grid = GridFlags { g: f.g, q: f.q, structures: f.structures, threads: f.threads };
            merge_options!(self.grid, grid; g, q, structures, threads;);
            merge_estimation(
                &mut self.estimation,
                EstimationFlags {
                    starts: f.starts,
                    seed: f.seed,
                    init: f.init,
                    max_iter: f.max_iter,
                    tol: f.tol,
                    penalty: f.penalty,
                    lambda_c: f.lambda_c,
                    gamma: f.gamma,
                    weight_cap: f.weight_cap,
                    sign_term: f.sign_term,
                },
            );
            let scenario = ReplicateScenario {
                n: f.n,
                p: f.p,
                scale: f.scale,
                ratios: f.ratios,
                replicates: f.replicates,
            };
            merge_options!(self.scenario, scenario; n, p, scale, ratios, replicates;);
            if self.out.is_none() {
                self.out = f.out;
            }
        }
        Ok(self)
    }
}

/// Fully resolved estimation settings, echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedEstimation {
    pub starts: usize,
    pub seed: u64,
    pub init: InitStrategy,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub penalty: PenaltyTemplate,
}

impl EstimationFlags {
    pub fn resolve(&self) -> Result<ResolvedEstimation> {
        let enabled = match self.penalty.as_deref().unwrap_or("on") {
            "on" => true,
            "off" => false,
            other => bail!("--penalty must be `on` or `off`, got `{other}`"),
        };
        let sign_term = match self.sign_term.as_deref().unwrap_or("verbatim") {
            "verbatim" => SignTerm::Verbatim,
            "minus-one" => SignTerm::MinusOne,
            other => bail!("--sign-term must be `verbatim` or `minus-one`, got `{other}`"),
        };
        let defaults = PenaltyTemplate::default();
        let c_grid = self.lambda_c.clone().unwrap_or(defaults.c_grid.clone());
        if c_grid.is_empty() || c_grid.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            bail!("--lambda-c values must be finite and non-negative");
        }
        let gamma = self.gamma.unwrap_or(defaults.adaptive_gamma);
        if !(0.0..=1.0).contains(&gamma) {
            bail!("--gamma must lie in [0, 1]");
        }
        let tolerance = self.tol.unwrap_or(DEFAULT_TOLERANCE);
        if !(tolerance > 0.0) {
            bail!("--tol must be positive");
        }
        let starts = self.starts.unwrap_or(DEFAULT_STARTS);
        if starts == 0 {
            bail!("--starts must be at least 1");
        }
        Ok(ResolvedEstimation {
            starts,
            seed: self.seed.unwrap_or(0),
            init: match self.init.as_deref() {
                None => InitStrategy::Kmeans,
                Some(s) => s.parse()?,
            },
            max_iterations: self.max_iter.unwrap_or(DEFAULT_MAX_ITERATIONS),
            tolerance,
            penalty: PenaltyTemplate {
                enabled,
                adaptive_gamma: gamma,
                c_grid: if enabled { c_grid } else { Vec::new() },
                weight_cap: self.weight_cap.unwrap_or(defaults.weight_cap),
                sign_term,
                ..defaults
            },
        })
    }
}

impl ResolvedEstimation {
    pub fn fit_config(&self, g: usize, q: usize, structure: CovarianceStructure) -> FitConfig {
        let mut config = FitConfig::new(g, q, structure);
        config.n_starts = self.starts;
        config.seed = self.seed;
        config.init = self.init;
        config.max_iterations = self.max_iterations;
        config.tolerance = self.tolerance;
        config
    }
}

/// Parses `3`, `1-5` or `1,2,4` into a sorted list without duplicates.
pub fn parse_range(text: &str, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parse = |s: &str| -> Result<usize> {
            s.trim().parse::<usize>().with_context(|| format!("invalid {what} value `{s}`"))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    bail!("empty {what} range `{part}`");
                }
                out.extend(a..=b);
            }
            None => out.push(parse(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        bail!("no {what} values given");
    }
    Ok(out)
}

pub fn parse_structures(text: &str) -> Result<Vec<CovarianceStructure>> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(CovarianceStructure::ALL.to_vec());
    }
    let mut out = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<CovarianceStructure>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        bail!("no covariance structures given");
    }
    Ok(out)
}

pub fn parse_ratios(text: &str) -> Result<Vec<usize>> {
    let ratios = text
        .split(':')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("invalid ratio `{text}`")))
        .collect::<Result<Vec<_>>>()?;
    if ratios.iter().any(|&r| r == 0) {
        bail!("ratios must be positive, got `{text}`");
    }
    Ok(ratios)
}

pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    match flag {
        Some(0) => bail!("--threads must be positive"),
        Some(t) => Ok(Some(t)),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => {
                let t: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}=`{v}` is not a positive integer"))?;
                if t == 0 {
                    bail!("{THREADS_ENV} must be positive");
                }
                Ok(Some(t))
            }
            Err(_) => Ok(None),
        },
    }
}
