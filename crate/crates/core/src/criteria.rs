//! Information criteria for model selection. Every criterion here is maximized.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::aecm::FitResult;
use crate::covariance::param_count;
use crate::error::{PgmmError, Result};
use crate::penalty::{information_inverse_diagonals, sign, PenaltySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Bic,
    Aic,
    Caic,
    Lpbic,
    Alpbic,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Bic,
        Criterion::Aic,
        Criterion::Caic,
        Criterion::Lpbic,
        Criterion::Alpbic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Bic => "bic",
            Criterion::Aic => "aic",
            Criterion::Caic => "caic",
            Criterion::Lpbic => "lpbic",
            Criterion::Alpbic => "alpbic",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = PgmmError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == lower)
            .ok_or_else(|| PgmmError::contract(format!("unknown criterion `{s}`")))
    }
}

/// Handling of the sign term inside the penalized-BIC bracket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignTerm {
    /// Subtract `sign(mu)`, so negative means add one to the bracket.
    #[default]
    Verbatim,
    /// Subtract one for every nonzero mean.
    MinusOne,
}

pub fn bic(loglik: f64, rho: usize, n: usize) -> f64 {
    2.0 * loglik - rho as f64 * (n as f64).ln()
}

pub fn aic(loglik: f64, rho: usize) -> f64 {
    2.0 * loglik - 2.0 * rho as f64
}

pub fn caic(loglik: f64, rho: usize, n: usize) -> f64 {
    2.0 * loglik - rho as f64 * ((n as f64).ln() + 1.0)
}

/// Penalized BIC from its ingredients:
/// `2 logL - rho_tilde log n - (2 n lambda / G) sum_{nonzero} w [|mu| + v/|mu| - s]`.
#[allow(clippy::too_many_arguments)]
pub fn penalized_bic(
    loglik: f64,
    rho_tilde: usize,
    n: usize,
    lambda: f64,
    means: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    info_diag: &DMatrix<f64>,
    sign_term: SignTerm,
) -> Result<f64> {
    if weights.shape() != means.shape() || info_diag.shape() != means.shape() {
        return Err(PgmmError::contract("means, weights and information diagonals must share a shape"));
    }
    let g = means.nrows();
    let mut total = 0.0;
    for ((&mu, &w), &v) in means.iter().zip(weights.iter()).zip(info_diag.iter()) {
        if mu == 0.0 {
            continue;
        }
        let s = match sign_term {
            SignTerm::Verbatim => sign(mu),
            SignTerm::MinusOne => 1.0,
        };
        total += w * (mu.abs() + v / mu.abs() - s);
    }
    let third = if lambda == 0.0 {
        0.0
    } else {
        2.0 * n as f64 * lambda / g as f64 * total
    };
    Ok(bic(loglik, rho_tilde, n) - third)
}

/// Full free-parameter count of the fitted model.
pub fn rho(fit: &FitResult) -> Result<usize> {
    let params = &fit.params;
    Ok(param_count(params.structure(), params.p(), params.q(), params.g())?.total)
}

fn checked_mask(fit: &FitResult) -> Result<Vec<usize>> {
    let means = fit.params.means();
    if fit.nonzero_mask.len() != means.nrows() {
        return Err(PgmmError::contract("nonzero mask has the wrong number of components"));
    }
    fit.nonzero_mask
        .iter()
        .enumerate()
        .map(|(g, row)| {
            if row.len() != means.ncols() {
                return Err(PgmmError::contract("nonzero mask has the wrong width"));
            }
            for (j, &nz) in row.iter().enumerate() {
                if nz != (means[(g, j)] != 0.0) {
                    return Err(PgmmError::contract(format!(
                        "nonzero mask disagrees with mean ({g}, {j})"
                    )));
                }
            }
            Ok(row.iter().filter(|&&nz| nz).count())
        })
        .collect()
}

/// Free parameters left after discarding zero means.
pub fn rho_tilde(fit: &FitResult) -> Result<usize> {
    let nonzero: usize = checked_mask(fit)?.iter().sum();
    let zeros = fit.params.g() * fit.params.p() - nonzero;
    Ok(rho(fit)? - zeros)
}

pub fn alpbic(fit: &FitResult, penalty: &PenaltySpec, info_diag: &DMatrix<f64>, sign_term: SignTerm) -> Result<f64> {
    penalized_bic(
        fit.loglik,
        rho_tilde(fit)?,
        fit.n(),
        penalty.lambda(),
        fit.params.means(),
        penalty.weights(),
        info_diag,
        sign_term,
    )
}

/// The same bracket with every weight set to one.
pub fn lpbic(fit: &FitResult, penalty: &PenaltySpec, info_diag: &DMatrix<f64>, sign_term: SignTerm) -> Result<f64> {
    alpbic(fit, &penalty.with_unit_weights(), info_diag, sign_term)
}

/// Penalized BIC of a fit using its own penalty, or `lambda = 0` when unpenalized.
pub fn fit_penalized_bic(fit: &FitResult, sign_term: SignTerm, unit_weights: bool) -> Result<f64> {
    let info = information_inverse_diagonals(&fit.params)?;
    match &fit.penalty {
        Some(spec) if unit_weights => lpbic(fit, spec, &info, sign_term),
        Some(spec) => alpbic(fit, spec, &info, sign_term),
        None => {
            let ones = DMatrix::from_element(fit.params.g(), fit.params.p(), 1.0);
            penalized_bic(fit.loglik, rho_tilde(fit)?, fit.n(), 0.0, fit.params.means(), &ones, &info, sign_term)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub bic: f64,
    pub aic: f64,
    pub caic: f64,
    pub lpbic: f64,
    pub alpbic: f64,
    pub rho: usize,
    /// Nonzero count of the fit scored by ALPBIC.
    pub rho_tilde: usize,
    pub per_component_nonzeros: Vec<usize>,
    /// Nonzero count of the fit scored by LPBIC.
    pub lpbic_rho_tilde: usize,
}

impl CriterionReport {
    /// Scores BIC, AIC and CAIC on the unpenalized fit and the penalized pair on
    /// their own fits.
    pub fn from_fits(
        pilot: &FitResult,
        adaptive: &FitResult,
        lasso: &FitResult,
        sign_term: SignTerm,
    ) -> Result<Self> {
        let n = pilot.n();
        let rho = rho(pilot)?;
        Ok(CriterionReport {
            bic: bic(pilot.loglik, rho, n),
            aic: aic(pilot.loglik, rho),
            caic: caic(pilot.loglik, rho, n),
            lpbic: fit_penalized_bic(lasso, sign_term, true)?,
            alpbic: fit_penalized_bic(adaptive, sign_term, false)?,
            rho,
            rho_tilde: rho_tilde(adaptive)?,
            per_component_nonzeros: checked_mask(adaptive)?,
            lpbic_rho_tilde: rho_tilde(lasso)?,
        })
    }

    pub fn value(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Bic => self.bic,
            Criterion::Aic => self.aic,
            Criterion::Caic => self.caic,
            Criterion::Lpbic => self.lpbic,
            Criterion::Alpbic => self.alpbic,
        }
    }
}
