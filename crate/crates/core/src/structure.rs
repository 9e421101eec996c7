use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::PgmmError;

/// One of the eight constraint patterns on `Lambda_g Lambda_g' + Psi_g`.
///
/// Letters, left to right: loadings shared across components, noise shared
/// across components, noise isotropic. `C` means the constraint is imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CovarianceStructure {
    CCC,
    CCU,
    CUC,
    CUU,
    UCC,
    UCU,
    UUC,
    UUU,
}

impl CovarianceStructure {
    pub const ALL: [CovarianceStructure; 8] = [
        CovarianceStructure::CCC,
        CovarianceStructure::CCU,
        CovarianceStructure::CUC,
        CovarianceStructure::CUU,
        CovarianceStructure::UCC,
        CovarianceStructure::UCU,
        CovarianceStructure::UUC,
        CovarianceStructure::UUU,
    ];

    pub fn from_flags(loadings_shared: bool, noise_shared: bool, isotropic: bool) -> Self {
        use CovarianceStructure::*;
        match (loadings_shared, noise_shared, isotropic) {
            (true, true, true) => CCC,
            (true, true, false) => CCU,
            (true, false, true) => CUC,
            (true, false, false) => CUU,
            (false, true, true) => UCC,
            (false, true, false) => UCU,
            (false, false, true) => UUC,
            (false, false, false) => UUU,
        }
    }

    pub fn loadings_shared(self) -> bool {
        matches!(self.code().as_bytes()[0], b'C')
    }

    pub fn noise_shared(self) -> bool {
        matches!(self.code().as_bytes()[1], b'C')
    }

    pub fn isotropic(self) -> bool {
        matches!(self.code().as_bytes()[2], b'C')
    }

    pub fn code(self) -> &'static str {
        use CovarianceStructure::*;
        match self {
            CCC => "CCC",
            CCU => "CCU",
            CUC => "CUC",
            CUU => "CUU",
            UCC => "UCC",
            UCU => "UCU",
            UUC => "UUC",
            UUU => "UUU",
        }
    }

    /// Number of stored loading slices for `g` components.
    pub fn loading_slices(self, g: usize) -> usize {
        if self.loadings_shared() {
            1
        } else {
            g
        }
    }

    pub fn noise_slices(self, g: usize) -> usize {
        if self.noise_shared() {
            1
        } else {
            g
        }
    }
}

impl fmt::Display for CovarianceStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for CovarianceStructure {
    type Err = PgmmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        CovarianceStructure::ALL
            .into_iter()
            .find(|c| c.code() == upper)
            .ok_or_else(|| PgmmError::contract(format!("unknown covariance structure `{s}`")))
    }
}
