//! Stationary spatial increments of the pinned string.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::report::{Cell, Table};
use crate::spectral::{build_basis, Convention, SpectralBasis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementStat {
    pub i: usize,
    pub j: usize,
    pub mean: f64,
    pub variance: f64,
    pub convention: Convention,
}

/// Per-mode stationary weight multiplying `(phi_m(i) - phi_m(j))^2`.
pub fn mode_weight(basis: &SpectralBasis, m: usize, conv: Convention) -> f64 {
    let r2 = basis.rho(m) * basis.rho(m);
    match conv {
        Convention::Literal => basis.amplitude(m).powi(2) / (1.0 - r2),
        Convention::Paper => r2 / (1.0 - r2),
    }
}

/// Mean (always 0) and closed-form stationary variance of `u(t,i) - u(t,j)`.
pub fn increment_mean_and_variance(
    basis: &SpectralBasis,
    i: usize,
    j: usize,
    conv: Convention,
) -> Result<IncrementStat> {
    let len = basis.len();
    if len < 2 {
        return Err(invalid("increments need J >= 2"));
    }
    if i >= len || j >= len {
        return Err(invalid(format!("sites ({i}, {j}) outside 0..{len}")));
    }
    let variance = if i == j {
        0.0
    } else {
        (1..len)
            .map(|m| {
                let d = basis.phi(m, i) - basis.phi(m, j);
                mode_weight(basis, m, conv) * d * d
            })
            .sum()
    };
    Ok(IncrementStat {
        i,
        j,
        mean: 0.0,
        variance,
        convention: conv,
    })
}

/// `1, 2, 4, ...` below `chain`.
pub fn geometric_distances(chain: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |d| d.checked_mul(2))
        .take_while(|&d| d < chain)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub chain: usize,
    pub i: usize,
    pub j: usize,
    pub d: usize,
    pub convention: Convention,
    pub variance: f64,
    /// `variance / (J d)` under `Paper`, `variance / d` under `Literal`.
    pub ratio: f64,
    /// Pair satisfies `i + j < J - 1`.
    pub reduced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub convention: Convention,
    /// Extremes over reduced pairs.
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Extremes over every scanned pair.
    pub min_ratio_all: f64,
    pub max_ratio_all: f64,
}

impl ScanSummary {
    pub fn band(&self) -> f64 {
        self.max_ratio / self.min_ratio
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceScan {
    pub rows: Vec<ScanRow>,
    pub summary: ScanSummary,
}

impl VarianceScan {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "J", "i", "j", "d", "convention", "variance", "ratio", "reduced",
        ]);
        for r in &self.rows {
            t.push(vec![
                Cell::from(r.chain),
                Cell::from(r.i),
                Cell::from(r.j),
                Cell::from(r.d),
                Cell::from(r.convention.as_str()),
                Cell::from(r.variance),
                Cell::from(r.ratio),
                Cell::from(r.reduced),
            ])
            .expect("row width matches header");
        }
        t
    }
}

/// Scans every pair `(i, i + d)` for `d` on the geometric grid of each `J`.
pub fn variance_scaling_scan(chains: &[usize], conv: Convention) -> Result<VarianceScan> {
    if chains.is_empty() {
        return Err(invalid("variance scan needs at least one chain length"));
    }
    let mut rows = Vec::new();
    for &chain in chains {
        if chain < 4 {
            return Err(invalid(format!("variance scan needs J >= 4, got {chain}")));
        }
        let basis = build_basis(chain)?;
        for d in geometric_distances(chain) {
            for i in 0..chain - d {
                let j = i + d;
                let stat = increment_mean_and_variance(&basis, i, j, conv)?;
                let scale = match conv {
                    Convention::Paper => (chain * d) as f64,
                    Convention::Literal => d as f64,
                };
                rows.push(ScanRow {
                    chain,
                    i,
                    j,
                    d,
                    convention: conv,
                    variance: stat.variance,
                    ratio: stat.variance / scale,
                    reduced: i + j + 1 < chain,
                });
            }
        }
    }
    let extremes = |filter: &dyn Fn(&ScanRow) -> bool| {
        rows.iter()
            .filter(|r| filter(r))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r.ratio), hi.max(r.ratio))
            })
    };
    let (min_ratio, max_ratio) = extremes(&|r| r.reduced);
    let (min_ratio_all, max_ratio_all) = extremes(&|_| true);
    Ok(VarianceScan {
        summary: ScanSummary {
            convention: conv,
            min_ratio,
            max_ratio,
            min_ratio_all,
            max_ratio_all,
        },
        rows,
    })
}
