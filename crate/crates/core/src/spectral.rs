//! Cosine eigenstructure of the Neumann averaging semigroup.
//!
//! With diffusion coefficient 1/2 the deterministic part of one time step
//! replaces every height by the average of its two neighbours (ghost sites
//! reflect the ends). That operator is diagonal in the cosine basis
//! `phi_m(n) = cos(m pi (n + 1/2) / J)` with eigenvalue `rho_m = cos(m pi / J)`;
//! `a_m phi_m` is orthonormal.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Largest chain length accepted anywhere in the crate.
pub const MAX_CHAIN_LENGTH: usize = 4096;

/// Mode tables are cached up to this length; longer chains evaluate the
/// cosines on demand.
const TABLE_LIMIT: usize = 1024;

/// Kernel normalization.
///
/// `Literal` is the orthonormal kernel `sum_m a_m^2 rho_m^t phi_m(n) phi_m(k)`,
/// i.e. exactly the `t`-th power of the one-step averaging matrix, with noise
/// entering the field unsmoothed. `Paper` carries a single factor `a_m` and
/// propagates noise injected at time `s` through `G_{t-s}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    #[default]
    Literal,
    Paper,
}

impl Convention {
    pub fn as_str(self) -> &'static str {
        match self {
            Convention::Literal => "literal",
            Convention::Paper => "paper",
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(Convention::Literal),
            "paper" => Ok(Convention::Paper),
            other => Err(invalid(format!("unknown convention `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpectralBasis {
    chain: usize,
    rho: Vec<f64>,
    amp: Vec<f64>,
    /// `phi[m * J + n]`, empty above `TABLE_LIMIT`.
    table: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(chain: usize) -> Result<Self> {
        if chain == 0 {
            return Err(invalid("chain length J must be at least 1"));
        }
        if chain > MAX_CHAIN_LENGTH {
            return Err(invalid(format!(
                "chain length J={chain} exceeds the cap {MAX_CHAIN_LENGTH}"
            )));
        }
        let jf = chain as f64;
        // The middle mode of an even chain has eigenvalue exactly 0.
        let rho = (0..chain)
            .map(|m| if 2 * m == chain { 0.0 } else { (m as f64 * PI / jf).cos() })
            .collect();
        let amp = (0..chain)
            .map(|m| if m == 0 { (1.0 / jf).sqrt() } else { (2.0 / jf).sqrt() })
            .collect();
        let table = if chain <= TABLE_LIMIT {
            let mut t = Vec::with_capacity(chain * chain);
            for m in 0..chain {
                for n in 0..chain {
                    t.push(cosine(m, n, chain));
                }
            }
            t
        } else {
            Vec::new()
        };
        Ok(SpectralBasis {
            chain,
            rho,
            amp,
            table,
        })
    }

    /// Chain length `J`.
    pub fn len(&self) -> usize {
        self.chain
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rho(&self, m: usize) -> f64 {
        self.rho[m]
    }

    pub fn rhos(&self) -> &[f64] {
        &self.rho
    }

    /// `a_m`.
    pub fn amplitude(&self, m: usize) -> f64 {
        self.amp[m]
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amp
    }

    /// `phi_m(n) = cos(m pi (n + 1/2) / J)`.
    #[inline]
    pub fn phi(&self, m: usize, n: usize) -> f64 {
        if self.table.is_empty() {
            cosine(m, n, self.chain)
        } else {
            self.table[m * self.chain + n]
        }
    }

    /// Orthonormal eigenvector entry `a_m phi_m(n)`.
    #[inline]
    pub fn eigenvector(&self, m: usize, n: usize) -> f64 {
        self.amp[m] * self.phi(m, n)
    }

    fn check_site(&self, n: usize) -> Result<()> {
        if n >= self.chain {
            Err(invalid(format!("site {n} outside 0..{}", self.chain)))
        } else {
            Ok(())
        }
    }

    /// Per-mode kernel weight `c_m rho_m^t` (`c_m = a_m^2` or `a_m`).
    fn kernel_weights(&self, t: u64, conv: Convention) -> Vec<f64> {
        (0..self.chain)
            .map(|m| {
                let c = match conv {
                    Convention::Literal => self.amp[m] * self.amp[m],
                    Convention::Paper => self.amp[m],
                };
                c * pow_u64(self.rho[m], t)
            })
            .collect()
    }

    /// `G_t(n, k)` by eigen-expansion.
    pub fn green_function(&self, t: u64, n: usize, k: usize, conv: Convention) -> Result<f64> {
        self.check_site(n)?;
        self.check_site(k)?;
        if conv == Convention::Literal && t == 0 {
            return Ok(if n == k { 1.0 } else { 0.0 });
        }
        let w = self.kernel_weights(t, conv);
        Ok((0..self.chain)
            .map(|m| w[m] * self.phi(m, n) * self.phi(m, k))
            .sum())
    }

    /// The full kernel matrix `G_t` by eigen-expansion, `O(J^3)`.
    pub fn green_matrix(&self, t: u64, conv: Convention) -> Matrix {
        let j = self.chain;
        let w = self.kernel_weights(t, conv);
        let mut out = Matrix::zeros(j);
        for n in 0..j {
            for k in n..j {
                let v: f64 = (0..j).map(|m| w[m] * self.phi(m, n) * self.phi(m, k)).sum();
                out.set(n, k, v);
                out.set(k, n, v);
            }
        }
        out
    }
}

fn cosine(m: usize, n: usize, chain: usize) -> f64 {
    (m as f64 * PI * (n as f64 + 0.5) / chain as f64).cos()
}

/// `x^t` for a non-negative integer exponent, with `0^0 = 1`.
pub fn pow_u64(x: f64, t: u64) -> f64 {
    match i32::try_from(t) {
        Ok(e) => x.powi(e),
        Err(_) => x.powf(t as f64),
    }
}

pub fn build_basis(chain: usize) -> Result<SpectralBasis> {
    SpectralBasis::new(chain)
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `P^t` for the one-step averaging propagator with diffusion coefficient 1/2,
/// computed by repeated banded application (no eigen-decomposition).
pub fn transition_matrix_power(chain: usize, t: u64) -> Result<Matrix> {
    if chain == 0 {
        return Err(invalid("chain length J must be at least 1"));
    }
    let mut m = Matrix::identity(chain);
    let mut next = Matrix::zeros(chain);
    for _ in 0..t {
        for i in 0..chain {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(chain - 1);
            for c in 0..chain {
                next.set(i, c, 0.5 * (m.get(lo, c) + m.get(hi, c)));
            }
        }
        std::mem::swap(&mut m, &mut next);
    }
    Ok(m)
}

/// `c_0(J) = 3 / (J^2 - 1)` together with the raw sum it normalizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizingConstant {
    pub c0: f64,
    /// `sum_{m=1}^{J-1} csc^2(m pi / J)`, summed directly.
    pub csc2_sum: f64,
}

pub fn normalizing_constant_c0(chain: usize) -> Result<NormalizingConstant> {
    if chain < 2 {
        return Err(invalid("c0(J) needs J >= 2 (the mode sum is empty)"));
    }
    let jf = chain as f64;
    let csc2_sum = (1..chain)
        .map(|m| {
            let s = (m as f64 * PI / jf).sin();
            1.0 / (s * s)
        })
        .sum();
    Ok(NormalizingConstant {
        c0: 3.0 / (jf * jf - 1.0),
        csc2_sum,
    })
}
