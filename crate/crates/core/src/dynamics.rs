//! Forward dynamics of the discrete stochastic heat equation.
//!
//! `u(t+1, n) = u(t, n) + kappa (u(t, n+1) - 2 u(t, n) + u(t, n-1)) + xi(t, n)`
//! with reflecting ghost sites `u(t, -1) = u(t, 0)`, `u(t, J) = u(t, J-1)`.
//! Noise row `xi(t, .)` produces slice `t + 1`; slice 0 is the initial profile.

use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::spectral::{Convention, Matrix, SpectralBasis};

pub const DEFAULT_KAPPA: f64 = 0.5;

/// Upper limit on the past depth of a time-stepped pinned string.
pub const MAX_TRUNCATION_DEPTH: usize = 1 << 20;

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa <= 0.5 {
        Ok(())
    } else {
        Err(invalid(format!(
            "diffusion coefficient kappa={kappa} must lie in (0, 1/2]"
        )))
    }
}

/// Shape and normalization of a simulated polymer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolymerModel {
    pub chain: usize,
    pub horizon: usize,
    pub kappa: f64,
    pub convention: Convention,
}

impl PolymerModel {
    pub fn new(chain: usize, horizon: usize) -> Self {
        PolymerModel {
            chain,
            horizon,
            kappa: DEFAULT_KAPPA,
            convention: Convention::Literal,
        }
    }

    pub fn with_convention(mut self, convention: Convention) -> Self {
        self.convention = convention;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.chain == 0 || self.chain > crate::spectral::MAX_CHAIN_LENGTH {
            return Err(invalid(format!("chain length J={} out of range", self.chain)));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon T must be at least 1"));
        }
        check_kappa(self.kappa)?;
        if self.convention == Convention::Paper && self.kappa != DEFAULT_KAPPA {
            return Err(invalid("the paper kernel is only defined for kappa = 1/2"));
        }
        Ok(())
    }

    /// Zero-initialized trajectory driven by fresh `Normal(drift, 1)` noise.
    pub fn sample(&self, seed: u64, drift: f64) -> Result<Trajectory> {
        let noise = sample_noise(seed, self.horizon, self.chain, drift)?;
        simulate(self, &vec![0.0; self.chain], &noise)
    }
}

/// Gaussian driving noise `xi(t, n)`, `t < T`, stored t-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    horizon: usize,
    width: usize,
    xi: Vec<f64>,
    seed: u64,
    drift: f64,
}

impl NoiseField {
    pub fn from_rows(horizon: usize, width: usize, xi: Vec<f64>) -> Result<Self> {
        if xi.len() != horizon * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{horizon}x{width} noise entries"),
                actual: format!("{}", xi.len()),
            });
        }
        Ok(NoiseField {
            horizon,
            width,
            xi,
            seed: 0,
            drift: 0.0,
        })
    }

    pub fn zeros(horizon: usize, width: usize) -> Self {
        NoiseField {
            horizon,
            width,
            xi: vec![0.0; horizon * width],
            seed: 0,
            drift: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn drift(&self) -> f64 {
        self.drift
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.xi[t * self.width..(t + 1) * self.width]
    }

    pub fn get(&self, t: usize, n: usize) -> f64 {
        self.xi[t * self.width + n]
    }

    pub fn values(&self) -> &[f64] {
        &self.xi
    }
}

/// Draws `T x J` iid `Normal(drift, 1)` entries, t-major then n-ascending,
/// from the stream of `seed`.
pub fn sample_noise(seed: u64, horizon: usize, width: usize, drift: f64) -> Result<NoiseField> {
    if horizon == 0 || width == 0 {
        return Err(invalid("noise field needs T >= 1 and J >= 1"));
    }
    let mut stream = rng::stream(seed);
    let xi = (0..horizon * width)
        .map(|_| drift + stream.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(NoiseField {
        horizon,
        width,
        xi,
        seed,
        drift,
    })
}

/// Field `u(t, n)` on `{0..T} x {0..J-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    horizon: usize,
    width: usize,
    u: Vec<f64>,
    convention: Convention,
    kappa: f64,
    seed: u64,
}

impl Trajectory {
    pub fn from_slices(
        horizon: usize,
        width: usize,
        u: Vec<f64>,
        convention: Convention,
        kappa: f64,
    ) -> Result<Self> {
        if u.len() != (horizon + 1) * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{width} field entries", horizon + 1),
                actual: format!("{}", u.len()),
            });
        }
        Ok(Trajectory {
            horizon,
            width,
            u,
            convention,
            kappa,
            seed: 0,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Number of time steps `T`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Chain length `J`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn slice(&self, t: usize) -> &[f64] {
        &self.u[t * self.width..(t + 1) * self.width]
    }

    pub fn get(&self, t: usize, n: usize) -> f64 {
        self.u[t * self.width + n]
    }

    pub fn values(&self) -> &[f64] {
        &self.u
    }

    pub fn initial(&self) -> &[f64] {
        self.slice(0)
    }

    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.u
            .iter()
            .zip(&other.u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Deterministic part of one step: `out = u + kappa * Laplacian(u)`.
#[inline]
pub fn diffusion_step(cur: &[f64], kappa: f64, out: &mut [f64]) {
    let j = cur.len();
    for n in 0..j {
        let left = cur[n.saturating_sub(1)];
        let right = cur[(n + 1).min(j - 1)];
        out[n] = cur[n] + kappa * (right - 2.0 * cur[n] + left);
    }
}

fn check_dims(u0: &[f64], noise: &NoiseField) -> Result<()> {
    if u0.len() != noise.width() {
        return Err(Error::DimensionMismatch {
            expected: format!("initial profile of length {}", noise.width()),
            actual: format!("{}", u0.len()),
        });
    }
    Ok(())
}

/// Runs the forward recursion. The result carries the `Literal` convention.
pub fn simulate_recursion(u0: &[f64], noise: &NoiseField, kappa: f64) -> Result<Trajectory> {
    check_kappa(kappa)?;
    check_dims(u0, noise)?;
    let (horizon, j) = (noise.horizon(), noise.width());
    let mut u = vec![0.0; (horizon + 1) * j];
    u[..j].copy_from_slice(u0);
    for t in 0..horizon {
        let (done, rest) = u.split_at_mut((t + 1) * j);
        let next = &mut rest[..j];
        diffusion_step(&done[t * j..], kappa, next);
        for (x, e) in next.iter_mut().zip(noise.row(t)) {
            *x += e;
        }
    }
    Ok(Trajectory {
        horizon,
        width: j,
        u,
        convention: Convention::Literal,
        kappa,
        seed: noise.seed(),
    })
}

/// Evaluates the closed-form solution by eigen-expansion of the kernels.
///
/// `Literal`: `u(t) = G_t u0 + sum_{s<t} G_{t-1-s} xi(s)`, identical to the
/// recursion. `Paper`: `u(t) = G_t u0 + sum_{s<t} G_{t-s} xi(s)` with the
/// single-amplitude kernel.
pub fn solution_formula(
    u0: &[f64],
    noise: &NoiseField,
    basis: &SpectralBasis,
    conv: Convention,
) -> Result<Trajectory> {
    check_dims(u0, noise)?;
    if basis.len() != noise.width() {
        return Err(Error::DimensionMismatch {
            expected: format!("basis of size {}", noise.width()),
            actual: format!("{}", basis.len()),
        });
    }
    let (horizon, j) = (noise.horizon(), noise.width());
    let kernels: Vec<Matrix> = (0..=horizon as u64)
        .map(|t| basis.green_matrix(t, conv))
        .collect();
    let mut u = vec![0.0; (horizon + 1) * j];
    for t in 0..=horizon {
        let out = &mut u[t * j..(t + 1) * j];
        for (n, o) in out.iter_mut().enumerate() {
            *o = kernels[t].row(n).iter().zip(u0).map(|(g, v)| g * v).sum();
        }
        for s in 0..t {
            let lag = match conv {
                Convention::Literal => t - 1 - s,
                Convention::Paper => t - s,
            };
            let g = &kernels[lag];
            let row = noise.row(s);
            for (n, o) in out.iter_mut().enumerate() {
                *o += g.row(n).iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok(Trajectory {
        horizon,
        width: j,
        u,
        convention: conv,
        kappa: DEFAULT_KAPPA,
        seed: noise.seed(),
    })
}

/// Applies the one-step single-amplitude kernel `G_1` in `O(J)`.
///
/// `G_t = sqrt(J/2) P^t + (sqrt(J) - sqrt(J/2)) (1/J) 1 1^T`, where `P` is
/// the averaging propagator.
pub fn paper_kernel_step(v: &[f64], out: &mut [f64]) {
    let jf = v.len() as f64;
    let scale = (jf / 2.0).sqrt();
    let shift = (jf.sqrt() - scale) * v.iter().sum::<f64>() / jf;
    diffusion_step(v, DEFAULT_KAPPA, out);
    for o in out.iter_mut() {
        *o = scale * *o + shift;
    }
}

/// Simulates under the model's convention in `O(TJ)`.
///
/// The paper-convention field is recovered from the literal recursion via
/// `sum_{s<t} G_{t-s} xi(s) = G_1 sum_{s<t} P^{t-1-s} xi(s)`.
pub fn simulate(model: &PolymerModel, u0: &[f64], noise: &NoiseField) -> Result<Trajectory> {
    model.validate()?;
    if noise.horizon() != model.horizon || noise.width() != model.chain {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} noise", model.horizon, model.chain),
            actual: format!("{}x{}", noise.horizon(), noise.width()),
        });
    }
    let literal = simulate_recursion(u0, noise, model.kappa)?;
    match model.convention {
        Convention::Literal => Ok(literal),
        Convention::Paper => Ok(paper_from_literal(&literal, u0)),
    }
}

fn paper_from_literal(literal: &Trajectory, u0: &[f64]) -> Trajectory {
    let j = literal.width();
    let jf = j as f64;
    let scale = (jf / 2.0).sqrt();
    let u0_shift = (jf.sqrt() - scale) * u0.iter().sum::<f64>() / jf;
    let mut homogeneous = u0.to_vec();
    let mut tmp = vec![0.0; j];
    let mut forced = vec![0.0; j];
    let mut u = Vec::with_capacity(literal.values().len());
    for t in 0..=literal.horizon() {
        if t > 0 {
            diffusion_step(&homogeneous, DEFAULT_KAPPA, &mut tmp);
            std::mem::swap(&mut homogeneous, &mut tmp);
        }
        let diff: Vec<f64> = literal
            .slice(t)
            .iter()
            .zip(&homogeneous)
            .map(|(a, b)| a - b)
            .collect();
        if t == 0 {
            forced.iter_mut().for_each(|x| *x = 0.0);
        } else {
            paper_kernel_step(&diff, &mut forced);
        }
        u.extend(
            homogeneous
                .iter()
                .zip(&forced)
                .map(|(h, f)| scale * h + u0_shift + f),
        );
    }
    Trajectory {
        horizon: literal.horizon(),
        width: j,
        u,
        convention: Convention::Paper,
        kappa: DEFAULT_KAPPA,
        seed: literal.seed(),
    }
}

/// Stationary field anchored at `(t0, n0)`, truncated to a finite past.
#[derive(Debug, Clone)]
pub struct PinnedString {
    pub t0: usize,
    pub n0: usize,
    /// Past depth `S` actually simulated before `t0`.
    pub depth: usize,
    /// Requested bound on the neglected past variance.
    pub tolerance: f64,
    pub convention: Convention,
    /// Slices for times `t0..=t0 + horizon`.
    pub field: Trajectory,
}

impl PinnedString {
    /// Value at absolute time `t` (`t >= t0`).
    pub fn get(&self, t: usize, n: usize) -> f64 {
        self.field.get(t - self.t0, n)
    }

    pub fn increment(&self, t: usize, n1: usize, n2: usize) -> f64 {
        self.get(t, n1) - self.get(t, n2)
    }
}

/// Neglected-variance bound `4 sum_{s>S} sum_{j>=1} rho_j^{2s}`.
fn depth_tail(basis: &SpectralBasis, depth: usize) -> f64 {
    (1..basis.len())
        .map(|m| {
            let r2 = basis.rho(m) * basis.rho(m);
            4.0 * r2.powf(depth as f64 + 1.0) / (1.0 - r2)
        })
        .sum()
}

/// Smallest past depth `S >= 1` whose neglected variance is within
/// `tolerance`.
pub fn required_depth(basis: &SpectralBasis, tolerance: f64) -> Result<usize> {
    if !(tolerance > 0.0) {
        return Err(invalid("truncation tolerance must be positive"));
    }
    if basis.len() < 2 {
        return Err(invalid("pinned string needs J >= 2"));
    }
    if depth_tail(basis, MAX_TRUNCATION_DEPTH) > tolerance {
        let rmax = (1..basis.len()).map(|m| basis.rho(m).abs()).fold(0.0, f64::max);
        let total: f64 = (1..basis.len())
            .map(|m| 4.0 / (1.0 - basis.rho(m) * basis.rho(m)))
            .sum();
        let required = ((tolerance / total).ln() / (2.0 * rmax.ln())).ceil() as u64;
        return Err(Error::TruncationDepth {
            required,
            cap: MAX_TRUNCATION_DEPTH as u64,
        });
    }
    let (mut lo, mut hi) = (1usize, 1usize);
    while depth_tail(basis, hi) > tolerance {
        lo = hi + 1;
        hi *= 2;
    }
    hi = hi.min(MAX_TRUNCATION_DEPTH);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if depth_tail(basis, mid) <= tolerance {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

/// `sum_{s>S} sum_{j>=1} [rho_j^{dt+s} phi_j(n) - rho_j^s phi_j(n0)]^2` in
/// closed geometric form.
pub fn truncation_error_bound(
    basis: &SpectralBasis,
    depth: usize,
    n: usize,
    n0: usize,
    dt: u64,
) -> f64 {
    (1..basis.len())
        .map(|m| {
            let r = basis.rho(m);
            let r2 = r * r;
            let c = crate::spectral::pow_u64(r, dt) * basis.phi(m, n) - basis.phi(m, n0);
            c * c * r2.powf(depth as f64 + 1.0) / (1.0 - r2)
        })
        .sum()
}

/// Time-stepped pinned string: the recursion is started from zero `S` steps
/// before `t0`, with `S` chosen by [`required_depth`], and the value at
/// `(t0, n0)` is subtracted from every slice.
#[allow(clippy::too_many_arguments)]
pub fn pinned_string(
    basis: &SpectralBasis,
    t0: usize,
    n0: usize,
    horizon: usize,
    tolerance: f64,
    seed: u64,
    conv: Convention,
) -> Result<PinnedString> {
    let j = basis.len();
    if n0 >= j {
        return Err(invalid(format!("anchor site {n0} outside 0..{j}")));
    }
    let depth = required_depth(basis, tolerance)?;
    let mut stream = rng::stream(seed);
    let mut cur = vec![0.0; j];
    let mut next = vec![0.0; j];
    let mut observed = vec![0.0; j];
    let mut step = |cur: &mut Vec<f64>, next: &mut Vec<f64>| {
        diffusion_step(cur, DEFAULT_KAPPA, next);
        for x in next.iter_mut() {
            *x += stream.sample::<f64, _>(StandardNormal);
        }
        std::mem::swap(cur, next);
    };
    for _ in 0..depth {
        step(&mut cur, &mut next);
    }
    let mut field = Vec::with_capacity((horizon + 1) * j);
    for t in 0..=horizon {
        if t > 0 {
            step(&mut cur, &mut next);
        }
        match conv {
            Convention::Literal => observed.copy_from_slice(&cur),
            Convention::Paper => paper_kernel_step(&cur, &mut observed),
        }
        field.extend_from_slice(&observed);
    }
    let anchor = field[n0];
    field.iter_mut().for_each(|x| *x -= anchor);
    Ok(PinnedString {
        t0,
        n0,
        depth,
        tolerance,
        convention: conv,
        field: Trajectory::from_slices(horizon, j, field, conv, DEFAULT_KAPPA)?.with_seed(seed),
    })
}

/// Eigenvalue of the one-step propagator with diffusion coefficient `kappa`.
pub fn propagator_eigenvalue(basis: &SpectralBasis, m: usize, kappa: f64) -> f64 {
    1.0 - 2.0 * kappa * (1.0 - basis.rho(m))
}

/// Exact draw from the stationary law of the spatial increments.
///
/// Mode `m >= 1` gets an independent centered normal coefficient with its
/// stationary variance (`1 / (1 - rho_m^2)` on the orthonormal vector under
/// `Literal`, `rho_m^2 / (1 - rho_m^2)` on `phi_m` under `Paper`). The level
/// of the profile is arbitrary; only differences are meaningful.
pub fn stationary_profile<R: Rng + ?Sized>(
    basis: &SpectralBasis,
    conv: Convention,
    kappa: f64,
    rng: &mut R,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for m in 1..basis.len() {
        let z: f64 = rng.sample(StandardNormal);
        let (sd, amp) = match conv {
            Convention::Literal => {
                let r = propagator_eigenvalue(basis, m, kappa);
                ((1.0 / (1.0 - r * r)).sqrt(), basis.amplitude(m))
            }
            Convention::Paper => {
                let r = basis.rho(m);
                ((r * r / (1.0 - r * r)).sqrt(), 1.0)
            }
        };
        let c = z * sd * amp;
        if c == 0.0 {
            continue;
        }
        for (n, o) in out.iter_mut().enumerate() {
            *o += c * basis.phi(m, n);
        }
    }
}

/// Stationary trajectory driven by `Normal(drift, 1)` noise: slice 0 is an
/// exact stationary draw and the recursion runs `T` further steps.
pub fn stationary_trajectory(
    basis: &SpectralBasis,
    model: &PolymerModel,
    drift: f64,
    seed: u64,
) -> Result<Trajectory> {
    model.validate()?;
    if basis.len() != model.chain {
        return Err(Error::DimensionMismatch {
            expected: format!("basis of size {}", model.chain),
            actual: format!("{}", basis.len()),
        });
    }
    let j = model.chain;
    let mut stream = rng::stream(seed);
    let mut start = vec![0.0; j];
    stationary_profile(basis, Convention::Literal, model.kappa, &mut stream, &mut start);
    let mut cur = start;
    let mut next = vec![0.0; j];
    let mut observed = vec![0.0; j];
    let mut u = Vec::with_capacity((model.horizon + 1) * j);
    for t in 0..=model.horizon {
        if t > 0 {
            diffusion_step(&cur, model.kappa, &mut next);
            for x in next.iter_mut() {
                *x += drift + stream.sample::<f64, _>(StandardNormal);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        match model.convention {
            Convention::Literal => observed.copy_from_slice(&cur),
            Convention::Paper => paper_kernel_step(&cur, &mut observed),
        }
        u.extend_from_slice(&observed);
    }
    Ok(
        Trajectory::from_slices(model.horizon, j, u, model.convention, model.kappa)?
            .with_seed(seed),
    )
}

const DUMP_MAGIC: &[u8; 4] = b"DSHP";
const DUMP_VERSION: u16 = 1;

/// Writes `t,n,u` rows.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "n", "u"])?;
    for t in 0..=traj.horizon() {
        for n in 0..traj.width() {
            w.write_record([
                t.to_string(),
                n.to_string(),
                crate::report::format_float(traj.get(t, n)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Compact little-endian dump.
///
/// Header (32 bytes): magic `DSHP`, version `u16`, convention `u8`
/// (0 literal, 1 paper), reserved `u8`, `J` as `u32`, `T` as `u32`, seed
/// `u64`, kappa `f64`. Then `(T+1) * J` values as `f64`, t-major.
pub fn write_trajectory_binary<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&[match traj.convention() {
        Convention::Literal => 0u8,
        Convention::Paper => 1u8,
    }])?;
    w.write_all(&[0u8])?;
    w.write_all(&(traj.width() as u32).to_le_bytes())?;
    w.write_all(&(traj.horizon() as u32).to_le_bytes())?;
    w.write_all(&traj.seed().to_le_bytes())?;
    w.write_all(&traj.kappa().to_le_bytes())?;
    for v in traj.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_trajectory_binary<R: Read>(mut r: R) -> Result<Trajectory> {
    let mut header = [0u8; 32];
    r.read_exact(&mut header)?;
    if &header[..4] != DUMP_MAGIC {
        return Err(invalid("not a trajectory dump (bad magic)"));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != DUMP_VERSION {
        return Err(invalid(format!("unsupported dump version {version}")));
    }
    let convention = match header[6] {
        0 => Convention::Literal,
        1 => Convention::Paper,
        c => return Err(invalid(format!("unknown convention tag {c}"))),
    };
    let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let horizon = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let kappa = f64::from_le_bytes(header[24..32].try_into().unwrap());
    let mut buf = vec![0u8; (horizon + 1) * width * 8];
    r.read_exact(&mut buf)?;
    let u = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Trajectory::from_slices(horizon, width, u, convention, kappa)?.with_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::build_basis;
    use crate::stats;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn noise_is_reproducible() {
        let a = sample_noise(42, 5, 7, 0.3).unwrap();
        let b = sample_noise(42, 5, 7, 0.3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_noise(43, 5, 7, 0.3).unwrap());
        assert!(sample_noise(1, 0, 3, 0.0).is_err());
    }

    #[test]
    fn noise_moments() {
        let n = sample_noise(9, 1000, 1000, 0.0).unwrap();
        let m = stats::mean(n.values());
        assert!(m.abs() < 4.0 / 1000.0, "mean {m}");

        let n = sample_noise(10, 500, 200, 2.0).unwrap();
        let m = stats::mean(n.values());
        assert!((m - 2.0).abs() < 4.0 / (1e5f64).sqrt());
        assert!((stats::variance(n.values()) - 1.0).abs() < 0.05);
    }

    #[test]
    fn constants_are_invariant_without_noise() {
        let noise = NoiseField::zeros(20, 6);
        let traj = simulate_recursion(&[3.5; 6], &noise, 0.5).unwrap();
        for t in 0..=20 {
            assert!(traj.slice(t).iter().all(|&x| x == 3.5));
        }
    }

    #[test]
    fn single_site_is_a_random_walk() {
        let noise = sample_noise(3, 50, 1, 0.0).unwrap();
        let traj = simulate_recursion(&[1.0], &noise, 0.5).unwrap();
        let mut acc = 1.0;
        for t in 0..50 {
            acc += noise.get(t, 0);
            assert_abs_diff_eq!(traj.get(t + 1, 0), acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_site_difference_is_last_noise_difference() {
        let noise = sample_noise(4, 30, 2, 0.0).unwrap();
        let traj = simulate_recursion(&[0.7, -0.2], &noise, 0.5).unwrap();
        for t in 1..=30 {
            let d = traj.get(t, 0) - traj.get(t, 1);
            assert_abs_diff_eq!(d, noise.get(t - 1, 0) - noise.get(t - 1, 1), epsilon = 1e-12);
        }
    }

    #[test]
    fn kappa_out_of_range_rejected() {
        let noise = NoiseField::zeros(2, 3);
        assert!(simulate_recursion(&[0.0; 3], &noise, 0.6).is_err());
        assert!(simulate_recursion(&[0.0; 3], &noise, 0.0).is_err());
        assert!(matches!(
            simulate_recursion(&[0.0; 4], &noise, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn literal_formula_reproduces_recursion() {
        let basis = build_basis(16).unwrap();
        let noise = sample_noise(17, 64, 16, 0.0).unwrap();
        let u0: Vec<f64> = (0..16).map(|n| (n as f64 * 0.3).sin()).collect();
        let rec = simulate_recursion(&u0, &noise, 0.5).unwrap();
        let formula = solution_formula(&u0, &noise, &basis, Convention::Literal).unwrap();
        assert!(rec.max_abs_diff(&formula) < 1e-9);
    }

    #[test]
    fn zero_noise_reduces_to_kernel_action() {
        let basis = build_basis(5).unwrap();
        let u0 = [1.0, -2.0, 0.5, 3.0, 0.0];
        let noise = NoiseField::zeros(6, 5);
        for conv in [Convention::Literal, Convention::Paper] {
            let traj = solution_formula(&u0, &noise, &basis, conv).unwrap();
            for t in 0..=6 {
                let want = basis.green_matrix(t as u64, conv).apply(&u0);
                for n in 0..5 {
                    assert_abs_diff_eq!(traj.get(t, n), want[n], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn paper_formula_smooths_the_first_noise_row() {
        let basis = build_basis(2).unwrap();
        let noise = NoiseField::from_rows(1, 2, vec![1.0, -0.5]).unwrap();
        let paper = solution_formula(&[0.0, 0.0], &noise, &basis, Convention::Paper).unwrap();
        let rec = simulate_recursion(&[0.0, 0.0], &noise, 0.5).unwrap();
        // G_1 has every entry sqrt(1/2).
        let want = 0.5 * 0.5f64.sqrt();
        assert_abs_diff_eq!(paper.get(1, 0), want, epsilon = 1e-14);
        assert_abs_diff_eq!(paper.get(1, 1), want, epsilon = 1e-14);
        assert!(paper.max_abs_diff(&rec) > 0.5);
    }

    #[test]
    fn fast_paper_simulation_matches_formula() {
        let basis = build_basis(9).unwrap();
        let noise = sample_noise(8, 25, 9, 0.4).unwrap();
        let u0: Vec<f64> = (0..9).map(|n| n as f64 * 0.1 - 0.3).collect();
        let model = PolymerModel::new(9, 25).with_convention(Convention::Paper);
        let fast = simulate(&model, &u0, &noise).unwrap();
        let formula = solution_formula(&u0, &noise, &basis, Convention::Paper).unwrap();
        assert!(fast.max_abs_diff(&formula) < 1e-9);
    }

    #[test]
    fn mass_bookkeeping() {
        let noise = sample_noise(12, 40, 11, 0.0).unwrap();
        let traj = simulate_recursion(&[0.0; 11], &noise, 0.37).unwrap();
        for t in 0..40 {
            let before: f64 = traj.slice(t).iter().sum();
            let after: f64 = traj.slice(t + 1).iter().sum();
            let injected: f64 = noise.row(t).iter().sum();
            assert_abs_diff_eq!(after, before + injected, epsilon = 1e-10);
        }
    }

    #[test]
    fn truncation_bound_examples() {
        let b2 = build_basis(2).unwrap();
        for s in 1..5 {
            assert_eq!(truncation_error_bound(&b2, s, 0, 1, 3), 0.0);
        }
        let b4 = build_basis(4).unwrap();
        let at10 = truncation_error_bound(&b4, 10, 1, 2, 2);
        let at20 = truncation_error_bound(&b4, 20, 1, 2, 2);
        assert!(at20 < at10);
        assert_abs_diff_eq!(at20 / at10, b4.rho(1).powi(20), epsilon = 1e-12);
        let mut last = f64::INFINITY;
        for s in 1..200 {
            let v = truncation_error_bound(&b4, s, 3, 0, 1);
            assert!(v.is_finite() && v <= last);
            last = v;
        }
        assert!(last < 1e-25);
    }

    #[test]
    fn required_depth_meets_tolerance() {
        let b = build_basis(8).unwrap();
        let s = required_depth(&b, 1e-6).unwrap();
        assert!(depth_tail(&b, s) <= 1e-6);
        assert!(depth_tail(&b, s - 1) > 1e-6);
        assert_eq!(required_depth(&build_basis(2).unwrap(), 1e-9).unwrap(), 1);
        assert!(required_depth(&b, 0.0).is_err());
        assert!(required_depth(&build_basis(1).unwrap(), 1e-3).is_err());
    }

    #[test]
    fn depth_cap_reports_required_depth() {
        let b = build_basis(4096).unwrap();
        match required_depth(&b, 1e-300) {
            Err(Error::TruncationDepth { required, cap }) => assert!(required > cap),
            other => panic!("expected depth error, got {other:?}"),
        }
    }

    #[test]
    fn pinned_string_is_anchored() {
        let b = build_basis(6).unwrap();
        for conv in [Convention::Literal, Convention::Paper] {
            let p = pinned_string(&b, 10, 2, 5, 1e-8, 77, conv).unwrap();
            assert_eq!(p.get(10, 2), 0.0);
            assert_eq!(p.increment(12, 4, 4), 0.0);
            assert_eq!(p.field.horizon(), 5);
        }
    }

    #[test]
    fn binary_dump_round_trips() {
        let model = PolymerModel::new(5, 7).with_convention(Convention::Paper);
        let traj = model.sample(99, 0.0).unwrap();
        let mut buf = Vec::new();
        write_trajectory_binary(&traj, &mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 8 * 5 * 8);
        let back = read_trajectory_binary(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
        assert!(read_trajectory_binary(&b"XXXX"[..]).is_err());
    }

    #[test]
    fn csv_export_has_every_site() {
        let traj = PolymerModel::new(3, 2).sample(1, 0.0).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 3);
        assert!(text.starts_with("t,n,u\n0,0,"));
    }

    proptest! {
        #[test]
        fn recursion_is_linear_in_noise(seed in 0u64..1000, j in 1usize..10) {
            let a = sample_noise(seed, 6, j, 0.0).unwrap();
            let b = sample_noise(seed + 1, 6, j, 0.0).unwrap();
            let sum: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
            let sum = NoiseField::from_rows(6, j, sum).unwrap();
            let z = vec![0.0; j];
            let ua = simulate_recursion(&z, &a, 0.5).unwrap();
            let ub = simulate_recursion(&z, &b, 0.5).unwrap();
            let us = simulate_recursion(&z, &sum, 0.5).unwrap();
            for (i, v) in us.values().iter().enumerate() {
                prop_assert!((v - ua.values()[i] - ub.values()[i]).abs() < 1e-10);
            }
        }
    }
}
