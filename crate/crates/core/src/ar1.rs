//! Mode-wise AR(1) structure of the centered field and the large-deviation
//! rate of time-averaged squared modes.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagator_eigenvalue, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::observables::gyration_squared;
use crate::rng;
use crate::spectral::{Convention, SpectralBasis};

pub const FIXED_POINT_TOLERANCE: f64 = 1e-12;
pub const FIXED_POINT_MAX_ITERATIONS: usize = 100_000;

/// Fewer exceedances than this mark a tail probe as underpowered.
pub const MIN_EXCEEDANCES: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1Params {
    pub rho: f64,
    pub sigma2: f64,
}

impl Ar1Params {
    pub fn new(rho: f64, sigma2: f64) -> Self {
        Ar1Params { rho, sigma2 }
    }

    pub fn unit(rho: f64) -> Self {
        Ar1Params { rho, sigma2: 1.0 }
    }

    fn check(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(invalid(format!("AR(1) coefficient rho={} needs |rho| < 1", self.rho)));
        }
        if self.sigma2 < 0.0 || !self.sigma2.is_finite() {
            return Err(invalid(format!("innovation variance {} must be >= 0", self.sigma2)));
        }
        if self.sigma2 == 0.0 {
            return Err(Error::DegenerateProcess(format!(
                "innovation variance is 0 at rho={}",
                self.rho
            )));
        }
        Ok(())
    }

    /// Stationary variance `sigma^2 / (1 - rho^2)`.
    pub fn stationary_mean_square(&self) -> f64 {
        self.sigma2 / (1.0 - self.rho * self.rho)
    }
}

/// Projection of the centered field on one orthonormal mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeProcess {
    pub m: usize,
    /// `X_t` for `t = 1..=T`.
    pub series: Vec<f64>,
}

impl ModeProcess {
    /// `S_T = (1/T) sum_t X_t^2`.
    pub fn time_average(&self) -> f64 {
        self.series.iter().map(|x| x * x).sum::<f64>() / self.series.len() as f64
    }
}

fn check_basis(traj: &Trajectory, basis: &SpectralBasis) -> Result<()> {
    if traj.width() != basis.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("basis of size {}", traj.width()),
            actual: format!("{}", basis.len()),
        });
    }
    if traj.horizon() == 0 {
        return Err(invalid("mode decomposition needs T >= 1"));
    }
    Ok(())
}

/// `X_t^(m) = sum_n e_m(n) (u(t,n) - ubar(t))` for `m = 1..J-1`.
pub fn mode_decompose(traj: &Trajectory, basis: &SpectralBasis) -> Result<Vec<ModeProcess>> {
    check_basis(traj, basis)?;
    if traj.initial().iter().any(|&v| v != 0.0) {
        return Err(Error::Precondition(
            "mode decomposition assumes a zero initial profile".into(),
        ));
    }
    let j = basis.len();
    Ok((1..j)
        .map(|m| {
            let e: Vec<f64> = (0..j).map(|n| basis.eigenvector(m, n)).collect();
            let series = (1..=traj.horizon())
                .map(|t| {
                    let slice = traj.slice(t);
                    let ubar = slice.iter().sum::<f64>() / j as f64;
                    slice.iter().zip(&e).map(|(u, w)| (u - ubar) * w).sum()
                })
                .collect();
            ModeProcess { m, series }
        })
        .collect())
}

/// Centered field `sum_m X_t^(m) e_m(n)` for `t = 1..=T`, t-major.
pub fn resynthesize(modes: &[ModeProcess], basis: &SpectralBasis) -> Vec<f64> {
    let j = basis.len();
    let horizon = modes.first().map_or(0, |p| p.series.len());
    let mut out = vec![0.0; horizon * j];
    for p in modes {
        let e: Vec<f64> = (0..j).map(|n| basis.eigenvector(p.m, n)).collect();
        for (t, x) in p.series.iter().enumerate() {
            for (o, w) in out[t * j..(t + 1) * j].iter_mut().zip(&e) {
                *o += x * w;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralIdentity {
    pub r2_direct: f64,
    /// `(1/J) sum_m S_T^(m)`.
    pub r2_spectral: f64,
    /// Normalization of the orthonormal decomposition, `1/J`.
    pub constant: f64,
    /// `r2_direct / sum_m S_T^(m)` as measured on this trajectory.
    pub fitted_constant: f64,
}

pub fn gyration_spectral_identity(
    traj: &Trajectory,
    basis: &SpectralBasis,
) -> Result<SpectralIdentity> {
    let modes = mode_decompose(traj, basis)?;
    let total: f64 = modes.iter().map(ModeProcess::time_average).sum();
    let constant = 1.0 / basis.len() as f64;
    let r2_direct = gyration_squared(traj)?;
    Ok(SpectralIdentity {
        r2_direct,
        r2_spectral: constant * total,
        constant,
        fitted_constant: if total > 0.0 { r2_direct / total } else { constant },
    })
}

/// Unit-variance rate function `I_1`.
fn unit_rate(rho: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::INFINITY;
    }
    let root = (4.0 * rho * rho * x * x + 1.0).sqrt();
    -0.5 * (2.0 * x / (1.0 + root)).ln() + 0.5 * ((rho * rho + 1.0) * x - root)
}

/// Rate function of `S_T`, `I_sigma(x) = I_1(x / sigma^2)`; `+inf` for
/// `x <= 0`.
pub fn rate_function(params: Ar1Params, x: f64) -> Result<f64> {
    params.check()?;
    Ok(unit_rate(params.rho, x / params.sigma2))
}

/// The general-variance display evaluated verbatim: `1/(2 sigma^2)` on the
/// bracket, no rescaling of `x`. Its zero does not move with `sigma`.
pub fn rate_function_as_printed(params: Ar1Params, x: f64) -> Result<f64> {
    params.check()?;
    if x <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let rho = params.rho;
    let root = (4.0 * rho * rho * x * x + 1.0).sqrt();
    Ok(-0.5 * (2.0 * x / (1.0 + root)).ln()
        + ((rho * rho + 1.0) * x - root) / (2.0 * params.sigma2))
}

/// Largest `y` for which the cumulant recursion has a fixed point,
/// `(1 - |rho|)^2 / (2 sigma^2)`.
pub fn explosion_threshold(params: Ar1Params) -> Result<f64> {
    params.check()?;
    Ok((1.0 - params.rho.abs()).powi(2) / (2.0 * params.sigma2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub lambda_star: f64,
    /// `-(1/2) ln(1 - 2 sigma^2 lambda*)`.
    pub cumulant: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates `lambda <- rho^2 lambda / (1 - 2 sigma^2 lambda) + y` from
/// `lambda_0 = y`.
pub fn cumulant_fixed_point(params: Ar1Params, y: f64) -> Result<FixedPoint> {
    let threshold = explosion_threshold(params)?;
    let (r2, s2) = (params.rho * params.rho, params.sigma2);
    let pole = 1.0 / (2.0 * s2);
    let mut lambda = y;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < FIXED_POINT_MAX_ITERATIONS {
        if lambda >= pole {
            break;
        }
        let next = r2 * lambda / (1.0 - 2.0 * s2 * lambda) + y;
        iterations += 1;
        let step = (next - lambda).abs();
        lambda = next;
        if step < FIXED_POINT_TOLERANCE {
            converged = true;
            break;
        }
    }
    if y >= threshold || lambda >= pole {
        return Err(Error::AboveThreshold { y, last: lambda });
    }
    Ok(FixedPoint {
        lambda_star: lambda,
        cumulant: -0.5 * (1.0 - 2.0 * s2 * lambda).ln(),
        iterations,
        converged,
    })
}

/// `sup_y (x y - Lambda(y))` over `y` below the explosion threshold, with
/// `Lambda` from [`cumulant_fixed_point`]. Golden-section search on the
/// concave objective.
pub fn legendre_transform(params: Ar1Params, x: f64) -> Result<f64> {
    let threshold = explosion_threshold(params)?;
    let objective = |y: f64| -> f64 {
        match cumulant_fixed_point(params, y) {
            Ok(fp) => x * y - fp.cumulant,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let mut hi = threshold * (1.0 - 1e-9);
    let mut lo = -1.0;
    while objective(lo) > objective(lo / 2.0) {
        lo *= 2.0;
        if lo < -1e8 {
            break;
        }
    }
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (objective(a), objective(b));
    for _ in 0..200 {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = objective(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = objective(a);
        }
        if hi - lo < 1e-13 * (1.0 + hi.abs()) {
            break;
        }
    }
    Ok(fa.max(fb).max(objective(threshold * (1.0 - 1e-12))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailProbe {
    pub horizon: usize,
    pub threshold: f64,
    pub samples: u64,
    pub exceedances: u64,
    pub probability: f64,
    /// `-(1/T) ln P(S_T > K)`; infinite without exceedances.
    pub empirical_rate: f64,
    pub rate_at_threshold: f64,
    pub underpowered: bool,
}

const PROBE_CHUNK: u64 = 1 << 16;

/// Monte Carlo estimate of `P(S_T > K)` for the AR(1) series started at 0.
pub fn tail_probe(
    params: Ar1Params,
    horizon: usize,
    threshold: f64,
    samples: u64,
    seed: u64,
) -> Result<TailProbe> {
    params.check()?;
    if horizon == 0 || samples == 0 {
        return Err(invalid("tail probe needs T >= 1 and at least one sample"));
    }
    let mean = params.stationary_mean_square();
    if !(threshold > mean) {
        return Err(Error::Precondition(format!(
            "tail level K={threshold} must exceed the stationary mean {mean}"
        )));
    }
    let chunks = samples.div_ceil(PROBE_CHUNK);
    let sd = params.sigma2.sqrt();
    let limit = threshold * horizon as f64;
    let exceedances: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = rng::stream(rng::derive_seed(seed, c));
            let n = PROBE_CHUNK.min(samples - c * PROBE_CHUNK);
            let mut hits = 0u64;
            for _ in 0..n {
                let (mut x, mut acc) = (0.0f64, 0.0f64);
                for _ in 0..horizon {
                    x = params.rho * x + sd * stream.sample::<f64, _>(StandardNormal);
                    acc += x * x;
                }
                if acc > limit {
                    hits += 1;
                }
            }
            hits
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let probability = exceedances as f64 / samples as f64;
    Ok(TailProbe {
        horizon,
        threshold,
        samples,
        exceedances,
        probability,
        empirical_rate: -probability.ln() / horizon as f64,
        rate_at_threshold: rate_function(params, threshold)?,
        underpowered: exceedances < MIN_EXCEEDANCES,
    })
}

/// Per-mode variance of `X_t^(m)` for a field started at zero.
pub fn mode_variance(basis: &SpectralBasis, m: usize, t: u64, conv: Convention, kappa: f64) -> f64 {
    let r = propagator_eigenvalue(basis, m, kappa);
    let r2 = r * r;
    let base = if r2 == 0.0 {
        if t == 0 { 0.0 } else { 1.0 }
    } else {
        (1.0 - r2.powf(t as f64)) / (1.0 - r2)
    };
    match conv {
        Convention::Literal => base,
        Convention::Paper => base * basis.rho(m).powi(2) / basis.amplitude(m).powi(2),
    }
}

/// AR(1) law of mode `m` of the untilted field.
pub fn mode_params(basis: &SpectralBasis, m: usize, conv: Convention, kappa: f64) -> Ar1Params {
    let rho = propagator_eigenvalue(basis, m, kappa);
    let sigma2 = match conv {
        Convention::Literal => 1.0,
        Convention::Paper => basis.rho(m).powi(2) / basis.amplitude(m).powi(2),
    };
    Ar1Params { rho, sigma2 }
}

/// `E[R^2]` for a zero-started, untilted field.
pub fn exact_mean_gyration_squared(
    basis: &SpectralBasis,
    horizon: usize,
    conv: Convention,
    kappa: f64,
) -> f64 {
    let j = basis.len();
    let total: f64 = (1..=horizon as u64)
        .map(|t| (1..j).map(|m| mode_variance(basis, m, t, conv, kappa)).sum::<f64>())
        .sum();
    total / (horizon * j) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{sample_noise, simulate, NoiseField, PolymerModel};
    use crate::spectral::build_basis;
    use crate::stats;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rate_vanishes_at_stationary_mean() {
        for rho in [0.0, 0.3, 0.9] {
            let p = Ar1Params::unit(rho);
            assert!(rate_function(p, 1.0 / (1.0 - rho * rho)).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn memoryless_rate_is_chi_square_rate() {
        let p = Ar1Params::unit(0.0);
        for x in [0.3, 1.0, 2.0, 7.5] {
            assert_abs_diff_eq!(rate_function(p, x).unwrap(), (x - 1.0 - x.ln()) / 2.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(rate_function(p, 2.0).unwrap(), 0.15343, epsilon = 1e-5);
        assert_eq!(rate_function(p, -1.0).unwrap(), f64::INFINITY);
        assert_eq!(rate_function(p, 0.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn degenerate_and_invalid_params() {
        assert!(matches!(
            rate_function(Ar1Params::new(0.0, 0.0), 1.0),
            Err(Error::DegenerateProcess(_))
        ));
        assert!(rate_function(Ar1Params::unit(1.0), 1.0).is_err());
    }

    #[test]
    fn variance_scaling_moves_the_zero() {
        let p = Ar1Params::new(0.4, 2.5);
        assert!(rate_function(p, p.stationary_mean_square()).unwrap().abs() < 1e-12);
        assert!(rate_function(p, 1.0 / (1.0 - 0.16)).unwrap() > 1e-3);
        let printed = rate_function_as_printed(p, 1.0 / (1.0 - 0.16)).unwrap();
        assert!(printed.abs() < 1e-12);
        assert!(rate_function_as_printed(p, p.stationary_mean_square()).unwrap().abs() > 1e-3);
        let unit = Ar1Params::unit(0.4);
        assert_abs_diff_eq!(
            rate_function_as_printed(unit, 3.0).unwrap(),
            rate_function(unit, 3.0).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn rate_is_convex_and_nonnegative() {
        let p = Ar1Params::unit(0.7);
        let h = 1e-3;
        let grid: Vec<f64> = (1..5000).map(|k| k as f64 * h).collect();
        let vals: Vec<f64> = grid.iter().map(|&x| rate_function(p, x).unwrap()).collect();
        assert!(vals.iter().all(|&v| v >= -1e-15));
        for w in vals.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-8);
        }
    }

    #[test]
    fn fixed_point_examples() {
        let p = Ar1Params::unit(0.0);
        let fp = cumulant_fixed_point(p, 0.0).unwrap();
        assert_eq!((fp.lambda_star, fp.cumulant), (0.0, 0.0));
        for y in [-2.0, 0.1, 0.3, 0.45] {
            let fp = cumulant_fixed_point(p, y).unwrap();
            assert_abs_diff_eq!(fp.lambda_star, y, epsilon = 1e-14);
            assert_abs_diff_eq!(fp.cumulant, -0.5 * (1.0 - 2.0 * y).ln(), epsilon = 1e-14);
        }
        let q = Ar1Params::unit(0.5);
        assert_abs_diff_eq!(explosion_threshold(q).unwrap(), 0.125, epsilon = 1e-15);
        let y: f64 = 0.1;
        let closed = ((0.75 + 2.0 * y) - ((0.75 + 2.0 * y).powi(2) - 8.0 * y).sqrt()) / 4.0;
        assert_abs_diff_eq!(cumulant_fixed_point(q, y).unwrap().lambda_star, closed, epsilon = 1e-11);
        match cumulant_fixed_point(q, 0.2) {
            Err(Error::AboveThreshold { y, last }) => {
                assert_eq!(y, 0.2);
                assert!(last >= 0.5);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn cumulant_is_convex_and_increasing() {
        let p = Ar1Params::unit(0.5);
        let ys: Vec<f64> = (0..200).map(|k| -1.0 + k as f64 * 0.0055).collect();
        let c: Vec<f64> = ys.iter().map(|&y| cumulant_fixed_point(p, y).unwrap().cumulant).collect();
        for w in c.windows(2) {
            assert!(w[1] > w[0]);
        }
        for w in c.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-9);
        }
    }

    #[test]
    fn legendre_dual_of_cumulant_is_rate() {
        let p = Ar1Params::unit(0.5);
        for k in 0..=9 {
            let x = 0.5 + 0.5 * k as f64;
            let dual = legendre_transform(p, x).unwrap();
            assert_abs_diff_eq!(dual, rate_function(p, x).unwrap(), epsilon = 1e-4);
        }
    }

    #[test]
    fn tail_probe_refuses_low_levels() {
        assert!(matches!(
            tail_probe(Ar1Params::unit(0.0), 10, 0.9, 100, 1),
            Err(Error::Precondition(_))
        ));
        let far = tail_probe(Ar1Params::unit(0.0), 50, 50.0, 1000, 1).unwrap();
        assert_eq!(far.exceedances, 0);
        assert!(far.underpowered);
        assert_eq!(far.empirical_rate, f64::INFINITY);
    }

    #[test]
    fn zero_noise_and_constant_rows_have_no_modes() {
        let basis = build_basis(5).unwrap();
        let model = PolymerModel::new(5, 6);
        let zero = simulate(&model, &[0.0; 5], &NoiseField::zeros(6, 5)).unwrap();
        let modes = mode_decompose(&zero, &basis).unwrap();
        assert!(modes.iter().all(|p| p.series.iter().all(|&x| x == 0.0)));
        let id = gyration_spectral_identity(&zero, &basis).unwrap();
        assert_eq!((id.r2_direct, id.r2_spectral), (0.0, 0.0));

        let rows: Vec<f64> = (0..6).flat_map(|t| [t as f64 - 2.0; 5]).collect();
        let flat = NoiseField::from_rows(6, 5, rows).unwrap();
        let traj = simulate(&model, &[0.0; 5], &flat).unwrap();
        for p in mode_decompose(&traj, &basis).unwrap() {
            assert!(p.series.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn nonzero_start_is_rejected() {
        let basis = build_basis(3).unwrap();
        let noise = NoiseField::zeros(2, 3);
        let traj = simulate(&PolymerModel::new(3, 2), &[1.0, 0.0, 0.0], &noise).unwrap();
        assert!(matches!(mode_decompose(&traj, &basis), Err(Error::Precondition(_))));
    }

    #[test]
    fn two_site_identity_by_hand() {
        let basis = build_basis(2).unwrap();
        let noise = NoiseField::from_rows(1, 2, vec![1.3, -0.4]).unwrap();
        let traj = simulate(&PolymerModel::new(2, 1), &[0.0, 0.0], &noise).unwrap();
        let x1 = (1.3 + 0.4) / 2f64.sqrt();
        let id = gyration_spectral_identity(&traj, &basis).unwrap();
        assert_abs_diff_eq!(id.r2_direct, 1.7f64.powi(2) / 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(id.r2_direct, 0.5 * x1 * x1, epsilon = 1e-14);
        assert_abs_diff_eq!(id.fitted_constant, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn spectral_identity_and_resynthesis() {
        let basis = build_basis(8).unwrap();
        for conv in [Convention::Literal, Convention::Paper] {
            let model = PolymerModel::new(8, 64).with_convention(conv);
            let traj = model.sample(2024, 0.0).unwrap();
            let id = gyration_spectral_identity(&traj, &basis).unwrap();
            assert!(((id.r2_direct - id.r2_spectral) / id.r2_direct).abs() < 1e-9);
            assert_abs_diff_eq!(id.fitted_constant, 1.0 / 8.0, epsilon = 1e-12);

            let modes = mode_decompose(&traj, &basis).unwrap();
            let back = resynthesize(&modes, &basis);
            for t in 1..=64 {
                let s = traj.slice(t);
                let m = s.iter().sum::<f64>() / 8.0;
                for n in 0..8 {
                    assert_abs_diff_eq!(back[(t - 1) * 8 + n], s[n] - m, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn modes_regress_on_their_eigenvalue() {
        let j = 6;
        let basis = build_basis(j).unwrap();
        let steps = 100_000;
        let noise = sample_noise(31, steps, j, 0.0).unwrap();
        let traj = simulate(&PolymerModel::new(j, steps), &vec![0.0; j], &noise).unwrap();
        for p in mode_decompose(&traj, &basis).unwrap() {
            let x = &p.series[..steps - 1];
            let y = &p.series[1..];
            let fit = stats::ols(x, y);
            let rho = basis.rho(p.m);
            assert!(
                (fit.slope - rho).abs() < 3.0 * fit.slope_se.max(1e-12),
                "mode {}: slope {} vs {rho} (se {})",
                p.m,
                fit.slope,
                fit.slope_se
            );
        }
    }

    #[test]
    fn exact_mean_matches_brute_force_sum() {
        let basis = build_basis(4).unwrap();
        // T = 1: every mode has unit variance under the recursion.
        assert_abs_diff_eq!(
            exact_mean_gyration_squared(&basis, 1, Convention::Literal, 0.5),
            3.0 / 4.0,
            epsilon = 1e-15
        );
        let long = exact_mean_gyration_squared(&basis, 100_000, Convention::Literal, 0.5);
        let stationary: f64 = (1..4).map(|m| 1.0 / (1.0 - basis.rho(m).powi(2))).sum::<f64>() / 4.0;
        assert!((long - stationary).abs() < 1e-4);
    }

    #[test]
    fn inverse_gap_sum_matches_normalizing_constant() {
        for j in 2..40 {
            let b = build_basis(j).unwrap();
            let s: f64 = (1..j).map(|m| 1.0 / (1.0 - b.rho(m).powi(2))).sum();
            assert_abs_diff_eq!(s, ((j * j - 1) as f64) / 3.0, epsilon = 1e-8 * j as f64 * j as f64);
        }
    }

    #[test]
    fn mode_params_match_long_run_mode_variance() {
        let basis = build_basis(8).unwrap();
        for conv in [Convention::Literal, Convention::Paper] {
            for m in 1..8 {
                let p = mode_params(&basis, m, conv, 0.5);
                let v = mode_variance(&basis, m, 10_000, conv, 0.5);
                assert_abs_diff_eq!(p.stationary_mean_square(), v, epsilon = 1e-9);
            }
        }
    }
}
