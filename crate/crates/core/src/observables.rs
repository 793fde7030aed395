//! Geometric and self-intersection observables of a trajectory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{invalid, Result};

fn check_time(traj: &Trajectory, t: usize) -> Result<()> {
    if t > traj.horizon() {
        return Err(invalid(format!("time {t} outside 0..={}", traj.horizon())));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("proximity radius epsilon={epsilon} must be positive")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(invalid(format!("bin offset alpha={alpha} must lie in [0, 1]")))
    }
}

pub fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `(1/J) sum_n u(t, n)`.
pub fn center_of_mass(traj: &Trajectory, t: usize) -> Result<f64> {
    check_time(traj, t)?;
    Ok(mean_of(traj.slice(t)))
}

/// Spatial variance of one slice about its center of mass.
pub fn slice_spread(values: &[f64]) -> f64 {
    let m = mean_of(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
}

/// `R^2 = (1/(TJ)) sum_{t=1}^T sum_n (u(t, n) - ubar(t))^2`; slice 0 is
/// excluded.
pub fn gyration_squared(traj: &Trajectory) -> Result<f64> {
    if traj.horizon() == 0 {
        return Err(invalid("radius of gyration needs T >= 1"));
    }
    let total: f64 = (1..=traj.horizon()).map(|t| slice_spread(traj.slice(t))).sum();
    Ok(total / (traj.horizon() * traj.width()) as f64)
}

pub fn radius_of_gyration(traj: &Trajectory) -> Result<f64> {
    gyration_squared(traj).map(f64::sqrt)
}

/// Number of ordered pairs `(i, j)`, diagonal included, with
/// `|v_i - v_j| <= epsilon`. Sorts a copy and sweeps a window.
pub fn count_close_pairs(values: &[f64], epsilon: f64) -> u64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    count_close_pairs_sorted(&sorted, epsilon)
}

/// Same as [`count_close_pairs`] for already sorted input.
pub fn count_close_pairs_sorted(sorted: &[f64], epsilon: f64) -> u64 {
    let mut off_diagonal = 0u64;
    let mut hi = 0usize;
    for lo in 0..sorted.len() {
        if hi < lo {
            hi = lo;
        }
        while hi + 1 < sorted.len() && sorted[hi + 1] - sorted[lo] <= epsilon {
            hi += 1;
        }
        off_diagonal += (hi - lo) as u64;
    }
    sorted.len() as u64 + 2 * off_diagonal
}

/// Double-loop reference for [`count_close_pairs`].
pub fn count_close_pairs_naive(values: &[f64], epsilon: f64) -> u64 {
    let mut count = 0u64;
    for a in values {
        for b in values {
            if (a - b).abs() <= epsilon {
                count += 1;
            }
        }
    }
    count
}

/// `N_eps(t)`.
pub fn self_intersection_count(traj: &Trajectory, t: usize, epsilon: f64) -> Result<u64> {
    check_time(traj, t)?;
    check_epsilon(epsilon)?;
    Ok(count_close_pairs(traj.slice(t), epsilon))
}

/// `sum_{t=1}^T N_eps(t)`.
pub fn total_intersections(traj: &Trajectory, epsilon: f64) -> Result<u64> {
    check_epsilon(epsilon)?;
    let mut buf = Vec::with_capacity(traj.width());
    let mut total = 0;
    for t in 1..=traj.horizon() {
        buf.clear();
        buf.extend_from_slice(traj.slice(t));
        buf.sort_by(f64::total_cmp);
        total += count_close_pairs_sorted(&buf, epsilon);
    }
    Ok(total)
}

/// Bin `z` with `u` in `(z eps - alpha eps, z eps + (1 - alpha) eps]`.
pub fn bin_index(u: f64, epsilon: f64, alpha: f64) -> i64 {
    let mut z = ((u / epsilon + alpha).ceil() - 1.0) as i64;
    // Rounding in the division can land one bin off; settle against the
    // interval exactly as written.
    while u <= (z as f64 - alpha) * epsilon {
        z -= 1;
    }
    while u > (z as f64 + 1.0 - alpha) * epsilon {
        z += 1;
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyHistogram {
    pub epsilon: f64,
    pub alpha: f64,
    pub counts: BTreeMap<i64, u64>,
}

impl OccupancyHistogram {
    pub fn from_values(values: &[f64], epsilon: f64, alpha: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        check_alpha(alpha)?;
        let mut counts = BTreeMap::new();
        for &u in values {
            *counts.entry(bin_index(u, epsilon, alpha)).or_insert(0) += 1;
        }
        Ok(OccupancyHistogram {
            epsilon,
            alpha,
            counts,
        })
    }

    pub fn get(&self, z: i64) -> u64 {
        self.counts.get(&z).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// `sum_z l(z)^2`.
    pub fn sum_of_squares(&self) -> u64 {
        self.counts.values().map(|c| c * c).sum()
    }

    /// Counts restricted to `z_lo <= z < z_hi`.
    pub fn window(&self, z_lo: i64, z_hi: i64) -> impl Iterator<Item = u64> + '_ {
        self.counts.range(z_lo..z_hi.max(z_lo)).map(|(_, &c)| c)
    }
}

pub fn occupancy_histogram(
    traj: &Trajectory,
    t: usize,
    epsilon: f64,
    alpha: f64,
) -> Result<OccupancyHistogram> {
    check_time(traj, t)?;
    OccupancyHistogram::from_values(traj.slice(t), epsilon, alpha)
}

/// Successive terms of the bin-counting lower bound at one time, for a bin
/// window `[z_lo, z_hi)`:
/// `N >= sum_z l^2 >= sum_window l^2 >= (sum_window l)^2 / (z_hi - z_lo)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub lhs: u64,
    pub rhs: u64,
    pub holds: bool,
    pub z_lo: i64,
    pub z_hi: i64,
    pub window_squares: u64,
    pub window_occupancy: u64,
    pub cauchy_schwarz: f64,
    pub chain_holds: bool,
}

pub fn inequality_chain(values: &[f64], epsilon: f64, alpha: f64, window: (i64, i64)) -> Result<InequalityReport> {
    let hist = OccupancyHistogram::from_values(values, epsilon, alpha)?;
    let lhs = count_close_pairs(values, epsilon);
    let rhs = hist.sum_of_squares();
    let (z_lo, z_hi) = window;
    let window_squares: u64 = hist.window(z_lo, z_hi).map(|c| c * c).sum();
    let window_occupancy: u64 = hist.window(z_lo, z_hi).sum();
    let cauchy_schwarz = if z_hi > z_lo {
        (window_occupancy * window_occupancy) as f64 / (z_hi - z_lo) as f64
    } else {
        0.0
    };
    Ok(InequalityReport {
        lhs,
        rhs,
        holds: lhs >= rhs,
        z_lo,
        z_hi,
        window_squares,
        window_occupancy,
        cauchy_schwarz,
        chain_holds: lhs >= rhs && rhs >= window_squares && window_squares as f64 >= cauchy_schwarz,
    })
}

/// Compares `N_eps(t)` with `sum_z l^2` and evaluates the chain on the bin
/// window; when `window` is `None` the occupied range is used.
pub fn local_inequality_check(
    traj: &Trajectory,
    t: usize,
    epsilon: f64,
    alpha: f64,
    window: Option<(i64, i64)>,
) -> Result<InequalityReport> {
    check_time(traj, t)?;
    let values = traj.slice(t);
    let window = match window {
        Some(w) => w,
        None => {
            let hist = OccupancyHistogram::from_values(values, epsilon, alpha)?;
            let lo = *hist.counts.keys().next().unwrap_or(&0);
            let hi = hist.counts.keys().next_back().map_or(0, |z| z + 1);
            (lo, hi)
        }
    };
    inequality_chain(values, epsilon, alpha, window)
}

/// Observables of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableRecord {
    /// Center of mass for `t = 0..=T`.
    pub ubar: Vec<f64>,
    /// `N_eps(t)` for `t = 0..=T`.
    pub counts: Vec<u64>,
    pub r: f64,
    pub epsilon: f64,
}

impl ObservableRecord {
    /// `sum_{t=1}^T N_eps(t)`.
    pub fn n_total(&self) -> u64 {
        self.counts.iter().skip(1).sum()
    }

    pub fn r_squared(&self) -> f64 {
        self.r * self.r
    }
}

pub fn observe(traj: &Trajectory, epsilon: f64) -> Result<ObservableRecord> {
    check_epsilon(epsilon)?;
    let ubar = (0..=traj.horizon()).map(|t| mean_of(traj.slice(t))).collect();
    let counts = (0..=traj.horizon())
        .map(|t| count_close_pairs(traj.slice(t), epsilon))
        .collect();
    Ok(ObservableRecord {
        ubar,
        counts,
        r: radius_of_gyration(traj)?,
        epsilon,
    })
}
