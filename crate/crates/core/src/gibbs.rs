//! Boltzmann penalization, the self-repelling measure and its samplers.
//!
//! Expectations under the penalized measure are estimated two ways: by
//! reweighting free (or drift-tilted) trajectories, and by a Metropolis chain
//! on the driving noise whose proposal preserves the Gaussian base law.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    diffusion_step, paper_kernel_step, sample_noise, simulate, stationary_trajectory,
    PolymerModel, Trajectory,
};
use crate::error::{invalid, Error, Result};
use crate::increments::increment_mean_and_variance;
use crate::observables::{count_close_pairs, count_close_pairs_sorted, gyration_squared, total_intersections};
use crate::report::{Cell, Table};
use crate::rng;
use crate::spectral::{Convention, SpectralBasis};
use crate::stats;

pub const DEFAULT_ESS_FLOOR: f64 = 50.0;

/// Salt separating stationary-sampling streams from dynamic ones.
const STATIONARY_SALT: u64 = 0x5354_4154_494f_4e41;

/// `-beta sum_{t=1}^T N_eps(t)`.
pub fn boltzmann_log_weight(traj: &Trajectory, beta: f64, epsilon: f64) -> Result<f64> {
    check_beta(beta)?;
    let total = total_intersections(traj, epsilon)?;
    Ok(-beta * total as f64)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta >= 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("inverse temperature beta={beta} must be >= 0")))
    }
}

/// Log-moment generating function of a standard normal, `a^2 / 2`.
pub fn log_mgf(a: f64) -> f64 {
    0.5 * a * a
}

/// Standard normal noise shifted to mean `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedMeasure {
    pub a: f64,
}

impl TiltedMeasure {
    pub fn log_mgf(&self) -> f64 {
        log_mgf(self.a)
    }

    /// Log density of the free law relative to the tilted one at `xi`:
    /// `sum (Lambda(a) - a xi)`.
    pub fn log_correction(&self, xi: &[f64]) -> f64 {
        let lm = self.log_mgf();
        xi.iter().map(|x| lm - self.a * x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaseMeasure {
    /// Untilted Gaussian noise.
    Free,
    Tilted { a: f64 },
    /// Samples already distributed by the penalized measure.
    Penalized,
}

/// Per-sample quantities retained by the ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub seed: u64,
    /// `R(T, J)`.
    pub r: f64,
    /// `sum_{t=1}^T N_eps(t)`.
    pub n_total: u64,
    pub noise_mean: f64,
}

impl SampleSummary {
    fn of(traj: &Trajectory, noise: &[f64], epsilon: f64, seed: u64) -> Result<Self> {
        Ok(SampleSummary {
            seed,
            r: gyration_squared(traj)?.sqrt(),
            n_total: total_intersections(traj, epsilon)?,
            noise_mean: stats::mean(noise),
        })
    }
}

/// Column order of [`WeightedEnsemble::to_table`].
pub const ENSEMBLE_COLUMNS: [&str; 9] =
    ["seed", "J", "T", "beta", "epsilon", "R", "N_total", "noise_mean", "log_weight"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEnsemble {
    pub items: Vec<(SampleSummary, f64)>,
    pub beta: f64,
    pub epsilon: f64,
    pub base: BaseMeasure,
    pub chain: usize,
    pub horizon: usize,
}

impl WeightedEnsemble {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `-beta T J`, the diagonal contribution present in every weight.
    pub fn log_floor(&self) -> f64 {
        -self.beta * (self.horizon * self.chain) as f64
    }

    /// Self-normalized weights.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let logs: Vec<f64> = self.items.iter().map(|(_, l)| *l).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        let w = self.normalized_weights();
        1.0 / w.iter().map(|x| x * x).sum::<f64>()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&ENSEMBLE_COLUMNS);
        for (s, l) in &self.items {
            t.push(vec![
                Cell::from(s.seed),
                Cell::from(self.chain),
                Cell::from(self.horizon),
                Cell::from(self.beta),
                Cell::from(self.epsilon),
                Cell::from(s.r),
                Cell::from(s.n_total),
                Cell::from(s.noise_mean),
                Cell::from(*l),
            ])
            .expect("row width matches header");
        }
        t
    }
}

/// Common parameters of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConfig {
    pub model: PolymerModel,
    pub beta: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn new(model: PolymerModel, beta: f64, epsilon: f64, seed: u64) -> Self {
        EnsembleConfig {
            model,
            beta,
            epsilon,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        check_beta(self.beta)?;
        if !(self.epsilon > 0.0) {
            return Err(invalid("proximity radius epsilon must be positive"));
        }
        Ok(())
    }
}

fn sample_items(cfg: &EnsembleConfig, a: f64, count: usize) -> Result<Vec<(SampleSummary, f64)>> {
    cfg.validate()?;
    if count == 0 {
        return Err(invalid("ensemble needs at least one sample"));
    }
    let tilt = TiltedMeasure { a };
    let u0 = vec![0.0; cfg.model.chain];
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(cfg.seed, i);
            let noise = sample_noise(seed, cfg.model.horizon, cfg.model.chain, a)?;
            let traj = simulate(&cfg.model, &u0, &noise)?;
            let summary = SampleSummary::of(&traj, noise.values(), cfg.epsilon, seed)?;
            let correction = if a == 0.0 { 0.0 } else { tilt.log_correction(noise.values()) };
            Ok((summary, -cfg.beta * summary.n_total as f64 + correction))
        })
        .collect()
}

/// `count` zero-started trajectories under the free measure, weighted by the
/// Boltzmann factor.
pub fn free_ensemble(cfg: &EnsembleConfig, count: usize) -> Result<WeightedEnsemble> {
    Ok(WeightedEnsemble {
        items: sample_items(cfg, 0.0, count)?,
        beta: cfg.beta,
        epsilon: cfg.epsilon,
        base: BaseMeasure::Free,
        chain: cfg.model.chain,
        horizon: cfg.model.horizon,
    })
}

/// Trajectories driven by `Normal(a, 1)` noise; each log weight includes the
/// correction back to the free measure.
pub fn tilted_ensemble(cfg: &EnsembleConfig, a: f64, count: usize) -> Result<WeightedEnsemble> {
    Ok(WeightedEnsemble {
        items: sample_items(cfg, a, count)?,
        beta: cfg.beta,
        epsilon: cfg.epsilon,
        base: BaseMeasure::Tilted { a },
        chain: cfg.model.chain,
        horizon: cfg.model.horizon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    /// Minimum accepted effective sample size (capped at the ensemble size).
    pub ess_floor: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            ess_floor: DEFAULT_ESS_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    /// `log Z`; absent for ensembles already drawn from the penalized measure.
    pub log_z: Option<f64>,
    pub log_z_se: Option<f64>,
    pub q_expectation: f64,
    pub q_se: f64,
    pub ess: f64,
    pub count: usize,
}

/// Partition function and self-normalized expectation of `selector`.
pub fn estimate_measure<F>(
    ensemble: &WeightedEnsemble,
    selector: F,
    options: EstimatorOptions,
) -> Result<MeasureEstimate>
where
    F: Fn(&SampleSummary) -> f64,
{
    if ensemble.is_empty() {
        return Err(invalid("cannot estimate from an empty ensemble"));
    }
    let n = ensemble.len();
    let floor = ensemble.log_floor();
    let shifted: Vec<f64> = ensemble.items.iter().map(|(_, l)| l - floor).collect();
    if shifted.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite log weight in ensemble"));
    }
    let weights = ensemble.normalized_weights();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let required = options.ess_floor.min(n as f64);
    if ess < required * (1.0 - 1e-12) {
        return Err(Error::Degenerate {
            beta: ensemble.beta,
            horizon: ensemble.horizon,
            chain: ensemble.chain,
            ess,
            floor: required,
        });
    }

    let values: Vec<f64> = ensemble.items.iter().map(|(s, _)| selector(s)).collect();
    let q: f64 = weights.iter().zip(&values).map(|(w, v)| w * v).sum();
    let q_se = weights
        .iter()
        .zip(&values)
        .map(|(w, v)| w * w * (v - q) * (v - q))
        .sum::<f64>()
        .sqrt();

    let (log_z, log_z_se) = match ensemble.base {
        BaseMeasure::Penalized => (None, None),
        base => {
            let lse = stats::log_sum_exp(&shifted);
            let mut log_z = floor + lse - (n as f64).ln();
            if base == BaseMeasure::Free {
                let j2 = (ensemble.chain * ensemble.chain * ensemble.horizon) as f64;
                log_z = log_z.clamp(-ensemble.beta * j2, floor);
            }
            let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let scaled: Vec<f64> = shifted.iter().map(|s| (s - max).exp()).collect();
            let m = stats::mean(&scaled);
            let se = if m > 0.0 { stats::standard_error(&scaled) / m } else { f64::INFINITY };
            (Some(log_z), Some(se))
        }
    };
    Ok(MeasureEstimate {
        log_z,
        log_z_se,
        q_expectation: q,
        q_se,
        ess,
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JensenReport {
    pub bound: f64,
    pub bound_se: f64,
    pub log_z_over_t: f64,
    pub log_z_se: f64,
    pub holds: bool,
}

/// Compares `(1/T) log Z` with `-(beta/T) E[sum_t N_eps(t)] - a^2 J / 2`.
///
/// The expectation is taken over stationary trajectories driven by
/// `Normal(a, 1)` noise with an exact stationary start; `log Z` comes from a
/// free zero-started ensemble of the same size.
pub fn jensen_lower_bound(
    cfg: &EnsembleConfig,
    basis: &SpectralBasis,
    a: f64,
    samples: usize,
    options: EstimatorOptions,
) -> Result<JensenReport> {
    cfg.validate()?;
    if samples < 2 {
        return Err(invalid("Jensen bound needs at least two samples"));
    }
    let (j, horizon) = (cfg.model.chain, cfg.model.horizon);
    let totals: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(cfg.seed ^ STATIONARY_SALT, i);
            let traj = stationary_trajectory(basis, &cfg.model, a, seed)?;
            Ok(total_intersections(&traj, cfg.epsilon)? as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean_n, se_n) = stats::mean_and_se(&totals);
    let scale = cfg.beta / horizon as f64;
    let bound = -scale * mean_n - log_mgf(a) * j as f64;
    let bound_se = scale * se_n;

    let ensemble = free_ensemble(cfg, samples)?;
    let est = estimate_measure(&ensemble, |s| s.r, options)?;
    let log_z_over_t = est.log_z.expect("free ensemble has a partition function") / horizon as f64;
    let log_z_se = est.log_z_se.unwrap_or(0.0) / horizon as f64;
    let combined = (bound_se * bound_se + log_z_se * log_z_se).sqrt();
    Ok(JensenReport {
        bound,
        bound_se,
        log_z_over_t,
        log_z_se,
        holds: log_z_over_t >= bound - 3.0 * combined,
    })
}

/// Metropolis acceptance for log target ratio `log_ratio` and a uniform draw.
#[inline]
pub fn metropolis_accept(log_ratio: f64, uniform: f64) -> bool {
    log_ratio >= 0.0 || uniform < log_ratio.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetropolisConfig {
    pub burn_in: usize,
    /// Sweeps between retained samples.
    pub thin: usize,
    /// Innovation weight `s` of the move `xi' = sqrt(1 - s^2) xi + s z`.
    pub proposal_scale: f64,
    /// Probability that a move refreshes one entry instead of a full row.
    pub entry_move_prob: f64,
}

impl Default for MetropolisConfig {
    fn default() -> Self {
        MetropolisConfig {
            burn_in: 200,
            thin: 5,
            proposal_scale: 0.5,
            entry_move_prob: 0.5,
        }
    }
}

impl MetropolisConfig {
    fn validate(&self) -> Result<()> {
        if !(self.proposal_scale > 0.0 && self.proposal_scale <= 1.0) {
            return Err(invalid("proposal scale must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.entry_move_prob) {
            return Err(invalid("entry move probability must lie in [0, 1]"));
        }
        if self.thin == 0 {
            return Err(invalid("thinning interval must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub moves: u64,
    pub acceptance_rate: f64,
    /// Integrated autocorrelation time of the retained `N_total` series.
    pub autocorrelation_time: f64,
    pub effective_sample_size: f64,
    pub warning: Option<String>,
}

impl ChainDiagnostics {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "moves",
            "acceptance_rate",
            "autocorrelation_time",
            "effective_sample_size",
            "warning",
        ]);
        t.push(vec![
            Cell::from(self.moves),
            Cell::from(self.acceptance_rate),
            Cell::from(self.autocorrelation_time),
            Cell::from(self.effective_sample_size),
            Cell::from(self.warning.clone().unwrap_or_default()),
        ])
        .expect("row width matches header");
        t
    }
}

/// Chain state: noise, the recursion field it drives, the observed field and
/// per-time pair counts.
struct ChainState {
    j: usize,
    horizon: usize,
    conv: Convention,
    kappa: f64,
    epsilon: f64,
    xi: Vec<f64>,
    literal: Vec<f64>,
    observed: Vec<f64>,
    counts: Vec<u64>,
    // Proposal scratch.
    cand_row: Vec<f64>,
    cand_literal: Vec<f64>,
    cand_observed: Vec<f64>,
    cand_counts: Vec<u64>,
    delta: Vec<f64>,
    tmp: Vec<f64>,
    sorted: Vec<f64>,
}

impl ChainState {
    fn new(model: &PolymerModel, epsilon: f64, xi: Vec<f64>) -> Result<Self> {
        let (j, horizon) = (model.chain, model.horizon);
        let noise = crate::dynamics::NoiseField::from_rows(horizon, j, xi.clone())?;
        let literal = crate::dynamics::simulate_recursion(&vec![0.0; j], &noise, model.kappa)?;
        let mut state = ChainState {
            j,
            horizon,
            conv: model.convention,
            kappa: model.kappa,
            epsilon,
            xi,
            literal: literal.values().to_vec(),
            observed: vec![0.0; (horizon + 1) * j],
            counts: vec![0; horizon + 1],
            cand_row: vec![0.0; j],
            cand_literal: vec![0.0; (horizon + 1) * j],
            cand_observed: vec![0.0; (horizon + 1) * j],
            cand_counts: vec![0; horizon + 1],
            delta: vec![0.0; j],
            tmp: vec![0.0; j],
            sorted: vec![0.0; j],
        };
        for t in 0..=horizon {
            let (lit, obs) = (&state.literal[t * j..(t + 1) * j], &mut state.observed[t * j..(t + 1) * j]);
            match state.conv {
                Convention::Literal => obs.copy_from_slice(lit),
                Convention::Paper => paper_kernel_step(lit, obs),
            }
            state.counts[t] = count_close_pairs(obs, epsilon);
        }
        Ok(state)
    }

    fn energy(&self) -> u64 {
        self.counts[1..].iter().sum()
    }

    /// Builds the candidate fields for a new noise row `r` held in
    /// `cand_row` and returns the change in `sum_t N_eps(t)`.
    fn propose(&mut self, r: usize) -> i64 {
        let j = self.j;
        for n in 0..j {
            self.delta[n] = self.cand_row[n] - self.xi[r * j + n];
        }
        let mut change = 0i64;
        for t in r + 1..=self.horizon {
            if t > r + 1 {
                diffusion_step(&self.delta, self.kappa, &mut self.tmp);
                std::mem::swap(&mut self.delta, &mut self.tmp);
            }
            let range = t * j..(t + 1) * j;
            for (k, c) in self.cand_literal[range.clone()].iter_mut().enumerate() {
                *c = self.literal[t * j + k] + self.delta[k];
            }
            match self.conv {
                Convention::Literal => {
                    self.cand_observed[range.clone()].copy_from_slice(&self.cand_literal[range.clone()])
                }
                Convention::Paper => {
                    paper_kernel_step(&self.cand_literal[range.clone()], &mut self.cand_observed[range.clone()])
                }
            }
            self.sorted.copy_from_slice(&self.cand_observed[range]);
            self.sorted.sort_by(f64::total_cmp);
            let c = count_close_pairs_sorted(&self.sorted, self.epsilon);
            self.cand_counts[t] = c;
            change += c as i64 - self.counts[t] as i64;
        }
        change
    }

    fn commit(&mut self, r: usize) {
        let j = self.j;
        self.xi[r * j..(r + 1) * j].copy_from_slice(&self.cand_row);
        let span = (r + 1) * j..(self.horizon + 1) * j;
        self.literal[span.clone()].copy_from_slice(&self.cand_literal[span.clone()]);
        self.observed[span.clone()].copy_from_slice(&self.cand_observed[span]);
        self.counts[r + 1..].copy_from_slice(&self.cand_counts[r + 1..]);
    }

    fn summary(&self, seed: u64) -> SampleSummary {
        let j = self.j;
        let spread: f64 = (1..=self.horizon)
            .map(|t| crate::observables::slice_spread(&self.observed[t * j..(t + 1) * j]))
            .sum();
        SampleSummary {
            seed,
            r: (spread / (self.horizon * j) as f64).sqrt(),
            n_total: self.energy(),
            noise_mean: stats::mean(&self.xi),
        }
    }
}

/// Runs one Metropolis chain targeting the penalized measure and returns
/// `samples` thinned states with unit weights.
///
/// A sweep is `T` moves. Each move picks a noise row uniformly and refreshes
/// either one entry or the whole row with the autoregressive Gaussian
/// proposal, which is reversible for the free noise law, so only the change
/// in `-beta sum_t N_eps(t)` enters the acceptance ratio.
pub fn metropolis_sampler(
    cfg: &EnsembleConfig,
    mc: &MetropolisConfig,
    samples: usize,
) -> Result<(WeightedEnsemble, ChainDiagnostics)> {
    cfg.validate()?;
    mc.validate()?;
    if samples == 0 {
        return Err(invalid("Metropolis chain needs at least one retained sample"));
    }
    let (j, horizon) = (cfg.model.chain, cfg.model.horizon);
    let initial = sample_noise(cfg.seed, horizon, j, 0.0)?;
    let mut state = ChainState::new(&cfg.model, cfg.epsilon, initial.values().to_vec())?;
    let mut stream = rng::stream(rng::derive_seed(cfg.seed, u64::MAX));
    let s = mc.proposal_scale;
    let keep = (1.0 - s * s).sqrt();
    let (mut moves, mut accepted) = (0u64, 0u64);
    let mut items = Vec::with_capacity(samples);
    let total_sweeps = mc.burn_in + samples * mc.thin;
    for sweep in 1..=total_sweeps {
        for _ in 0..horizon {
            let r = stream.random_range(0..horizon);
            state.cand_row.copy_from_slice(&state.xi[r * j..(r + 1) * j]);
            if stream.random::<f64>() < mc.entry_move_prob {
                let n = stream.random_range(0..j);
                let z: f64 = stream.sample(StandardNormal);
                state.cand_row[n] = keep * state.cand_row[n] + s * z;
            } else {
                for x in state.cand_row.iter_mut() {
                    let z: f64 = stream.sample(StandardNormal);
                    *x = keep * *x + s * z;
                }
            }
            let change = state.propose(r);
            let u: f64 = stream.random();
            moves += 1;
            if metropolis_accept(-cfg.beta * change as f64, u) {
                state.commit(r);
                accepted += 1;
            }
        }
        if sweep > mc.burn_in && (sweep - mc.burn_in).is_multiple_of(mc.thin) {
            items.push((state.summary(cfg.seed), 0.0));
        }
    }
    let acceptance_rate = accepted as f64 / moves as f64;
    let series: Vec<f64> = items.iter().map(|(s, _): &(SampleSummary, f64)| s.n_total as f64).collect();
    let tau = stats::integrated_autocorrelation_time(&series);
    let warning = if !(0.05..=0.95).contains(&acceptance_rate) && cfg.beta > 0.0 {
        Some(format!(
            "acceptance rate {acceptance_rate:.3} outside [0.05, 0.95]; adjust the proposal scale"
        ))
    } else {
        None
    };
    Ok((
        WeightedEnsemble {
            items,
            beta: cfg.beta,
            epsilon: cfg.epsilon,
            base: BaseMeasure::Penalized,
            chain: j,
            horizon,
        },
        ChainDiagnostics {
            moves,
            acceptance_rate,
            autocorrelation_time: tau,
            effective_sample_size: series.len() as f64 / tau,
            warning,
        },
    ))
}

/// Pair-proximity upper bound on `E[N_eps]` for the stationary string:
/// `J + sum_d 2 (J - d) (2 Phi(eps / sigma_d) - 1)` with `sigma_d` the
/// smallest increment standard deviation at distance `d`.
pub fn pair_proximity_bound(basis: &SpectralBasis, epsilon: f64, conv: Convention) -> Result<f64> {
    let j = basis.len();
    if j < 2 {
        return Err(invalid("pair proximity bound needs J >= 2"));
    }
    let mut total = j as f64;
    for d in 1..j {
        let mut sigma = f64::INFINITY;
        for i in 0..j - d {
            sigma = sigma.min(increment_mean_and_variance(basis, i, i + d, conv)?.variance.sqrt());
        }
        total += 2.0 * (j - d) as f64 * close_probability(epsilon, sigma);
    }
    Ok(total)
}

/// `P(|Z sigma| <= eps)` for centered normal `Z sigma`.
fn close_probability(epsilon: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        1.0
    } else {
        2.0 * stats::normal_cdf(epsilon / sigma) - 1.0
    }
}

/// Exact `E[N_eps]` of a stationary slice, summed over every ordered pair.
pub fn stationary_expected_count(basis: &SpectralBasis, epsilon: f64, conv: Convention) -> Result<f64> {
    let j = basis.len();
    if j < 2 {
        return Ok(j as f64);
    }
    let mut total = j as f64;
    for i in 0..j {
        for k in i + 1..j {
            let sigma = increment_mean_and_variance(basis, i, k, conv)?.variance.sqrt();
            total += 2.0 * close_probability(epsilon, sigma);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoiseField;
    use crate::spectral::build_basis;

    fn cfg(j: usize, t: usize, beta: f64, seed: u64) -> EnsembleConfig {
        EnsembleConfig::new(PolymerModel::new(j, t), beta, 0.5, seed)
    }

    #[test]
    fn boltzmann_examples() {
        let traj = PolymerModel::new(5, 4).sample(1, 0.0).unwrap();
        assert_eq!(boltzmann_log_weight(&traj, 0.0, 0.5).unwrap(), 0.0);
        let single = PolymerModel::new(1, 7).sample(2, 0.0).unwrap();
        assert_eq!(boltzmann_log_weight(&single, 0.3, 0.5).unwrap(), -0.3 * 7.0);
        let flat = simulate(&PolymerModel::new(4, 3), &[0.0; 4], &NoiseField::zeros(3, 4)).unwrap();
        assert_eq!(boltzmann_log_weight(&flat, 0.2, 0.5).unwrap(), -0.2 * 3.0 * 16.0);
        assert!(boltzmann_log_weight(&flat, -1.0, 0.5).is_err());
    }

    #[test]
    fn free_ensemble_at_zero_beta() {
        let e = free_ensemble(&cfg(4, 6, 0.0, 3), 500).unwrap();
        let est = estimate_measure(&e, |s| s.r, EstimatorOptions::default()).unwrap();
        assert_eq!(est.log_z, Some(0.0));
        let plain = stats::mean(&e.items.iter().map(|(s, _)| s.r).collect::<Vec<_>>());
        assert!((est.q_expectation - plain).abs() < 1e-12);
        assert!((est.ess - 500.0).abs() < 1e-9);
    }

    #[test]
    fn single_site_partition_function_is_exact() {
        for beta in [0.0, 0.1, 2.0, 50.0] {
            let e = free_ensemble(&cfg(1, 9, beta, 4), 64).unwrap();
            let est = estimate_measure(&e, |s| s.r, EstimatorOptions::default()).unwrap();
            assert_eq!(est.log_z, Some(-beta * 9.0));
        }
    }

    #[test]
    fn single_item_ensemble() {
        let e = free_ensemble(&cfg(3, 4, 0.7, 5), 1).unwrap();
        let est = estimate_measure(&e, |s| s.n_total as f64, EstimatorOptions::default()).unwrap();
        assert_eq!(est.q_expectation, e.items[0].0.n_total as f64);
    }

    #[test]
    fn partition_function_stays_in_its_interval() {
        let e = free_ensemble(&cfg(6, 10, 3.0, 6), 200).unwrap();
        match estimate_measure(&e, |s| s.r, EstimatorOptions { ess_floor: 1.0 }) {
            Ok(est) => {
                let lz = est.log_z.unwrap();
                assert!(lz <= -3.0 * 60.0 && lz >= -3.0 * 360.0);
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn degeneracy_names_parameters() {
        let e = free_ensemble(&cfg(8, 16, 5.0, 7), 300).unwrap();
        match estimate_measure(&e, |s| s.r, EstimatorOptions::default()) {
            Err(Error::Degenerate { beta, horizon, chain, .. }) => {
                assert_eq!((beta, horizon, chain), (5.0, 16, 8));
            }
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn tilted_corrections() {
        let c = cfg(3, 5, 0.0, 8);
        let zero = tilted_ensemble(&c, 0.0, 20).unwrap();
        assert!(zero.items.iter().all(|(_, l)| *l == 0.0));

        let a = 0.3;
        let e = tilted_ensemble(&c, a, 4000).unwrap();
        let means: Vec<f64> = e.items.iter().map(|(s, _)| s.noise_mean).collect();
        let (m, se) = stats::mean_and_se(&means);
        assert!((m - a).abs() < 4.0 * se);
        let est = estimate_measure(&e, |s| s.noise_mean, EstimatorOptions::default()).unwrap();
        assert!(est.q_expectation.abs() < 4.0 * est.q_se, "{est:?}");
        assert!(est.log_z.unwrap().abs() < 4.0 * est.log_z_se.unwrap());
    }

    #[test]
    fn jensen_trivial_cases() {
        let basis = build_basis(3).unwrap();
        let r = jensen_lower_bound(&cfg(3, 4, 0.0, 9), &basis, 0.0, 50, EstimatorOptions::default()).unwrap();
        assert_eq!((r.bound, r.log_z_over_t), (0.0, 0.0));
        assert!(r.holds);
        let basis = build_basis(1).unwrap();
        let r = jensen_lower_bound(&cfg(1, 4, 0.25, 9), &basis, 0.0, 50, EstimatorOptions::default()).unwrap();
        assert_eq!(r.bound, -0.25);
        assert_eq!(r.log_z_over_t, -0.25);
        assert!(r.holds);
    }

    #[test]
    fn acceptance_rule() {
        assert!(metropolis_accept(0.0, 0.999));
        assert!(metropolis_accept(1.0, 0.999));
        assert!(metropolis_accept(-1.0, 0.3));
        assert!(!metropolis_accept(-1.0, 0.4));
    }

    #[test]
    fn two_state_detailed_balance() {
        // States A and B with penalties 3 and 5 at beta = 0.4; proposals
        // always flip, so P(A->B) / P(B->A) must equal w_B / w_A.
        let beta = 0.4;
        let energy = [3.0, 5.0];
        let mut stream = rng::stream(10);
        let mut state = 0usize;
        let mut visits = [0u64; 2];
        let mut flows = [0u64; 2];
        for _ in 0..400_000 {
            visits[state] += 1;
            let other = 1 - state;
            if metropolis_accept(-beta * (energy[other] - energy[state]), stream.random()) {
                flows[state] += 1;
                state = other;
            }
        }
        let p_ab = flows[0] as f64 / visits[0] as f64;
        let p_ba = flows[1] as f64 / visits[1] as f64;
        let ratio = p_ab / p_ba;
        let want = (-beta * 2.0f64).exp();
        let se = ratio * ((1.0 - p_ab) / (p_ab * visits[0] as f64)).sqrt();
        assert!((ratio - want).abs() < 3.0 * se.max(1e-12), "{ratio} vs {want} (se {se})");
        // Stationary occupation as a cross-check.
        let occ = visits[1] as f64 / visits[0] as f64;
        assert!((occ - want).abs() < 0.02);
    }

    #[test]
    fn chain_fields_stay_consistent() {
        for conv in [Convention::Literal, Convention::Paper] {
            let model = PolymerModel::new(5, 7).with_convention(conv);
            let c = EnsembleConfig::new(model, 0.2, 0.5, 11);
            let mc = MetropolisConfig { burn_in: 5, thin: 1, ..Default::default() };
            let (_, _) = metropolis_sampler(&c, &mc, 3).unwrap();
            // Rebuild a state, run moves by hand and compare to a fresh simulation.
            let noise = sample_noise(1, 7, 5, 0.0).unwrap();
            let mut st = ChainState::new(&model, 0.5, noise.values().to_vec()).unwrap();
            let mut stream = rng::stream(3);
            for _ in 0..40 {
                let r = stream.random_range(0..7);
                for x in st.cand_row.iter_mut() {
                    *x = stream.sample(StandardNormal);
                }
                st.propose(r);
                st.commit(r);
            }
            let fresh_noise = NoiseField::from_rows(7, 5, st.xi.clone()).unwrap();
            let fresh = simulate(&model, &[0.0; 5], &fresh_noise).unwrap();
            for (a, b) in fresh.values().iter().zip(&st.observed) {
                assert!((a - b).abs() < 1e-10);
            }
            assert_eq!(st.energy(), total_intersections(&fresh, 0.5).unwrap());
        }
    }

    #[test]
    fn zero_beta_accepts_everything() {
        let mc = MetropolisConfig { burn_in: 2, thin: 1, ..Default::default() };
        let (e, d) = metropolis_sampler(&cfg(4, 6, 0.0, 12), &mc, 10).unwrap();
        assert_eq!(d.acceptance_rate, 1.0);
        assert_eq!(e.len(), 10);
        assert!(d.warning.is_none());
    }

    #[test]
    fn penalization_lowers_crowding() {
        let mc = MetropolisConfig { burn_in: 200, thin: 2, ..Default::default() };
        let mut last = f64::INFINITY;
        let mut last_se = 0.0;
        for beta in [0.0, 0.1, 0.4] {
            let (e, _) = metropolis_sampler(&cfg(4, 8, beta, 13), &mc, 4000).unwrap();
            let n: Vec<f64> = e.items.iter().map(|(s, _)| s.n_total as f64).collect();
            let m = stats::mean(&n);
            let se = stats::standard_error(&n) * stats::integrated_autocorrelation_time(&n).sqrt();
            assert!(m <= last + 3.0 * (se * se + last_se * last_se).sqrt(), "beta {beta}: {m} > {last}");
            last = m;
            last_se = se;
        }
    }

    #[test]
    fn importance_and_metropolis_agree() {
        let c = cfg(4, 8, 0.05, 14);
        let e = free_ensemble(&c, 20_000).unwrap();
        let is = estimate_measure(&e, |s| s.r, EstimatorOptions::default()).unwrap();
        assert!(is.ess >= 200.0);
        let mc = MetropolisConfig { burn_in: 200, thin: 2, ..Default::default() };
        let (chain, _) = metropolis_sampler(&c, &mc, 8000).unwrap();
        let r: Vec<f64> = chain.items.iter().map(|(s, _)| s.r).collect();
        let m = stats::mean(&r);
        let se = stats::standard_error(&r) * stats::integrated_autocorrelation_time(&r).sqrt();
        let combined = (se * se + is.q_se * is.q_se).sqrt();
        assert!((m - is.q_expectation).abs() < 3.0 * combined, "{m} vs {}", is.q_expectation);
    }

    #[test]
    fn proximity_bound_limits() {
        let b = build_basis(8).unwrap();
        for conv in [Convention::Literal, Convention::Paper] {
            assert!((pair_proximity_bound(&b, 1e-12, conv).unwrap() - 8.0).abs() < 1e-6);
            assert!((pair_proximity_bound(&b, 1e9, conv).unwrap() - 64.0).abs() < 1e-9);
            let exact = stationary_expected_count(&b, 0.5, conv).unwrap();
            assert!(exact <= pair_proximity_bound(&b, 0.5, conv).unwrap());
        }
    }
}
