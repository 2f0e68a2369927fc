//! Posterior diagnostics: predictive checks, expected coverage, correlation
//! matrices, the noise-free grid search and a brute-force grid posterior.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain_model::{Layout, NoiseModel, DIGITAL_MAX};
use crate::error::{Error, Result};
use crate::observables::ObservableKind;
use crate::seed::{derive_rng, derive_seed, rng_from_seed};
use crate::snpe::{
    is_observable_failure, posterior_sample, write_text, ConditionalDensity, Simulator, TargetObservation,
    UniformBoxPrior, MAX_DISCARD_RATE,
};

/// Default number of posterior draws for predictive checks.
pub const DEFAULT_PPC_SAMPLES: usize = 1000;
pub const DEFAULT_COVERAGE_PAIRS: usize = 1000;
pub const DEFAULT_COVERAGE_SAMPLES: usize = 10_000;
pub const DEFAULT_GRID_POINTS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcReport {
    pub n_samples: usize,
    pub mean_euclidean_distance: f64,
    /// Mean of `x - x*` per dimension.
    pub mean_deviation: Vec<f64>,
    /// Spread of the predictive observations per dimension.
    pub sd: Vec<f64>,
    /// `mean_deviation / σ*`, absent without a target spread.
    pub scaled_mean_deviation: Option<Vec<f64>>,
    /// `sd / σ*`.
    pub scaled_sd: Option<Vec<f64>>,
    pub n_failed: usize,
}

impl PpcReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        write_text(path, &(s + "\n"))
    }
}

fn mean_sd(rows: &[Vec<f64>], k: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let m = rows.iter().map(|r| r[k]).sum::<f64>() / n;
    let v = rows.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

/// Simulate once at each of `n_samples` posterior draws conditioned on the
/// target and compare the observations with `x*`.
pub fn posterior_predictive_check(
    posterior: &dyn ConditionalDensity,
    prior: &UniformBoxPrior,
    sim: &Simulator,
    target: &TargetObservation,
    n_samples: usize,
    seed: u64,
) -> Result<PpcReport> {
    if n_samples == 0 {
        return Err(Error::Config("predictive check needs at least one sample".into()));
    }
    let x_star = target.x();
    let mut rng = derive_rng(seed, "ppc/theta", 0);
    let thetas = posterior_sample(posterior, prior, x_star, n_samples, &mut rng)?.samples;
    predictive_check_at(&thetas, sim, target, seed)
}

/// Predictive statistics for given parameter draws.
pub fn predictive_check_at(thetas: &Array2<f64>, sim: &Simulator, target: &TargetObservation, seed: u64) -> Result<PpcReport> {
    let x_star = target.x();
    let results: Vec<Result<Vec<f64>>> = (0..thetas.nrows())
        .into_par_iter()
        .map(|i| {
            sim.observe(&thetas.row(i).to_vec(), derive_seed(seed, "ppc/sim", i as u64))
                .map(|x| x.values)
        })
        .collect();
    let mut xs = Vec::with_capacity(results.len());
    let mut failed = 0;
    for r in results {
        match r {
            Ok(x) => xs.push(x),
            Err(e) if is_observable_failure(&e) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if xs.is_empty() || failed as f64 > MAX_DISCARD_RATE * thetas.nrows() as f64 {
        return Err(Error::DiscardRateExceeded {
            discarded: failed,
            attempted: thetas.nrows(),
        });
    }
    let dim = x_star.len();
    let mean_euclidean_distance = xs
        .iter()
        .map(|x| x.iter().zip(x_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / xs.len() as f64;
    let stats: Vec<(f64, f64)> = (0..dim).map(|k| mean_sd(&xs, k)).collect();
    let mean_deviation: Vec<f64> = stats.iter().zip(x_star).map(|((m, _), s)| m - s).collect();
    let sd: Vec<f64> = stats.iter().map(|(_, s)| *s).collect();
    let scale = |v: &[f64]| -> Option<Vec<f64>> {
        target
            .sigma_star
            .as_ref()
            .filter(|s| s.iter().all(|x| *x > 0.0))
            .map(|s| v.iter().zip(s).map(|(a, b)| a / b).collect())
    };
    Ok(PpcReport {
        n_samples: xs.len(),
        mean_euclidean_distance,
        scaled_mean_deviation: scale(&mean_deviation),
        scaled_sd: scale(&sd),
        mean_deviation,
        sd,
        n_failed: failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub credibility_levels: Vec<f64>,
    pub empirical_coverage: Vec<f64>,
    pub n_pairs: usize,
    pub n_posterior_samples: usize,
    /// Fraction of posterior draws with higher density than the true
    /// parameter, one per pair.
    pub ranks: Vec<f64>,
}

/// `0.01, 0.02, ..., 0.99`.
pub fn credibility_grid() -> Vec<f64> {
    (1..100).map(|k| k as f64 / 100.0).collect()
}

impl CoverageCurve {
    pub fn from_ranks(ranks: Vec<f64>, levels: Vec<f64>, n_posterior_samples: usize) -> Self {
        let n = ranks.len() as f64;
        let empirical_coverage = levels
            .iter()
            .map(|&l| ranks.iter().filter(|&&r| r <= l).count() as f64 / n)
            .collect();
        Self {
            credibility_levels: levels,
            empirical_coverage,
            n_pairs: ranks.len(),
            n_posterior_samples,
            ranks,
        }
    }

    pub fn max_deviation(&self) -> f64 {
        self.credibility_levels
            .iter()
            .zip(&self.empirical_coverage)
            .map(|(l, c)| (c - l).abs())
            .fold(0.0, f64::max)
    }

    /// Signed `coverage - level` at 0.1, ..., 0.9.
    pub fn decile_deviations(&self) -> Vec<f64> {
        (1..10)
            .map(|d| {
                let level = d as f64 / 10.0;
                let c = CoverageCurve::from_ranks(self.ranks.clone(), vec![level], self.n_posterior_samples);
                c.empirical_coverage[0] - level
            })
            .collect()
    }
}

/// Coverage curves of several posteriors as CSV: `level,<name>...`.
pub fn coverage_csv(curves: &[(&str, &CoverageCurve)]) -> String {
    let mut out = String::from("level");
    for (name, _) in curves {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    if let Some((_, first)) = curves.first() {
        for (i, l) in first.credibility_levels.iter().enumerate() {
            let _ = write!(out, "{l}");
            for (_, c) in curves {
                let _ = write!(out, ",{}", c.empirical_coverage[i]);
            }
            out.push('\n');
        }
    }
    out
}

/// Expected coverage of highest-density regions over pairs drawn from the
/// prior and the simulator. Ties in density are broken uniformly at random
/// so an uninformative posterior is calibrated.
pub fn expected_coverage(
    posterior: &dyn ConditionalDensity,
    prior: &UniformBoxPrior,
    simulate: &(dyn Fn(&[f64], u64) -> Result<Vec<f64>> + Sync),
    n_pairs: usize,
    n_posterior_samples: usize,
    seed: u64,
) -> Result<CoverageCurve> {
    if !posterior.is_amortized() {
        return Err(Error::NotAmortized);
    }
    if n_pairs == 0 || n_posterior_samples == 0 {
        return Err(Error::Config("coverage needs positive pair and sample counts".into()));
    }
    let mut ranks = Vec::with_capacity(n_pairs);
    let mut attempt = 0u64;
    let mut failed = 0usize;
    while ranks.len() < n_pairs {
        let mut rng = derive_rng(seed, "coverage/pair", attempt);
        let theta = prior.sample(1, &mut rng);
        let theta_row = theta.row(0).to_vec();
        let x = match simulate(&theta_row, derive_seed(seed, "coverage/sim", attempt)) {
            Ok(x) => x,
            Err(e) if is_observable_failure(&e) => {
                failed += 1;
                attempt += 1;
                if failed as f64 > MAX_DISCARD_RATE * n_pairs as f64 {
                    return Err(Error::DiscardRateExceeded {
                        discarded: failed,
                        attempted: attempt as usize,
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        attempt += 1;
        let draws = posterior_sample(posterior, prior, &x, n_posterior_samples, &mut rng)?.samples;
        let lp_true = posterior.log_prob(theta.view(), &x)?[0];
        let lp = posterior.log_prob(draws.view(), &x)?;
        let greater = lp.iter().filter(|&&l| l > lp_true).count() as f64;
        let equal = lp.iter().filter(|&&l| l == lp_true).count() as f64;
        let u: f64 = rng.random();
        ranks.push((greater + u * equal) / n_posterior_samples as f64);
    }
    Ok(CoverageCurve::from_ranks(ranks, credibility_grid(), n_posterior_samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    /// `NaN` in rows and columns of constant variables.
    pub r: Vec<Vec<f64>>,
    pub undefined: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("parameter");
        for n in names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (n, row) in names.iter().zip(&self.r) {
            out.push_str(n);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn pearson_correlation_matrix(samples: ArrayView2<f64>) -> Result<CorrelationMatrix> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::Shape {
            what: "correlation samples",
            expected: 2,
            got: n,
        });
    }
    let means: Vec<f64> = (0..d).map(|k| samples.column(k).sum() / n as f64).collect();
    let centered = Array2::from_shape_fn((n, d), |(i, k)| samples[[i, k]] - means[k]);
    let cov = centered.t().dot(&centered);
    let undefined: Vec<bool> = (0..d).map(|k| !(cov[[k, k]] > 0.0)).collect();
    let r = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    if undefined[a] || undefined[b] {
                        f64::NAN
                    } else if a == b {
                        1.0
                    } else {
                        (cov[[a, b]] / (cov[[a, a]] * cov[[b, b]]).sqrt()).clamp(-1.0, 1.0)
                    }
                })
                .collect()
        })
        .collect();
    Ok(CorrelationMatrix { r, undefined })
}

/// `n` evenly spaced digital values covering `[0, 1022]`.
pub fn digital_axis(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![DIGITAL_MAX / 2.0];
    }
    (0..n).map(|k| DIGITAL_MAX * k as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub leak_axis: Vec<f64>,
    pub axial_axis: Vec<f64>,
    /// `tau[i][j]` at `(leak_axis[i], axial_axis[j])`; `NaN` on failure.
    pub tau: Vec<Vec<f64>>,
    pub failure: Vec<Vec<bool>>,
    /// First-column heights per node when requested.
    pub first_column: Option<Vec<Vec<Vec<f64>>>>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("g_leak,g_axial,tau");
        if let Some(f) = &self.first_column {
            for k in 0..f[0][0].len() {
                let _ = write!(out, ",h{k}0");
            }
        }
        out.push('\n');
        for (i, l) in self.leak_axis.iter().enumerate() {
            for (j, a) in self.axial_axis.iter().enumerate() {
                let _ = write!(out, "{l},{a},{}", self.tau[i][j]);
                if let Some(f) = &self.first_column {
                    for h in &f[i][j] {
                        let _ = write!(out, ",{h}");
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// Fraction of fixed-leak rows along which τ strictly increases with
    /// the axial conductance, and of fixed-axial columns along which it
    /// strictly decreases with the leak.
    pub fn monotone_fractions(&self) -> (f64, f64) {
        let n = self.leak_axis.len();
        let m = self.axial_axis.len();
        let rows = (0..n)
            .filter(|&i| (0..m - 1).all(|j| self.tau[i][j + 1] > self.tau[i][j]))
            .count() as f64
            / n as f64;
        let cols = (0..m)
            .filter(|&j| (0..n - 1).all(|i| self.tau[i + 1][j] < self.tau[i][j]))
            .count() as f64
            / m as f64;
        (rows, cols)
    }

    pub fn tau_range(&self) -> (f64, f64) {
        self.tau
            .iter()
            .flatten()
            .filter(|t| t.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)))
    }
}

/// Noise-free decay constants (and optionally first-column heights) on an
/// `n × n` grid of the two-parameter layout.
pub fn grid_search(sim: &Simulator, n_per_axis: usize, with_heights: bool) -> Result<GridResult> {
    if sim.layout != Layout::Global {
        return Err(Error::Config("grid search needs the two-parameter layout".into()));
    }
    let axis = digital_axis(n_per_axis);
    let quiet = Simulator {
        noise: NoiseModel::disabled(),
        kind: ObservableKind::FullMatrix,
        ..sim.clone()
    };
    let n = quiet.space.n_compartments;
    let nodes: Vec<(usize, usize)> = (0..n_per_axis).flat_map(|i| (0..n_per_axis).map(move |j| (i, j))).collect();
    let results: Vec<(Option<f64>, Vec<f64>)> = nodes
        .par_iter()
        .map(|&(i, j)| {
            let h = quiet.observe(&[axis[i], axis[j]], 0).map(|x| x.values);
            match h {
                Ok(flat) => {
                    let col: Vec<f64> = (0..n).map(|r| flat[r * n]).collect();
                    let tau = crate::observables::fit_decay_constant(&col).ok().map(|f| f.tau);
                    Ok((tau, col))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut tau = vec![vec![f64::NAN; n_per_axis]; n_per_axis];
    let mut failure = vec![vec![false; n_per_axis]; n_per_axis];
    let mut heights = vec![vec![Vec::new(); n_per_axis]; n_per_axis];
    for (&(i, j), (t, col)) in nodes.iter().zip(results) {
        match t {
            Some(t) => tau[i][j] = t,
            None => failure[i][j] = true,
        }
        heights[i][j] = col;
    }
    Ok(GridResult {
        leak_axis: axis.clone(),
        axial_axis: axis,
        tau,
        failure,
        first_column: with_heights.then_some(heights),
    })
}

/// How the per-node likelihood of `x*` is estimated from repeated trials.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LikelihoodEstimator {
    /// Product Gaussian kernel with per-dimension sd `factor × sample sd`.
    Kde { bandwidth_factor: f64 },
    /// Independent Gaussian with the per-node sample mean and sd.
    #[default]
    Gaussian,
}

impl LikelihoodEstimator {
    /// Kernel sd equal to the sample sd.
    pub fn sample_sd_kde() -> Self {
        LikelihoodEstimator::Kde { bandwidth_factor: 1.0 }
    }

    /// Silverman's rule for `n` draws in `d` dimensions, relative to the sample sd.
    pub fn silverman(n: usize, d: usize) -> Self {
        let (n, d) = (n as f64, d as f64);
        LikelihoodEstimator::Kde {
            bandwidth_factor: (4.0 / (d + 2.0)).powf(1.0 / (d + 4.0)) * n.powf(-1.0 / (d + 4.0)),
        }
    }
}

/// Normalized grid posterior `p(θ | x*)` under the uniform prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePosterior {
    pub leak_axis: Vec<f64>,
    pub axial_axis: Vec<f64>,
    /// Probability of each node; sums to one.
    pub mass: Vec<Vec<f64>>,
    pub log_likelihood: Vec<Vec<f64>>,
    /// Bandwidth factor actually used after any widening.
    pub bandwidth_factor: Option<f64>,
}

impl ReferencePosterior {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("g_leak,g_axial,mass\n");
        for (i, l) in self.leak_axis.iter().enumerate() {
            for (j, a) in self.axial_axis.iter().enumerate() {
                let _ = writeln!(out, "{l},{a},{}", self.mass[i][j]);
            }
        }
        out
    }
}

fn log_kde(x_star: &[f64], draws: &[Vec<f64>], sd: &[f64]) -> f64 {
    let log_norm: f64 = sd.iter().map(|s| -(s * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
    let terms: Vec<f64> = draws
        .iter()
        .map(|x| {
            log_norm
                - 0.5
                    * x.iter()
                        .zip(x_star)
                        .zip(sd)
                        .map(|((a, b), s)| ((a - b) / s).powi(2))
                        .sum::<f64>()
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - (draws.len() as f64).ln()
}

/// Smallest log-likelihood treated as nonzero (`exp` underflows below).
const LOG_UNDERFLOW: f64 = -745.0;

/// Brute-force grid posterior: at every node of `leak_axis × axial_axis`,
/// `n_repeats` noisy trials give a likelihood estimate of `x*`.
pub fn reference_posterior_2d(
    sim: &Simulator,
    x_star: &[f64],
    leak_axis: &[f64],
    axial_axis: &[f64],
    n_repeats: usize,
    estimator: LikelihoodEstimator,
    seed: u64,
) -> Result<ReferencePosterior> {
    if sim.layout != Layout::Global {
        return Err(Error::Config("reference posterior needs the two-parameter layout".into()));
    }
    if !matches!(sim.kind, ObservableKind::Tau | ObservableKind::FirstColumn) {
        return Err(Error::Config("reference posterior supports tau and first_column".into()));
    }
    let simulate = |theta: &[f64], s: u64| sim.observe(theta, s).map(|x| x.values);
    reference_posterior_grid(&simulate, x_star, leak_axis, axial_axis, n_repeats, estimator, seed)
}

/// [`reference_posterior_2d`] for an arbitrary two-parameter simulator.
pub fn reference_posterior_grid(
    simulate: &(dyn Fn(&[f64], u64) -> Result<Vec<f64>> + Sync),
    x_star: &[f64],
    leak_axis: &[f64],
    axial_axis: &[f64],
    n_repeats: usize,
    estimator: LikelihoodEstimator,
    seed: u64,
) -> Result<ReferencePosterior> {
    if n_repeats < 2 {
        return Err(Error::Config("reference posterior needs at least two repeats per node".into()));
    }
    let nodes: Vec<(usize, usize)> = (0..leak_axis.len())
        .flat_map(|i| (0..axial_axis.len()).map(move |j| (i, j)))
        .collect();
    let draws: Vec<Vec<Vec<f64>>> = nodes
        .par_iter()
        .map(|&(i, j)| {
            let node = (i * axial_axis.len() + j) as u64;
            let label = format!("reference/{node}");
            let mut out = Vec::with_capacity(n_repeats);
            let mut k = 0u64;
            while out.len() < n_repeats {
                let seed = derive_seed(seed, &label, k);
                k += 1;
                match simulate(&[leak_axis[i], axial_axis[j]], seed) {
                    Ok(x) => out.push(x),
                    Err(e) if is_observable_failure(&e) && k < 4 * n_repeats as u64 => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let evaluate = |factor: f64| -> Vec<f64> {
        draws
            .iter()
            .map(|d| {
                let dim = x_star.len();
                let stats: Vec<(f64, f64)> = (0..dim).map(|k| mean_sd(d, k)).collect();
                let sd: Vec<f64> = stats.iter().map(|(_, s)| s.max(1e-12) * factor).collect();
                match estimator {
                    LikelihoodEstimator::Gaussian => {
                        let mean: Vec<f64> = stats.iter().map(|(m, _)| *m).collect();
                        log_kde(x_star, &[mean], &sd)
                    }
                    LikelihoodEstimator::Kde { .. } => log_kde(x_star, d, &sd),
                }
            })
            .collect()
    };
    let base_factor = match estimator {
        LikelihoodEstimator::Kde { bandwidth_factor } => bandwidth_factor,
        LikelihoodEstimator::Gaussian => 1.0,
    };
    let mut factor = base_factor;
    let mut ll = evaluate(factor);
    if ll.iter().all(|l| *l < LOG_UNDERFLOW) {
        factor *= 2.0;
        ll = evaluate(factor);
        if ll.iter().all(|l| *l < LOG_UNDERFLOW) {
            return Err(Error::VanishingLikelihood);
        }
    }
    let m = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = ll.iter().map(|l| (l - m).exp()).sum();
    let mut mass = vec![vec![0.0; axial_axis.len()]; leak_axis.len()];
    let mut log_likelihood = vec![vec![0.0; axial_axis.len()]; leak_axis.len()];
    for (&(i, j), l) in nodes.iter().zip(&ll) {
        mass[i][j] = (l - m).exp() / z;
        log_likelihood[i][j] = *l;
    }
    Ok(ReferencePosterior {
        leak_axis: leak_axis.to_vec(),
        axial_axis: axial_axis.to_vec(),
        mass,
        log_likelihood,
        bandwidth_factor: matches!(estimator, LikelihoodEstimator::Kde { .. }).then_some(factor),
    })
}

/// Histogram of 2D samples on the cells centered at the grid nodes.
pub fn binned_mass(samples: ArrayView2<f64>, leak_axis: &[f64], axial_axis: &[f64]) -> Vec<Vec<f64>> {
    let nearest = |axis: &[f64], v: f64| -> usize {
        axis.iter()
            .enumerate()
            .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
            .map_or(0, |(i, _)| i)
    };
    let mut mass = vec![vec![0.0; axial_axis.len()]; leak_axis.len()];
    let n = samples.nrows() as f64;
    for row in samples.rows() {
        mass[nearest(leak_axis, row[0])][nearest(axial_axis, row[1])] += 1.0 / n;
    }
    mass
}

pub fn total_variation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    0.5 * a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
}

/// Number of local maxima of a histogram after smoothing with a moving
/// average of `window` bins; a plateau counts once.
pub fn count_modes(samples: &[f64], lo: f64, hi: f64, bins: usize, window: usize, min_height: f64) -> usize {
    let mut hist = vec![0.0; bins];
    for &s in samples {
        let k = (((s - lo) / (hi - lo)) * bins as f64).floor();
        if k >= 0.0 && (k as usize) < bins {
            hist[k as usize] += 1.0;
        }
    }
    let half = window / 2;
    let smooth: Vec<f64> = (0..bins)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(bins);
            hist[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect();
    let peak = smooth.iter().copied().fold(0.0, f64::max);
    let threshold = min_height * peak;
    let mut modes = 0;
    let mut i = 0;
    while i < bins {
        let mut j = i;
        while j + 1 < bins && smooth[j + 1] == smooth[i] {
            j += 1;
        }
        let left = if i == 0 { f64::NEG_INFINITY } else { smooth[i - 1] };
        let right = if j + 1 >= bins { f64::NEG_INFINITY } else { smooth[j + 1] };
        if smooth[i] > left && smooth[i] > right && smooth[i] >= threshold {
            modes += 1;
        }
        i = j + 1;
    }
    modes
}

/// Location of the highest smoothed histogram bin.
pub fn histogram_mode(samples: &[f64], lo: f64, hi: f64, bins: usize, window: usize) -> f64 {
    let mut hist = vec![0.0; bins];
    for &s in samples {
        let k = (((s - lo) / (hi - lo)) * bins as f64).floor();
        if k >= 0.0 && (k as usize) < bins {
            hist[k as usize] += 1.0;
        }
    }
    let half = window / 2;
    let (best, _) = (0..bins)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(bins);
            (i, hist[a..b].iter().sum::<f64>() / (b - a) as f64)
        })
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    lo + (best as f64 + 0.5) * (hi - lo) / bins as f64
}

/// Draws from a uniform density, a stand-in posterior for tests and the
/// calibration identity.
#[derive(Debug, Clone)]
pub struct PriorAsPosterior {
    pub prior: UniformBoxPrior,
}

impl ConditionalDensity for PriorAsPosterior {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_prob(&self, thetas: ArrayView2<f64>, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(thetas.rows().into_iter().map(|r| self.prior.log_prob(&r.to_vec())).collect())
    }

    fn sample(&self, _x: &[f64], count: usize, rng: &mut crate::seed::Rng) -> Result<Array2<f64>> {
        Ok(self.prior.sample(count, rng))
    }

    fn is_amortized(&self) -> bool {
        true
    }
}

/// Samples of the prior, used where a seeded default source is needed.
pub fn prior_samples(prior: &UniformBoxPrior, n: usize, seed: u64) -> Array2<f64> {
    prior.sample(n, &mut rng_from_seed(seed))
}
