//! Sequential neural posterior estimation.
//!
//! Round 0 draws parameters from the uniform prior and fits the flow by
//! maximum likelihood; that flow is amortized. Every later round draws from
//! the current posterior conditioned on the target observation, simulates
//! once per draw, and refits on all data gathered so far with the atomic
//! loss, starting from the previous round's weights.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain_model::{run_trial, DigitalParameterSpace, Layout, NoiseModel, StimulusProtocol, DIGITAL_MAX};
use crate::error::{Error, Result};
use crate::flow::{ConditionalFlow, FlowConfig};
use crate::observables::{extract_psp_heights, observable_vector, ObservableKind, ObservableVector};
use crate::seed::{derive_rng, derive_seed, Rng};
use crate::trainer::{train, Dataset, Loss, TrainConfig, TrainReport};

/// Rejected-draw rate above which a run is aborted.
pub const MAX_DISCARD_RATE: f64 = 0.2;
/// Failed-trial rate above which a target is considered unstable.
pub const MAX_TARGET_FAILURE_RATE: f64 = 0.1;
/// Box-rejection acceptance below which posterior mass has leaked.
pub const MIN_ACCEPTANCE_RATE: f64 = 0.01;

/// Uniform density over a box in digital units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBoxPrior {
    pub bounds: Vec<(f64, f64)>,
}

impl UniformBoxPrior {
    /// `[0, 1022]` in every dimension.
    pub fn digital(dim: usize) -> Self {
        Self {
            bounds: vec![(0.0, DIGITAL_MAX); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim() && theta.iter().zip(&self.bounds).all(|(t, (lo, hi))| t >= lo && t <= hi)
    }

    pub fn log_prob(&self, theta: &[f64]) -> f64 {
        if self.contains(theta) {
            -self.bounds.iter().map(|(lo, hi)| (hi - lo).ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sample(&self, count: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn((count, self.dim()), |(_, k)| {
            let (lo, hi) = self.bounds[k];
            // open interval so the logit of every draw is finite
            loop {
                let v = rng.random_range(lo..hi);
                if v > lo {
                    break v;
                }
            }
        })
    }

    /// Map digital parameters onto the unit box used by the flow.
    pub fn to_unit(&self, thetas: ArrayView2<f64>) -> Array2<f64> {
        let mut out = thetas.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                let (lo, hi) = self.bounds[k];
                *v = (*v - lo) / (hi - lo);
            }
        }
        out
    }

    pub fn from_unit(&self, units: ArrayView2<f64>) -> Array2<f64> {
        let mut out = units.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                let (lo, hi) = self.bounds[k];
                *v = lo + (hi - lo) * *v;
            }
        }
        out
    }

    fn log_volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| (hi - lo).ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub sims_per_round: Vec<usize>,
}

impl RoundSchedule {
    pub fn new(sims_per_round: Vec<usize>) -> Result<Self> {
        let s = Self { sims_per_round };
        s.validate()?;
        Ok(s)
    }

    /// `first` simulations, then `rounds` rounds of `per_round`.
    pub fn first_then(first: usize, per_round: usize, rounds: usize) -> Result<Self> {
        let mut v = vec![first];
        v.extend(std::iter::repeat_n(per_round, rounds));
        Self::new(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sims_per_round.is_empty() || self.sims_per_round.contains(&0) {
            return Err(Error::Config(format!(
                "schedule needs at least one round and positive counts, got {:?}",
                self.sims_per_round
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.sims_per_round.iter().sum()
    }

    pub fn n_rounds(&self) -> usize {
        self.sims_per_round.len()
    }
}

/// The simulator plus observable reduction: `θ ↦ x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    pub space: DigitalParameterSpace,
    pub layout: Layout,
    pub protocol: StimulusProtocol,
    pub noise: NoiseModel,
    pub kind: ObservableKind,
}

impl Simulator {
    pub fn new(layout: Layout, kind: ObservableKind) -> Self {
        let space = DigitalParameterSpace::default();
        Self {
            protocol: StimulusProtocol::sequential(space.n_compartments),
            space,
            layout,
            noise: NoiseModel::default(),
            kind,
        }
    }

    pub fn dim_theta(&self) -> usize {
        self.layout.dim(self.space.n_compartments)
    }

    pub fn dim_x(&self) -> usize {
        self.kind.dim(self.space.n_compartments)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_kind(&self, kind: ObservableKind) -> Self {
        Self { kind, ..self.clone() }
    }

    /// One noisy trial reduced to the configured observable.
    pub fn observe(&self, theta: &[f64], seed: u64) -> Result<ObservableVector> {
        let traces = run_trial(theta, &self.space, self.layout, &self.protocol, &self.noise, seed)?;
        let h = extract_psp_heights(&traces, &self.protocol)?;
        observable_vector(&h, self.kind)
    }
}

/// Failures of the observable on a finished trace, as opposed to invalid
/// inputs.
pub fn is_observable_failure(e: &Error) -> bool {
    matches!(e, Error::FitDomain { .. } | Error::FitFailure { .. })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetObservation {
    pub x_star: ObservableVector,
    pub n_target_trials: usize,
    /// Per-dimension sd over the target trials; `None` for a single trial.
    pub sigma_star: Option<Vec<f64>>,
    pub theta_star: Option<Vec<f64>>,
    #[serde(default)]
    pub failed_trials: usize,
}

impl TargetObservation {
    /// A target given directly as an observation.
    pub fn from_observation(x_star: ObservableVector) -> Self {
        Self {
            x_star,
            n_target_trials: 1,
            sigma_star: None,
            theta_star: None,
            failed_trials: 0,
        }
    }

    pub fn x(&self) -> &[f64] {
        &self.x_star.values
    }
}

/// Mean and sd of the observable over `n_trials` noisy trials at `theta_star`.
pub fn measure_target(sim: &Simulator, theta_star: &[f64], n_trials: usize, master_seed: u64) -> Result<TargetObservation> {
    if n_trials == 0 {
        return Err(Error::Config("target needs at least one trial".into()));
    }
    if theta_star.len() != sim.dim_theta() {
        return Err(Error::Shape {
            what: "theta_star",
            expected: sim.dim_theta(),
            got: theta_star.len(),
        });
    }
    let results: Vec<Result<ObservableVector>> = (0..n_trials)
        .into_par_iter()
        .map(|k| sim.observe(theta_star, derive_seed(master_seed, "target", k as u64)))
        .collect();
    let mut ok = Vec::with_capacity(n_trials);
    let mut failures = 0;
    for r in results {
        match r {
            Ok(x) => ok.push(x),
            Err(e) if is_observable_failure(&e) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if ok.is_empty() || failures as f64 > MAX_TARGET_FAILURE_RATE * n_trials as f64 {
        return Err(Error::TargetUnstable {
            failures,
            trials: n_trials,
        });
    }
    let dim = ok[0].values.len();
    let n = ok.len() as f64;
    // shifted by the first trial so identical trials give exactly zero spread
    let shift: Vec<f64> = ok[0].values.clone();
    let offset: Vec<f64> = (0..dim).map(|k| ok.iter().map(|x| x.values[k] - shift[k]).sum::<f64>() / n).collect();
    let mean: Vec<f64> = (0..dim).map(|k| shift[k] + offset[k]).collect();
    let sigma_star = (ok.len() > 1).then(|| {
        (0..dim)
            .map(|k| {
                let ss = ok.iter().map(|x| (x.values[k] - shift[k] - offset[k]).powi(2)).sum::<f64>();
                (ss / (n - 1.0)).sqrt()
            })
            .collect()
    });
    Ok(TargetObservation {
        x_star: ObservableVector {
            kind: sim.kind,
            values: mean,
            flat: ok.iter().all(|x| x.flat),
        },
        n_target_trials: n_trials,
        sigma_star,
        theta_star: Some(theta_star.to_vec()),
        failed_trials: failures,
    })
}

/// A conditional density over digital parameters.
pub trait ConditionalDensity: Sync {
    fn dim(&self) -> usize;
    /// `log q(θ_r | x)` for every row of `thetas`.
    fn log_prob(&self, thetas: ArrayView2<f64>, x: &[f64]) -> Result<Vec<f64>>;
    fn sample(&self, x: &[f64], count: usize, rng: &mut Rng) -> Result<Array2<f64>>;
    /// Valid for any observation, not only the training target.
    fn is_amortized(&self) -> bool;
    /// The observation a non-amortized density was trained for.
    fn target(&self) -> Option<&[f64]> {
        None
    }
}

/// A flow rescaled from the unit box to the prior box.
#[derive(Debug, Clone)]
pub struct FlowPosterior {
    pub flow: ConditionalFlow,
    pub prior: UniformBoxPrior,
    pub amortized: bool,
    pub x_star: Vec<f64>,
}

impl ConditionalDensity for FlowPosterior {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_prob(&self, thetas: ArrayView2<f64>, x: &[f64]) -> Result<Vec<f64>> {
        let units = self.prior.to_unit(thetas);
        let shift = self.prior.log_volume();
        Ok(self.flow.log_prob_given(units.view(), x)?.into_iter().map(|l| l - shift).collect())
    }

    fn sample(&self, x: &[f64], count: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let units = self.flow.sample(x, count, rng)?;
        Ok(self.prior.from_unit(units.view()))
    }

    fn is_amortized(&self) -> bool {
        self.amortized
    }

    fn target(&self) -> Option<&[f64]> {
        Some(&self.x_star)
    }
}

/// Samples that passed the prior-box rejection.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub samples: Array2<f64>,
    pub acceptance_rate: f64,
}

/// Draw `count` samples inside the prior box.
pub fn posterior_sample(
    posterior: &dyn ConditionalDensity,
    prior: &UniformBoxPrior,
    x: &[f64],
    count: usize,
    rng: &mut Rng,
) -> Result<PosteriorSamples> {
    if !posterior.is_amortized() {
        if let Some(t) = posterior.target() {
            if t != x {
                return Err(Error::NotAmortized);
            }
        }
    }
    let d = posterior.dim();
    let mut out = Array2::zeros((count, d));
    if count == 0 {
        return Ok(PosteriorSamples {
            samples: out,
            acceptance_rate: 1.0,
        });
    }
    let mut filled = 0;
    let mut drawn = 0usize;
    while filled < count {
        let batch = (count - filled).max(16);
        let s = posterior.sample(x, batch, rng)?;
        drawn += batch;
        for row in s.rows() {
            if filled < count && prior.contains(&row.to_vec()) {
                out.row_mut(filled).assign(&row);
                filled += 1;
            }
        }
        let rate = filled as f64 / drawn as f64;
        if drawn >= 100 && rate < MIN_ACCEPTANCE_RATE {
            return Err(Error::Leakage { rate });
        }
    }
    Ok(PosteriorSamples {
        samples: out,
        acceptance_rate: count as f64 / drawn as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnpeConfig {
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub n_atoms: usize,
    /// Reinitialize the flow every round instead of continuing from the
    /// previous round's weights.
    pub cold_start: bool,
}

impl Default for SnpeConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::new(2, 1),
            train: TrainConfig::default(),
            n_atoms: 10,
            cold_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub n_simulations: usize,
    /// Draws replaced after an observable failure.
    pub n_discarded: usize,
    pub amortized: bool,
    pub training: TrainReport,
}

/// One round's simulated pairs (digital θ) and the flow trained after it.
#[derive(Debug, Clone)]
pub struct RoundArtifacts {
    pub thetas: Array2<f64>,
    pub xs: Array2<f64>,
    pub flow: ConditionalFlow,
    pub record: RoundRecord,
}

/// Serialized description of a run; `config.json` in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub simulator: Simulator,
    pub prior: UniformBoxPrior,
    pub target: TargetObservation,
    pub schedule: RoundSchedule,
    pub config: SnpeConfig,
    pub master_seed: u64,
}

#[derive(Debug, Clone)]
pub struct InferenceRun {
    pub manifest: RunManifest,
    pub rounds: Vec<RoundArtifacts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub master_seed: u64,
    pub total_simulations: usize,
    pub total_discarded: usize,
    pub rounds: Vec<RoundRecord>,
}

impl InferenceRun {
    pub fn posterior(&self, round: usize) -> FlowPosterior {
        FlowPosterior {
            flow: self.rounds[round].flow.clone(),
            prior: self.manifest.prior.clone(),
            amortized: self.rounds[round].record.amortized,
            x_star: self.manifest.target.x().to_vec(),
        }
    }

    pub fn final_posterior(&self) -> FlowPosterior {
        self.posterior(self.rounds.len() - 1)
    }

    /// The round-0 flow, valid for any observation.
    pub fn amortized_posterior(&self) -> FlowPosterior {
        self.posterior(0)
    }

    /// Simulator calls that entered the training data.
    pub fn total_simulations(&self) -> usize {
        self.rounds.iter().map(|r| r.record.n_simulations).sum()
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            master_seed: self.manifest.master_seed,
            total_simulations: self.total_simulations(),
            total_discarded: self.rounds.iter().map(|r| r.record.n_discarded).sum(),
            rounds: self.rounds.iter().map(|r| r.record.clone()).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), &self.manifest)?;
        for (r, round) in self.rounds.iter().enumerate() {
            let rd = dir.join(format!("round_{r}"));
            std::fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
            let csv = dataset_csv(&round.thetas, &round.xs, self.manifest.simulator.kind);
            write_text(&rd.join("dataset.csv"), &csv)?;
            round.flow.save(&rd.join("flow.bin"))?;
            write_text(&rd.join("training.csv"), &round.record.training.to_csv())?;
        }
        write_json(&dir.join("report.json"), &self.report())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: RunManifest = read_json(&dir.join("config.json"))?;
        let report: RunReport = read_json(&dir.join("report.json"))?;
        let mut rounds = Vec::new();
        for (r, record) in report.rounds.into_iter().enumerate() {
            let rd = dir.join(format!("round_{r}"));
            let flow = ConditionalFlow::load(&rd.join("flow.bin"))?;
            let path = rd.join("dataset.csv");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let (thetas, xs) = parse_dataset_csv(&text, manifest.prior.dim(), &path)?;
            rounds.push(RoundArtifacts {
                thetas,
                xs,
                flow,
                record,
            });
        }
        Ok(Self { manifest, rounds })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset_csv(thetas: &Array2<f64>, xs: &Array2<f64>, kind: ObservableKind) -> String {
    let mut out = String::new();
    for k in 0..thetas.ncols() {
        let _ = write!(out, "theta{k},");
    }
    out.push_str("kind");
    for k in 0..xs.ncols() {
        let _ = write!(out, ",x{k}");
    }
    out.push('\n');
    for (t, x) in thetas.rows().into_iter().zip(xs.rows()) {
        let obs = ObservableVector {
            kind,
            values: x.to_vec(),
            flat: false,
        };
        out.push_str(&obs.csv_row(&t.to_vec()));
        out.push('\n');
    }
    out
}

fn parse_dataset_csv(text: &str, dim_theta: usize, path: &Path) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut thetas = Vec::new();
    let mut xs = Vec::new();
    let mut n_x = None;
    for (line_no, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |m: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {m}", line_no + 1),
        };
        if fields.len() < dim_theta + 2 {
            return Err(bad("too few fields".into()));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        for f in &fields[..dim_theta] {
            thetas.push(parse(f)?);
        }
        let x = &fields[dim_theta + 1..];
        if *n_x.get_or_insert(x.len()) != x.len() {
            return Err(bad("ragged row".into()));
        }
        for f in x {
            xs.push(parse(f)?);
        }
    }
    let rows = thetas.len() / dim_theta.max(1);
    let n_x = n_x.unwrap_or(0);
    let shape_err = |_| Error::Parse {
        path: path.to_path_buf(),
        message: "inconsistent shape".into(),
    };
    Ok((
        Array2::from_shape_vec((rows, dim_theta), thetas).map_err(shape_err)?,
        Array2::from_shape_vec((rows, n_x), xs).map_err(shape_err)?,
    ))
}

/// Simulate `n` draws from `proposal`, replacing draws whose observable
/// fails. Returns the accepted rows and the number of replacements.
fn simulate_round(
    sim: &Simulator,
    n: usize,
    mut proposal: impl FnMut(usize) -> Result<Array2<f64>>,
    seed_label: &str,
    master_seed: u64,
) -> Result<(Array2<f64>, Array2<f64>, usize)> {
    let mut thetas = Array2::zeros((0, sim.dim_theta()));
    let mut xs = Array2::zeros((0, sim.dim_x()));
    let mut attempted = 0usize;
    let mut discarded = 0usize;
    while thetas.nrows() < n {
        let need = n - thetas.nrows();
        let batch = proposal(need)?;
        let results: Vec<Result<ObservableVector>> = (0..need)
            .into_par_iter()
            .map(|i| {
                let theta = batch.row(i).to_vec();
                sim.observe(&theta, derive_seed(master_seed, seed_label, (attempted + i) as u64))
            })
            .collect();
        attempted += need;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(x) => {
                    thetas.push_row(batch.row(i)).expect("width");
                    xs.push_row(ndarray::ArrayView1::from(&x.values)).expect("width");
                }
                Err(e) if is_observable_failure(&e) => discarded += 1,
                Err(e) => return Err(e),
            }
        }
        if discarded as f64 > MAX_DISCARD_RATE * (n + discarded) as f64 {
            return Err(Error::DiscardRateExceeded { discarded, attempted });
        }
    }
    Ok((thetas, xs, discarded))
}

/// Run the sequential loop of `schedule` against `target`.
pub fn run_snpe(
    sim: &Simulator,
    prior: &UniformBoxPrior,
    target: &TargetObservation,
    schedule: &RoundSchedule,
    config: &SnpeConfig,
    master_seed: u64,
) -> Result<InferenceRun> {
    schedule.validate()?;
    if prior.dim() != sim.dim_theta() || config.flow.dim_theta != sim.dim_theta() {
        return Err(Error::Config(format!(
            "prior ({}) and flow ({}) dimensions must match the layout ({})",
            prior.dim(),
            config.flow.dim_theta,
            sim.dim_theta()
        )));
    }
    if config.flow.dim_x != sim.dim_x() || target.x().len() != sim.dim_x() {
        return Err(Error::Config(format!(
            "flow context ({}) and target ({}) must match the observable ({})",
            config.flow.dim_x,
            target.x().len(),
            sim.dim_x()
        )));
    }
    let min = 2 * config.train.batch_size;
    if schedule.sims_per_round[0] < min {
        return Err(Error::DatasetTooSmall {
            min,
            got: schedule.sims_per_round[0],
        });
    }
    let flow_config = FlowConfig {
        seed: derive_seed(master_seed, "flow", 0),
        ..config.flow.clone()
    };
    let unit_box = vec![(0.0, 1.0); prior.dim()];
    let mut flow = ConditionalFlow::new(flow_config.clone(), unit_box.clone())?;
    let mut all: Option<Dataset> = None;
    let mut rounds: Vec<RoundArtifacts> = Vec::new();
    let x_star = target.x().to_vec();

    for (r, &n) in schedule.sims_per_round.iter().enumerate() {
        let mut rng = derive_rng(master_seed, "proposal", r as u64);
        let (thetas, xs, discarded) = if r == 0 {
            simulate_round(sim, n, |k| Ok(prior.sample(k, &mut rng)), "sim/0", master_seed)?
        } else {
            let posterior = FlowPosterior {
                flow: flow.clone(),
                prior: prior.clone(),
                amortized: false,
                x_star: x_star.clone(),
            };
            let label = format!("sim/{r}");
            simulate_round(
                sim,
                n,
                |k| Ok(posterior_sample(&posterior, prior, &x_star, k, &mut rng)?.samples),
                &label,
                master_seed,
            )?
        };
        let round_data = Dataset::new(prior.to_unit(thetas.view()), xs.clone())?;
        let data = match all.take() {
            None => round_data,
            Some(prev) => prev.concat(&round_data)?,
        };
        let loss = if r == 0 {
            Loss::MaximumLikelihood
        } else {
            Loss::Atomic {
                n_atoms: config.n_atoms,
            }
        };
        if r == 0 {
            flow.fit_standardization(data.thetas.view(), data.xs.view())?;
        } else if config.cold_start {
            let standardization = flow.standardization.clone();
            flow = ConditionalFlow::new(flow_config.clone(), unit_box.clone())?;
            flow.standardization = standardization;
        }
        let train_config = TrainConfig {
            seed: derive_seed(master_seed, "train", r as u64),
            ..config.train.clone()
        };
        let training = train(&mut flow, &data, loss, &train_config)?;
        rounds.push(RoundArtifacts {
            thetas,
            xs,
            flow: flow.clone(),
            record: RoundRecord {
                round: r,
                n_simulations: n,
                n_discarded: discarded,
                amortized: r == 0,
                training,
            },
        });
        all = Some(data);
    }
    Ok(InferenceRun {
        manifest: RunManifest {
            simulator: sim.clone(),
            prior: prior.clone(),
            target: target.clone(),
            schedule: schedule.clone(),
            config: config.clone(),
            master_seed,
        },
        rounds,
    })
}

/// Equal-weight mixture of conditional densities.
pub struct PosteriorEnsemble<P> {
    pub members: Vec<P>,
}

impl<P: ConditionalDensity> PosteriorEnsemble<P> {
    pub fn new(members: Vec<P>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EnsembleConfig("ensemble needs at least one member".into()));
        }
        let d = members[0].dim();
        if members.iter().any(|m| m.dim() != d) {
            return Err(Error::EnsembleConfig("members have different dimensions".into()));
        }
        Ok(Self { members })
    }
}

impl<P: ConditionalDensity> ConditionalDensity for PosteriorEnsemble<P> {
    fn dim(&self) -> usize {
        self.members[0].dim()
    }

    fn log_prob(&self, thetas: ArrayView2<f64>, x: &[f64]) -> Result<Vec<f64>> {
        let per_member = self
            .members
            .iter()
            .map(|m| m.log_prob(thetas, x))
            .collect::<Result<Vec<_>>>()?;
        let ln_k = (self.members.len() as f64).ln();
        Ok((0..thetas.nrows())
            .map(|r| log_mean_exp(per_member.iter().map(|v| v[r]), ln_k))
            .collect())
    }

    fn sample(&self, x: &[f64], count: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let k = self.members.len();
        let choice: Vec<usize> = (0..count).map(|_| rng.random_range(0..k)).collect();
        let mut out = Array2::zeros((count, self.dim()));
        for (m, member) in self.members.iter().enumerate() {
            let rows: Vec<usize> = (0..count).filter(|&i| choice[i] == m).collect();
            if rows.is_empty() {
                continue;
            }
            let s = member.sample(x, rows.len(), rng)?;
            for (j, &i) in rows.iter().enumerate() {
                out.row_mut(i).assign(&s.row(j));
            }
        }
        Ok(out)
    }

    fn is_amortized(&self) -> bool {
        self.members.iter().all(|m| m.is_amortized())
    }

    fn target(&self) -> Option<&[f64]> {
        self.members[0].target()
    }
}

fn log_mean_exp(values: impl Iterator<Item = f64> + Clone, ln_k: f64) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln() - ln_k
}

fn check_ensemble_runs(runs: &[InferenceRun]) -> Result<()> {
    let first = runs
        .first()
        .ok_or_else(|| Error::EnsembleConfig("no runs given".into()))?;
    let m0 = &first.manifest;
    for run in &runs[1..] {
        let m = &run.manifest;
        if m.prior != m0.prior {
            return Err(Error::EnsembleConfig("priors differ".into()));
        }
        if m.target != m0.target {
            return Err(Error::EnsembleConfig("targets differ".into()));
        }
        if m.schedule != m0.schedule {
            return Err(Error::EnsembleConfig("schedules differ".into()));
        }
        if m.simulator != m0.simulator {
            return Err(Error::EnsembleConfig("simulators differ".into()));
        }
    }
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.manifest.master_seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() != runs.len() {
        return Err(Error::EnsembleConfig("member seeds must be distinct".into()));
    }
    Ok(())
}

/// Mixture of the final-round posteriors of independent runs.
pub fn build_ensemble(runs: &[InferenceRun]) -> Result<PosteriorEnsemble<FlowPosterior>> {
    check_ensemble_runs(runs)?;
    PosteriorEnsemble::new(runs.iter().map(InferenceRun::final_posterior).collect())
}

/// Mixture of the round-0 (amortized) posteriors of independent runs.
pub fn build_amortized_ensemble(runs: &[InferenceRun]) -> Result<PosteriorEnsemble<FlowPosterior>> {
    check_ensemble_runs(runs)?;
    PosteriorEnsemble::new(runs.iter().map(InferenceRun::amortized_posterior).collect())
}

/// Run directory of ensemble member `k`.
pub fn member_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("member_{k}"))
}

/// Convenience for tests and drivers: row-stack observation vectors.
pub fn stack_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src));
    }
    out
}
