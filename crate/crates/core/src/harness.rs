//! Experiment driver: configuration, seeding, persistence and export.
//!
//! Every file written here carries the config hash and master seed, either as
//! fields (JSON) or as a leading `#` comment line (CSV).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain_model::{run_trial, Layout, NoiseModel, DIGITAL_MAX};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::observables::{extract_psp_heights, ObservableKind, PspHeightMatrix};
use crate::seed::{derive_rng, derive_seed, fnv1a};
use crate::snpe::{
    build_amortized_ensemble, build_ensemble, measure_target, member_dir, posterior_sample, read_json, run_snpe,
    write_json, write_text, InferenceRun, RoundSchedule, Simulator, SnpeConfig, TargetObservation, UniformBoxPrior,
};
use crate::trainer::TrainConfig;
use crate::validation::{
    coverage_csv, expected_coverage, grid_search, pearson_correlation_matrix, posterior_predictive_check,
    predictive_check_at, CorrelationMatrix, CoverageCurve, GridResult, PpcReport,
};

/// Sizes of the diagnostics run by `cmd_validate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub ppc_samples: usize,
    pub coverage_pairs: usize,
    pub coverage_samples: usize,
    /// Random targets in the amortized sweep; the centre is added.
    pub amortized_targets: usize,
    pub amortized_samples: usize,
    /// Half-width of the box around θ* counted as "near", digital units.
    pub amortized_half_width: f64,
    pub amortized_min_fraction: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            ppc_samples: 1000,
            coverage_pairs: 1000,
            coverage_samples: 10_000,
            amortized_targets: 5,
            amortized_samples: 500,
            amortized_half_width: 150.0,
            amortized_min_fraction: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub layout: Layout,
    pub observable: ObservableKind,
    pub theta_star: Vec<f64>,
    pub n_target_trials: usize,
    pub schedule: Vec<usize>,
    pub n_ensemble: usize,
    pub n_posterior_samples: usize,
    pub n_atoms: usize,
    pub cold_start: bool,
    pub grid_points: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub noise: NoiseModel,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub validation: ValidationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::tau_2d()
    }
}

pub const PRESETS: [&str; 4] = ["tau_2d", "first_column_2d", "per_element_7d_h", "per_element_7d_f"];

impl ExperimentConfig {
    fn base(name: &str, layout: Layout, observable: ObservableKind, schedule: Vec<usize>, flow: FlowConfig) -> Self {
        let dim = flow.dim_theta;
        Self {
            name: name.into(),
            layout,
            observable,
            theta_star: vec![511.0; dim],
            n_target_trials: 100,
            schedule,
            n_ensemble: 5,
            n_posterior_samples: 1000,
            n_atoms: 10,
            cold_start: false,
            grid_points: 40,
            master_seed: 0,
            output_dir: PathBuf::from("runs").join(name),
            noise: NoiseModel::default(),
            flow,
            train: TrainConfig::default(),
            validation: ValidationConfig::default(),
        }
    }

    /// Decay constant, global conductances, three rounds of 50.
    pub fn tau_2d() -> Self {
        let mut c = Self::base(
            "tau_2d",
            Layout::Global,
            ObservableKind::Tau,
            vec![50; 3],
            FlowConfig::new(2, 1).with_architecture(1, 2, 50),
        );
        // 50 simulations per round leave one batch of 50 after the split
        c.train.batch_size = 25;
        c
    }

    /// First-column heights, global conductances, 500 then ten rounds of 50.
    pub fn first_column_2d() -> Self {
        let mut schedule = vec![500];
        schedule.extend([50; 10]);
        Self::base(
            "first_column_2d",
            Layout::Global,
            ObservableKind::FirstColumn,
            schedule,
            FlowConfig::new(2, 4).with_architecture(5, 2, 10),
        )
    }

    /// Per-element conductances, two rounds of 1000.
    pub fn per_element_7d(observable: ObservableKind) -> Self {
        let name = match observable {
            ObservableKind::FullMatrix => "per_element_7d_h",
            ObservableKind::FirstColumn => "per_element_7d_f",
            ObservableKind::Tau => "per_element_7d_tau",
        };
        let c = Simulator::new(Layout::PerElement, observable).dim_x();
        Self::base(
            name,
            Layout::PerElement,
            observable,
            vec![1000; 2],
            FlowConfig::new(7, c).with_architecture(5, 2, 50),
        )
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tau_2d" => Ok(Self::tau_2d()),
            "first_column_2d" => Ok(Self::first_column_2d()),
            "per_element_7d_h" => Ok(Self::per_element_7d(ObservableKind::FullMatrix)),
            "per_element_7d_f" => Ok(Self::per_element_7d(ObservableKind::FirstColumn)),
            _ => Err(Error::Config(format!("unknown preset {name:?}, expected one of {PRESETS:?}"))),
        }
    }

    pub fn simulator(&self) -> Simulator {
        Simulator::new(self.layout, self.observable).with_noise(self.noise)
    }

    pub fn prior(&self) -> UniformBoxPrior {
        UniformBoxPrior::digital(self.simulator().dim_theta())
    }

    pub fn snpe_config(&self) -> SnpeConfig {
        SnpeConfig {
            flow: self.flow.clone(),
            train: self.train.clone(),
            n_atoms: self.n_atoms,
            cold_start: self.cold_start,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let sim = self.simulator();
        let (d, c) = (sim.dim_theta(), sim.dim_x());
        RoundSchedule::new(self.schedule.clone())?;
        if self.flow.dim_theta != d {
            return bad(format!("flow.dim_theta = {} but the {:?} layout has {d} parameters", self.flow.dim_theta, self.layout));
        }
        if self.flow.dim_x != c {
            return bad(format!("flow.dim_x = {} but the {:?} observable has {c} entries", self.flow.dim_x, self.observable));
        }
        if self.theta_star.len() != d {
            return bad(format!("theta_star has {} entries, expected {d}", self.theta_star.len()));
        }
        if self.theta_star.iter().any(|t| !(0.0..=DIGITAL_MAX).contains(t)) {
            return bad(format!("theta_star must lie in [0, {DIGITAL_MAX}]"));
        }
        if self.n_ensemble == 0 || self.n_target_trials == 0 || self.n_posterior_samples == 0 {
            return bad("n_ensemble, n_target_trials and n_posterior_samples must be positive".into());
        }
        if self.flow.n_transforms == 0 || self.flow.n_blocks == 0 || self.flow.n_hidden == 0 {
            return bad("flow needs at least one transform, block and hidden unit".into());
        }
        let batch = self.train.batch_size;
        if batch == 0 || !(self.train.learning_rate > 0.0) || !(self.train.clip_norm > 0.0) {
            return bad("train.batch_size, learning_rate and clip_norm must be positive".into());
        }
        if !(self.train.validation_fraction > 0.0 && self.train.validation_fraction < 1.0) {
            return bad("train.validation_fraction must lie in (0, 1)".into());
        }
        if self.schedule[0] < 2 * batch {
            return Err(Error::DatasetTooSmall {
                min: 2 * batch,
                got: self.schedule[0],
            });
        }
        if self.schedule.len() > 1 && !(2..=batch).contains(&self.n_atoms) {
            return bad(format!("n_atoms = {} must lie in [2, batch_size = {batch}]", self.n_atoms));
        }
        if self.grid_points < 2 {
            return bad("grid_points must be at least 2".into());
        }
        if i64::try_from(self.master_seed).is_err() {
            return bad("master_seed must fit in a signed 64-bit integer".into());
        }
        let v = &self.validation;
        if v.ppc_samples == 0 || v.coverage_pairs == 0 || v.coverage_samples == 0 || v.amortized_samples == 0 {
            return bad("validation sizes must be positive".into());
        }
        if !(v.amortized_half_width > 0.0) || !(0.0..=1.0).contains(&v.amortized_min_fraction) {
            return bad("validation.amortized_half_width must be positive and amortized_min_fraction in [0, 1]".into());
        }
        self.noise.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// 16 hex digits identifying the configuration; the output location
    /// does not take part.
    pub fn hash(&self) -> Result<String> {
        let located = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        Ok(format!("{:016x}", fnv1a(located.to_toml()?.as_bytes())))
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.hash()?,
            master_seed: self.master_seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
}

impl Provenance {
    fn csv(&self, body: &str) -> String {
        format!("# config_hash={} master_seed={}\n{body}", self.config_hash, self.master_seed)
    }
}

/// Strip the provenance comment lines of a CSV written by the harness.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .fold(String::new(), |mut s, l| {
            s.push_str(l);
            s.push('\n');
            s
        })
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    #[serde(flatten)]
    provenance: Provenance,
    #[serde(flatten)]
    value: T,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    config: ExperimentConfig,
}

fn write_stamped<T: Serialize>(path: &Path, provenance: &Provenance, value: T) -> Result<()> {
    write_json(
        path,
        &Stamped {
            provenance: provenance.clone(),
            value,
        },
    )
}

fn prepare_output(config: &ExperimentConfig) -> Result<Provenance> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let provenance = config.provenance()?;
    write_stamped(&out.join("config.json"), &provenance, ConfigFile { config: config.clone() })?;
    Ok(provenance)
}

/// `τ` (and heights) over the 2D grid; writes `grid.csv` and `config.json`.
pub fn cmd_grid(config: &ExperimentConfig) -> Result<GridResult> {
    if config.layout != Layout::Global {
        return Err(Error::Config("grid search needs the global_2d layout".into()));
    }
    let provenance = prepare_output(config)?;
    let grid = grid_search(&config.simulator(), config.grid_points, false)?;
    write_text(&config.output_dir.join("grid.csv"), &provenance.csv(&grid.to_csv()))?;
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub simulator_calls: usize,
    pub n_target_trials: usize,
    pub member_seeds: Vec<u64>,
    pub member_simulations: Vec<usize>,
    pub n_posterior_samples: usize,
    pub acceptance_rate: f64,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub provenance: Provenance,
    pub target: TargetObservation,
    pub runs: Vec<InferenceRun>,
    pub samples: Array2<f64>,
    pub correlation: CorrelationMatrix,
    pub summary: InferSummary,
}

fn parameter_names(config: &ExperimentConfig) -> Vec<String> {
    config.layout.parameter_names(config.simulator().space.n_compartments)
}

fn samples_csv(names: &[String], samples: &Array2<f64>) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for row in samples.rows() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Seed of ensemble member `k`.
pub fn member_seed(master_seed: u64, k: usize) -> u64 {
    derive_seed(master_seed, "member", k as u64)
}

/// Measure the target, train the ensemble and write every artifact.
pub fn cmd_infer(config: &ExperimentConfig) -> Result<InferOutcome> {
    let provenance = prepare_output(config)?;
    let out = &config.output_dir;
    let sim = config.simulator();
    let prior = config.prior();
    let target = measure_target(&sim, &config.theta_star, config.n_target_trials, derive_seed(config.master_seed, "target", 0))?;
    write_stamped(&out.join("target.json"), &provenance, &target)?;
    let schedule = RoundSchedule::new(config.schedule.clone())?;
    let snpe = config.snpe_config();
    let seeds: Vec<u64> = (0..config.n_ensemble).map(|k| member_seed(config.master_seed, k)).collect();
    let runs = seeds
        .par_iter()
        .map(|&s| run_snpe(&sim, &prior, &target, &schedule, &snpe, s))
        .collect::<Result<Vec<_>>>()?;
    for (k, run) in runs.iter().enumerate() {
        run.save(&member_dir(out, k))?;
    }
    let ensemble = build_ensemble(&runs)?;
    let mut rng = derive_rng(config.master_seed, "samples", 0);
    let drawn = posterior_sample(&ensemble, &prior, target.x(), config.n_posterior_samples, &mut rng)?;
    let names = parameter_names(config);
    write_text(&out.join("samples.csv"), &provenance.csv(&samples_csv(&names, &drawn.samples)))?;
    let correlation = pearson_correlation_matrix(drawn.samples.view())?;
    write_text(&out.join("correlation.csv"), &provenance.csv(&correlation.to_csv(&names)))?;
    let s = &drawn.samples;
    let n = s.nrows() as f64;
    let posterior_mean: Vec<f64> = s.columns().into_iter().map(|c| c.sum() / n).collect();
    let posterior_sd: Vec<f64> = s
        .columns()
        .into_iter()
        .zip(&posterior_mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt())
        .collect();
    let member_simulations: Vec<usize> = runs
        .iter()
        .map(|r| r.rounds.iter().map(|a| a.record.n_simulations + a.record.n_discarded).sum())
        .collect();
    let summary = InferSummary {
        simulator_calls: config.n_target_trials + member_simulations.iter().sum::<usize>(),
        n_target_trials: config.n_target_trials,
        member_seeds: seeds,
        member_simulations,
        n_posterior_samples: s.nrows(),
        acceptance_rate: drawn.acceptance_rate,
        posterior_mean,
        posterior_sd,
    };
    write_stamped(&out.join("summary.json"), &provenance, &summary)?;
    Ok(InferOutcome {
        provenance,
        target,
        samples: drawn.samples,
        correlation,
        runs,
        summary,
    })
}

/// A run directory written by `cmd_infer`.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub target: TargetObservation,
    pub runs: Vec<InferenceRun>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let stamped: Stamped<ConfigFile> = read_json(&dir.join("config.json"))?;
    let config = stamped.value.config;
    config.validate()?;
    let target: Stamped<TargetObservation> = read_json(&dir.join("target.json"))?;
    let runs = (0..config.n_ensemble)
        .map(|k| InferenceRun::load(&member_dir(dir, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        provenance: stamped.provenance,
        config,
        target: target.value,
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    Ppc,
    Coverage,
    Amortized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcOutcome {
    /// On the configured observable.
    pub observable: PpcReport,
    /// On all heights, against a full-matrix target measured at θ*.
    pub matrix: PpcReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageOutcome {
    pub members: Vec<CoverageCurve>,
    pub ensemble: CoverageCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizedTarget {
    pub theta_star: Vec<f64>,
    pub x_star: Vec<f64>,
    pub fraction_in_box: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizedOutcome {
    pub half_width: f64,
    pub min_fraction: f64,
    pub targets: Vec<AmortizedTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationOutcome {
    Ppc(PpcOutcome),
    Coverage(CoverageOutcome),
    Amortized(AmortizedOutcome),
}

pub fn cmd_validate(dir: &Path, which: ValidationKind) -> Result<ValidationOutcome> {
    let run = load_run(dir)?;
    match which {
        ValidationKind::Ppc => validate_ppc(&run).map(ValidationOutcome::Ppc),
        ValidationKind::Coverage => validate_coverage(&run).map(ValidationOutcome::Coverage),
        ValidationKind::Amortized => validate_amortized(&run).map(ValidationOutcome::Amortized),
    }
}

/// Predictive check of the ensemble; writes `ppc.json`.
pub fn validate_ppc(run: &LoadedRun) -> Result<PpcOutcome> {
    let c = &run.config;
    let sim = c.simulator();
    let prior = c.prior();
    let ensemble = build_ensemble(&run.runs)?;
    let seed = derive_seed(c.master_seed, "ppc", 0);
    let observable = posterior_predictive_check(&ensemble, &prior, &sim, &run.target, c.validation.ppc_samples, seed)?;
    let full = sim.with_kind(ObservableKind::FullMatrix);
    let matrix_target = measure_target(&full, &c.theta_star, c.n_target_trials, derive_seed(c.master_seed, "target", 0))?;
    let mut rng = derive_rng(seed, "ppc/theta", 0);
    let thetas = posterior_sample(&ensemble, &prior, run.target.x(), c.validation.ppc_samples, &mut rng)?.samples;
    let matrix = predictive_check_at(&thetas, &full, &matrix_target, seed)?;
    let outcome = PpcOutcome { observable, matrix };
    write_stamped(&run.dir.join("ppc.json"), &run.provenance, &outcome)?;
    Ok(outcome)
}

/// Coverage of every round-0 member and their ensemble; writes
/// `coverage.csv` and `coverage.json`.
pub fn validate_coverage(run: &LoadedRun) -> Result<CoverageOutcome> {
    let c = &run.config;
    let sim = c.simulator();
    let prior = c.prior();
    let simulate = |t: &[f64], s: u64| sim.observe(t, s).map(|x| x.values);
    let v = &c.validation;
    let seed = derive_seed(c.master_seed, "coverage", 0);
    let members = run
        .runs
        .iter()
        .map(|r| expected_coverage(&r.amortized_posterior(), &prior, &simulate, v.coverage_pairs, v.coverage_samples, seed))
        .collect::<Result<Vec<_>>>()?;
    let ensemble = build_amortized_ensemble(&run.runs)?;
    let ensemble = expected_coverage(&ensemble, &prior, &simulate, v.coverage_pairs, v.coverage_samples, seed)?;
    let names: Vec<String> = (0..members.len()).map(|k| format!("member_{k}")).collect();
    let mut columns: Vec<(&str, &CoverageCurve)> = names.iter().map(String::as_str).zip(&members).collect();
    columns.push(("ensemble", &ensemble));
    write_text(&run.dir.join("coverage.csv"), &run.provenance.csv(&coverage_csv(&columns)))?;
    let outcome = CoverageOutcome { members, ensemble };
    write_stamped(&run.dir.join("coverage.json"), &run.provenance, &outcome)?;
    Ok(outcome)
}

/// Round-0 ensemble conditioned on targets measured at random θ* and the
/// centre; writes `amortized.csv` and `amortized.json`.
pub fn validate_amortized(run: &LoadedRun) -> Result<AmortizedOutcome> {
    let c = &run.config;
    let v = &c.validation;
    let sim = c.simulator();
    let prior = c.prior();
    let ensemble = build_amortized_ensemble(&run.runs)?;
    let mut thetas: Vec<Vec<f64>> = prior
        .sample(v.amortized_targets, &mut derive_rng(c.master_seed, "amortized/theta", 0))
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    thetas.push(vec![DIGITAL_MAX / 2.0; prior.dim()]);
    let names = parameter_names(c);
    let mut csv = format!("target,role,{}\n", names.join(","));
    let mut targets = Vec::with_capacity(thetas.len());
    for (k, theta) in thetas.iter().enumerate() {
        let target = measure_target(&sim, theta, c.n_target_trials, derive_seed(c.master_seed, "amortized/target", k as u64))?;
        let mut rng = derive_rng(c.master_seed, "amortized/samples", k as u64);
        let samples = posterior_sample(&ensemble, &prior, target.x(), v.amortized_samples, &mut rng)?.samples;
        let inside = samples
            .rows()
            .into_iter()
            .filter(|r| r.iter().zip(theta).all(|(s, t)| (s - t).abs() <= v.amortized_half_width))
            .count();
        let fraction_in_box = inside as f64 / samples.nrows() as f64;
        let row = |role: &str, values: &mut dyn Iterator<Item = f64>| {
            let vals: Vec<String> = values.map(|x| x.to_string()).collect();
            format!("{k},{role},{}\n", vals.join(","))
        };
        csv.push_str(&row("target", &mut theta.iter().copied()));
        for s in samples.rows() {
            csv.push_str(&row("sample", &mut s.iter().copied()));
        }
        targets.push(AmortizedTarget {
            theta_star: theta.clone(),
            x_star: target.x().to_vec(),
            fraction_in_box,
            passed: fraction_in_box >= v.amortized_min_fraction,
        });
    }
    write_text(&run.dir.join("amortized.csv"), &run.provenance.csv(&csv))?;
    let outcome = AmortizedOutcome {
        half_width: v.amortized_half_width,
        min_fraction: v.amortized_min_fraction,
        targets,
    };
    write_stamped(&run.dir.join("amortized.json"), &run.provenance, &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutcome {
    pub theta: Vec<f64>,
    pub seed: u64,
    pub heights: PspHeightMatrix,
    pub observable: Vec<f64>,
}

/// One trial at `theta`; writes `traces.csv` and `observation.json`.
pub fn cmd_simulate(config: &ExperimentConfig, theta: &[f64]) -> Result<SimulateOutcome> {
    let provenance = prepare_output(config)?;
    let sim = config.simulator();
    let seed = derive_seed(config.master_seed, "simulate", 0);
    let traces = run_trial(theta, &sim.space, sim.layout, &sim.protocol, &sim.noise, seed)?;
    write_text(&config.output_dir.join("traces.csv"), &provenance.csv(&traces.to_csv()))?;
    let heights = extract_psp_heights(&traces, &sim.protocol)?;
    let observable = sim.observe(theta, seed)?.values;
    let outcome = SimulateOutcome {
        theta: theta.to_vec(),
        seed,
        heights,
        observable,
    };
    write_stamped(&config.output_dir.join("observation.json"), &provenance, &outcome)?;
    Ok(outcome)
}

/// Human-readable one-line summary per validation outcome.
pub fn describe(outcome: &ValidationOutcome) -> String {
    let mut s = String::new();
    match outcome {
        ValidationOutcome::Ppc(p) => {
            let _ = write!(s, "ppc: mean distance {:.4} over {} samples", p.observable.mean_euclidean_distance, p.observable.n_samples);
        }
        ValidationOutcome::Coverage(c) => {
            let worst = c.members.iter().map(CoverageCurve::max_deviation).fold(0.0, f64::max);
            let _ = write!(s, "coverage: ensemble max deviation {:.4}, worst member {:.4}", c.ensemble.max_deviation(), worst);
        }
        ValidationOutcome::Amortized(a) => {
            let passed = a.targets.iter().filter(|t| t.passed).count();
            let _ = write!(s, "amortized: {passed}/{} targets with >= {} of samples within +-{}", a.targets.len(), a.min_fraction, a.half_width);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml().unwrap(), Path::new("x.toml")).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn cross_field_checks() {
        let mut c = ExperimentConfig::tau_2d();
        c.observable = ObservableKind::FirstColumn;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::first_column_2d();
        c.layout = Layout::PerElement;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::tau_2d();
        c.theta_star = vec![2000.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::tau_2d();
        c.schedule = vec![10];
        assert!(matches!(c.validate(), Err(Error::DatasetTooSmall { .. })));
        let mut c = ExperimentConfig::tau_2d();
        c.n_atoms = 1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::tau_2d();
        c.master_seed = u64::MAX;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::tau_2d();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.master_seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 16);
    }
}
