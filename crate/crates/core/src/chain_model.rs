//! Passive chain of leaky compartments driven by current-based exponential
//! synapses.
//!
//! Units are chosen so no conversion factors appear in the dynamics:
//! conductance in µS, capacitance in pF, potential in mV, time in µs and
//! current in nA (µS · mV = nA, nA / pF = mV / µs).
//!
//! The chain is linear with a common membrane capacitance, so the system
//! matrix is symmetric and the propagator over one step is formed from its
//! eigendecomposition. Synaptic currents decay with a known exponential
//! between steps, which makes the update exact at every grid point for
//! any `dt`; the scheme reduces to exponential Euler for a single
//! compartment.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Largest digital value of an analog parameter; the top code is reserved.
pub const DIGITAL_MAX: f64 = 1022.0;

/// Physical parameters of an `n`-compartment chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParameters {
    pub n_compartments: usize,
    /// µS, one per compartment.
    pub g_leak: Vec<f64>,
    /// µS, `g_axial[i]` couples compartments `i` and `i + 1`.
    pub g_axial: Vec<f64>,
    /// pF
    pub c_m: f64,
    /// mV
    pub v_leak: f64,
    /// µs
    pub tau_syn: f64,
    /// nA at onset.
    pub w_syn: f64,
}

impl ChainParameters {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_compartments;
        if n == 0 {
            return Err(Error::InvalidParameters("chain needs at least one compartment".into()));
        }
        if self.g_leak.len() != n {
            return Err(Error::Shape {
                what: "g_leak",
                expected: n,
                got: self.g_leak.len(),
            });
        }
        if self.g_axial.len() != n - 1 {
            return Err(Error::Shape {
                what: "g_axial",
                expected: n - 1,
                got: self.g_axial.len(),
            });
        }
        if let Some(g) = self
            .g_leak
            .iter()
            .chain(&self.g_axial)
            .find(|g| !(g.is_finite() && **g >= 0.0))
        {
            return Err(Error::InvalidParameters(format!(
                "conductances must be finite and non-negative, got {g}"
            )));
        }
        if !(self.c_m > 0.0 && self.c_m.is_finite()) {
            return Err(Error::InvalidParameters(format!("c_m must be positive, got {}", self.c_m)));
        }
        if !(self.tau_syn > 0.0 && self.tau_syn.is_finite()) {
            return Err(Error::InvalidParameters(format!(
                "tau_syn must be positive, got {}",
                self.tau_syn
            )));
        }
        if !self.v_leak.is_finite() || !self.w_syn.is_finite() {
            return Err(Error::InvalidParameters("v_leak and w_syn must be finite".into()));
        }
        Ok(())
    }

    /// Mirror the chain: compartment `i` becomes `n - 1 - i`.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        out.g_leak.reverse();
        out.g_axial.reverse();
        out
    }

    /// Largest membrane time constant `c_m / g_leak` over the chain.
    pub fn max_membrane_tau(&self) -> f64 {
        self.g_leak
            .iter()
            .map(|g| self.c_m / g)
            .fold(0.0, f64::max)
    }
}

/// Fixed membrane constants shared by every compartment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembraneConstants {
    pub c_m: f64,
    pub v_leak: f64,
    pub tau_syn: f64,
    pub w_syn: f64,
}

/// Default capacitance of a compartment, pF.
pub const DEFAULT_C_M: f64 = 125.0;
/// Calibrated synaptic time constant, µs.
pub const DEFAULT_TAU_SYN: f64 = 10.0;
/// Membrane time constants covered by the leak range, µs.
pub const TAU_M_RANGE: (f64, f64) = (12.0, 30.0);
/// Peak of an isolated compartment's PSP at the midpoint leak conductance, mV.
pub const ISOLATED_PSP_PEAK: f64 = 10.0;
/// Axial range as multiples of the midpoint leak conductance. Frozen from
/// the `calibrate_ranges` example scan.
pub const AXIAL_RANGE_FACTORS: (f64, f64) = (0.02, 5.0);

/// Peak of the PSP of an isolated RC compartment for a unit exponential
/// current, mV per nA. Closed-form difference of exponentials.
pub fn isolated_psp_peak_per_na(c_m: f64, g_leak: f64, tau_syn: f64) -> f64 {
    let tau_m = c_m / g_leak;
    if (tau_m - tau_syn).abs() < 1e-12 * tau_syn {
        // alpha-function limit: peak at t = tau, value tau / (c e)
        return tau_syn / (c_m * std::f64::consts::E);
    }
    let t_peak = (tau_m / tau_syn).ln() * tau_m * tau_syn / (tau_m - tau_syn);
    tau_syn * tau_m / (c_m * (tau_m - tau_syn)) * ((-t_peak / tau_m).exp() - (-t_peak / tau_syn).exp())
}

impl Default for MembraneConstants {
    fn default() -> Self {
        let g_mid = 0.5 * (DEFAULT_C_M / TAU_M_RANGE.1 + DEFAULT_C_M / TAU_M_RANGE.0);
        let w_syn = ISOLATED_PSP_PEAK / isolated_psp_peak_per_na(DEFAULT_C_M, g_mid, DEFAULT_TAU_SYN);
        Self {
            c_m: DEFAULT_C_M,
            v_leak: 0.0,
            tau_syn: DEFAULT_TAU_SYN,
            w_syn,
        }
    }
}

/// How a digital parameter vector maps onto the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    /// `[leak, axial]`, broadcast to every compartment and connection.
    #[serde(rename = "global_2d")]
    Global,
    /// `[leak_0..leak_{n-1}, axial_0..axial_{n-2}]`.
    #[serde(rename = "per_element_7d")]
    PerElement,
}

impl Layout {
    pub fn dim(self, n_compartments: usize) -> usize {
        match self {
            Layout::Global => 2,
            Layout::PerElement => 2 * n_compartments - 1,
        }
    }

    /// Human-readable parameter names in coordinate order.
    pub fn parameter_names(self, n_compartments: usize) -> Vec<String> {
        match self {
            Layout::Global => vec!["g_leak".into(), "g_axial".into()],
            Layout::PerElement => (0..n_compartments)
                .map(|i| format!("g_leak_{i}"))
                .chain((0..n_compartments - 1).map(|i| format!("g_axial_{i}_{}", i + 1)))
                .collect(),
        }
    }
}

/// Affine map from digital codes `0..=1022` to physical conductances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitalParameterSpace {
    pub n_compartments: usize,
    /// µS at digital 0 and 1022.
    pub g_leak_range: (f64, f64),
    /// µS at digital 0 and 1022.
    pub g_axial_range: (f64, f64),
    pub constants: MembraneConstants,
}

impl Default for DigitalParameterSpace {
    fn default() -> Self {
        Self::for_compartments(4)
    }
}

impl DigitalParameterSpace {
    pub fn for_compartments(n_compartments: usize) -> Self {
        let constants = MembraneConstants::default();
        let g_leak_range = (constants.c_m / TAU_M_RANGE.1, constants.c_m / TAU_M_RANGE.0);
        let g_mid = 0.5 * (g_leak_range.0 + g_leak_range.1);
        Self {
            n_compartments,
            g_leak_range,
            g_axial_range: (AXIAL_RANGE_FACTORS.0 * g_mid, AXIAL_RANGE_FACTORS.1 * g_mid),
            constants,
        }
    }

    fn affine(range: (f64, f64), digital: f64) -> f64 {
        range.0 + (range.1 - range.0) * digital / DIGITAL_MAX
    }

    pub fn leak(&self, digital: f64) -> f64 {
        Self::affine(self.g_leak_range, digital)
    }

    pub fn axial(&self, digital: f64) -> f64 {
        Self::affine(self.g_axial_range, digital)
    }

    /// Largest membrane time constant reachable in this space, µs.
    pub fn max_membrane_tau(&self) -> f64 {
        self.constants.c_m / self.g_leak_range.0.min(self.g_leak_range.1)
    }

    pub fn decode(&self, theta: &[f64], layout: Layout) -> Result<ChainParameters> {
        decode_parameters(theta, self, layout)
    }
}

/// Map digital parameters to the physical chain.
pub fn decode_parameters(
    theta: &[f64],
    space: &DigitalParameterSpace,
    layout: Layout,
) -> Result<ChainParameters> {
    let n = space.n_compartments;
    let expected = layout.dim(n);
    if theta.len() != expected {
        return Err(Error::Shape {
            what: "digital parameter vector",
            expected,
            got: theta.len(),
        });
    }
    if let Some((coordinate, &value)) = theta
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0 && **v <= DIGITAL_MAX))
    {
        return Err(Error::Domain {
            coordinate,
            value,
            max: DIGITAL_MAX,
        });
    }
    let (g_leak, g_axial) = match layout {
        Layout::Global => (vec![space.leak(theta[0]); n], vec![space.axial(theta[1]); n - 1]),
        Layout::PerElement => (
            theta[..n].iter().map(|&d| space.leak(d)).collect(),
            theta[n..].iter().map(|&d| space.axial(d)).collect(),
        ),
    };
    let c = space.constants;
    Ok(ChainParameters {
        n_compartments: n,
        g_leak,
        g_axial,
        c_m: c.c_m,
        v_leak: c.v_leak,
        tau_syn: c.tau_syn,
        w_syn: c.w_syn,
    })
}

/// Time course of a synaptic input after its onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKernel {
    /// `w_syn · exp(-(t - onset) / tau_syn)`
    #[default]
    Exponential,
    /// Constant `w_syn` from onset on.
    Step,
}

/// One synaptic event per compartment, injected in sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusProtocol {
    /// µs, `onset_times[j]` is the input to compartment `j`.
    pub onset_times: Vec<f64>,
    /// µs
    pub inter_stimulus_interval: f64,
    /// µs
    pub total_duration: f64,
    /// µs
    pub dt: f64,
    #[serde(default)]
    pub kernel: InputKernel,
}

/// Time before the first input, µs; covers the 10 µs baseline window.
pub const DEFAULT_LEAD_IN: f64 = 20.0;
/// Spacing of the inputs, µs. At least eight of the slowest membrane time
/// constants (30 µs) so every response has decayed before the next input.
pub const DEFAULT_INTER_STIMULUS_INTERVAL: f64 = 250.0;
pub const DEFAULT_DT: f64 = 0.1;

impl StimulusProtocol {
    pub fn sequential(n_compartments: usize) -> Self {
        let isi = DEFAULT_INTER_STIMULUS_INTERVAL;
        Self {
            onset_times: (0..n_compartments)
                .map(|j| DEFAULT_LEAD_IN + isi * j as f64)
                .collect(),
            inter_stimulus_interval: isi,
            total_duration: DEFAULT_LEAD_IN + isi * n_compartments as f64,
            dt: DEFAULT_DT,
            kernel: InputKernel::Exponential,
        }
    }

    /// Number of integration steps; the trace has one more sample.
    pub fn n_steps(&self) -> usize {
        (self.total_duration / self.dt).round() as usize
    }

    /// Index of the sample at time `t` on the integration grid.
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        let k = t / self.dt;
        let r = k.round();
        ((k - r).abs() < 1e-6 && r >= 0.0).then_some(r as usize)
    }

    pub fn validate(&self, params: &ChainParameters) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProtocol(m));
        if self.onset_times.len() != params.n_compartments {
            return bad(format!(
                "{} onsets for {} compartments",
                self.onset_times.len(),
                params.n_compartments
            ));
        }
        if !(self.dt > 0.0) || self.dt > params.tau_syn / 20.0 + 1e-12 {
            return bad(format!("dt = {} must lie in (0, tau_syn / 20]", self.dt));
        }
        if self.onset_times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("onset times must be strictly increasing".into());
        }
        for &t in &self.onset_times {
            if t < 0.0 || t > self.total_duration {
                return bad(format!("onset {t} outside [0, {}]", self.total_duration));
            }
            if self.grid_index(t).is_none() {
                return bad(format!("onset {t} is not on the integration grid"));
            }
        }
        Ok(())
    }

    /// Inputs must be spaced by at least eight of the slowest membrane time
    /// constants so each response decays below 1% before the next input.
    pub fn check_decay_gap(&self, max_tau_m: f64) -> Result<()> {
        let min_gap = self
            .onset_times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
            .min(self.inter_stimulus_interval);
        if min_gap < 8.0 * max_tau_m - 1e-9 {
            return Err(Error::InvalidProtocol(format!(
                "input spacing {min_gap} µs is below 8 × {max_tau_m} µs"
            )));
        }
        Ok(())
    }
}

/// Trial-to-trial variability of the substrate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Coefficient of variation of the multiplicative jitter applied to each
    /// conductance, drawn once per trial.
    pub conductance_jitter_cv: f64,
    /// mV, white noise added to every recorded sample.
    pub voltage_noise_sd: f64,
    pub enabled: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            conductance_jitter_cv: 0.05,
            voltage_noise_sd: 0.05,
            enabled: true,
        }
    }
}

impl NoiseModel {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.conductance_jitter_cv >= 0.0) || !(self.voltage_noise_sd >= 0.0) {
            return Err(Error::InvalidParameters(
                "noise magnitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Recorded membrane potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    /// µs
    pub times: Vec<f64>,
    /// mV, `voltages[i][k]` is compartment `i` at `times[k]`.
    pub voltages: Vec<Vec<f64>>,
}

impl TraceSet {
    pub fn n_compartments(&self) -> usize {
        self.voltages.len()
    }

    pub fn to_csv(&self) -> String {
        let n = self.voltages.len();
        let mut out = String::from("time_us");
        for i in 0..n {
            let _ = write!(out, ",v{i}");
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{t}");
            for v in &self.voltages {
                let _ = write!(out, ",{}", v[k]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the column eigenvectors (row-major `n × n`).
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// `Q diag(f(λ)) Qᵀ`
fn spectral(values: &[f64], vectors: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let fl: Vec<f64> = values.iter().map(|&l| f(l)).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| vectors[i * n + k] * fl[k] * vectors[j * n + k]).sum();
        }
    }
    out
}

/// One-step propagators of the chain: `u ← P u + K I` where `u = V - V_leak`
/// and `I` is the synaptic current at the start of the step.
struct Propagator {
    n: usize,
    p: Vec<f64>,
    k: Vec<f64>,
    /// Decay of the synaptic current over one step.
    current_decay: f64,
}

impl Propagator {
    fn new(params: &ChainParameters, dt: f64, kernel: InputKernel) -> Self {
        let n = params.n_compartments;
        let c = params.c_m;
        // system matrix of du/dt = A u + I / c
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] -= params.g_leak[i] / c;
        }
        for (i, &g) in params.g_axial.iter().enumerate() {
            let g = g / c;
            a[i * n + i] -= g;
            a[(i + 1) * n + i + 1] -= g;
            a[i * n + i + 1] += g;
            a[(i + 1) * n + i] += g;
        }
        let (values, vectors) = symmetric_eigen(a, n);
        let beta = match kernel {
            InputKernel::Exponential => 1.0 / params.tau_syn,
            InputKernel::Step => 0.0,
        };
        let p = spectral(&values, &vectors, n, |l| (l * dt).exp());
        // ∫₀^dt exp(λ (dt - s)) exp(-β s) ds
        let k = spectral(&values, &vectors, n, |l| {
            let r = l + beta;
            let tail = if (r * dt).abs() < 1e-12 {
                dt
            } else {
                -(-r * dt).exp_m1() / r
            };
            (l * dt).exp() * tail / c
        });
        Self {
            n,
            p,
            k,
            current_decay: (-beta * dt).exp(),
        }
    }

    fn step(&self, u: &mut [f64], current: &mut [f64], scratch: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = i * n;
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.p[row + j] * u[j] + self.k[row + j] * current[j];
            }
            scratch[i] = acc;
        }
        u.copy_from_slice(scratch);
        for c in current.iter_mut() {
            *c *= self.current_decay;
        }
    }
}

/// Draw the per-trial conductance jitter.
fn jittered(params: &ChainParameters, noise: &NoiseModel, rng: &mut crate::seed::Rng) -> ChainParameters {
    let mut out = params.clone();
    if noise.enabled && noise.conductance_jitter_cv > 0.0 {
        let cv = noise.conductance_jitter_cv;
        for g in out.g_leak.iter_mut().chain(out.g_axial.iter_mut()) {
            let xi: f64 = rng.sample(StandardNormal);
            *g = (*g * (1.0 + cv * xi)).max(0.0);
        }
    }
    out
}

/// Integrate the chain from rest and record every compartment.
pub fn simulate_chain(
    params: &ChainParameters,
    protocol: &StimulusProtocol,
    noise: &NoiseModel,
    seed: u64,
) -> Result<TraceSet> {
    params.validate()?;
    protocol.validate(params)?;
    noise.validate()?;
    let mut rng = rng_from_seed(seed);
    let trial_params = jittered(params, noise, &mut rng);

    let n = params.n_compartments;
    let steps = protocol.n_steps();
    let prop = Propagator::new(&trial_params, protocol.dt, protocol.kernel);
    let onset_steps: Vec<usize> = protocol
        .onset_times
        .iter()
        .map(|&t| protocol.grid_index(t).expect("validated onset"))
        .collect();

    let mut u = vec![0.0; n];
    let mut current = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut voltages = vec![Vec::with_capacity(steps + 1); n];
    for v in voltages.iter_mut() {
        v.push(0.0);
    }
    for k in 0..steps {
        for (j, &s) in onset_steps.iter().enumerate() {
            if s == k {
                current[j] += params.w_syn;
            }
        }
        prop.step(&mut u, &mut current, &mut scratch);
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalInstability { step: k + 1 });
        }
        for (trace, &x) in voltages.iter_mut().zip(&u) {
            trace.push(x);
        }
    }

    let sd = if noise.enabled { noise.voltage_noise_sd } else { 0.0 };
    for trace in voltages.iter_mut() {
        for x in trace.iter_mut() {
            *x += params.v_leak;
            if sd > 0.0 {
                let xi: f64 = rng.sample(StandardNormal);
                *x += sd * xi;
            }
        }
    }
    let times = (0..=steps).map(|k| k as f64 * protocol.dt).collect();
    Ok(TraceSet { times, voltages })
}

/// A single simulator call: decode then integrate.
pub fn run_trial(
    theta_digital: &[f64],
    space: &DigitalParameterSpace,
    layout: Layout,
    protocol: &StimulusProtocol,
    noise: &NoiseModel,
    seed: u64,
) -> Result<TraceSet> {
    let params = decode_parameters(theta_digital, space, layout)?;
    protocol.check_decay_gap(space.max_membrane_tau())?;
    simulate_chain(&params, protocol, noise, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> DigitalParameterSpace {
        DigitalParameterSpace::default()
    }

    #[test]
    fn decode_lower_bound_and_midpoint() {
        let s = space();
        let p = decode_parameters(&[0.0, 0.0], &s, Layout::Global).unwrap();
        assert!(p.g_leak.iter().all(|&g| g == s.g_leak_range.0));
        assert!(p.g_axial.iter().all(|&g| g == s.g_axial_range.0));

        let p = decode_parameters(&[511.0, 511.0], &s, Layout::Global).unwrap();
        let mid_l = 0.5 * (s.g_leak_range.0 + s.g_leak_range.1);
        let mid_a = 0.5 * (s.g_axial_range.0 + s.g_axial_range.1);
        assert!(p.g_leak.iter().all(|&g| (g - mid_l).abs() < 1e-12));
        assert!(p.g_axial.iter().all(|&g| (g - mid_a).abs() < 1e-12));
        assert_eq!(p.g_leak.len(), 4);
        assert_eq!(p.g_axial.len(), 3);
    }

    #[test]
    fn decode_per_element_index_order() {
        let s = space();
        let theta = [10.0, 200.0, 400.0, 1022.0, 0.0, 700.0, 333.0];
        let p = decode_parameters(&theta, &s, Layout::PerElement).unwrap();
        // Evaluated separately: min + (max - min) * d / 1022 with
        // g_leak in (125/30, 125/12) µS and g_axial in (0.02, 5) × 7.2916 µS.
        assert!((p.g_leak[1] - 5.389758643183301).abs() < 1e-12, "{}", p.g_leak[1]);
        assert!((p.g_leak[3] - 10.416666666666666).abs() < 1e-12);
        assert!((p.g_axial[1] - 25.017408675799082).abs() < 1e-12, "{}", p.g_axial[1]);
        assert!((p.g_axial[2] - 11.97759703196347).abs() < 1e-12, "{}", p.g_axial[2]);
        assert_eq!(p.g_axial[0], s.g_axial_range.0);
    }

    #[test]
    fn decode_errors() {
        let s = space();
        match decode_parameters(&[1.0, 2.0, 3.0], &s, Layout::Global) {
            Err(Error::Shape { expected: 2, got: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_parameters(&[1.0, 1023.0], &s, Layout::Global) {
            Err(Error::Domain { coordinate: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_parameters(&[-0.5, 1.0], &s, Layout::Global) {
            Err(Error::Domain { coordinate: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn leak_range_spans_membrane_time_constants() {
        let s = space();
        let c = s.constants.c_m;
        let tau_lo = c / s.leak(DIGITAL_MAX);
        let tau_hi = c / s.leak(0.0);
        assert!((tau_lo - 12.0).abs() / 12.0 < 0.01);
        assert!((tau_hi - 30.0).abs() / 30.0 < 0.01);
    }

    #[test]
    fn isolated_peak_matches_default_weight() {
        let s = space();
        let p = decode_parameters(&[511.0, 0.0], &s, Layout::Global).unwrap();
        let peak = s.constants.w_syn * isolated_psp_peak_per_na(p.c_m, p.g_leak[0], p.tau_syn);
        assert!((peak - ISOLATED_PSP_PEAK).abs() < 1e-9);
    }

    #[test]
    fn jacobi_diagonalizes_tridiagonal() {
        let a = vec![-2.0, 1.0, 0.0, 1.0, -3.0, 0.5, 0.0, 0.5, -1.0];
        let (l, v) = symmetric_eigen(a.clone(), 3);
        let back = spectral(&l, &v, 3, |x| x);
        for (x, y) in a.iter().zip(&back) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn protocol_validation() {
        let s = space();
        let p = s.decode(&[500.0, 500.0], Layout::Global).unwrap();
        let mut proto = StimulusProtocol::sequential(4);
        assert!(proto.validate(&p).is_ok());
        assert!(proto.check_decay_gap(s.max_membrane_tau()).is_ok());
        proto.dt = 0.6;
        assert!(proto.validate(&p).is_err());
        let mut proto = StimulusProtocol::sequential(4);
        proto.onset_times.swap(1, 2);
        assert!(proto.validate(&p).is_err());
        let mut proto = StimulusProtocol::sequential(4);
        proto.onset_times = vec![20.0, 120.0, 220.0, 320.0];
        assert!(proto.check_decay_gap(30.0).is_err());
    }

    #[test]
    fn unstable_state_is_reported() {
        let mut p = space().decode(&[500.0, 500.0], Layout::Global).unwrap();
        p.w_syn = f64::MAX;
        p.g_leak = vec![0.0; 4];
        p.g_axial = vec![0.0; 3];
        let mut proto = StimulusProtocol::sequential(4);
        proto.kernel = InputKernel::Step;
        match simulate_chain(&p, &proto, &NoiseModel::disabled(), 0) {
            Err(Error::NumericalInstability { step }) => assert!(step > 0),
            other => panic!("{other:?}"),
        }
    }
}
