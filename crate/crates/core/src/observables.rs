//! Reduction of membrane traces to PSP heights and the spatial decay constant.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chain_model::{StimulusProtocol, TraceSet};
use crate::error::{Error, Result};

/// Length of the pre-stimulus baseline window, µs.
pub const BASELINE_WINDOW: f64 = 10.0;
/// Cap for the decay constant of (nearly) flat attenuation profiles, in
/// compartments.
pub const TAU_MAX: f64 = 100.0;
pub const LM_MAX_ITERATIONS: usize = 100;

/// `h[i][j]`: height in compartment `i` after an input to compartment `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PspHeightMatrix {
    pub h: Vec<Vec<f64>>,
    /// Per input `j` and compartment `i`: `baseline[j][i]`, mV.
    pub baseline: Vec<Vec<f64>>,
}

impl PspHeightMatrix {
    pub fn n(&self) -> usize {
        self.h.len()
    }

    /// Heights after an input to the first compartment.
    pub fn first_column(&self) -> Vec<f64> {
        self.h.iter().map(|row| row[0]).collect()
    }

    /// Row-major flattening, `h[0][0]` first.
    pub fn flattened(&self) -> Vec<f64> {
        self.h.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableKind {
    /// Fitted decay constant of the first column, compartments.
    Tau,
    /// `[h00, h10, ..., h(n-1)0]`, mV.
    FirstColumn,
    /// All heights, row-major, mV.
    FullMatrix,
}

impl ObservableKind {
    pub fn dim(self, n_compartments: usize) -> usize {
        match self {
            ObservableKind::Tau => 1,
            ObservableKind::FirstColumn => n_compartments,
            ObservableKind::FullMatrix => n_compartments * n_compartments,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ObservableKind::Tau => "tau",
            ObservableKind::FirstColumn => "first_column",
            ObservableKind::FullMatrix => "full_matrix",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            ObservableKind::Tau => "compartments",
            _ => "mV",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableVector {
    pub kind: ObservableKind,
    pub values: Vec<f64>,
    /// Set when the decay constant hit the [`TAU_MAX`] cap.
    #[serde(default)]
    pub flat: bool,
}

impl ObservableVector {
    /// CSV row `theta..., kind, x...`.
    pub fn csv_row(&self, theta: &[f64]) -> String {
        let mut row = String::new();
        for t in theta {
            let _ = write!(row, "{t},");
        }
        row.push_str(self.kind.label());
        for x in &self.values {
            let _ = write!(row, ",{x}");
        }
        row
    }
}

/// Peak above the pre-stimulus baseline, for every input window.
pub fn extract_psp_heights(traces: &TraceSet, protocol: &StimulusProtocol) -> Result<PspHeightMatrix> {
    let n = traces.n_compartments();
    if protocol.onset_times.len() != n {
        return Err(Error::ProtocolMismatch(format!(
            "{} onsets for {n} recorded compartments",
            protocol.onset_times.len()
        )));
    }
    let len = traces.times.len();
    if traces.voltages.iter().any(|v| v.len() != len) {
        return Err(Error::ProtocolMismatch("traces have unequal lengths".into()));
    }
    let dt = protocol.dt;
    let index = |t: f64| (t / dt).round() as isize;
    let mut h = vec![vec![0.0; n]; n];
    let mut baseline = vec![vec![0.0; n]; n];
    for (j, &onset) in protocol.onset_times.iter().enumerate() {
        let start = index(onset);
        let base_start = index(onset - BASELINE_WINDOW);
        let end = index(onset + protocol.inter_stimulus_interval);
        if base_start < 0 {
            return Err(Error::ProtocolMismatch(format!(
                "input {j} at {onset} µs leaves no {BASELINE_WINDOW} µs baseline"
            )));
        }
        if end as usize >= len {
            return Err(Error::ProtocolMismatch(format!(
                "window of input {j} ends at {} µs, past the trace end",
                onset + protocol.inter_stimulus_interval
            )));
        }
        let (base_start, start, end) = (base_start as usize, start as usize, end as usize);
        for i in 0..n {
            let v = &traces.voltages[i];
            let base = v[base_start..start].iter().sum::<f64>() / (start - base_start) as f64;
            let peak = v[start..=end].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            baseline[j][i] = base;
            h[i][j] = peak - base;
        }
    }
    Ok(PspHeightMatrix { h, baseline })
}

/// Result of the exponential fit `F_i ≈ A exp(-i / tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Compartments; [`TAU_MAX`] when `flat`.
    pub tau: f64,
    pub amplitude: f64,
    pub flat: bool,
    pub residual: f64,
    pub iterations: usize,
}

fn residual_norm2(f: &[f64], amplitude: f64, rate: f64) -> f64 {
    f.iter()
        .enumerate()
        .map(|(i, y)| {
            let r = amplitude * (-rate * i as f64).exp() - y;
            r * r
        })
        .sum()
}

/// Least-squares decay constant of the heights along the chain, in
/// compartments. Levenberg–Marquardt on `(A, 1/tau)`, started from the
/// log-linear regression.
pub fn fit_decay_constant(f: &[f64]) -> Result<DecayFit> {
    if f.len() < 2 {
        return Err(Error::Shape {
            what: "height vector",
            expected: 2,
            got: f.len(),
        });
    }
    if let Some((index, &value)) = f.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::FitDomain { index, value });
    }
    let flat = |amplitude: f64, residual: f64, iterations: usize| DecayFit {
        tau: TAU_MAX,
        amplitude,
        flat: true,
        residual,
        iterations,
    };

    // log-linear start
    let m = f.len() as f64;
    let mean_i = (m - 1.0) / 2.0;
    let logs: Vec<f64> = f.iter().map(|v| v.ln()).collect();
    let mean_l = logs.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, l) in logs.iter().enumerate() {
        let dx = i as f64 - mean_i;
        sxy += dx * (l - mean_l);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    let mut rate = -slope;
    let mut amplitude = (mean_l - slope * mean_i).exp();
    if rate <= 1.0 / TAU_MAX {
        return Ok(flat(amplitude, residual_norm2(f, amplitude, rate.max(0.0)), 0));
    }

    let mut cost = residual_norm2(f, amplitude, rate);
    let scale = f.iter().map(|v| v * v).sum::<f64>();
    let mut lambda = 1e-3;
    let mut converged = cost <= 1e-30 * scale;
    let mut iterations = 0;
    while !converged && iterations < LM_MAX_ITERATIONS {
        iterations += 1;
        // normal equations of the 2-parameter problem
        let (mut jaa, mut jak, mut jkk, mut ga, mut gk) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, y) in f.iter().enumerate() {
            let x = i as f64;
            let e = (-rate * x).exp();
            let r = amplitude * e - y;
            let da = e;
            let dk = -amplitude * x * e;
            jaa += da * da;
            jak += da * dk;
            jkk += dk * dk;
            ga += da * r;
            gk += dk * r;
        }
        loop {
            let a11 = jaa * (1.0 + lambda);
            let a22 = jkk * (1.0 + lambda);
            let det = a11 * a22 - jak * jak;
            if !(det.abs() > 0.0) || !det.is_finite() {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
                continue;
            }
            let step_a = -(a22 * ga - jak * gk) / det;
            let step_k = -(a11 * gk - jak * ga) / det;
            let new_a = amplitude + step_a;
            let new_k = rate + step_k;
            let new_cost = residual_norm2(f, new_a, new_k);
            if new_cost.is_finite() && new_cost <= cost {
                let rel_step = (step_a / new_a).abs().max((step_k / new_k.abs().max(1e-300)).abs());
                let drop = cost - new_cost;
                amplitude = new_a;
                rate = new_k;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                if rel_step < 1e-12 || drop <= 1e-15 * cost.max(1e-30 * scale) || cost <= 1e-30 * scale {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                // no downhill step left: stationary up to rounding
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::FitFailure {
            residual: cost.sqrt(),
        });
    }
    if rate <= 1.0 / TAU_MAX {
        return Ok(flat(amplitude, cost.sqrt(), iterations));
    }
    Ok(DecayFit {
        tau: 1.0 / rate,
        amplitude,
        flat: false,
        residual: cost.sqrt(),
        iterations,
    })
}

/// Select the observable of the given kind from a height matrix.
pub fn observable_vector(h: &PspHeightMatrix, kind: ObservableKind) -> Result<ObservableVector> {
    Ok(match kind {
        ObservableKind::Tau => {
            let fit = fit_decay_constant(&h.first_column())?;
            ObservableVector {
                kind,
                values: vec![fit.tau],
                flat: fit.flat,
            }
        }
        ObservableKind::FirstColumn => ObservableVector {
            kind,
            values: h.first_column(),
            flat: false,
        },
        ObservableKind::FullMatrix => ObservableVector {
            kind,
            values: h.flattened(),
            flat: false,
        },
    })
}
