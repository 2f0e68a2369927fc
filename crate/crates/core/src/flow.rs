//! Conditional masked autoregressive flow on a bounded box.
//!
//! `theta` is mapped from its support box to the real line by a per-dimension
//! scaled logit, standardized, then pushed through a stack of MADE affine
//! transforms to a standard normal. Each MADE follows the usual
//! feed-forward layout: a masked input layer with an additive context
//! layer, `n_blocks` masked `tanh` layers, and a masked output layer
//! producing a shift and a log-scale per coordinate. The coordinate order is
//! reversed between transforms.
//!
//! Parameters live in one flat vector so the optimizer, the finite-difference
//! checks and the file format all share a single layout.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, Rng};

/// Bounds of the per-coordinate log-scale.
pub const LOG_SCALE_CLAMP: f64 = 7.0;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Keeps sampled points strictly inside the support box.
const P_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_transforms: usize,
    /// Hidden layers per MADE.
    pub n_blocks: usize,
    pub n_hidden: usize,
    pub dim_theta: usize,
    pub dim_x: usize,
    #[serde(default = "default_true")]
    pub permute_between: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl FlowConfig {
    pub fn new(dim_theta: usize, dim_x: usize) -> Self {
        Self {
            n_transforms: 5,
            n_blocks: 2,
            n_hidden: 50,
            dim_theta,
            dim_x,
            permute_between: true,
            seed: 0,
        }
    }

    pub fn with_architecture(mut self, n_transforms: usize, n_blocks: usize, n_hidden: usize) -> Self {
        self.n_transforms = n_transforms;
        self.n_blocks = n_blocks;
        self.n_hidden = n_hidden;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_transforms == 0 || self.n_blocks == 0 || self.n_hidden == 0 || self.dim_theta == 0 {
            return Err(Error::Config(format!(
                "flow counts must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn params_per_transform(&self) -> usize {
        let (d, c, h) = (self.dim_theta, self.dim_x, self.n_hidden);
        h * d + h + h * c + h + self.n_blocks * (h * h + h) + 2 * d * h + 2 * d
    }

    /// Number of trainable parameters, counting full weight matrices.
    pub fn n_parameters(&self) -> usize {
        self.n_transforms * self.params_per_transform()
    }
}

/// Offsets of one MADE's tensors within the flat parameter vector.
#[derive(Debug, Clone)]
struct MadeOffsets {
    w_in: usize,
    b_in: usize,
    w_ctx: usize,
    b_ctx: usize,
    /// `(weight, bias)` per hidden block.
    blocks: Vec<(usize, usize)>,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone)]
struct Masks {
    input: Array2<f64>,
    hidden: Array2<f64>,
    output: Array2<f64>,
}

fn build_masks(d: usize, h: usize) -> Masks {
    // degrees: inputs 1..=d, hidden cycle through 1..=d-1 (0 when d == 1)
    let hidden_deg: Vec<usize> = (0..h)
        .map(|i| i % (d.saturating_sub(1)).max(1) + (d.saturating_sub(1)).min(1))
        .collect();
    let input = Array2::from_shape_fn((h, d), |(j, k)| f64::from(u8::from(hidden_deg[j] > k)));
    let hidden = Array2::from_shape_fn((h, h), |(j, i)| f64::from(u8::from(hidden_deg[j] >= hidden_deg[i])));
    let output = Array2::from_shape_fn((2 * d, h), |(r, j)| {
        let k = r % d;
        f64::from(u8::from(k + 1 > hidden_deg[j]))
    });
    Masks { input, hidden, output }
}

fn layout(config: &FlowConfig) -> Vec<MadeOffsets> {
    let (d, c, h) = (config.dim_theta, config.dim_x, config.n_hidden);
    let mut off = 0;
    let mut take = |n: usize| {
        let o = off;
        off += n;
        o
    };
    (0..config.n_transforms)
        .map(|_| {
            let w_in = take(h * d);
            let b_in = take(h);
            let w_ctx = take(h * c);
            let b_ctx = take(h);
            let blocks = (0..config.n_blocks).map(|_| (take(h * h), take(h))).collect();
            let w_out = take(2 * d * h);
            let b_out = take(2 * d);
            MadeOffsets {
                w_in,
                b_in,
                w_ctx,
                b_ctx,
                blocks,
                w_out,
                b_out,
            }
        })
        .collect()
}

/// Frozen affine standardization of the (logit) parameters and the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub theta_mean: Vec<f64>,
    pub theta_sd: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim_theta: usize, dim_x: usize) -> Self {
        Self {
            theta_mean: vec![0.0; dim_theta],
            theta_sd: vec![1.0; dim_theta],
            x_mean: vec![0.0; dim_x],
            x_sd: vec![1.0; dim_x],
        }
    }
}

/// Per-column mean and standard deviation; constant columns get sd 1.
pub fn column_stats(data: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = data.nrows() as f64;
    let mean: Vec<f64> = data.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
    let sd = data
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(col, m)| {
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = var.sqrt();
            if sd > 1e-12 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

/// Per-dimension scaled logit between a box and the real line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundedSupportTransform {
    pub support: Vec<(f64, f64)>,
}

impl BoundedSupportTransform {
    pub fn new(support: Vec<(f64, f64)>) -> Self {
        Self { support }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(&self.support)
            .all(|(t, (lo, hi))| *t > *lo && *t < *hi)
    }

    /// `(y, log|dy/dθ|)`; `None` outside the open box.
    pub fn forward(&self, theta: &[f64], y: &mut [f64]) -> Option<f64> {
        let mut log_det = 0.0;
        for (k, (t, (lo, hi))) in theta.iter().zip(&self.support).enumerate() {
            let w = hi - lo;
            let p = (t - lo) / w;
            if !(p > 0.0 && p < 1.0) {
                return None;
            }
            y[k] = p.ln() - (-p).ln_1p();
            log_det -= w.ln() + p.ln() + (-p).ln_1p();
        }
        Some(log_det)
    }

    pub fn inverse(&self, y: &[f64], theta: &mut [f64]) {
        for (k, (v, (lo, hi))) in y.iter().zip(&self.support).enumerate() {
            let p = (1.0 / (1.0 + (-v).exp())).clamp(P_EPS, 1.0 - P_EPS);
            theta[k] = lo + (hi - lo) * p;
        }
    }
}

/// q(θ | x) as a masked autoregressive flow.
#[derive(Debug, Clone)]
pub struct ConditionalFlow {
    config: FlowConfig,
    pub standardization: Standardization,
    bounds: BoundedSupportTransform,
    params: Vec<f64>,
    offsets: Vec<MadeOffsets>,
    masks: Masks,
}

/// Activations of one MADE kept for the backward pass.
struct MadeCache {
    u: Array2<f64>,
    /// Input of each block's linear layer (first entry is the input layer output).
    layer_inputs: Vec<Array2<f64>>,
    /// Post-tanh output of the last block.
    last: Array2<f64>,
    alpha: Array2<f64>,
    alpha_active: Array2<f64>,
    z: Array2<f64>,
}

fn view<'a>(params: &'a [f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &params[off..off + rows * cols]).expect("layout")
}

fn view_mut<'a>(grad: &'a mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut grad[off..off + rows * cols]).expect("layout")
}

fn reverse_columns(a: &Array2<f64>) -> Array2<f64> {
    a.slice(s![.., ..;-1]).to_owned()
}

impl ConditionalFlow {
    /// Fresh flow: uniform `±1/√fan_in` weights, zero output layers so every
    /// transform starts as the identity.
    pub fn new(config: FlowConfig, support: Vec<(f64, f64)>) -> Result<Self> {
        config.validate()?;
        if support.len() != config.dim_theta {
            return Err(Error::Config(format!(
                "support box has {} dimensions, dim_theta is {}",
                support.len(),
                config.dim_theta
            )));
        }
        if support.iter().any(|(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::Config("support box needs finite low < high".into()));
        }
        let offsets = layout(&config);
        let mut params = vec![0.0; config.n_parameters()];
        let mut rng = rng_from_seed(config.seed);
        let (d, c, h) = (config.dim_theta, config.dim_x, config.n_hidden);
        let fill = |params: &mut [f64], off: usize, n: usize, fan_in: usize, rng: &mut Rng| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for p in &mut params[off..off + n] {
                *p = rng.random_range(-bound..bound);
            }
        };
        for o in &offsets {
            fill(&mut params, o.w_in, h * d, d, &mut rng);
            fill(&mut params, o.b_in, h, d, &mut rng);
            fill(&mut params, o.w_ctx, h * c, c, &mut rng);
            fill(&mut params, o.b_ctx, h, c, &mut rng);
            for &(w, b) in &o.blocks {
                fill(&mut params, w, h * h, h, &mut rng);
                fill(&mut params, b, h, h, &mut rng);
            }
        }
        Ok(Self {
            masks: build_masks(d, h),
            standardization: Standardization::identity(d, c),
            bounds: BoundedSupportTransform::new(support),
            params,
            offsets,
            config,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn support(&self) -> &[(f64, f64)] {
        &self.bounds.support
    }

    pub fn bounds(&self) -> &BoundedSupportTransform {
        &self.bounds
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        self.params.copy_from_slice(params);
    }

    pub fn n_parameters(&self) -> usize {
        self.params.len()
    }

    /// Logit-space values of `theta` rows, used to fit the standardization.
    pub fn unbounded(&self, thetas: ArrayView2<f64>) -> Result<Array2<f64>> {
        let d = self.config.dim_theta;
        let mut out = Array2::zeros((thetas.nrows(), d));
        let mut y = vec![0.0; d];
        for (r, row) in thetas.rows().into_iter().enumerate() {
            let row = row.to_vec();
            self.bounds.forward(&row, &mut y).ok_or_else(|| {
                Error::InvalidParameters(format!("training parameter {row:?} outside the support box"))
            })?;
            out.row_mut(r).assign(&Array1::from(y.clone()));
        }
        Ok(out)
    }

    /// Fit and freeze the standardization from a dataset.
    pub fn fit_standardization(&mut self, thetas: ArrayView2<f64>, xs: ArrayView2<f64>) -> Result<()> {
        let y = self.unbounded(thetas)?;
        let (theta_mean, theta_sd) = column_stats(y.view());
        let (x_mean, x_sd) = column_stats(xs);
        self.standardization = Standardization {
            theta_mean,
            theta_sd,
            x_mean,
            x_sd,
        };
        Ok(())
    }

    fn standardized_context(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let st = &self.standardization;
        let mut out = xs.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - st.x_mean[k]) / st.x_sd[k];
            }
        }
        out
    }

    fn masked(&self, off: usize, rows: usize, cols: usize, mask: &Array2<f64>) -> Array2<f64> {
        &view(&self.params, off, rows, cols) * mask
    }

    /// MADE forward: returns (shift, clamped log-scale, active mask of log-scale, cache parts).
    fn made_forward(
        &self,
        t: usize,
        u: &Array2<f64>,
        ctx: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Vec<Array2<f64>>, Array2<f64>) {
        let (d, c, h) = (self.config.dim_theta, self.config.dim_x, self.config.n_hidden);
        let o = &self.offsets[t];
        let w_in = self.masked(o.w_in, h, d, &self.masks.input);
        let mut a = u.dot(&w_in.t());
        a += &view(&self.params, o.b_in, 1, h).row(0);
        if c > 0 {
            a += &ctx.dot(&view(&self.params, o.w_ctx, h, c).t());
        }
        a += &view(&self.params, o.b_ctx, 1, h).row(0);
        let mut layer_inputs = Vec::with_capacity(o.blocks.len());
        for &(w, b) in &o.blocks {
            let wm = self.masked(w, h, h, &self.masks.hidden);
            let mut next = a.dot(&wm.t());
            next += &view(&self.params, b, 1, h).row(0);
            next.mapv_inplace(f64::tanh);
            layer_inputs.push(std::mem::replace(&mut a, next));
        }
        let w_out = self.masked(o.w_out, 2 * d, h, &self.masks.output);
        let mut out = a.dot(&w_out.t());
        out += &view(&self.params, o.b_out, 1, 2 * d).row(0);
        let shift = out.slice(s![.., ..d]).to_owned();
        let raw = out.slice(s![.., d..]);
        let alpha = raw.mapv(|v| v.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP));
        let active = raw.mapv(|v| f64::from(u8::from(v.abs() < LOG_SCALE_CLAMP)));
        (shift, alpha, active, layer_inputs, a)
    }

    /// Standardized logit coordinates of every row plus the log-det of the
    /// bounded and standardizing maps; rows outside the box get `None`.
    fn to_unbounded(&self, thetas: ArrayView2<f64>) -> (Array2<f64>, Vec<Option<f64>>) {
        let d = self.config.dim_theta;
        let st = &self.standardization;
        let log_sd: f64 = st.theta_sd.iter().map(|s| s.ln()).sum();
        let mut u = Array2::zeros((thetas.nrows(), d));
        let mut y = vec![0.0; d];
        let mut dets = Vec::with_capacity(thetas.nrows());
        for (r, row) in thetas.rows().into_iter().enumerate() {
            let row: Vec<f64> = row.to_vec();
            match self.bounds.forward(&row, &mut y) {
                Some(ld) => {
                    for k in 0..d {
                        u[[r, k]] = (y[k] - st.theta_mean[k]) / st.theta_sd[k];
                    }
                    dets.push(Some(ld - log_sd));
                }
                None => dets.push(None),
            }
        }
        (u, dets)
    }

    fn forward_all(&self, u0: Array2<f64>, ctx: &Array2<f64>) -> (Vec<MadeCache>, Array2<f64>, Array1<f64>) {
        let n = u0.nrows();
        let mut caches = Vec::with_capacity(self.config.n_transforms);
        let mut logdet = Array1::zeros(n);
        let mut u = u0;
        for t in 0..self.config.n_transforms {
            if t > 0 && self.config.permute_between {
                u = reverse_columns(&u);
            }
            let (shift, alpha, active, layer_inputs, last) = self.made_forward(t, &u, ctx);
            let z = (&u - &shift) * &alpha.mapv(|a| (-a).exp());
            logdet -= &alpha.sum_axis(Axis(1));
            caches.push(MadeCache {
                u,
                layer_inputs,
                last,
                alpha,
                alpha_active: active,
                z: z.clone(),
            });
            u = z;
        }
        (caches, u, logdet)
    }

    fn base_log_density(z: &Array2<f64>) -> Array1<f64> {
        let d = z.ncols() as f64;
        z.map_axis(Axis(1), |row| -0.5 * row.dot(&row) - d * LN_SQRT_2PI)
    }

    fn check_dims(&self, thetas: ArrayView2<f64>, xs: ArrayView2<f64>) -> Result<()> {
        if thetas.ncols() != self.config.dim_theta {
            return Err(Error::Shape {
                what: "theta",
                expected: self.config.dim_theta,
                got: thetas.ncols(),
            });
        }
        if xs.ncols() != self.config.dim_x {
            return Err(Error::Shape {
                what: "x",
                expected: self.config.dim_x,
                got: xs.ncols(),
            });
        }
        if xs.nrows() != thetas.nrows() {
            return Err(Error::Shape {
                what: "x rows",
                expected: thetas.nrows(),
                got: xs.nrows(),
            });
        }
        Ok(())
    }

    /// `log q(θ_r | x_r)` for every row; `-∞` outside the open support box.
    pub fn log_prob(&self, thetas: ArrayView2<f64>, xs: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_dims(thetas, xs)?;
        let (u0, dets) = self.to_unbounded(thetas);
        let ctx = self.standardized_context(xs);
        let (_, z, logdet) = self.forward_all(u0, &ctx);
        let base = Self::base_log_density(&z);
        Ok(dets
            .iter()
            .enumerate()
            .map(|(r, d)| match d {
                Some(ld) => base[r] + logdet[r] + ld,
                None => f64::NEG_INFINITY,
            })
            .collect())
    }

    /// `log q(θ_r | x)` for a single conditioning observation.
    pub fn log_prob_given(&self, thetas: ArrayView2<f64>, x: &[f64]) -> Result<Vec<f64>> {
        let xs = broadcast_rows(x, thetas.nrows());
        self.log_prob(thetas, xs.view())
    }

    /// Forward pass returning the base-space points of every row.
    pub fn to_base(&self, thetas: ArrayView2<f64>, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dims(thetas, xs)?;
        let (u0, dets) = self.to_unbounded(thetas);
        if dets.iter().any(Option::is_none) {
            return Err(Error::InvalidParameters("theta outside the support box".into()));
        }
        let ctx = self.standardized_context(xs);
        let (_, z, _) = self.forward_all(u0, &ctx);
        Ok(z)
    }

    /// Log-densities of every row and the weighted gradient
    /// `Σ_r weights[r] ∇_φ log q(θ_r | x_r)` accumulated into `grad`.
    pub fn log_prob_with_grad(
        &self,
        thetas: ArrayView2<f64>,
        xs: ArrayView2<f64>,
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_dims(thetas, xs)?;
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(weights.len(), thetas.nrows());
        let (u0, dets) = self.to_unbounded(thetas);
        if dets.iter().any(Option::is_none) {
            return Err(Error::InvalidParameters("training theta outside the support box".into()));
        }
        let ctx = self.standardized_context(xs);
        let (caches, z, logdet) = self.forward_all(u0, &ctx);
        let base = Self::base_log_density(&z);
        let w = Array1::from(weights.to_vec());
        let wcol = w.view().insert_axis(Axis(1));

        let (d, c, h) = (self.config.dim_theta, self.config.dim_x, self.config.n_hidden);
        // dL/dz of the final layer, L = Σ w log q
        let mut g_z = &z * &wcol * -1.0;
        for t in (0..self.config.n_transforms).rev() {
            let cache = &caches[t];
            let o = &self.offsets[t];
            let inv_scale = cache.alpha.mapv(|a| (-a).exp());
            let g_u_direct = &g_z * &inv_scale;
            let g_shift = -&g_u_direct;
            // z = (u − μ) e^{−α}; logdet = −Σα
            let g_alpha = (-(&g_z * &cache.z) - &wcol) * &cache.alpha_active;
            let mut g_out = Array2::zeros((z.nrows(), 2 * d));
            g_out.slice_mut(s![.., ..d]).assign(&g_shift);
            g_out.slice_mut(s![.., d..]).assign(&g_alpha);

            // output layer
            {
                let mut gw = view_mut(grad, o.w_out, 2 * d, h);
                gw += &(g_out.t().dot(&cache.last) * &self.masks.output);
            }
            add_bias(grad, o.b_out, &g_out);
            let w_out = self.masked(o.w_out, 2 * d, h, &self.masks.output);
            let mut g_a = g_out.dot(&w_out);

            // hidden blocks, last to first
            let mut out_act = cache.last.clone();
            for (bi, &(wb, bb)) in o.blocks.iter().enumerate().rev() {
                let input = &cache.layer_inputs[bi];
                let g_pre = &g_a * &out_act.mapv(|y| 1.0 - y * y);
                {
                    let mut gw = view_mut(grad, wb, h, h);
                    gw += &(g_pre.t().dot(input) * &self.masks.hidden);
                }
                add_bias(grad, bb, &g_pre);
                let wm = self.masked(wb, h, h, &self.masks.hidden);
                g_a = g_pre.dot(&wm);
                out_act = input.clone();
            }
            // input and context layers (no activation)
            {
                let mut gw = view_mut(grad, o.w_in, h, d);
                gw += &(g_a.t().dot(&cache.u) * &self.masks.input);
            }
            add_bias(grad, o.b_in, &g_a);
            if c > 0 {
                let mut gw = view_mut(grad, o.w_ctx, h, c);
                gw += &g_a.t().dot(&ctx);
            }
            add_bias(grad, o.b_ctx, &g_a);
            if t > 0 {
                let w_in = self.masked(o.w_in, h, d, &self.masks.input);
                let g_u = g_u_direct + g_a.dot(&w_in);
                g_z = if self.config.permute_between {
                    reverse_columns(&g_u)
                } else {
                    g_u
                };
            }
        }
        Ok((0..thetas.nrows())
            .map(|r| base[r] + logdet[r] + dets[r].unwrap_or(f64::NEG_INFINITY))
            .collect())
    }

    /// Draw `count` samples conditioned on `x`. Every sample lies strictly
    /// inside the support box.
    pub fn sample(&self, x: &[f64], count: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let d = self.config.dim_theta;
        if x.len() != self.config.dim_x {
            return Err(Error::Shape {
                what: "x",
                expected: self.config.dim_x,
                got: x.len(),
            });
        }
        let z = Array2::from_shape_fn((count, d), |_| rng.sample::<f64, _>(StandardNormal));
        self.from_base(z, x)
    }

    /// Inverse map of base-space points conditioned on `x`.
    pub fn from_base(&self, z: Array2<f64>, x: &[f64]) -> Result<Array2<f64>> {
        let d = self.config.dim_theta;
        let count = z.nrows();
        let xs = broadcast_rows(x, count);
        let ctx = self.standardized_context(xs.view());
        let mut cur = z;
        for t in (0..self.config.n_transforms).rev() {
            let mut u = Array2::zeros((count, d));
            for k in 0..d {
                let (shift, alpha, _, _, _) = self.made_forward(t, &u, &ctx);
                let col = &cur.column(k) * &alpha.column(k).mapv(f64::exp) + &shift.column(k);
                u.column_mut(k).assign(&col);
            }
            cur = if t > 0 && self.config.permute_between {
                reverse_columns(&u)
            } else {
                u
            };
        }
        let st = &self.standardization;
        let mut out = Array2::zeros((count, d));
        let mut y = vec![0.0; d];
        let mut theta = vec![0.0; d];
        for r in 0..count {
            for k in 0..d {
                y[k] = cur[[r, k]] * st.theta_sd[k] + st.theta_mean[k];
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalInstability { step: r });
            }
            self.bounds.inverse(&y, &mut theta);
            out.row_mut(r).assign(&Array1::from(theta.clone()));
        }
        Ok(out)
    }

    // --- serialization ---

    const MAGIC: &'static [u8; 8] = b"CSBIFLOW";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FlowHeader {
            config: self.config.clone(),
            standardization: self.standardization.clone(),
            support: self.bounds.support.clone(),
            n_parameters: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::FlowFormat(m.to_string());
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != Self::MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut v = [0u8; 4];
        bytes.read_exact(&mut v).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(v);
        if version != Self::VERSION {
            return Err(Error::FlowFormat(format!("unsupported version {version}")));
        }
        let mut l = [0u8; 8];
        bytes.read_exact(&mut l).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(l) as usize;
        if bytes.len() < len {
            return Err(bad("truncated header"));
        }
        let header: FlowHeader = serde_json::from_slice(&bytes[..len])?;
        bytes = &bytes[len..];
        let mut flow = Self::new(header.config, header.support)?;
        if header.n_parameters != flow.params.len() || bytes.len() != 8 * flow.params.len() {
            return Err(bad("parameter block does not match the architecture"));
        }
        for (p, chunk) in flow.params.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        flow.standardization = header.standardization;
        Ok(flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct FlowHeader {
    config: FlowConfig,
    standardization: Standardization,
    support: Vec<(f64, f64)>,
    n_parameters: usize,
}

fn add_bias(grad: &mut [f64], off: usize, g: &Array2<f64>) {
    let sums = g.sum_axis(Axis(0));
    Zip::from(&mut grad[off..off + sums.len()]).and(&sums).for_each(|a, b| *a += b);
}

pub fn broadcast_rows(x: &[f64], rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, x.len()), |(_, k)| x[k])
}
