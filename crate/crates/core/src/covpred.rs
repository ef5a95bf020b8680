//! Recurrent covariance predictor.
//!
//! Input: robot position and the five nearest feature positions (18
//! scalars). Output: a flattened 2x2 covariance. Layers are simple ReLU
//! recurrent layers `h_t = relu(W x_t + U h_{t-1} + b)`, then ReLU dense
//! layers, then a linear output layer.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{psd_correct, Covariance2, State2};
use crate::scalar::{lit, to_f64, Real};

pub const INPUT_DIM: usize = 18;
pub const OUTPUT_DIM: usize = 4;
pub const NEAREST_FEATURES: usize = 5;
pub const CHECKPOINT_SCHEMA: &str = "# riskmpc-checkpoint v1";

pub type Vec3<T> = [T; 3];

#[derive(Debug, Error)]
pub enum CovError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer widths. Recurrent layers come first, then dense layers, then the
/// linear output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input: usize,
    pub output: usize,
    pub recurrent: Vec<usize>,
    pub dense: Vec<usize>,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self::uniform(64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    width: usize,
    recurrent: bool,
    relu: bool,
    offset: usize,
}

impl LayerShape {
    fn w(&self) -> usize {
        self.offset
    }
    fn u(&self) -> usize {
        self.offset + self.width * self.fan_in
    }
    fn b(&self) -> usize {
        self.u() + if self.recurrent { self.width * self.width } else { 0 }
    }
    fn end(&self) -> usize {
        self.b() + self.width
    }
}

impl NetSpec {
    /// Five recurrent and two dense layers of the given width.
    pub fn uniform(width: usize) -> Self {
        Self {
            input: INPUT_DIM,
            output: OUTPUT_DIM,
            recurrent: vec![width; 5],
            dense: vec![width; 2],
        }
    }

    pub fn validate(&self) -> Result<(), CovError> {
        if self.input == 0 || self.output == 0 {
            return Err(CovError::Shape("input and output widths must be >= 1".into()));
        }
        if self.recurrent.iter().chain(&self.dense).any(|&w| w == 0) {
            return Err(CovError::Shape("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut out = Vec::new();
        let mut fan_in = self.input;
        let mut offset = 0;
        let kinds = self
            .recurrent
            .iter()
            .map(|&w| (w, true, true))
            .chain(self.dense.iter().map(|&w| (w, false, true)))
            .chain([(self.output, false, false)]);
        for (width, recurrent, relu) in kinds {
            let l = LayerShape {
                fan_in,
                width,
                recurrent,
                relu,
                offset,
            };
            offset = l.end();
            fan_in = width;
            out.push(l);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, |l| l.end())
    }
}

/// Flat parameter vector laid out layer by layer as `W`, `U` (recurrent
/// only), `b`, with row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub spec: NetSpec,
    pub data: Vec<T>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            spec: spec.clone(),
            data: vec![T::zero(); spec.param_count()],
        }
    }

    /// He-uniform hidden weights, Glorot-uniform output weights, recurrent
    /// weights at half the He scale, zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(spec);
        for l in spec.layers() {
            let a = if l.relu {
                (6.0 / l.fan_in as f64).sqrt()
            } else {
                (6.0 / (l.fan_in + l.width) as f64).sqrt()
            };
            for v in &mut p.data[l.w()..l.u()] {
                *v = lit(rng.gen_range(-a..a));
            }
            if l.recurrent {
                let au = 0.5 * (6.0 / l.width as f64).sqrt();
                for v in &mut p.data[l.u()..l.b()] {
                    *v = lit(rng.gen_range(-au..au));
                }
            }
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Hidden state of every recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Hidden<T> {
    pub layers: Vec<Vec<T>>,
}

impl<T: Real> Hidden<T> {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            layers: spec.recurrent.iter().map(|&w| vec![T::zero(); w]).collect(),
        }
    }
}

fn check_shapes<T: Real>(params: &NetParams<T>, h: &Hidden<T>) -> Result<(), CovError> {
    if params.data.len() != params.spec.param_count() {
        return Err(CovError::Shape(format!(
            "expected {} parameters, got {}",
            params.spec.param_count(),
            params.data.len()
        )));
    }
    if h.layers.len() != params.spec.recurrent.len()
        || h.layers.iter().zip(&params.spec.recurrent).any(|(v, &w)| v.len() != w)
    {
        return Err(CovError::Shape("hidden state does not match the spec".into()));
    }
    Ok(())
}

/// `out = W x + b (+ U h)`
fn affine<T: Real>(data: &[T], l: &LayerShape, x: &[T], h: Option<&[T]>, out: &mut [T]) {
    for i in 0..l.width {
        let mut s = data[l.b() + i];
        let row = &data[l.w() + i * l.fan_in..l.w() + (i + 1) * l.fan_in];
        for (w, xi) in row.iter().zip(x) {
            s += *w * *xi;
        }
        if let Some(h) = h {
            let row = &data[l.u() + i * l.width..l.u() + (i + 1) * l.width];
            for (u, hi) in row.iter().zip(h) {
                s += *u * *hi;
            }
        }
        out[i] = s;
    }
}

fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// One recurrent step; updates `h` in place and returns the raw output.
pub fn step<T: Real>(params: &NetParams<T>, x: &[T], h: &mut Hidden<T>) -> Vec<T> {
    let layers = params.spec.layers();
    let mut cur = x.to_vec();
    let mut r = 0;
    for l in &layers {
        let mut out = vec![T::zero(); l.width];
        if l.recurrent {
            affine(&params.data, l, &cur, Some(&h.layers[r]), &mut out);
        } else {
            affine(&params.data, l, &cur, None, &mut out);
        }
        if l.relu {
            out.iter_mut().for_each(|v| *v = relu(*v));
        }
        if l.recurrent {
            h.layers[r].copy_from_slice(&out);
            r += 1;
        }
        cur = out;
    }
    cur
}

/// Runs a sequence from `h0`; returns one raw output per step and the final
/// hidden state.
pub fn forward<T: Real>(
    params: &NetParams<T>,
    inputs: &[Vec<T>],
    h0: &Hidden<T>,
) -> Result<(Vec<Vec<T>>, Hidden<T>), CovError> {
    check_shapes(params, h0)?;
    let mut h = h0.clone();
    let mut outs = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        if x.len() != params.spec.input {
            return Err(CovError::Shape(format!(
                "input {t} has {} values, expected {}",
                x.len(),
                params.spec.input
            )));
        }
        outs.push(step(params, x, &mut h));
    }
    Ok((outs, h))
}

/// A training sequence. When `mask` is set, only steps marked `true`
/// contribute to the loss; the others still advance the hidden state.
#[derive(Debug, Clone)]
pub struct Sequence<T> {
    pub inputs: Vec<Vec<T>>,
    pub targets: Vec<Vec<T>>,
    pub h0: Option<Hidden<T>>,
    pub mask: Option<Vec<bool>>,
}

impl<T: Real> Sequence<T> {
    pub fn new(inputs: Vec<Vec<T>>, targets: Vec<Vec<T>>) -> Self {
        Self {
            inputs,
            targets,
            h0: None,
            mask: None,
        }
    }

    fn scored_at(&self, t: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[t])
    }

    fn scored(&self) -> usize {
        (0..self.inputs.len()).filter(|&t| self.scored_at(t)).count()
    }
}

fn batch_count<T: Real>(params: &NetParams<T>, batch: &[Sequence<T>]) -> Result<usize, CovError> {
    let mut count = 0;
    for s in batch {
        if s.inputs.len() != s.targets.len() {
            return Err(CovError::Shape("inputs and targets differ in length".into()));
        }
        if s.mask.as_ref().is_some_and(|m| m.len() != s.inputs.len()) {
            return Err(CovError::Shape("mask length differs from the sequence length".into()));
        }
        if s.targets.iter().any(|t| t.len() != params.spec.output) {
            return Err(CovError::Shape("target width differs from the output width".into()));
        }
        count += s.scored() * params.spec.output;
    }
    Ok(count)
}

/// Mean squared error over every scored output element of the batch.
pub fn mse<T: Real>(params: &NetParams<T>, batch: &[Sequence<T>]) -> Result<T, CovError> {
    let count = batch_count(params, batch)?;
    if count == 0 {
        return Ok(T::zero());
    }
    let mut sum = T::zero();
    for s in batch {
        let h0 = s.h0.clone().unwrap_or_else(|| Hidden::zeros(&params.spec));
        let (outs, _) = forward(params, &s.inputs, &h0)?;
        for (_, (y, t)) in outs.iter().zip(&s.targets).enumerate().filter(|(i, _)| s.scored_at(*i)) {
            for (a, b) in y.iter().zip(t) {
                sum += (*a - *b) * (*a - *b);
            }
        }
    }
    Ok(sum / T::from_usize(count).unwrap())
}

/// MSE and its exact gradient by backpropagation through time. Gradients do
/// not flow into a supplied initial hidden state.
pub fn loss_and_grad<T: Real>(params: &NetParams<T>, batch: &[Sequence<T>]) -> Result<(T, Vec<T>), CovError> {
    let count = batch_count(params, batch)?;
    let mut grad = vec![T::zero(); params.data.len()];
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let scale = T::one() / T::from_usize(count).unwrap();
    let layers = params.spec.layers();
    let nr = params.spec.recurrent.len();
    let data = &params.data;
    let mut loss = T::zero();

    for s in batch {
        let h0 = s.h0.clone().unwrap_or_else(|| Hidden::zeros(&params.spec));
        check_shapes(params, &h0)?;
        let steps = s.inputs.len();
        // acts[t][l] = output of layer l at step t (post-activation)
        let mut acts: Vec<Vec<Vec<T>>> = Vec::with_capacity(steps);
        let mut h = h0.clone();
        for x in &s.inputs {
            if x.len() != params.spec.input {
                return Err(CovError::Shape("input width".into()));
            }
            let mut per_layer = Vec::with_capacity(layers.len());
            let mut cur = x.clone();
            for (li, l) in layers.iter().enumerate() {
                let mut out = vec![T::zero(); l.width];
                if l.recurrent {
                    affine(data, l, &cur, Some(&h.layers[li]), &mut out);
                } else {
                    affine(data, l, &cur, None, &mut out);
                }
                if l.relu {
                    out.iter_mut().for_each(|v| *v = relu(*v));
                }
                if l.recurrent {
                    h.layers[li].copy_from_slice(&out);
                }
                per_layer.push(out.clone());
                cur = out;
            }
            acts.push(per_layer);
        }

        // gradient w.r.t. h_t of each recurrent layer arriving from step t+1
        let mut dh_next: Vec<Vec<T>> = params.spec.recurrent.iter().map(|&w| vec![T::zero(); w]).collect();
        for t in (0..steps).rev() {
            let mut dcur = vec![T::zero(); params.spec.output];
            if s.scored_at(t) {
                let y = &acts[t][layers.len() - 1];
                for k in 0..params.spec.output {
                    let e = y[k] - s.targets[t][k];
                    loss += e * e;
                    dcur[k] = lit::<T>(2.0) * e * scale;
                }
            }
            for li in (0..layers.len()).rev() {
                let l = &layers[li];
                let out = &acts[t][li];
                let mut da = dcur.clone();
                if l.recurrent {
                    for (d, n) in da.iter_mut().zip(&dh_next[li]) {
                        *d += *n;
                    }
                }
                if l.relu {
                    for (d, o) in da.iter_mut().zip(out) {
                        if !(*o > T::zero()) {
                            *d = T::zero();
                        }
                    }
                }
                let x_in: &[T] = if li == 0 { &s.inputs[t] } else { &acts[t][li - 1] };
                let mut dx = vec![T::zero(); l.fan_in];
                for i in 0..l.width {
                    let g = da[i];
                    if g == T::zero() {
                        continue;
                    }
                    let w0 = l.w() + i * l.fan_in;
                    for j in 0..l.fan_in {
                        grad[w0 + j] += g * x_in[j];
                        dx[j] += g * data[w0 + j];
                    }
                    grad[l.b() + i] += g;
                }
                if l.recurrent {
                    let h_prev: &[T] = if t == 0 { &h0.layers[li] } else { &acts[t - 1][li] };
                    let mut dh = vec![T::zero(); l.width];
                    for i in 0..l.width {
                        let g = da[i];
                        if g == T::zero() {
                            continue;
                        }
                        let u0 = l.u() + i * l.width;
                        for j in 0..l.width {
                            grad[u0 + j] += g * h_prev[j];
                            dh[j] += g * data[u0 + j];
                        }
                    }
                    dh_next[li] = dh;
                }
                dcur = dx;
            }
            debug_assert!(nr <= layers.len());
        }
    }
    Ok((loss * scale, grad))
}

/// Gradient of [`mse`] with respect to every parameter.
pub fn bptt_grad<T: Real>(params: &NetParams<T>, batch: &[Sequence<T>]) -> Result<Vec<T>, CovError> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

/// Affine standardization of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler<T> {
    pub input_mean: Vec<T>,
    pub input_std: Vec<T>,
    pub output_mean: Vec<T>,
    pub output_std: Vec<T>,
}

impl<T: Real> Scaler<T> {
    pub fn identity(spec: &NetSpec) -> Self {
        Self {
            input_mean: vec![T::zero(); spec.input],
            input_std: vec![T::one(); spec.input],
            output_mean: vec![T::zero(); spec.output],
            output_std: vec![T::one(); spec.output],
        }
    }

    /// Per-component mean and standard deviation; constant components keep
    /// unit scale.
    pub fn fit(inputs: &[&[T]], outputs: &[&[T]]) -> Self {
        fn stats<T: Real>(rows: &[&[T]]) -> (Vec<T>, Vec<T>) {
            let dim = rows.first().map_or(0, |r| r.len());
            let n = T::from_usize(rows.len().max(1)).unwrap();
            let mut mean = vec![T::zero(); dim];
            for r in rows {
                for (m, v) in mean.iter_mut().zip(r.iter()) {
                    *m += *v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![T::zero(); dim];
            for r in rows {
                for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                    *s += (*v - *m) * (*v - *m);
                }
            }
            let std = var
                .into_iter()
                .zip(&mean)
                .map(|(s, m)| {
                    let sd = (s / n).sqrt();
                    if sd > lit::<T>(1e-12) * (T::one() + m.abs()) {
                        sd
                    } else {
                        T::one()
                    }
                })
                .collect();
            (mean, std)
        }
        let (input_mean, input_std) = stats(inputs);
        let (output_mean, output_std) = stats(outputs);
        Self {
            input_mean,
            input_std,
            output_mean,
            output_std,
        }
    }

    pub fn input(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_std)
            .map(|((v, m), s)| (*v - *m) / *s)
            .collect()
    }

    pub fn output(&self, y: &[T]) -> Vec<T> {
        y.iter()
            .zip(&self.output_mean)
            .zip(&self.output_std)
            .map(|((v, m), s)| (*v - *m) / *s)
            .collect()
    }

    pub fn output_inverse(&self, y: &[T]) -> Vec<T> {
        y.iter()
            .zip(&self.output_mean)
            .zip(&self.output_std)
            .map(|((v, m), s)| *v * *s + *m)
            .collect()
    }
}

/// Trained network plus its data scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub params: NetParams<T>,
    pub scaler: Scaler<T>,
}

impl<T: Real> Model<T> {
    pub fn spec(&self) -> &NetSpec {
        &self.params.spec
    }

    /// One step in physical units: raw covariance 4-vector.
    pub fn step_raw(&self, input: &[T], h: &mut Hidden<T>) -> Vec<T> {
        let y = step(&self.params, &self.scaler.input(input), h);
        self.scaler.output_inverse(&y)
    }

    /// One step followed by PSD correction.
    pub fn step_cov(&self, input: &[T], h: &mut Hidden<T>) -> Covariance2<T> {
        let y = self.step_raw(input, h);
        psd_correct(&Covariance2::new(y[0], y[1], y[2], y[3]))
    }
}

/// One training record: network input and the flattened target covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord<T> {
    pub input: Vec<T>,
    pub target: [T; 4],
}

/// Builds the 18-value input: robot position, then the five nearest
/// features by 3D distance (ties by list order). Short lists repeat the
/// farthest selected feature; an empty list uses a sentinel `max_range`
/// straight ahead along `heading` at the robot's height.
pub fn build_input<T: Real>(robot: Vec3<T>, heading: T, features: &[Vec3<T>], max_range: T) -> Vec<T> {
    let mut order: Vec<(T, usize)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let d2 = (0..3).map(|k| (f[k] - robot[k]) * (f[k] - robot[k])).sum::<T>();
            (d2, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<Vec3<T>> = order.iter().take(NEAREST_FEATURES).map(|&(_, i)| features[i]).collect();
    if chosen.is_empty() {
        let (s, c) = heading.sin_cos();
        chosen.push([robot[0] + max_range * c, robot[1] + max_range * s, robot[2]]);
    }
    while chosen.len() < NEAREST_FEATURES {
        chosen.push(*chosen.last().unwrap());
    }
    let mut out = Vec::with_capacity(INPUT_DIM);
    out.extend_from_slice(&robot);
    for f in &chosen {
        out.extend_from_slice(f);
    }
    out
}

/// Covariances along a planned horizon.
///
/// Each planned state gets its own input from the supplied feature set and
/// advances a branch copy of `hidden`. The returned hidden state is the one
/// after the first state only, which is what the caller should carry into
/// the next control cycle. Headings for the sentinel feature follow the
/// planned displacement, starting from `heading`.
pub fn predict_horizon<T: Real>(
    model: &Model<T>,
    states: &[State2<T>],
    heading: T,
    z: T,
    features: &[Vec3<T>],
    max_range: T,
    hidden: &Hidden<T>,
) -> (Vec<Covariance2<T>>, Hidden<T>) {
    let mut h = hidden.clone();
    let mut after_first = hidden.clone();
    let mut out = Vec::with_capacity(states.len());
    let mut psi = heading;
    for (k, s) in states.iter().enumerate() {
        if k > 0 {
            let (dx, dy) = (s.x - states[k - 1].x, s.y - states[k - 1].y);
            if dx.hypot(dy) > lit(1e-6) {
                psi = dy.atan2(dx);
            }
        }
        let input = build_input([s.x, s.y, z], psi, features, max_range);
        out.push(model.step_cov(&input, &mut h));
        if k == 0 {
            after_first = h.clone();
        }
    }
    (out, after_first)
}

/// Optimizer and data-handling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    /// L2 penalty coefficient added to the gradient.
    pub weight_decay: f64,
    /// Each training window is moved by a random planar rigid motion:
    /// a rotation about the vertical axis and a shift of up to this many
    /// meters per axis. Targets are rotated to match. Zero disables it.
    pub augment_shift: f64,
    pub augment_rotate: bool,
    /// Truncated-BPTT window length in steps; `None` backpropagates
    /// through whole episodes.
    pub window: Option<usize>,
    /// Episodes are cut into blocks of this many steps; every
    /// `holdout_every`-th block is held out for validation.
    pub holdout_block: usize,
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_norm: 5.0,
            weight_decay: 0.0,
            augment_shift: 10.0,
            augment_rotate: true,
            window: None,
            holdout_block: 10,
            holdout_every: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

/// Losses before training (`epoch` 0) and after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub initial: EpochLoss,
    pub epochs: Vec<EpochLoss>,
}

impl LossHistory {
    pub fn best(&self) -> Option<&EpochLoss> {
        self.epochs
            .iter()
            .min_by(|a, b| a.validation.total_cmp(&b.validation))
    }
}

struct Prepared<T> {
    raw_inputs: Vec<Vec<T>>,
    raw_targets: Vec<[T; 4]>,
    inputs: Vec<Vec<T>>,
    targets: Vec<Vec<T>>,
    held: Vec<bool>,
}

fn evaluate<T: Real>(params: &NetParams<T>, data: &[Prepared<T>]) -> Result<(f64, f64), CovError> {
    let seqs = |held: bool| -> Vec<Sequence<T>> {
        data.iter()
            .map(|ep| Sequence {
                inputs: ep.inputs.clone(),
                targets: ep.targets.clone(),
                h0: None,
                mask: Some(ep.held.iter().map(|&h| h == held).collect()),
            })
            .collect()
    };
    let t = to_f64(mse(params, &seqs(false))?);
    let v = if data.iter().any(|ep| ep.held.contains(&true)) {
        to_f64(mse(params, &seqs(true))?)
    } else {
        f64::NAN
    };
    Ok((t, v))
}

/// Rotation about the vertical axis followed by a planar shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarMotion<T> {
    cos: T,
    sin: T,
    dx: T,
    dy: T,
}

impl<T: Real> PlanarMotion<T> {
    pub fn new(angle: T, dx: T, dy: T) -> Self {
        let (sin, cos) = angle.sin_cos();
        Self { cos, sin, dx, dy }
    }

    /// Moves every `(x, y, z)` triple of an input vector.
    pub fn apply_input(&self, x: &[T]) -> Vec<T> {
        let mut out = x.to_vec();
        for p in out.chunks_exact_mut(3) {
            let (px, py) = (p[0], p[1]);
            p[0] = self.cos * px - self.sin * py + self.dx;
            p[1] = self.sin * px + self.cos * py + self.dy;
        }
        out
    }

    /// `R S R^T` for a flattened covariance.
    pub fn apply_target(&self, y: &[T; 4]) -> [T; 4] {
        let (c, s) = (self.cos, self.sin);
        let r = [c, -s, s, c];
        let rs = [
            r[0] * y[0] + r[1] * y[2],
            r[0] * y[1] + r[1] * y[3],
            r[2] * y[0] + r[3] * y[2],
            r[2] * y[1] + r[3] * y[3],
        ];
        [
            rs[0] * r[0] + rs[1] * r[1],
            rs[0] * r[2] + rs[1] * r[3],
            rs[2] * r[0] + rs[3] * r[1],
            rs[2] * r[2] + rs[3] * r[3],
        ]
    }
}

/// Steps held out for validation: every `every`-th block of `block` steps.
pub fn holdout_mask(len: usize, block: usize, every: usize) -> Vec<bool> {
    (0..len)
        .map(|t| every > 1 && block > 0 && (t / block) % every == every - 1)
        .collect()
}

/// Trains on whole episodes, optionally cut into truncated-BPTT windows
/// whose hidden state is carried across window boundaries. The hidden
/// state resets only at episode starts.
/// Held-out blocks advance the hidden state but never contribute to a
/// gradient. Episodes are visited in a seeded random order each epoch.
pub fn train<T: Real>(
    episodes: &[Vec<TrainRecord<T>>],
    spec: &NetSpec,
    cfg: &TrainConfig,
) -> Result<(Model<T>, LossHistory), CovError> {
    spec.validate()?;
    if spec.input != INPUT_DIM || spec.output != OUTPUT_DIM {
        return Err(CovError::Shape("covariance nets map 18 inputs to 4 outputs".into()));
    }
    let episodes: Vec<&Vec<TrainRecord<T>>> = episodes.iter().filter(|e| !e.is_empty()).collect();
    if episodes.is_empty() {
        return Err(CovError::EmptyDataset);
    }
    if cfg.window == Some(0) {
        return Err(CovError::Shape("window must be >= 1".into()));
    }
    let masks: Vec<Vec<bool>> = episodes
        .iter()
        .map(|e| holdout_mask(e.len(), cfg.holdout_block, cfg.holdout_every))
        .collect();
    let train_rows = || {
        episodes
            .iter()
            .zip(&masks)
            .flat_map(|(e, m)| e.iter().zip(m).filter(|(_, &h)| !h).map(|(r, _)| r))
    };
    let train_in: Vec<&[T]> = train_rows().map(|r| r.input.as_slice()).collect();
    let train_out: Vec<&[T]> = train_rows().map(|r| &r.target[..]).collect();
    if train_in.is_empty() {
        return Err(CovError::EmptyDataset);
    }
    let scaler = Scaler::fit(&train_in, &train_out);
    let data: Vec<Prepared<T>> = episodes
        .iter()
        .zip(masks)
        .map(|(e, held)| Prepared {
            raw_inputs: e.iter().map(|r| r.input.clone()).collect(),
            raw_targets: e.iter().map(|r| r.target).collect(),
            inputs: e.iter().map(|r| scaler.input(&r.input)).collect(),
            targets: e.iter().map(|r| scaler.output(&r.target)).collect(),
            held,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetParams::init(spec, rng.gen());
    let mut velocity = vec![T::zero(); params.data.len()];
    let lr: T = lit(cfg.learning_rate);
    let mom: T = lit(cfg.momentum);
    let clip: T = lit(cfg.clip_norm);
    let decay: T = lit(cfg.weight_decay);

    let (t0, v0) = evaluate(&params, &data)?;
    let initial = EpochLoss {
        epoch: 0,
        train: t0,
        validation: v0,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for &e in &order {
            let ep = &data[e];
            let mut h = Hidden::zeros(spec);
            let mut start = 0;
            while start < ep.inputs.len() {
                let end = cfg.window.map_or(ep.inputs.len(), |w| (start + w).min(ep.inputs.len()));
                let mask: Vec<bool> = ep.held[start..end].iter().map(|h| !h).collect();
                let augment = cfg.augment_shift > 0.0 || cfg.augment_rotate;
                let (inputs, targets) = if augment {
                    let angle = if cfg.augment_rotate {
                        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
                    } else {
                        0.0
                    };
                    let (sx, sy) = if cfg.augment_shift > 0.0 {
                        let a = cfg.augment_shift;
                        (rng.gen_range(-a..a), rng.gen_range(-a..a))
                    } else {
                        (0.0, 0.0)
                    };
                    let motion = PlanarMotion::new(lit(angle), lit(sx), lit(sy));
                    (
                        ep.raw_inputs[start..end]
                            .iter()
                            .map(|x| scaler.input(&motion.apply_input(x)))
                            .collect(),
                        ep.raw_targets[start..end]
                            .iter()
                            .map(|y| scaler.output(&motion.apply_target(y)))
                            .collect(),
                    )
                } else {
                    (ep.inputs[start..end].to_vec(), ep.targets[start..end].to_vec())
                };
                let seq = Sequence {
                    inputs,
                    targets,
                    h0: Some(h.clone()),
                    mask: Some(mask),
                };
                if !seq.mask.as_ref().unwrap().contains(&true) {
                    h = forward(&params, &seq.inputs, &h)?.1;
                    start = end;
                    continue;
                }
                let (loss, mut grad) = loss_and_grad(&params, std::slice::from_ref(&seq))?;
                if !loss.is_finite() {
                    return Err(CovError::Diverged { epoch });
                }
                if decay > T::zero() {
                    for (g, p) in grad.iter_mut().zip(&params.data) {
                        *g += decay * *p;
                    }
                }
                let norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
                if norm > clip {
                    let f = clip / norm;
                    grad.iter_mut().for_each(|g| *g *= f);
                }
                for ((p, v), g) in params.data.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                    *v = mom * *v - lr * *g;
                    *p += *v;
                }
                // carry the hidden state to the next window with the updated weights
                let (_, h_end) = forward(&params, &seq.inputs, &h)?;
                h = h_end;
                start = end;
            }
        }
        let (t, v) = evaluate(&params, &data)?;
        if !t.is_finite() || !params.is_finite() {
            return Err(CovError::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: train {t:.6e} validation {v:.6e}");
        history.push(EpochLoss {
            epoch,
            train: t,
            validation: v,
        });
    }
    Ok((
        Model { params, scaler },
        LossHistory {
            initial,
            epochs: history,
        },
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointBody {
    spec: NetSpec,
    params: Vec<f64>,
    scaler: Scaler<f64>,
}

/// Writes a checkpoint: a schema line followed by one JSON document.
pub fn save_checkpoint<T: Real, W: Write>(model: &Model<T>, mut out: W) -> Result<(), CovError> {
    let conv = |v: &[T]| v.iter().map(|x| to_f64(*x)).collect::<Vec<f64>>();
    let body = CheckpointBody {
        spec: model.params.spec.clone(),
        params: conv(&model.params.data),
        scaler: Scaler {
            input_mean: conv(&model.scaler.input_mean),
            input_std: conv(&model.scaler.input_std),
            output_mean: conv(&model.scaler.output_mean),
            output_std: conv(&model.scaler.output_std),
        },
    };
    writeln!(out, "{CHECKPOINT_SCHEMA}")?;
    serde_json::to_writer(&mut out, &body).map_err(|e| CovError::Checkpoint(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

pub fn load_checkpoint<T: Real, R: BufRead>(mut reader: R) -> Result<Model<T>, CovError> {
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != CHECKPOINT_SCHEMA {
        return Err(CovError::Checkpoint(format!(
            "unsupported schema line `{}`",
            first.trim_end()
        )));
    }
    let body: CheckpointBody =
        serde_json::from_reader(reader).map_err(|e| CovError::Checkpoint(e.to_string()))?;
    body.spec.validate()?;
    if body.params.len() != body.spec.param_count() {
        return Err(CovError::Checkpoint(format!(
            "expected {} parameters, found {}",
            body.spec.param_count(),
            body.params.len()
        )));
    }
    let s = &body.scaler;
    if s.input_mean.len() != body.spec.input
        || s.input_std.len() != body.spec.input
        || s.output_mean.len() != body.spec.output
        || s.output_std.len() != body.spec.output
    {
        return Err(CovError::Checkpoint("scaler size does not match the spec".into()));
    }
    let conv = |v: &[f64]| v.iter().map(|x| lit::<T>(*x)).collect::<Vec<T>>();
    Ok(Model {
        params: NetParams {
            spec: body.spec.clone(),
            data: conv(&body.params),
        },
        scaler: Scaler {
            input_mean: conv(&s.input_mean),
            input_std: conv(&s.input_std),
            output_mean: conv(&s.output_mean),
            output_std: conv(&s.output_std),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_spec() -> NetSpec {
        NetSpec {
            input: INPUT_DIM,
            output: OUTPUT_DIM,
            recurrent: vec![3; 5],
            dense: vec![3; 2],
        }
    }

    fn random_params(spec: &NetSpec, seed: u64, scale: f64) -> NetParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetParams::zeros(spec);
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        p
    }

    fn random_seq(len: usize, seed: u64) -> Sequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequence::new(
            (0..len).map(|_| (0..INPUT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            (0..len).map(|_| (0..OUTPUT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        )
    }

    /// Direct transcription of the layer equations, independent of the flat
    /// layout helpers.
    fn naive_forward(p: &NetParams<f64>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let spec = &p.spec;
        let mut off = 0;
        let mut take = |n: usize| {
            let s = p.data[off..off + n].to_vec();
            off += n;
            s
        };
        let mut rec = Vec::new();
        let mut fan = spec.input;
        for &w in &spec.recurrent {
            rec.push((take(w * fan), take(w * w), take(w), fan, w));
            fan = w;
        }
        let mut dense = Vec::new();
        for &w in spec.dense.iter().chain([&spec.output]) {
            dense.push((take(w * fan), take(w), fan, w));
            fan = w;
        }
        let mut hs: Vec<Vec<f64>> = spec.recurrent.iter().map(|&w| vec![0.0; w]).collect();
        let mut outs = Vec::new();
        for x in xs {
            let mut cur = x.clone();
            for (l, (w, u, b, fan, width)) in rec.iter().enumerate() {
                let mut next = vec![0.0; *width];
                for i in 0..*width {
                    let mut s = b[i];
                    for j in 0..*fan {
                        s += w[i * fan + j] * cur[j];
                    }
                    for j in 0..*width {
                        s += u[i * width + j] * hs[l][j];
                    }
                    next[i] = s.max(0.0);
                }
                hs[l] = next.clone();
                cur = next;
            }
            let nd = dense.len();
            for (k, (w, b, fan, width)) in dense.iter().enumerate() {
                let mut next = vec![0.0; *width];
                for i in 0..*width {
                    let mut s = b[i];
                    for j in 0..*fan {
                        s += w[i * fan + j] * cur[j];
                    }
                    next[i] = if k + 1 < nd { s.max(0.0) } else { s };
                }
                cur = next;
            }
            outs.push(cur);
        }
        outs
    }

    #[test]
    fn parameter_count() {
        let s = small_spec();
        let expect = (18 * 3 + 9 + 3) + 4 * (9 + 9 + 3) + 2 * (9 + 3) + (12 + 4);
        assert_eq!(s.param_count(), expect);
        assert!(NetSpec::default().param_count() > 40_000);
    }

    #[test]
    fn zero_params_zero_output() {
        let spec = NetSpec::default();
        let p = NetParams::<f64>::zeros(&spec);
        let seq = random_seq(4, 1);
        let (outs, _) = forward(&p, &seq.inputs, &Hidden::zeros(&spec)).unwrap();
        assert!(outs.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_linear_spec_selects_inputs() {
        let spec = NetSpec {
            input: INPUT_DIM,
            output: OUTPUT_DIM,
            recurrent: vec![],
            dense: vec![],
        };
        let mut p = NetParams::<f64>::zeros(&spec);
        // output k copies input 3 + k
        for k in 0..4 {
            p.data[k * INPUT_DIM + 3 + k] = 1.0;
        }
        let seq = random_seq(3, 2);
        let (outs, _) = forward(&p, &seq.inputs, &Hidden::zeros(&spec)).unwrap();
        for (o, x) in outs.iter().zip(&seq.inputs) {
            assert_eq!(o.as_slice(), &x[3..7]);
        }
    }

    #[test]
    fn matches_naive_recurrence() {
        let spec = NetSpec {
            input: INPUT_DIM,
            output: OUTPUT_DIM,
            recurrent: vec![6, 5, 4, 5, 6],
            dense: vec![7, 3],
        };
        let p = random_params(&spec, 11, 0.5);
        let seq = random_seq(3, 3);
        let (outs, _) = forward(&p, &seq.inputs, &Hidden::zeros(&spec)).unwrap();
        let oracle = naive_forward(&p, &seq.inputs);
        for (a, b) in outs.iter().flatten().zip(oracle.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let spec = small_spec();
        let p = NetParams::<f64>::zeros(&spec);
        assert!(forward(&p, &[vec![0.0; 5]], &Hidden::zeros(&spec)).is_err());
        let bad_h = Hidden { layers: vec![vec![0.0; 2]] };
        assert!(forward(&p, &[vec![0.0; 18]], &bad_h).is_err());
        assert!(NetSpec { recurrent: vec![0], ..small_spec() }.validate().is_err());
    }

    fn near_kink(p: &NetParams<f64>, seq: &Sequence<f64>) -> bool {
        // recompute pre-activations through the public step API by probing
        // each layer with the flat layout
        let layers = p.spec.layers();
        let mut h = Hidden::zeros(&p.spec);
        for x in &seq.inputs {
            let mut cur = x.clone();
            for (li, l) in layers.iter().enumerate() {
                let mut out = vec![0.0; l.width];
                if l.recurrent {
                    affine(&p.data, l, &cur, Some(&h.layers[li]), &mut out);
                } else {
                    affine(&p.data, l, &cur, None, &mut out);
                }
                if l.relu && out.iter().any(|v| v.abs() < 1e-5) {
                    return true;
                }
                if l.relu {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                if l.recurrent {
                    h.layers[li].copy_from_slice(&out);
                }
                cur = out;
            }
        }
        false
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = small_spec();
        let mut checked = 0;
        let mut seed = 0;
        while checked < 5 {
            seed += 1;
            let p = random_params(&spec, seed, 0.6);
            let batch = vec![random_seq(4, seed * 31), random_seq(3, seed * 37)];
            if batch.iter().any(|s| near_kink(&p, s)) {
                continue;
            }
            let g = bptt_grad(&p, &batch).unwrap();
            let h = 1e-6;
            for i in 0..p.data.len() {
                let mut plus = p.clone();
                plus.data[i] += h;
                let mut minus = p.clone();
                minus.data[i] -= h;
                let fd = (mse(&plus, &batch).unwrap() - mse(&minus, &batch).unwrap()) / (2.0 * h);
                let err = (fd - g[i]).abs();
                assert!(err <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-9, "param {i}: {} vs {fd}", g[i]);
            }
            checked += 1;
        }
    }

    #[test]
    fn zero_error_zero_gradient() {
        let spec = small_spec();
        let p = random_params(&spec, 5, 0.5);
        let mut seq = random_seq(5, 6);
        let (outs, _) = forward(&p, &seq.inputs, &Hidden::zeros(&spec)).unwrap();
        seq.targets = outs;
        let g = bptt_grad(&p, &[seq]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_linear_in_residual() {
        let spec = small_spec();
        let p = random_params(&spec, 9, 0.5);
        let seq = random_seq(4, 10);
        let (outs, _) = forward(&p, &seq.inputs, &Hidden::zeros(&spec)).unwrap();
        let mut doubled = seq.clone();
        for (t, o) in doubled.targets.iter_mut().zip(&outs) {
            for (tv, ov) in t.iter_mut().zip(o) {
                *tv = ov - 2.0 * (ov - *tv);
            }
        }
        let g1 = bptt_grad(&p, &[seq]).unwrap();
        let g2 = bptt_grad(&p, &[doubled]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn masked_steps_only_warm_up() {
        let spec = small_spec();
        let p = random_params(&spec, 3, 0.5);
        let full = random_seq(6, 4);
        let mut tail = full.clone();
        tail.mask = Some((0..6).map(|t| t >= 4).collect());
        let (outs, _) = forward(&p, &full.inputs, &Hidden::zeros(&spec)).unwrap();
        let manual: f64 = outs[4..]
            .iter()
            .zip(&full.targets[4..])
            .flat_map(|(o, t)| o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
            .sum::<f64>()
            / 8.0;
        assert!((mse(&p, &[tail]).unwrap() - manual).abs() < 1e-14);
    }

    #[test]
    fn learns_a_constant() {
        let input: Vec<f64> = (0..INPUT_DIM).map(|i| 0.25 * i as f64 - 1.0).collect();
        let episode: Vec<TrainRecord<f64>> = (0..120)
            .map(|_| TrainRecord {
                input: input.clone(),
                target: [0.02, 0.0, 0.0, 0.03],
            })
            .collect();
        let spec = NetSpec::uniform(8);
        let cfg = TrainConfig {
            augment_shift: 0.0,
            augment_rotate: false,
            ..TrainConfig::default()
        };
        let (model, hist) = train(&[episode.clone()], &spec, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 100);
        assert!(hist.epochs.last().unwrap().train <= 1e-6, "{:?}", hist.epochs.last());
        let mut h = Hidden::zeros(&spec);
        let c = model.step_cov(&episode[0].input, &mut h);
        assert!((c.sxx - 0.02).abs() < 1e-3 && (c.syy - 0.03).abs() < 1e-3);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let episode: Vec<TrainRecord<f64>> = (0..60)
            .map(|i| TrainRecord {
                input: (0..INPUT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: [0.01 * (i % 7) as f64, 0.0, 0.0, 0.02],
            })
            .collect();
        let spec = NetSpec::uniform(6);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&[episode.clone()], &spec, &cfg).unwrap();
        let (b, hb) = train(&[episode], &spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn empty_dataset_rejected() {
        let r = train::<f64>(&[], &NetSpec::uniform(4), &TrainConfig::default());
        assert!(matches!(r, Err(CovError::EmptyDataset)));
    }

    #[test]
    fn input_selection_and_padding() {
        let robot = [0.0, 0.0, 0.5];
        let feats = [[3.0, 0.0, 0.5], [1.0, 0.0, 0.5], [2.0, 0.0, 0.5]];
        let x = build_input(robot, 0.0, &feats, 5.0);
        assert_eq!(x.len(), INPUT_DIM);
        assert_eq!(&x[3..6], &[1.0, 0.0, 0.5]);
        assert_eq!(&x[6..9], &[2.0, 0.0, 0.5]);
        assert_eq!(&x[9..12], &[3.0, 0.0, 0.5]);
        assert_eq!(&x[12..15], &[3.0, 0.0, 0.5]);
        assert_eq!(&x[15..18], &[3.0, 0.0, 0.5]);
        let s = build_input(robot, std::f64::consts::FRAC_PI_2, &[], 5.0);
        for k in 0..5 {
            assert!((s[3 + 3 * k] - 0.0).abs() < 1e-12 && (s[4 + 3 * k] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffled_features_same_prediction() {
        let spec = NetSpec::uniform(8);
        let model = Model {
            params: NetParams::init(&spec, 3),
            scaler: Scaler::identity(&spec),
        };
        let feats: Vec<Vec3<f64>> = (0..9).map(|i| [i as f64 * 0.7 - 2.0, (i * i % 5) as f64 - 2.0, 0.3]).collect();
        let mut shuffled = feats.clone();
        shuffled.reverse();
        shuffled.swap(1, 4);
        let states: Vec<State2<f64>> = (0..6).map(|k| State2::new(0.3 * k as f64, 0.1)).collect();
        let h = Hidden::zeros(&spec);
        let (a, ha) = predict_horizon(&model, &states, 0.0, 0.5, &feats, 5.0, &h);
        let (b, hb) = predict_horizon(&model, &states, 0.0, 0.5, &shuffled, 5.0, &h);
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        for c in &a {
            assert_eq!(c.sxy, 0.0);
            assert!(c.sxx >= 0.0 && c.syy >= 0.0);
        }
    }

    #[test]
    fn horizon_carries_one_step() {
        let spec = NetSpec::uniform(5);
        let model = Model {
            params: NetParams::init(&spec, 8),
            scaler: Scaler::identity(&spec),
        };
        let states: Vec<State2<f64>> = (0..4).map(|k| State2::new(k as f64, 0.0)).collect();
        let h = Hidden::zeros(&spec);
        let (_, carried) = predict_horizon(&model, &states, 0.0, 0.5, &[], 5.0, &h);
        let mut manual = h.clone();
        model.step_cov(&build_input([0.0, 0.0, 0.5], 0.0, &[], 5.0), &mut manual);
        assert_eq!(carried, manual);
        // zero network -> zero covariance
        let zero = Model {
            params: NetParams::zeros(&spec),
            scaler: Scaler::identity(&spec),
        };
        let (cov, _) = predict_horizon(&zero, &states, 0.0, 0.5, &[[1.0, 1.0, 0.0]], 5.0, &h);
        assert!(cov.iter().all(|c| *c == Covariance2::zero()));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let spec = NetSpec::uniform(4);
        let model = Model {
            params: NetParams::<f64>::init(&spec, 5),
            scaler: Scaler {
                input_mean: (0..18).map(|i| i as f64 * 0.1).collect(),
                input_std: vec![1.5; 18],
                output_mean: vec![0.01, 0.0, 0.0, 0.02],
                output_std: vec![0.003, 1.0, 1.0, 0.004],
            },
        };
        let mut buf = Vec::new();
        save_checkpoint(&model, &mut buf).unwrap();
        assert!(buf.starts_with(CHECKPOINT_SCHEMA.as_bytes()));
        let back: Model<f64> = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        let mut bad = buf.clone();
        bad[2] = b'X';
        assert!(load_checkpoint::<f64, _>(bad.as_slice()).is_err());
    }
}
