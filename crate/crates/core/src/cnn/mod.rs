//! A small convolutional network over the covariate grids.
//!
//! Two stages of 3×3 same-padded convolution, ReLU and max pooling feed a
//! dense layer with one output per fine-grid location. Pooling uses ceil
//! mode, so a partial window at the edge pools whatever it covers. Inputs
//! are `(sample, channel, lat, lon)` arrays with one channel per covariate
//! variable and level.

mod asd;
mod train;

use ndarray::{Array2, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use asd::{cnn_asd_fit, cnn_asd_predict, stack_inputs, ChannelNorm, CnnAsdModel};
pub use train::{loss_and_grad, train, Loss, TrainResult, TrainSettings};

/// Output activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Linear,
    Sigmoid,
}

/// Sigmoid outputs are kept this far inside (0, 1).
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// odd square kernel size of both convolutions
    pub kernel: usize,
    pub filters1: usize,
    pub pool1: usize,
    pub filters2: usize,
    pub pool2: usize,
    pub outputs: usize,
    /// drop probability on the dense layer's input
    pub dropout: f64,
    pub head: Head,
}

impl CnnSpec {
    /// The reference architecture for a given input and output size.
    pub fn new(height: usize, width: usize, channels: usize, outputs: usize, head: Head) -> Self {
        CnnSpec {
            height,
            width,
            channels,
            kernel: 3,
            filters1: 8,
            pool1: 2,
            filters2: 2,
            pool2: 3,
            outputs,
            dropout: 0.5,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.height,
            self.width,
            self.channels,
            self.kernel,
            self.filters1,
            self.pool1,
            self.filters2,
            self.pool2,
            self.outputs,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("CNN sizes must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Spatial size after the first and second pooling stages.
    pub fn stage_dims(&self) -> [(usize, usize); 2] {
        let s1 = (self.height.div_ceil(self.pool1), self.width.div_ceil(self.pool1));
        let s2 = (s1.0.div_ceil(self.pool2), s1.1.div_ceil(self.pool2));
        [s1, s2]
    }

    /// Length of the flattened input to the dense layer.
    pub fn flat_len(&self) -> usize {
        let (h, w) = self.stage_dims()[1];
        self.filters2 * h * w
    }

    fn check_batch(&self, batch: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = batch.dim();
        if (c, h, w) != (self.channels, self.height, self.width) {
            return Err(Error::Dimension(format!(
                "batch is {c}x{h}x{w}, network expects {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Network parameters, also used to hold gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnParams {
    /// `[filter][channel][row][col]`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `[output][flat input]`
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl CnnParams {
    pub const NAMES: [&'static str; 6] = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b"];

    pub fn zeros(spec: &CnnSpec) -> Self {
        let k2 = spec.kernel * spec.kernel;
        CnnParams {
            conv1_w: vec![0.0; spec.filters1 * spec.channels * k2],
            conv1_b: vec![0.0; spec.filters1],
            conv2_w: vec![0.0; spec.filters2 * spec.filters1 * k2],
            conv2_b: vec![0.0; spec.filters2],
            dense_w: vec![0.0; spec.outputs * spec.flat_len()],
            dense_b: vec![0.0; spec.outputs],
        }
    }

    /// He-scaled normal weights, zero biases.
    pub fn init(spec: &CnnSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = CnnParams::zeros(spec);
        let k2 = (spec.kernel * spec.kernel) as f64;
        let fans = [
            spec.channels as f64 * k2,
            spec.filters1 as f64 * k2,
            spec.flat_len() as f64,
        ];
        for (w, fan) in [&mut p.conv1_w, &mut p.conv2_w, &mut p.dense_w].into_iter().zip(fans) {
            let sd = (2.0 / fan).sqrt();
            for v in w.iter_mut() {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    pub fn tensors(&self) -> [&Vec<f64>; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.dense_w,
            &self.dense_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &CnnParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn check(&self, spec: &CnnSpec) -> Result<()> {
        let want = CnnParams::zeros(spec);
        for ((name, a), b) in CnnParams::NAMES.iter().zip(self.tensors()).zip(want.tensors()) {
            if a.len() != b.len() {
                return Err(Error::Dimension(format!(
                    "{name} has {} values, expected {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Forward-pass mode. Training draws a dropout mask from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training { seed: u64 },
}

#[derive(Debug, Clone)]
struct SampleCache {
    input: Vec<f64>,
    z1: Vec<f64>,
    arg1: Vec<usize>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    arg2: Vec<usize>,
    /// flattened, masked dense input
    h: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Intermediate values of a forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    outputs: Array2<f64>,
    samples: Vec<SampleCache>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &Array2<f64> {
        &self.outputs
    }

    /// Hash of the ReLU signs and pooling argmaxes.
    fn pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for s in &self.samples {
            s.z1.iter().chain(&s.z2).for_each(|z| mix(u64::from(*z > 0.0)));
            s.arg1.iter().chain(&s.arg2).for_each(|a| mix(*a as u64));
        }
        h
    }
}

/// Output rows `i` (or columns) whose tap at offset `d` lands inside `0..n`.
fn tap_range(n: usize, d: usize, pad: usize) -> std::ops::Range<usize> {
    let start = pad.saturating_sub(d);
    start..(n + pad).saturating_sub(d).min(n).max(start)
}

fn conv_same(input: &[f64], c_in: usize, h: usize, w: usize, weights: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
    let c_out = bias.len();
    let pad = k / 2;
    let mut out = vec![0.0; c_out * h * w];
    for (f, plane) in out.chunks_exact_mut(h * w).enumerate() {
        plane.fill(bias[f]);
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let wv = weights[((f * c_in + c) * k + di) * k + dj];
                    let cols = tap_range(w, dj, pad);
                    for i in tap_range(h, di, pad) {
                        let si = (i + di - pad) * w + cols.start + dj - pad;
                        let dst = &mut plane[i * w + cols.start..i * w + cols.end];
                        for (o, x) in dst.iter_mut().zip(&src[si..si + cols.len()]) {
                            *o += wv * x;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_same_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    k: usize,
    dz: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let pad = k / 2;
    for (f, plane) in dz.chunks_exact(h * w).enumerate() {
        gb[f] += plane.iter().sum::<f64>();
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let wi = ((f * c_in + c) * k + di) * k + dj;
                    let cols = tap_range(w, dj, pad);
                    let mut acc = 0.0;
                    for i in tap_range(h, di, pad) {
                        let si = (i + di - pad) * w + cols.start + dj - pad;
                        let g = &plane[i * w + cols.start..i * w + cols.end];
                        acc += g.iter().zip(&src[si..si + cols.len()]).map(|(g, x)| g * x).sum::<f64>();
                        if let Some(d) = dinput.as_deref_mut() {
                            let wv = weights[wi];
                            let dst = &mut d[c * h * w + si..c * h * w + si + cols.len()];
                            for (o, g) in dst.iter_mut().zip(g) {
                                *o += wv * g;
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
}

/// Ceil-mode max pooling with window = stride = `p`; returns the pooled
/// values and the input index of each maximum (first on ties).
fn max_pool(input: &[f64], c: usize, h: usize, w: usize, p: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(p), w.div_ceil(p));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for i in oi * p..((oi + 1) * p).min(h) {
                    for j in oj * p..((oj + 1) * p).min(w) {
                        let idx = (ch * h + i) * w + j;
                        if input[idx] > best {
                            best = input[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    (out, arg)
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn activate(head: Head, z: f64) -> f64 {
    match head {
        Head::Linear => z,
        Head::Sigmoid => (1.0 / (1.0 + (-z).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS),
    }
}

fn sample_forward(
    spec: &CnnSpec,
    p: &CnnParams,
    x: ArrayView3<'_, f64>,
    mask: Option<Vec<f64>>,
) -> (Vec<f64>, SampleCache) {
    let (h, w) = (spec.height, spec.width);
    let [(h1, w1), _] = spec.stage_dims();
    let input: Vec<f64> = x.iter().copied().collect();
    let z1 = conv_same(&input, spec.channels, h, w, &p.conv1_w, &p.conv1_b, spec.kernel);
    let (p1, arg1) = max_pool(&relu(&z1), spec.filters1, h, w, spec.pool1);
    let z2 = conv_same(&p1, spec.filters1, h1, w1, &p.conv2_w, &p.conv2_b, spec.kernel);
    let (mut hflat, arg2) = max_pool(&relu(&z2), spec.filters2, h1, w1, spec.pool2);
    if let Some(m) = &mask {
        for (v, s) in hflat.iter_mut().zip(m) {
            *v *= s;
        }
    }
    let n = hflat.len();
    let logits: Vec<f64> = (0..spec.outputs)
        .map(|o| {
            p.dense_b[o]
                + p.dense_w[o * n..(o + 1) * n]
                    .iter()
                    .zip(&hflat)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    let cache = SampleCache {
        input,
        z1,
        arg1,
        p1,
        z2,
        arg2,
        h: hflat,
        mask,
    };
    (logits, cache)
}

fn dropout_masks(spec: &CnnSpec, n: usize, mode: Mode) -> Vec<Option<Vec<f64>>> {
    match mode {
        Mode::Training { seed } if spec.dropout > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 / (1.0 - spec.dropout);
            (0..n)
                .map(|_| {
                    Some(
                        (0..spec.flat_len())
                            .map(|_| if rng.random::<f64>() < spec.dropout { 0.0 } else { keep })
                            .collect(),
                    )
                })
                .collect()
        }
        _ => vec![None; n],
    }
}

/// Runs the network on a batch; returns the activated outputs
/// (`samples × outputs`) and the cache needed for [`backward`].
pub fn forward(
    spec: &CnnSpec,
    params: &CnnParams,
    batch: &Array4<f64>,
    mode: Mode,
) -> Result<(Array2<f64>, ForwardCache)> {
    spec.validate()?;
    params.check(spec)?;
    spec.check_batch(batch)?;
    let n = batch.dim().0;
    let masks = dropout_masks(spec, n, mode);
    let results: Vec<(Vec<f64>, SampleCache)> = masks
        .into_par_iter()
        .enumerate()
        .map(|(s, m)| sample_forward(spec, params, batch.index_axis(ndarray::Axis(0), s), m))
        .collect();
    let mut outputs = Array2::zeros((n, spec.outputs));
    let mut samples = Vec::with_capacity(n);
    for (s, (logits, cache)) in results.into_iter().enumerate() {
        for (o, z) in logits.into_iter().enumerate() {
            outputs[[s, o]] = activate(spec.head, z);
        }
        samples.push(cache);
    }
    let cache = ForwardCache {
        fingerprint: params.fingerprint(),
        outputs: outputs.clone(),
        samples,
    };
    Ok((outputs, cache))
}

/// Adds one sample's parameter gradients into `g`.
fn sample_backward(spec: &CnnSpec, p: &CnnParams, c: &SampleCache, dlogit: &[f64], g: &mut CnnParams) {
    let n = c.h.len();
    let mut dh = vec![0.0; n];
    for (o, &d) in dlogit.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g.dense_b[o] += d;
        let row = &p.dense_w[o * n..(o + 1) * n];
        for i in 0..n {
            g.dense_w[o * n + i] += d * c.h[i];
            dh[i] += d * row[i];
        }
    }
    if let Some(m) = &c.mask {
        for (v, s) in dh.iter_mut().zip(m) {
            *v *= s;
        }
    }
    let (h, w) = (spec.height, spec.width);
    let [(h1, w1), _] = spec.stage_dims();
    let mut dz2 = vec![0.0; c.z2.len()];
    for (d, &at) in dh.iter().zip(&c.arg2) {
        if c.z2[at] > 0.0 {
            dz2[at] += d;
        }
    }
    let mut dp1 = vec![0.0; c.p1.len()];
    conv_same_backward(
        &c.p1,
        spec.filters1,
        h1,
        w1,
        &p.conv2_w,
        spec.kernel,
        &dz2,
        &mut g.conv2_w,
        &mut g.conv2_b,
        Some(&mut dp1),
    );
    let mut dz1 = vec![0.0; c.z1.len()];
    for (d, &at) in dp1.iter().zip(&c.arg1) {
        if c.z1[at] > 0.0 {
            dz1[at] += d;
        }
    }
    conv_same_backward(
        &c.input,
        spec.channels,
        h,
        w,
        &p.conv1_w,
        spec.kernel,
        &dz1,
        &mut g.conv1_w,
        &mut g.conv1_b,
        None,
    );
}

/// Parameter gradients for a gradient with respect to the outputs, summed
/// over the batch.
///
/// For a sigmoid head the chain rule through the activation is applied
/// here; [`backward_logits`] skips it.
pub fn backward(
    spec: &CnnSpec,
    params: &CnnParams,
    cache: &ForwardCache,
    grad_output: &Array2<f64>,
) -> Result<CnnParams> {
    let mut dz = grad_output.clone();
    if spec.head == Head::Sigmoid {
        dz.zip_mut_with(&cache.outputs, |d, y| *d *= y * (1.0 - y));
    }
    backward_logits(spec, params, cache, &dz)
}

/// Samples per parallel gradient accumulator.
const GRAD_CHUNK: usize = 16;

/// Parameter gradients for a gradient with respect to the pre-activation
/// outputs, summed over the batch.
pub fn backward_logits(
    spec: &CnnSpec,
    params: &CnnParams,
    cache: &ForwardCache,
    grad_logits: &Array2<f64>,
) -> Result<CnnParams> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::InvalidInput(
            "forward cache was computed with different parameters".into(),
        ));
    }
    if grad_logits.dim() != cache.outputs.dim() {
        return Err(Error::Dimension(format!(
            "output gradient is {:?}, outputs are {:?}",
            grad_logits.dim(),
            cache.outputs.dim()
        )));
    }
    // fixed chunks summed in order keep the result independent of the thread count
    let partial: Vec<CnnParams> = cache
        .samples
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = CnnParams::zeros(spec);
            for (i, c) in chunk.iter().enumerate() {
                let row: Vec<f64> = grad_logits.row(ci * GRAD_CHUNK + i).to_vec();
                sample_backward(spec, params, c, &row, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = CnnParams::zeros(spec);
    for p in &partial {
        total.add_scaled(p, 1.0);
    }
    Ok(total)
}

/// Largest relative gap between analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// tensor name and index of the worst entry
    pub worst: (String, usize),
    pub checked: usize,
    /// entries whose ±h probes changed a ReLU sign or pooling argmax
    pub kink_crossings: usize,
}

/// Floor on the denominator of the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares every analytic gradient with a central difference of step `h`.
/// The dropout mask is drawn once from `seed` and held fixed.
pub fn gradient_check(
    spec: &CnnSpec,
    params: &CnnParams,
    batch: &Array4<f64>,
    targets: &Array2<f64>,
    loss: Loss,
    h: f64,
    seed: u64,
) -> Result<GradCheck> {
    let mode = Mode::Training { seed };
    let eval = |p: &CnnParams| -> Result<(f64, u64)> {
        let (out, cache) = forward(spec, p, batch, mode)?;
        Ok((loss_and_grad(loss, spec.head, &out, targets, None)?.0, cache.pattern()))
    };
    let (out, cache) = forward(spec, params, batch, mode)?;
    let base = cache.pattern();
    let (_, dout) = loss_and_grad(loss, spec.head, &out, targets, None)?;
    let analytic = backward(spec, params, &cache, &dout)?;
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        kink_crossings: 0,
    };
    for (t, name) in CnnParams::NAMES.iter().enumerate() {
        for i in 0..params.tensors()[t].len() {
            let orig = params.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + h;
            let (up, pu) = eval(&probe)?;
            probe.tensors_mut()[t][i] = orig - h;
            let (down, pd) = eval(&probe)?;
            if pu != base || pd != base {
                report.kink_crossings += 1;
            }
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.tensors()[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.to_string(), i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, c, h, w), || rng.sample(StandardNormal))
    }

    #[test]
    fn pooling_arithmetic() {
        let spec = CnnSpec::new(8, 8, 2, 3, Head::Linear);
        assert_eq!(spec.stage_dims(), [(4, 4), (2, 2)]);
        assert_eq!(spec.flat_len(), 8);
        let spec = CnnSpec::new(5, 5, 2, 9, Head::Linear);
        assert_eq!(spec.stage_dims(), [(3, 3), (1, 1)]);
        assert!(CnnSpec {
            dropout: 1.0,
            ..spec.clone()
        }
        .validate()
        .is_err());
        assert!(CnnSpec { kernel: 2, ..spec }.validate().is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = CnnSpec::new(8, 8, 2, 4, Head::Linear);
        let x = random_batch(3, 2, 8, 8, 1);
        let (out, _) = forward(&spec, &CnnParams::zeros(&spec), &x, Mode::Training { seed: 3 }).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_computed_toy() {
        // 4x4 single channel, one centre-tap filter per stage, pool 2 then 2
        let spec = CnnSpec {
            filters1: 1,
            filters2: 1,
            pool1: 2,
            pool2: 2,
            dropout: 0.0,
            ..CnnSpec::new(4, 4, 1, 1, Head::Linear)
        };
        let mut p = CnnParams::zeros(&spec);
        p.conv1_w[4] = 1.0;
        p.conv1_b[0] = -1.0;
        p.conv2_w[4] = 2.0;
        p.dense_w[0] = 3.0;
        p.dense_b[0] = 0.5;
        let vals = [
            1.0, 5.0, 0.0, 2.0, 3.0, -4.0, 7.0, 1.0, 0.0, 0.0, -1.0, -2.0, 2.0, 6.0, 1.0, 1.0,
        ];
        let x = Array4::from_shape_vec((1, 1, 4, 4), vals.to_vec()).unwrap();
        // relu(x - 1) then 2x2 max: [[4, 6], [5, 0]]; doubled and pooled: 12
        let (out, _) = forward(&spec, &p, &x, Mode::Inference).unwrap();
        assert!((out[[0, 0]] - (3.0 * 12.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn inference_ignores_dropout_seed() {
        let spec = CnnSpec::new(8, 8, 2, 4, Head::Sigmoid);
        let p = CnnParams::init(&spec, 7);
        let x = random_batch(5, 2, 8, 8, 2);
        let (a, _) = forward(&spec, &p, &x, Mode::Inference).unwrap();
        let (b, _) = forward(&spec, &p, &x, Mode::Inference).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn shape_and_stale_cache_errors() {
        let spec = CnnSpec::new(8, 8, 2, 4, Head::Linear);
        let p = CnnParams::init(&spec, 1);
        assert!(forward(&spec, &p, &random_batch(1, 3, 8, 8, 0), Mode::Inference).is_err());
        let x = random_batch(2, 2, 8, 8, 0);
        let (out, cache) = forward(&spec, &p, &x, Mode::Inference).unwrap();
        let mut q = p.clone();
        q.dense_b[0] += 1.0;
        assert!(backward(&spec, &q, &cache, &out).is_err());
    }

    #[test]
    fn zero_and_scaled_output_gradient() {
        let spec = CnnSpec::new(8, 8, 2, 3, Head::Linear);
        let p = CnnParams::init(&spec, 4);
        let x = random_batch(4, 2, 8, 8, 5);
        let (out, cache) = forward(&spec, &p, &x, Mode::Training { seed: 9 }).unwrap();
        let g0 = backward(&spec, &p, &cache, &Array2::zeros(out.dim())).unwrap();
        assert!(g0.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
        let g1 = backward(&spec, &p, &cache, &out).unwrap();
        let g2 = backward(&spec, &p, &cache, &(&out * 2.0)).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let spec = CnnSpec::new(8, 8, 2, 1, Head::Linear);
        let masks = dropout_masks(&spec, 100_000, Mode::Training { seed: 11 });
        let n = masks.len() as f64;
        for unit in 0..spec.flat_len() {
            let mean: f64 = masks.iter().map(|m| m.as_ref().unwrap()[unit]).sum::<f64>() / n;
            assert!((mean - 1.0).abs() < 0.01, "unit {unit}: {mean}");
        }
    }

    /// He weights plus small random biases, so no unit sits exactly on a kink.
    pub(crate) fn generic_params(spec: &CnnSpec, seed: u64) -> CnnParams {
        let mut p = CnnParams::init(spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for b in [&mut p.conv1_b, &mut p.conv2_b, &mut p.dense_b] {
            b.iter_mut()
                .for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        p
    }

    fn check_layer(spec: CnnSpec, loss: Loss, seed: u64) -> GradCheck {
        let p = generic_params(&spec, seed);
        let x = random_batch(3, spec.channels, spec.height, spec.width, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let t = Array2::from_shape_simple_fn((3, spec.outputs), || match loss {
            Loss::Mse => rng.sample(StandardNormal),
            Loss::LogLoss => f64::from(rng.random::<bool>()),
        });
        let r = gradient_check(&spec, &p, &x, &t, loss, 1e-4, seed + 3).unwrap();
        if r.kink_crossings == 0 {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
        r
    }

    #[test]
    fn gradient_check_end_to_end() {
        for seed in [21, 31] {
            let r = check_layer(CnnSpec::new(8, 8, 2, 3, Head::Linear), Loss::Mse, seed);
            assert_eq!(r.kink_crossings, 0);
            let r = check_layer(CnnSpec::new(8, 8, 2, 3, Head::Sigmoid), Loss::LogLoss, seed);
            assert_eq!(r.kink_crossings, 0);
        }
    }

    #[test]
    fn kink_inside_the_step_is_flagged() {
        let r = check_layer(CnnSpec::new(8, 8, 2, 3, Head::Linear), Loss::Mse, 20);
        assert_eq!(r.kink_crossings, 1);
        assert!(r.max_rel_error > 1e-4);
    }

    #[test]
    fn gradient_check_each_stage() {
        let specs = [
            // dense only: a 1x1 input with unit pools leaves conv stages trivial
            (
                CnnSpec {
                    pool1: 1,
                    pool2: 1,
                    dropout: 0.0,
                    ..CnnSpec::new(1, 1, 2, 2, Head::Linear)
                },
                Loss::Mse,
                40,
            ),
            // conv without pooling
            (
                CnnSpec {
                    pool1: 1,
                    pool2: 1,
                    ..CnnSpec::new(4, 4, 2, 2, Head::Linear)
                },
                Loss::Mse,
                50,
            ),
            // uneven edges through ceil-mode pools
            (CnnSpec::new(5, 7, 1, 2, Head::Sigmoid), Loss::LogLoss, 60),
        ];
        for (spec, loss, seed) in specs {
            assert_eq!(check_layer(spec, loss, seed).kink_crossings, 0);
        }
    }
}
