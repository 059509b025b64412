//! Encoder-decoder network over the slice axis.
//!
//! Three stride-2 convolution blocks shrink the slice axis by 8, three
//! stride-2 transposed-convolution blocks restore it, with encoder outputs
//! concatenated onto decoder inputs at matching lengths. A stride-1
//! convolution block, a dense layer and a sigmoid produce one probability
//! per slice. Every block is (de)convolution, batch normalization, leaky ReLU.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{loss, loss_grad_logits, RadarTensor, SliceProbs, N_FEATURES};
use crate::error::{Error, Result};
use crate::rng::Stream;

const LEAK: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
const DOWN_KERNEL: usize = 5;
const HEAD_KERNEL: usize = 3;
const N_BLOCKS: usize = 7;
const PARAMS_PER_BLOCK: usize = 5;
const INPUT_SCALE: usize = 0;
const DENSE_W: usize = 1 + N_BLOCKS * PARAMS_PER_BLOCK;
const DENSE_B: usize = DENSE_W + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub n_slices: usize,
    pub n_steps: usize,
    pub n_features: usize,
    /// Channels of the first block; deeper blocks use 2x and 4x.
    pub width: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            n_slices: 160,
            n_steps: 3,
            n_features: N_FEATURES,
            width: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Conv { stride: usize },
    Deconv,
}

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    name: &'static str,
    kind: Kind,
    kernel: usize,
    in_ch: usize,
    out_ch: usize,
    in_len: usize,
    out_len: usize,
}

impl BlockSpec {
    fn kernel_shape(&self) -> [usize; 3] {
        match self.kind {
            Kind::Conv { .. } => [self.out_ch, self.in_ch, self.kernel],
            Kind::Deconv => [self.in_ch, self.out_ch, self.kernel],
        }
    }

    fn fans(&self) -> (usize, usize) {
        (self.in_ch * self.kernel, self.out_ch * self.kernel)
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.n_slices == 0 || self.n_slices % 8 != 0 {
            return Err(Error::Config(format!(
                "n_slices must be a positive multiple of 8, got {}",
                self.n_slices
            )));
        }
        if self.n_steps == 0 || self.n_features == 0 || self.width == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        self.n_steps * self.n_features
    }

    fn blocks(&self) -> [BlockSpec; N_BLOCKS] {
        let (w, l, c0) = (self.width, self.n_slices, self.input_channels());
        let conv = |name, in_ch, out_ch, in_len| BlockSpec {
            name,
            kind: Kind::Conv { stride: 2 },
            kernel: DOWN_KERNEL,
            in_ch,
            out_ch,
            in_len,
            out_len: in_len / 2,
        };
        let deconv = |name, in_ch, out_ch, in_len| BlockSpec {
            name,
            kind: Kind::Deconv,
            kernel: DOWN_KERNEL,
            in_ch,
            out_ch,
            in_len,
            out_len: in_len * 2,
        };
        [
            conv("conv1", c0, w, l),
            conv("conv2", w, 2 * w, l / 2),
            conv("conv3", 2 * w, 4 * w, l / 4),
            deconv("deconv1", 4 * w, 4 * w, l / 8),
            deconv("deconv2", 4 * w + 2 * w, 2 * w, l / 4),
            deconv("deconv3", 2 * w + w, w, l / 2),
            BlockSpec {
                name: "conv4",
                kind: Kind::Conv { stride: 1 },
                kernel: HEAD_KERNEL,
                in_ch: w + c0,
                out_ch: w,
                in_len: l,
                out_len: l,
            },
        ]
    }

    /// Names and shapes of every stored tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("input.scale".to_string(), vec![self.n_features])];
        for b in self.blocks() {
            out.push((format!("{}.kernel", b.name), b.kernel_shape().to_vec()));
            for suffix in ["bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"] {
                out.push((format!("{}.{suffix}", b.name), vec![b.out_ch]));
            }
        }
        let flat = self.width * self.n_slices;
        out.push(("dense.weight".into(), vec![self.n_slices, flat]));
        out.push(("dense.bias".into(), vec![self.n_slices]));
        out
    }

    fn kernel_index(block: usize) -> usize {
        1 + block * PARAMS_PER_BLOCK
    }
}

fn is_trainable(index: usize) -> bool {
    if index == INPUT_SCALE {
        return false;
    }
    if index >= DENSE_W {
        return true;
    }
    (index - 1) % PARAMS_PER_BLOCK < 3
}

fn is_decayed(index: usize) -> bool {
    index == DENSE_W
        || (index != INPUT_SCALE && index < DENSE_W && (index - 1) % PARAMS_PER_BLOCK == 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// All parameters and buffers of the network, in a fixed order given by
/// [`Arch::layout`]. Gradients use the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub arch: Arch,
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch activations, laid out `[item][channel][position]`.
#[derive(Debug, Clone)]
struct Act {
    batch: usize,
    ch: usize,
    len: usize,
    data: Vec<f64>,
}

impl Act {
    fn zeros(batch: usize, ch: usize, len: usize) -> Self {
        Self {
            batch,
            ch,
            len,
            data: vec![0.0; batch * ch * len],
        }
    }

    fn item_len(&self) -> usize {
        self.ch * self.len
    }

    fn concat(a: &Act, b: &Act) -> Act {
        debug_assert_eq!((a.batch, a.len), (b.batch, b.len));
        let mut out = Act::zeros(a.batch, a.ch + b.ch, a.len);
        let (na, nb) = (a.item_len(), b.item_len());
        for (i, dst) in out.data.chunks_mut(na + nb).enumerate() {
            dst[..na].copy_from_slice(&a.data[i * na..(i + 1) * na]);
            dst[na..].copy_from_slice(&b.data[i * nb..(i + 1) * nb]);
        }
        out
    }

    fn split(&self, first_ch: usize) -> (Act, Act) {
        let mut a = Act::zeros(self.batch, first_ch, self.len);
        let mut b = Act::zeros(self.batch, self.ch - first_ch, self.len);
        let (na, nb) = (a.item_len(), b.item_len());
        for (i, src) in self.data.chunks(na + nb).enumerate() {
            a.data[i * na..(i + 1) * na].copy_from_slice(&src[..na]);
            b.data[i * nb..(i + 1) * nb].copy_from_slice(&src[na..]);
        }
        (a, b)
    }

    fn add_assign(&mut self, other: &Act) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }
}

/// Geometry shared by convolution and transposed convolution: the short
/// side position `i` and tap `j` touch long side position `i*stride + j - pad`.
#[derive(Debug, Clone, Copy)]
struct Taps {
    stride: usize,
    kernel: usize,
    pad: usize,
    short_ch: usize,
    short_len: usize,
    long_ch: usize,
    long_len: usize,
}

impl Taps {
    fn of(spec: &BlockSpec) -> Self {
        let pad = (spec.kernel - 1) / 2;
        match spec.kind {
            Kind::Conv { stride } => Self {
                stride,
                kernel: spec.kernel,
                pad,
                short_ch: spec.out_ch,
                short_len: spec.out_len,
                long_ch: spec.in_ch,
                long_len: spec.in_len,
            },
            Kind::Deconv => Self {
                stride: 2,
                kernel: spec.kernel,
                pad,
                short_ch: spec.in_ch,
                short_len: spec.in_len,
                long_ch: spec.out_ch,
                long_len: spec.out_len,
            },
        }
    }

    fn patch_len(&self) -> usize {
        self.long_ch * self.kernel
    }

    /// Patch matrix: row `i` holds long[l][i*stride + j - pad] at column `l*kernel + j`.
    fn im2col(&self, long: &[f64], patches: &mut [f64]) {
        let row_len = self.patch_len();
        for i in 0..self.short_len {
            let row = &mut patches[i * row_len..(i + 1) * row_len];
            for l in 0..self.long_ch {
                let src = &long[l * self.long_len..(l + 1) * self.long_len];
                for j in 0..self.kernel {
                    let pos = (i * self.stride + j).wrapping_sub(self.pad);
                    row[l * self.kernel + j] = if pos < self.long_len { src[pos] } else { 0.0 };
                }
            }
        }
    }

    /// Adjoint of [`Taps::im2col`]: accumulates patch rows back onto the long axis.
    fn col2im(&self, patches: &[f64], long: &mut [f64]) {
        long.fill(0.0);
        let row_len = self.patch_len();
        for i in 0..self.short_len {
            let row = &patches[i * row_len..(i + 1) * row_len];
            for l in 0..self.long_ch {
                let dst = &mut long[l * self.long_len..(l + 1) * self.long_len];
                for j in 0..self.kernel {
                    let pos = (i * self.stride + j).wrapping_sub(self.pad);
                    if pos < self.long_len {
                        dst[pos] += row[l * self.kernel + j];
                    }
                }
            }
        }
    }

    /// short[s][i] = sum over (l, j) of k[s][l][j] * long[l][i*stride + j - pad]
    fn gather(&self, kernel: &[f64], long: &[f64], short: &mut [f64], patches: &mut [f64]) {
        self.im2col(long, patches);
        let row_len = self.patch_len();
        for s in 0..self.short_ch {
            let k = &kernel[s * row_len..(s + 1) * row_len];
            let dst = &mut short[s * self.short_len..(s + 1) * self.short_len];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = dot(k, &patches[i * row_len..(i + 1) * row_len]);
            }
        }
    }

    /// long[l][i*stride + j - pad] += k[s][l][j] * short[s][i]
    fn scatter(&self, kernel: &[f64], short: &[f64], long: &mut [f64], patches: &mut [f64]) {
        let row_len = self.patch_len();
        patches.fill(0.0);
        for s in 0..self.short_ch {
            let k = &kernel[s * row_len..(s + 1) * row_len];
            let src = &short[s * self.short_len..(s + 1) * self.short_len];
            for (i, &v) in src.iter().enumerate() {
                if v != 0.0 {
                    axpy(v, k, &mut patches[i * row_len..(i + 1) * row_len]);
                }
            }
        }
        self.col2im(patches, long);
    }

    /// dk[s][l][j] = sum over batch and i of short[s][i] * long[l][i*stride + j - pad]
    fn kernel_grad(&self, short: &Act, long: &Act) -> Vec<f64> {
        let row_len = self.patch_len();
        let mut grad = vec![0.0; self.short_ch * row_len];
        let mut patches = vec![0.0; self.short_len * row_len];
        for b in 0..short.batch {
            self.im2col(
                &long.data[b * long.item_len()..][..long.item_len()],
                &mut patches,
            );
            let item = &short.data[b * short.item_len()..][..short.item_len()];
            grad.par_chunks_mut(row_len).enumerate().for_each(|(s, g)| {
                let sv = &item[s * self.short_len..(s + 1) * self.short_len];
                for (i, &v) in sv.iter().enumerate() {
                    if v != 0.0 {
                        axpy(v, &patches[i * row_len..(i + 1) * row_len], g);
                    }
                }
            });
        }
        grad
    }
}

fn gather_batch(taps: &Taps, kernel: &[f64], long: &Act) -> Act {
    let mut out = Act::zeros(long.batch, taps.short_ch, taps.short_len);
    let n = out.item_len();
    let scratch = taps.short_len * taps.patch_len();
    out.data
        .par_chunks_mut(n)
        .zip(long.data.par_chunks(long.item_len()))
        .for_each_init(
            || vec![0.0; scratch],
            |patches, (dst, src)| taps.gather(kernel, src, dst, patches),
        );
    out
}

fn scatter_batch(taps: &Taps, kernel: &[f64], short: &Act) -> Act {
    let mut out = Act::zeros(short.batch, taps.long_ch, taps.long_len);
    let n = out.item_len();
    let scratch = taps.short_len * taps.patch_len();
    out.data
        .par_chunks_mut(n)
        .zip(short.data.par_chunks(short.item_len()))
        .for_each_init(
            || vec![0.0; scratch],
            |patches, (dst, src)| taps.scatter(kernel, src, dst, patches),
        );
    out
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Act,
    xhat: Act,
    normed: Act,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Activations retained by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    flat: Act,
    probs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }
}

/// Dot product with eight independent partial sums (fixed order, so
/// results are reproducible while the loop still vectorises).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAK * v
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Keeps sigmoid outputs strictly inside (0, 1) even when a logit saturates.
fn open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl NetworkWeights {
    /// Uniform Glorot initialisation from `seed`; biases and shifts zero,
    /// scales one, running statistics (0, 1), input scale one.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let root = Stream::new(seed).named("radarnet-init");
        let blocks = arch.blocks();
        let tensors = arch
            .layout()
            .into_iter()
            .enumerate()
            .map(|(idx, (name, shape))| {
                let n: usize = shape.iter().product();
                let values = if name.ends_with(".kernel") || name == "dense.weight" {
                    let (fan_in, fan_out) = if name == "dense.weight" {
                        (shape[1], shape[0])
                    } else {
                        blocks[(idx - 1) / PARAMS_PER_BLOCK].fans()
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = root.child(idx as u64);
                    (0..n).map(|_| rng.uniform_range(-limit, limit)).collect()
                } else if name.ends_with("bn_gamma")
                    || name.ends_with("bn_running_var")
                    || name == "input.scale"
                {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                Tensor {
                    name,
                    shape,
                    values,
                }
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    /// Same structure, all values zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in &mut z.tensors {
            t.values.fill(0.0);
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let layout = self.arch.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::shape(
                "weights",
                format!("{} tensors", layout.len()),
                self.tensors.len(),
            ));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::shape(
                    name,
                    format!("{name} {shape:?}"),
                    format!("{} {:?}", t.name, t.shape),
                ));
            }
            if t.values.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(name, format!("{shape:?}"), t.values.len()));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "tensor `{name}` holds non-finite values"
                )));
            }
        }
        let var_ok = (0..N_BLOCKS).all(|b| {
            self.tensors[Arch::kernel_index(b) + 4]
                .values
                .iter()
                .all(|&v| v >= 0.0)
        });
        if !var_ok {
            return Err(Error::Validation(
                "batch-norm running variance must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn is_trainable(index: usize) -> bool {
        is_trainable(index)
    }

    pub fn is_decayed(index: usize) -> bool {
        is_decayed(index)
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.tensors[INPUT_SCALE].values
    }

    pub fn set_input_scale(&mut self, scale: &[f64]) -> Result<()> {
        if scale.len() != self.arch.n_features || scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::shape(
                "input.scale",
                self.arch.n_features,
                scale.len(),
            ));
        }
        self.tensors[INPUT_SCALE].values.copy_from_slice(scale);
        Ok(())
    }

    /// Sum of squared decayed weights, halved.
    pub fn decay_penalty(&self) -> f64 {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(i, _)| is_decayed(*i))
            .map(|(_, t)| t.values.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / 2.0
    }

    fn check_input(&self, x: &RadarTensor) -> Result<()> {
        let want = (self.arch.n_slices, self.arch.n_steps, self.arch.n_features);
        if x.shape() != want {
            return Err(Error::shape(
                "input",
                format!("{want:?}"),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    fn input_act(&self, xs: &[&RadarTensor]) -> Result<Act> {
        let c0 = self.arch.input_channels();
        let l = self.arch.n_slices;
        let mut act = Act::zeros(xs.len(), c0, l);
        let scale = self.input_scale();
        for (b, x) in xs.iter().enumerate() {
            self.check_input(x)?;
            let chans = x.to_channels();
            let dst = &mut act.data[b * c0 * l..(b + 1) * c0 * l];
            for (c, (d, s)) in dst.chunks_mut(l).zip(chans.chunks(l)).enumerate() {
                let k = scale[c % self.arch.n_features];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv = sv * k;
                }
            }
        }
        Ok(act)
    }

    fn block_forward(
        &self,
        index: usize,
        spec: &BlockSpec,
        input: Act,
        mode: Mode,
    ) -> Result<(Act, BlockCache)> {
        if input.ch != spec.in_ch || input.len != spec.in_len {
            return Err(Error::shape(
                spec.name,
                format!("{}x{}", spec.in_ch, spec.in_len),
                format!("{}x{}", input.ch, input.len),
            ));
        }
        let base = Arch::kernel_index(index);
        let kernel = &self.tensors[base].values;
        let gamma = &self.tensors[base + 1].values;
        let beta = &self.tensors[base + 2].values;
        let taps = Taps::of(spec);
        let pre = match spec.kind {
            Kind::Conv { .. } => gather_batch(&taps, kernel, &input),
            Kind::Deconv => scatter_batch(&taps, kernel, &input),
        };
        let (c, l, nb) = (pre.ch, pre.len, pre.batch);
        let count = (nb * l) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => (0..c)
                .map(|ch| {
                    let vals = || (0..nb).flat_map(|b| pre.data[(b * c + ch) * l..][..l].iter());
                    let m = vals().sum::<f64>() / count;
                    let v = vals().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
                    (m, v)
                })
                .unzip(),
            Mode::Infer => (
                self.tensors[base + 3].values.clone(),
                self.tensors[base + 4].values.clone(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = pre;
        let mut normed = xhat.clone();
        let mut out = xhat.clone();
        for b in 0..nb {
            for ch in 0..c {
                let o = (b * c + ch) * l;
                for p in o..o + l {
                    let xh = (xhat.data[p] - mean[ch]) * inv_std[ch];
                    xhat.data[p] = xh;
                    let n = gamma[ch] * xh + beta[ch];
                    normed.data[p] = n;
                    out.data[p] = leaky(n);
                }
            }
        }
        let cache = BlockCache {
            input,
            xhat,
            normed,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        };
        Ok((out, cache))
    }

    /// Runs a batch. In train mode batch statistics normalise each block and
    /// the returned cache supports [`NetworkWeights::backward`].
    pub fn forward_batch(
        &self,
        xs: &[&RadarTensor],
        mode: Mode,
    ) -> Result<(Vec<SliceProbs>, ForwardCache)> {
        let blocks = self.arch.blocks();
        let x0 = self.input_act(xs)?;
        let mut caches = Vec::with_capacity(N_BLOCKS);
        let run = |i: usize, input: Act, caches: &mut Vec<BlockCache>| -> Result<Act> {
            let (out, cache) = self.block_forward(i, &blocks[i], input, mode)?;
            caches.push(cache);
            Ok(out)
        };
        let c1 = run(0, x0.clone(), &mut caches)?;
        let c2 = run(1, c1.clone(), &mut caches)?;
        let c3 = run(2, c2.clone(), &mut caches)?;
        let d1 = run(3, c3, &mut caches)?;
        let d2 = run(4, Act::concat(&d1, &c2), &mut caches)?;
        let d3 = run(5, Act::concat(&d2, &c1), &mut caches)?;
        let flat = run(6, Act::concat(&d3, &x0), &mut caches)?;

        let n_in = flat.item_len();
        let n_out = self.arch.n_slices;
        let weight = &self.tensors[DENSE_W].values;
        let bias = &self.tensors[DENSE_B].values;
        if weight.len() != n_in * n_out {
            return Err(Error::shape("dense", n_in * n_out, weight.len()));
        }
        let probs: Vec<Vec<f64>> = flat
            .data
            .par_chunks(n_in)
            .map(|h| {
                (0..n_out)
                    .map(|j| {
                        let row = &weight[j * n_in..(j + 1) * n_in];
                        let z = bias[j] + dot(row, h);
                        open_unit(sigmoid(z))
                    })
                    .collect()
            })
            .collect();
        let out = probs.iter().cloned().map(SliceProbs).collect();
        Ok((
            out,
            ForwardCache {
                blocks: caches,
                flat,
                probs,
            },
        ))
    }

    pub fn forward(&self, x: &RadarTensor, mode: Mode) -> Result<SliceProbs> {
        let (mut out, _) = self.forward_batch(&[x], mode)?;
        Ok(out.remove(0))
    }

    /// Inference on many tensors, in fixed-size chunks.
    pub fn predict_many(&self, xs: &[RadarTensor]) -> Result<Vec<SliceProbs>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(64) {
            let refs: Vec<&RadarTensor> = chunk.iter().collect();
            out.extend(self.forward_batch(&refs, Mode::Infer)?.0);
        }
        Ok(out)
    }

    /// Mean over the batch of the summed per-slice loss, plus the weight-decay penalty.
    pub fn objective(
        &self,
        probs: &[Vec<f64>],
        targets: &[&[u8]],
        alpha: f64,
        weight_decay: f64,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (y, t) in probs.iter().zip(targets) {
            total += loss(t, y, alpha)?;
        }
        Ok(total / probs.len() as f64 + weight_decay * self.decay_penalty())
    }

    /// Exact gradient of [`NetworkWeights::objective`] for the batch behind `cache`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        targets: &[&[u8]],
        alpha: f64,
        weight_decay: f64,
    ) -> Result<NetworkWeights> {
        let batch = cache.probs.len();
        if targets.len() != batch {
            return Err(Error::shape("targets", batch, targets.len()));
        }
        let n_out = self.arch.n_slices;
        let n_in = cache.flat.item_len();
        let mut dz = Vec::with_capacity(batch * n_out);
        for (y, t) in cache.probs.iter().zip(targets) {
            dz.extend(
                loss_grad_logits(t, y, alpha)?
                    .into_iter()
                    .map(|g| g / batch as f64),
            );
        }

        let mut grad = self.zeros_like();
        let weight = &self.tensors[DENSE_W].values;
        let flat = &cache.flat;
        grad.tensors[DENSE_W]
            .values
            .par_chunks_mut(n_in)
            .enumerate()
            .for_each(|(j, row)| {
                for b in 0..batch {
                    let g = dz[b * n_out + j];
                    if g != 0.0 {
                        for (r, h) in row.iter_mut().zip(&flat.data[b * n_in..(b + 1) * n_in]) {
                            *r += g * h;
                        }
                    }
                }
            });
        for j in 0..n_out {
            grad.tensors[DENSE_B].values[j] = (0..batch).map(|b| dz[b * n_out + j]).sum();
        }
        let mut dflat = Act::zeros(batch, flat.ch, flat.len);
        dflat
            .data
            .par_chunks_mut(n_in)
            .enumerate()
            .for_each(|(b, dh)| {
                for j in 0..n_out {
                    let g = dz[b * n_out + j];
                    for (d, w) in dh.iter_mut().zip(&weight[j * n_in..(j + 1) * n_in]) {
                        *d += g * w;
                    }
                }
            });

        let blocks = self.arch.blocks();
        let w = self.arch.width;
        let back = |i: usize, d_out: Act, grad: &mut NetworkWeights| -> Act {
            self.block_backward(i, &blocks[i], &cache.blocks[i], d_out, grad)
        };
        let d_cat3 = back(6, dflat, &mut grad);
        let (d_d3, _) = d_cat3.split(w);
        let d_cat2 = back(5, d_d3, &mut grad);
        let (d_d2, d_c1_skip) = d_cat2.split(2 * w);
        let d_cat1 = back(4, d_d2, &mut grad);
        let (d_d1, d_c2_skip) = d_cat1.split(4 * w);
        let d_c3 = back(3, d_d1, &mut grad);
        let mut d_c2 = back(2, d_c3, &mut grad);
        d_c2.add_assign(&d_c2_skip);
        let mut d_c1 = back(1, d_c2, &mut grad);
        d_c1.add_assign(&d_c1_skip);
        back(0, d_c1, &mut grad);

        if weight_decay != 0.0 {
            for (i, (g, p)) in grad.tensors.iter_mut().zip(&self.tensors).enumerate() {
                if is_decayed(i) {
                    for (gv, pv) in g.values.iter_mut().zip(&p.values) {
                        *gv += weight_decay * pv;
                    }
                }
            }
        }
        Ok(grad)
    }

    fn block_backward(
        &self,
        index: usize,
        spec: &BlockSpec,
        cache: &BlockCache,
        d_out: Act,
        grad: &mut NetworkWeights,
    ) -> Act {
        let base = Arch::kernel_index(index);
        let gamma = &self.tensors[base + 1].values;
        let (nb, c, l) = (d_out.batch, d_out.ch, d_out.len);
        let count = (nb * l) as f64;
        let mut d_pre = d_out;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for b in 0..nb {
            for ch in 0..c {
                let o = (b * c + ch) * l;
                for p in o..o + l {
                    let dn = if cache.normed.data[p] > 0.0 {
                        d_pre.data[p]
                    } else {
                        LEAK * d_pre.data[p]
                    };
                    let xh = cache.xhat.data[p];
                    dgamma[ch] += dn * xh;
                    dbeta[ch] += dn;
                    let dxh = dn * gamma[ch];
                    sum_dxhat[ch] += dxh;
                    sum_dxhat_xhat[ch] += dxh * xh;
                    d_pre.data[p] = dxh;
                }
            }
        }
        for b in 0..nb {
            for ch in 0..c {
                let o = (b * c + ch) * l;
                let k = cache.inv_std[ch] / count;
                for p in o..o + l {
                    let dxh = d_pre.data[p];
                    d_pre.data[p] =
                        k * (count * dxh - sum_dxhat[ch] - cache.xhat.data[p] * sum_dxhat_xhat[ch]);
                }
            }
        }
        grad.tensors[base + 1].values.copy_from_slice(&dgamma);
        grad.tensors[base + 2].values.copy_from_slice(&dbeta);

        let taps = Taps::of(spec);
        let kernel = &self.tensors[base].values;
        let (dk, d_in) = match spec.kind {
            Kind::Conv { .. } => (
                taps.kernel_grad(&d_pre, &cache.input),
                scatter_batch(&taps, kernel, &d_pre),
            ),
            Kind::Deconv => (
                taps.kernel_grad(&cache.input, &d_pre),
                gather_batch(&taps, kernel, &d_pre),
            ),
        };
        grad.tensors[base].values = dk;
        d_in
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (b, bc) in cache.blocks.iter().enumerate() {
            let base = Arch::kernel_index(b);
            for (rm, m) in self.tensors[base + 3].values.iter_mut().zip(&bc.batch_mean) {
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * m;
            }
            for (rv, v) in self.tensors[base + 4].values.iter_mut().zip(&bc.batch_var) {
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
}
