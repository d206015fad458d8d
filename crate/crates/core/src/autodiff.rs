//! Tape-based reverse-mode differentiation over [`DenseArray`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. The tape
//! order is a topological order, so [`Tape::backward`] walks it once in
//! reverse and sums gradient contributions at nodes with several consumers.
//!
//! Spike nonlinearities are Heaviside steps in the forward pass and use the
//! arctangent surrogate slope in the backward pass. Switching the tape to
//! [`SpikeMode::Smooth`] replaces the step by the surrogate itself, which makes
//! the whole graph differentiable and lets finite differences check the
//! backward rules exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::DenseArray;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeMode {
    /// Forward emits hard spikes, backward uses the surrogate slope.
    #[default]
    Heaviside,
    /// Forward emits the surrogate value itself.
    Smooth,
}

/// Arctangent surrogate `S(z) = atan(π·α·z/2)/π + 1/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surrogate {
    pub alpha: f64,
}

impl Default for Surrogate {
    fn default() -> Self {
        Self { alpha: 2.0 }
    }
}

impl Surrogate {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("surrogate alpha must be > 0, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn value(&self, z: f64) -> f64 {
        (PI * self.alpha * z / 2.0).atan() / PI + 0.5
    }

    pub fn slope(&self, z: f64) -> f64 {
        let k = PI * self.alpha * z / 2.0;
        (self.alpha / 2.0) / (1.0 + k * k)
    }

    /// Forward spike value for `z = u - threshold`; ties fire.
    pub fn fire(&self, z: f64, mode: SpikeMode) -> f64 {
        match mode {
            SpikeMode::Heaviside => {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeMode::Smooth => self.value(z),
        }
    }
}

/// Membrane update applied before thresholding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dynamics {
    /// `u = v + x`.
    Integrate,
    /// `u = v + (x - v) / tau`.
    Leaky { tau: f64 },
}

impl Dynamics {
    /// `(decay, gain)` such that `u = decay·v + gain·x`.
    pub(crate) fn coefficients(self) -> (f64, f64) {
        match self {
            Dynamics::Integrate => (1.0, 1.0),
            Dynamics::Leaky { tau } => (1.0 - 1.0 / tau, 1.0 / tau),
        }
    }
}

/// Parameters of a spiking neuron population with subtractive reset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronSpec {
    pub dynamics: Dynamics,
    pub threshold: f64,
    /// `Some(θ⁻)` makes the neuron ternary.
    pub negative_threshold: Option<f64>,
    pub surrogate: Surrogate,
}

impl NeuronSpec {
    pub fn binary(dynamics: Dynamics, threshold: f64, surrogate: Surrogate) -> Self {
        Self {
            dynamics,
            threshold,
            negative_threshold: None,
            surrogate,
        }
    }

    pub fn ternary(dynamics: Dynamics, threshold: f64, negative_threshold: f64, surrogate: Surrogate) -> Self {
        Self {
            dynamics,
            threshold,
            negative_threshold: Some(negative_threshold),
            surrogate,
        }
    }

    pub fn is_ternary(&self) -> bool {
        self.negative_threshold.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MembershipKind {
    Triangular,
    Gaussian,
}

impl MembershipKind {
    pub fn params_per_function(self) -> usize {
        match self {
            MembershipKind::Triangular => 3,
            MembershipKind::Gaussian => 2,
        }
    }
}

/// Instrumented operation counts, bucketed by the tape's current stage label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub multiplications: BTreeMap<String, u64>,
    /// Additions/subtractions spent on ternary attention scores.
    pub ternary_accumulations: u64,
    /// Multiplications spent on attention scores (zero when both operands are ternary).
    pub score_multiplications: u64,
}

impl OpCounters {
    pub fn stage(&self, name: &str) -> u64 {
        self.multiplications.get(name).copied().unwrap_or(0)
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    AddBias(Var, Var),
    ChannelBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
    },
    Spike {
        u: Var,
        threshold: f64,
        surrogate: Surrogate,
    },
    Neuron {
        x: Var,
        steps: usize,
        spec: NeuronSpec,
        potentials: Vec<f64>,
    },
    Membership {
        p: Var,
        params: Var,
        kind: MembershipKind,
    },
    RepeatTime {
        x: Var,
        steps: usize,
    },
    SumTime {
        x: Var,
        steps: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    BatchMatmul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    MseLoss {
        pred: Var,
        target: Vec<f64>,
    },
    Sum(Var),
}

/// Recorded computation graph.
pub struct Tape {
    values: Vec<DenseArray>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    spike_mode: SpikeMode,
    stage: String,
    counters: OpCounters,
    marks: Vec<(String, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaves
/// (parameters and constants) keep their gradient.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<DenseArray> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            spike_mode: SpikeMode::Heaviside,
            stage: String::new(),
            counters: OpCounters::default(),
            marks: Vec::new(),
        }
    }

    pub fn with_spike_mode(mode: SpikeMode) -> Self {
        let mut t = Self::new();
        t.spike_mode = mode;
        t
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn set_spike_mode(&mut self, mode: SpikeMode) {
        self.spike_mode = mode;
    }

    /// Label under which subsequent multiplications are counted.
    pub fn set_stage(&mut self, stage: impl Into<String>) {
        self.stage = stage.into();
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    /// Labels a node so callers can inspect it after a forward pass.
    pub fn mark(&mut self, name: impl Into<String>, v: Var) {
        self.marks.push((name.into(), v));
    }

    /// Marked nodes in the order they were labelled.
    pub fn marks(&self) -> &[(String, Var)] {
        &self.marks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn count(&mut self, n: u64) {
        if n == 0 {
            return;
        }
        *self.counters.multiplications.entry(self.stage.clone()).or_insert(0) += n;
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Var {
        let req = match &op {
            Op::Leaf => false,
            _ => op_parents(&op).iter().any(|p| self.requires_grad[p.0]),
        };
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(req);
        Var(self.values.len() - 1)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: DenseArray) -> Var {
        let v = self.push(value, Op::Leaf);
        self.requires_grad[v.0] = true;
        v
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul(&self.values[b.0])?;
        let (m, k) = self.values[a.0].as_matrix()?;
        let n = out.shape()[1];
        self.count((m * k * n) as u64);
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// `x + b` with `b` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.values[x.0].shape();
        let bs = self.values[b.0].shape();
        let n = *xs.last().unwrap();
        if bs != [n] {
            return dim_err(format!("bias {bs:?} does not match last axis of {xs:?}"));
        }
        let bias = self.values[b.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let bs = self.values[b.0].shape();
        if xs.len() < 2 || bs != [xs[1]] {
            return dim_err(format!("channel bias {bs:?} does not match {xs:?}"));
        }
        let inner: usize = xs[2..].iter().product();
        let bias = self.values[b.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bb = bias[i % xs[1]];
            for o in chunk {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::ChannelBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y)?;
        self.count(out.len() as u64);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.values[x.0].map(|v| v * s);
        self.count(out.len() as u64);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Batched cross-correlation: `x[N, C, H, W]` (or `[C, H, W]`) with
    /// `k[O, C, l, l]`, zero padding, no kernel flip.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let ks = self.values[k.0].shape().to_vec();
        let (batch, c, h, w, unbatched) = match xs[..] {
            [n, c, h, w] => (n, c, h, w, false),
            [c, h, w] => (1, c, h, w, true),
            _ => return dim_err(format!("conv2d input must be rank 3 or 4, got {xs:?}")),
        };
        let (o, kc, l) = match ks[..] {
            [o, kc, l, l2] if l == l2 => (o, kc, l),
            _ => return dim_err(format!("conv2d kernels must be [O, C, l, l], got {ks:?}")),
        };
        if kc != c {
            return dim_err(format!("conv2d channel mismatch: input {c}, kernel {kc}"));
        }
        let (ho, wo) = match (
            kernels::conv_out_extent(h, l, stride, padding),
            kernels::conv_out_extent(w, l, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return dim_err(format!(
                    "kernel {l} (stride {stride}, padding {padding}) does not fit input {h}x{w}"
                ))
            }
        };
        let geom = ConvGeometry {
            batch,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: l,
            stride,
            padding,
        };
        let data = geom.forward(self.values[x.0].data(), self.values[k.0].data());
        self.count(geom.multiplications());
        let shape: Vec<usize> = if unbatched {
            vec![o, ho, wo]
        } else {
            vec![batch, o, ho, wo]
        };
        let out = DenseArray::new(&shape, data)?;
        Ok(self.push(out, Op::Conv2d { x, k, geom }))
    }

    /// Single spike nonlinearity `H(u - threshold)` with surrogate backward.
    pub fn spike(&mut self, u: Var, threshold: f64, surrogate: Surrogate) -> Var {
        let mode = self.spike_mode;
        let out = self.values[u.0].map(|v| surrogate.fire(v - threshold, mode));
        self.push(
            out,
            Op::Spike {
                u,
                threshold,
                surrogate,
            },
        )
    }

    /// Runs a neuron population for `steps` time steps.
    ///
    /// `x` holds the input currents time-major: its flat data is `steps`
    /// consecutive equally sized chunks. Membrane state starts at zero and
    /// persists across the steps. Output has the same shape as `x`.
    pub fn neurons(&mut self, x: Var, steps: usize, spec: NeuronSpec) -> Result<Var> {
        let input = &self.values[x.0];
        if steps == 0 || !input.len().is_multiple_of(steps) || !input.shape()[0].is_multiple_of(steps) {
            return dim_err(format!("cannot split {:?} into {steps} time steps", input.shape()));
        }
        let per_step = input.len() / steps;
        let (decay, gain) = spec.dynamics.coefficients();
        let mode = self.spike_mode;
        let sur = spec.surrogate;
        let xd = input.data();
        let leaky = matches!(spec.dynamics, Dynamics::Leaky { .. });
        let (potentials, out) = match (mode, spec.negative_threshold) {
            (SpikeMode::Heaviside, None) => run_neurons(xd, per_step, decay, gain, spec.threshold, None, |z| {
                f64::from(u8::from(z >= 0.0))
            }),
            (SpikeMode::Heaviside, neg) => run_neurons(xd, per_step, decay, gain, spec.threshold, neg, |z| {
                f64::from(u8::from(z >= 0.0))
            }),
            (SpikeMode::Smooth, neg) => run_neurons(xd, per_step, decay, gain, spec.threshold, neg, |z| sur.value(z)),
        };
        let total = xd.len() as u64;
        let out = DenseArray::new(input.shape(), out)?;
        if leaky {
            let stage = format!("{}.neurons", self.stage);
            *self.counters.multiplications.entry(stage).or_insert(0) += 2 * total;
        }
        Ok(self.push(
            out,
            Op::Neuron {
                x,
                steps,
                spec,
                potentials,
            },
        ))
    }

    /// Evaluates a membership bank on every pixel of `p[B, C, H, W]`.
    ///
    /// `params` is `[N, 3]` triangular free parameters `(a, ln(b-a), ln(c-b))`
    /// or `[N, 2]` Gaussian `(mean, ln sigma)`. Output is `[B, C·N, H, W]`
    /// with channel `c·N + i` holding function `i` applied to input channel `c`.
    /// Pixel values are clamped to `[0, 1]`.
    pub fn membership(&mut self, p: Var, params: Var, kind: MembershipKind) -> Result<Var> {
        let ps = self.values[p.0].shape().to_vec();
        let (b, c, h, w) = match ps[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => return dim_err(format!("membership input must be [B, C, H, W], got {ps:?}")),
        };
        let pr = self.values[params.0].shape();
        let k = kind.params_per_function();
        if pr.len() != 2 || pr[1] != k {
            return dim_err(format!("membership params must be [N, {k}], got {pr:?}"));
        }
        let n = pr[0];
        let bank = decode_bank(self.values[params.0].data(), kind, n);
        let hw = h * w;
        let src = self.values[p.0].data();
        let mut out = vec![0.0; b * c * n * hw];
        for bc in 0..b * c {
            let pix = &src[bc * hw..(bc + 1) * hw];
            for (i, f) in bank.iter().enumerate() {
                let dst = &mut out[(bc * n + i) * hw..][..hw];
                for (d, &pv) in dst.iter_mut().zip(pix) {
                    *d = f.eval(pv.clamp(0.0, 1.0));
                }
            }
        }
        let per = match kind {
            MembershipKind::Triangular => 1,
            MembershipKind::Gaussian => 2,
        };
        self.count((per * b * c * n * hw) as u64);
        let out = DenseArray::new(&[b, c * n, h, w], out)?;
        Ok(self.push(out, Op::Membership { p, params, kind }))
    }

    /// `[B, ...]` → `[steps·B, ...]`: the same frame repeated at every step.
    pub fn repeat_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(Error::Config("time steps must be positive".into()));
        }
        let v = &self.values[x.0];
        let mut shape = v.shape().to_vec();
        shape[0] *= steps;
        let data = v.data().repeat(steps);
        let out = DenseArray::new(&shape, data)?;
        Ok(self.push(out, Op::RepeatTime { x, steps }))
    }

    /// `[steps·B, ...]` → `[B, ...]`, summing over time.
    pub fn sum_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        let v = &self.values[x.0];
        let mut shape = v.shape().to_vec();
        if steps == 0 || !shape[0].is_multiple_of(steps) {
            return dim_err(format!("cannot split {shape:?} into {steps} time steps"));
        }
        shape[0] /= steps;
        let per = v.len() / steps;
        let mut data = vec![0.0; per];
        for chunk in v.data().chunks(per) {
            for (d, s) in data.iter_mut().zip(chunk) {
                *d += s;
            }
        }
        let out = DenseArray::new(&shape, data)?;
        Ok(self.push(out, Op::SumTime { x, steps }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = &self.values[x.0];
        let shape = v.shape();
        let mut seen = [false; 4];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return dim_err(format!("invalid permutation {perm:?} for {shape:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(v.data(), shape, perm);
        let out = DenseArray::new(&out_shape, data)?;
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// `a[G, m, k] · b[G, k, n]`, or `a · bᵀ` with `b[G, n, k]` when
    /// `transpose_b`. When both operands only hold values in {-1, 0, +1} the
    /// product is accumulated with additions and subtractions alone.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let (g, m, k) = match av.shape()[..] {
            [g, m, k] => (g, m, k),
            _ => return dim_err(format!("batch_matmul lhs must be rank 3, got {:?}", av.shape())),
        };
        let (g2, k2, n) = match (bv.shape(), transpose_b) {
            ([g2, n, k2], true) => (*g2, *k2, *n),
            ([g2, k2, n], false) => (*g2, *k2, *n),
            _ => return dim_err(format!("batch_matmul rhs must be rank 3, got {:?}", bv.shape())),
        };
        if g != g2 || k != k2 {
            return dim_err(format!(
                "batch_matmul shape mismatch: {:?} · {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let ternary = is_ternary(av.data()) && is_ternary(bv.data());
        let mut out = vec![0.0; g * m * n];
        let mut accumulations = 0u64;
        for gi in 0..g {
            let ad = &av.data()[gi * m * k..][..m * k];
            let bd = &bv.data()[gi * k * n..][..k * n];
            let od = &mut out[gi * m * n..][..m * n];
            if ternary && k <= 64 {
                accumulations += ternary_block(ad, bd, m, k, n, transpose_b, od);
            } else if ternary {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0i64;
                        for kk in 0..k {
                            let x = ad[i * k + kk];
                            let y = if transpose_b { bd[j * k + kk] } else { bd[kk * n + j] };
                            if x == 0.0 || y == 0.0 {
                                continue;
                            }
                            accumulations += 1;
                            if (x > 0.0) == (y > 0.0) {
                                acc += 1;
                            } else {
                                acc -= 1;
                            }
                        }
                        od[i * n + j] = acc as f64;
                    }
                }
            } else {
                kernels::gemm(m, k, n, ad, false, bd, transpose_b, od, 0.0);
            }
        }
        if ternary {
            self.counters.ternary_accumulations += accumulations;
        } else {
            let mults = (g * m * n * k) as u64;
            self.counters.score_multiplications += mults;
            self.count(mults);
        }
        let out = DenseArray::new(&[g, m, n], out)?;
        Ok(self.push(out, Op::BatchMatmul { a, b, transpose_b }))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = &self.values[x.0];
        let n = *xv.shape().last().unwrap();
        if self.values[gamma.0].shape() != [n] || self.values[beta.0].shape() != [n] {
            return dim_err("layer_norm affine parameters must match the last axis");
        }
        let g = self.values[gamma.0].data();
        let bta = self.values[beta.0].data();
        let rows = xv.len() / n;
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..][..n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normalized[r * n + j] = xh;
                out[r * n + j] = g[j] * xh + bta[j];
            }
        }
        let total = xv.len() as u64;
        let out = DenseArray::new(xv.shape(), out)?;
        self.count(3 * total);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Picks `x[b, indices[b]]` from a `[B, A]` matrix.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.values[x.0].as_matrix()?;
        if indices.len() != rows || indices.iter().any(|&i| i >= cols) {
            return dim_err("gather indices do not match [B, A] input");
        }
        let d = self.values[x.0].data();
        let data = indices.iter().enumerate().map(|(r, &i)| d[r * cols + i]).collect();
        let out = DenseArray::new(&[rows], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.values[pred.0].data();
        if p.len() != target.len() {
            return dim_err("mse target length mismatch");
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.push(
            DenseArray::scalar(loss),
            Op::MseLoss {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        self.push(DenseArray::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.values[loss.0].len() != 1 {
            return dim_err("backward needs a scalar loss");
        }
        self.values[loss.0].check_finite("loss")?;
        let mut grads: Vec<Option<DenseArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseArray::ones(self.values[loss.0].shape()));
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            // Intermediate gradients are dropped as soon as they are consumed.
            if matches!(self.ops[i], Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray>], v: Var, g: DenseArray) -> Result<()> {
        if !self.requires_grad[v.0] {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn propagate(&self, i: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                let (m, k) = av.as_matrix()?;
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, DenseArray::new(&[m, k], da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, DenseArray::new(&[k, n], db)?)?;
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.wants(*b) {
                    let n = self.values[b.0].len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, DenseArray::new(&[n], db)?)?;
                }
            }
            Op::ChannelBias(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.wants(*b) {
                    let c = self.values[b.0].len();
                    let inner: usize = out.shape()[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (j, chunk) in g.data().chunks(inner).enumerate() {
                        db[j % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, DenseArray::new(&[c], db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(&self.values[b.0], |x, y| x * y)?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(&self.values[a.0], |x, y| x * y)?)?;
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s))?;
            }
            Op::Relu(x) => {
                let d = g.zip_map(&self.values[x.0], |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Conv2d { x, k, geom } => {
                let xv = &self.values[x.0];
                let kv = &self.values[k.0];
                let (dx, dk) = geom.backward(xv.data(), kv.data(), g.data(), self.wants(*x), self.wants(*k));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, DenseArray::new(xv.shape(), dx)?)?;
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, DenseArray::new(kv.shape(), dk)?)?;
                }
            }
            Op::Spike {
                u,
                threshold,
                surrogate,
            } => {
                let d = g.zip_map(&self.values[u.0], |gv, uv| gv * surrogate.slope(uv - threshold))?;
                self.accumulate(grads, *u, d)?;
            }
            Op::Neuron {
                x,
                steps,
                spec,
                potentials,
            } => {
                let d = neuron_backward(g.data(), potentials, *steps, spec);
                self.accumulate(grads, *x, DenseArray::new(out.shape(), d)?)?;
            }
            Op::Membership { p, params, kind } => {
                let (dp, dparams) = membership_backward(
                    self.values[p.0].data(),
                    self.values[p.0].shape(),
                    self.values[params.0].data(),
                    *kind,
                    g.data(),
                );
                if self.wants(*p) {
                    self.accumulate(grads, *p, DenseArray::new(self.values[p.0].shape(), dp)?)?;
                }
                if self.wants(*params) {
                    let shape = self.values[params.0].shape().to_vec();
                    self.accumulate(grads, *params, DenseArray::new(&shape, dparams)?)?;
                }
            }
            Op::RepeatTime { x, steps } => {
                let per = g.len() / steps;
                let mut d = vec![0.0; per];
                for chunk in g.data().chunks(per) {
                    for (a, b) in d.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, DenseArray::new(self.values[x.0].shape(), d)?)?;
            }
            Op::SumTime { x, steps } => {
                let d = g.data().repeat(*steps);
                self.accumulate(grads, *x, DenseArray::new(self.values[x.0].shape(), d)?)?;
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.values[x.0].shape())?)?;
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let d = permute_data(g.data(), g.shape(), &inverse);
                self.accumulate(grads, *x, DenseArray::new(self.values[x.0].shape(), d)?)?;
            }
            Op::BatchMatmul { a, b, transpose_b } => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for gi in 0..gn {
                    let gd = &g.data()[gi * m * n..][..m * n];
                    let ad = &av.data()[gi * m * k..][..m * k];
                    let bd = &bv.data()[gi * k * n..][..k * n];
                    // dA = G · op(B)ᵀ
                    kernels::gemm(
                        m,
                        n,
                        k,
                        gd,
                        false,
                        bd,
                        !transpose_b,
                        &mut da[gi * m * k..][..m * k],
                        0.0,
                    );
                    if *transpose_b {
                        // B is [n, k]: dB = Gᵀ · A
                        kernels::gemm(n, m, k, gd, true, ad, false, &mut db[gi * k * n..][..k * n], 0.0);
                    } else {
                        // B is [k, n]: dB = Aᵀ · G
                        kernels::gemm(k, m, n, ad, true, gd, false, &mut db[gi * k * n..][..k * n], 0.0);
                    }
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, DenseArray::new(av.shape(), da)?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, DenseArray::new(bv.shape(), db)?)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let n = self.values[gamma.0].len();
                let gm = self.values[gamma.0].data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; g.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * n..][..n];
                    let xh = &normalized[r * n..][..n];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gm[j];
                        sum_d += dxh;
                        sum_dx += dxh * xh[j];
                    }
                    for j in 0..n {
                        let dxh = gr[j] * gm[j];
                        dx[r * n + j] = is * (dxh - sum_d / n as f64 - xh[j] * sum_dx / n as f64);
                    }
                }
                self.accumulate(grads, *x, DenseArray::new(g.shape(), dx)?)?;
                self.accumulate(grads, *gamma, DenseArray::new(&[n], dgamma)?)?;
                self.accumulate(grads, *beta, DenseArray::new(&[n], dbeta)?)?;
            }
            Op::Gather { x, indices } => {
                let shape = self.values[x.0].shape().to_vec();
                let cols = shape[1];
                let mut d = vec![0.0; shape[0] * cols];
                for (r, &c) in indices.iter().enumerate() {
                    d[r * cols + c] = g.data()[r];
                }
                self.accumulate(grads, *x, DenseArray::new(&shape, d)?)?;
            }
            Op::MseLoss { pred, target } => {
                let pv = &self.values[pred.0];
                let scale = 2.0 * g.data()[0] / target.len() as f64;
                let d = pv.data().iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                self.accumulate(grads, *pred, DenseArray::new(pv.shape(), d)?)?;
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let shape = self.values[x.0].shape().to_vec();
                self.accumulate(grads, *x, DenseArray::full(&shape, gv))?;
            }
        }
        Ok(())
    }
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul(a, b)
        | Op::AddBias(a, b)
        | Op::ChannelBias(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(x, _) | Op::Relu(x) | Op::Reshape(x) | Op::Sum(x) => vec![*x],
        Op::Conv2d { x, k, .. } => vec![*x, *k],
        Op::Spike { u, .. } => vec![*u],
        Op::Neuron { x, .. }
        | Op::RepeatTime { x, .. }
        | Op::SumTime { x, .. }
        | Op::Permute { x, .. }
        | Op::Gather { x, .. } => vec![*x],
        Op::Membership { p, params, .. } => vec![*p, *params],
        Op::BatchMatmul { a, b, .. } => vec![*a, *b],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::MseLoss { pred, .. } => vec![*pred],
    }
}

/// Sign bit masks `(positive, negative)` of a ternary vector of length <= 64.
fn sign_masks(values: impl Iterator<Item = f64>) -> (u64, u64) {
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, v) in values.enumerate() {
        if v > 0.0 {
            pos |= 1 << i;
        } else if v < 0.0 {
            neg |= 1 << i;
        }
    }
    (pos, neg)
}

/// Ternary `[m, k] · [k, n]` product with `k <= 64` using sign masks and
/// popcounts. Returns the number of nonzero pairs accumulated.
fn ternary_block(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, transpose_b: bool, out: &mut [f64]) -> u64 {
    let rows: Vec<(u64, u64)> = (0..m).map(|i| sign_masks(a[i * k..][..k].iter().copied())).collect();
    let cols: Vec<(u64, u64)> = (0..n)
        .map(|j| {
            if transpose_b {
                sign_masks(b[j * k..][..k].iter().copied())
            } else {
                sign_masks((0..k).map(|kk| b[kk * n + j]))
            }
        })
        .collect();
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("popcnt") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { sign_products_popcnt(&rows, &cols, out) };
    }
    sign_products(&rows, &cols, out)
}

#[inline(always)]
fn sign_products(rows: &[(u64, u64)], cols: &[(u64, u64)], out: &mut [f64]) -> u64 {
    let n = cols.len();
    let mut accumulations = 0u64;
    for (i, &(ap, an)) in rows.iter().enumerate() {
        for (j, &(bp, bn)) in cols.iter().enumerate() {
            let same = (ap & bp).count_ones() + (an & bn).count_ones();
            let diff = (ap & bn).count_ones() + (an & bp).count_ones();
            accumulations += u64::from(same + diff);
            out[i * n + j] = f64::from(same) - f64::from(diff);
        }
    }
    accumulations
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn sign_products_popcnt(rows: &[(u64, u64)], cols: &[(u64, u64)], out: &mut [f64]) -> u64 {
    sign_products(rows, cols, out)
}

fn is_ternary(data: &[f64]) -> bool {
    data.iter().all(|&v| v == 0.0 || v == 1.0 || v == -1.0)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    if rank == 0 || data.is_empty() {
        return data.to_vec();
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let (inner, inner_stride) = (out_shape[rank - 1], strides[rank - 1]);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..data.len() / inner {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Forward neuron recurrence; returns `(potentials, spikes)`.
#[inline(always)]
fn run_neurons(
    x: &[f64],
    per_step: usize,
    decay: f64,
    gain: f64,
    theta: f64,
    negative: Option<f64>,
    fire: impl Fn(f64) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; per_step];
    let mut potentials = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ((xs, us), ss) in x
        .chunks_exact(per_step)
        .zip(potentials.chunks_exact_mut(per_step))
        .zip(out.chunks_exact_mut(per_step))
    {
        for (((vj, &xj), uj), sj) in v.iter_mut().zip(xs).zip(us.iter_mut()).zip(ss.iter_mut()) {
            let u = decay * *vj + gain * xj;
            *uj = u;
            let sp = fire(u - theta);
            let mut s = sp;
            let mut vn = u - theta * sp;
            if let Some(neg) = negative {
                let sn = fire(neg - u);
                s -= sn;
                vn -= neg * sn;
            }
            *sj = s;
            *vj = vn;
        }
    }
    (potentials, out)
}

fn neuron_backward(g: &[f64], potentials: &[f64], steps: usize, spec: &NeuronSpec) -> Vec<f64> {
    let per = g.len() / steps;
    let (decay, gain) = spec.dynamics.coefficients();
    let sur = spec.surrogate;
    let theta = spec.threshold;
    let mut dx = vec![0.0; g.len()];
    let mut gv = vec![0.0; per];
    for t in (0..steps).rev() {
        let base = t * per;
        for j in 0..per {
            let u = potentials[base + j];
            let sp = sur.slope(u - theta);
            let mut ds_du = sp;
            let mut dv_du = 1.0 - theta * sp;
            if let Some(neg) = spec.negative_threshold {
                let sn = sur.slope(neg - u);
                ds_du += sn;
                dv_du += neg * sn;
            }
            let gu = g[base + j] * ds_du + gv[j] * dv_du;
            dx[base + j] = gu * gain;
            gv[j] = gu * decay;
        }
    }
    dx
}

/// One membership function in natural parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum MembershipFn {
    Triangle {
        a: f64,
        b: f64,
        c: f64,
        inv_left: f64,
        inv_right: f64,
    },
    Gaussian {
        mean: f64,
        sigma: f64,
        inv_two_var: f64,
    },
}

impl MembershipFn {
    /// One multiplication per evaluation for triangles, two for Gaussians.
    pub(crate) fn eval(&self, p: f64) -> f64 {
        match *self {
            MembershipFn::Triangle {
                a,
                b,
                c,
                inv_left,
                inv_right,
            } => {
                let (d, slope) = if p <= b { (p - a, inv_left) } else { (c - p, inv_right) };
                (d * slope).max(0.0)
            }
            MembershipFn::Gaussian { mean, inv_two_var, .. } => {
                let d = p - mean;
                (-(d * d * inv_two_var)).exp()
            }
        }
    }
}

pub(crate) fn decode_bank(raw: &[f64], kind: MembershipKind, n: usize) -> Vec<MembershipFn> {
    match kind {
        MembershipKind::Triangular => (0..n)
            .map(|i| {
                let a = raw[3 * i];
                let b = a + raw[3 * i + 1].exp();
                let c = b + raw[3 * i + 2].exp();
                MembershipFn::Triangle {
                    a,
                    b,
                    c,
                    inv_left: 1.0 / (b - a),
                    inv_right: 1.0 / (c - b),
                }
            })
            .collect(),
        MembershipKind::Gaussian => (0..n)
            .map(|i| {
                let sigma = raw[2 * i + 1].exp();
                MembershipFn::Gaussian {
                    mean: raw[2 * i],
                    sigma,
                    inv_two_var: 1.0 / (2.0 * sigma * sigma),
                }
            })
            .collect(),
    }
}

fn membership_backward(
    p: &[f64],
    p_shape: &[usize],
    raw: &[f64],
    kind: MembershipKind,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = (p_shape[0], p_shape[1], p_shape[2], p_shape[3]);
    let k = kind.params_per_function();
    let n = raw.len() / k;
    let bank = decode_bank(raw, kind, n);
    let hw = h * w;
    let mut dp = vec![0.0; p.len()];
    // Gradients in natural parameters, mapped to free parameters below.
    let mut dnat = vec![0.0; raw.len()];
    for bc in 0..b * c {
        for (i, f) in bank.iter().enumerate() {
            let gs = &g[(bc * n + i) * hw..][..hw];
            for (j, &gv) in gs.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let raw_p = p[bc * hw + j];
                let inside = (0.0..=1.0).contains(&raw_p);
                let pv = raw_p.clamp(0.0, 1.0);
                match *f {
                    MembershipFn::Triangle { a, b, c, .. } => {
                        if pv > a && pv <= b {
                            let l = b - a;
                            dnat[3 * i] += gv * (pv - b) / (l * l);
                            dnat[3 * i + 1] += gv * -(pv - a) / (l * l);
                            if inside {
                                dp[bc * hw + j] += gv / l;
                            }
                        } else if pv > b && pv <= c {
                            let r = c - b;
                            dnat[3 * i + 1] += gv * (c - pv) / (r * r);
                            dnat[3 * i + 2] += gv * (pv - b) / (r * r);
                            if inside {
                                dp[bc * hw + j] -= gv / r;
                            }
                        }
                    }
                    MembershipFn::Gaussian { mean, sigma, .. } => {
                        let mu = f.eval(pv);
                        let d = pv - mean;
                        let s2 = sigma * sigma;
                        dnat[2 * i] += gv * mu * d / s2;
                        // d/d(ln sigma) = sigma · d/d sigma
                        dnat[2 * i + 1] += gv * mu * d * d / s2;
                        if inside {
                            dp[bc * hw + j] -= gv * mu * d / s2;
                        }
                    }
                }
            }
        }
    }
    let dfree = match kind {
        MembershipKind::Triangular => {
            let mut out = vec![0.0; raw.len()];
            for i in 0..n {
                let (ga, gb, gc) = (dnat[3 * i], dnat[3 * i + 1], dnat[3 * i + 2]);
                out[3 * i] = ga + gb + gc;
                out[3 * i + 1] = (gb + gc) * raw[3 * i + 1].exp();
                out[3 * i + 2] = gc * raw[3 * i + 2].exp();
            }
            out
        }
        MembershipKind::Gaussian => dnat,
    };
    (dp, dfree)
}

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: DenseArray,
    pub numeric: DenseArray,
    pub max_rel_error: f64,
}

/// Magnitude below which relative error falls back to absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of a scalar function with central finite
/// differences of step `step` at `x`. Spike nodes are differentiated through
/// their surrogate, so `f` should run its tape in [`SpikeMode::Smooth`] for
/// the comparison to be meaningful.
pub fn grad_check<F>(f: F, x: &DenseArray, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |input: &DenseArray| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(input.clone());
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return dim_err("grad_check needs a scalar-valued function");
        }
        let val = y.data()[0];
        if !val.is_finite() {
            return Err(Error::Numeric("function value is not finite".into()));
        }
        Ok(val)
    };
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| DenseArray::zeros(x.shape()));
    analytic.check_finite("analytic gradient")?;
    let mut numeric = DenseArray::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * step);
    }
    let max_rel_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}
