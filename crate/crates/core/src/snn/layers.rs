use rand::Rng;

use crate::autodiff::{NeuronSpec, Tape, Var};
use crate::error::{dim_err, Result};
use crate::kernels::conv_out_extent;
use crate::params::{Bound, ParamStore};
use crate::tensor::DenseArray;

/// Nonlinearity between layers: a spiking population or, for the
/// non-spiking baseline, a ReLU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Spiking(NeuronSpec),
    Relu,
}

impl Activation {
    /// `x` is time-major `[steps·B, ...]`.
    pub fn apply(&self, tape: &mut Tape, x: Var, steps: usize) -> Result<Var> {
        match self {
            Activation::Spiking(spec) => tape.neurons(x, steps, *spec),
            Activation::Relu => Ok(tape.relu(x)),
        }
    }
}

/// Activations used throughout a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neurons {
    pub binary: Activation,
    /// Query/key populations of the cross-attention.
    pub ternary: Activation,
}

impl Neurons {
    pub fn relu() -> Self {
        Self {
            binary: Activation::Relu,
            ternary: Activation::Relu,
        }
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> DenseArray {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseArray::new(shape, data).expect("valid shape")
}

/// Stacked `conv → activation` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub prefix: String,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvStack {
    fn name(&self, i: usize, part: &str) -> String {
        format!("{}.conv{}.{part}", self.prefix, i + 1)
    }

    /// Output `(channels, height, width)` for an `h × w` input.
    pub fn output_shape(&self, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        let (mut h, mut w) = (h, w);
        for _ in &self.channels {
            h = conv_out_extent(h, self.kernel, self.stride, self.padding)?;
            w = conv_out_extent(w, self.kernel, self.stride, self.padding)?;
        }
        Some((*self.channels.last().unwrap_or(&self.in_channels), h, w))
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let mut c = self.in_channels;
        for (i, &o) in self.channels.iter().enumerate() {
            let l = self.kernel;
            store.insert_uniform(self.name(i, "w"), &[o, c, l, l], c * l * l, rng);
            store.insert(self.name(i, "b"), DenseArray::zeros(&[o]));
            c = o;
        }
    }

    /// `x[steps·B, C, H, W]`. Multiplications of block `i` are counted under
    /// stage `{prefix}.conv{i+1}`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var, steps: usize, act: &Activation) -> Result<Var> {
        let mut h = x;
        for i in 0..self.channels.len() {
            tape.set_stage(format!("{}.conv{}", self.prefix, i + 1));
            h = tape.conv2d(h, params.var(&self.name(i, "w"))?, self.stride, self.padding)?;
            h = tape.channel_bias(h, params.var(&self.name(i, "b"))?)?;
            tape.mark(self.name(i, "w"), h);
            h = act.apply(tape, h, steps)?;
        }
        Ok(h)
    }
}

/// Projects each spatial position of a feature map to a `dim`-wide token and
/// adds a learnable positional encoding before the activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub prefix: String,
    pub tokens: usize,
    pub in_dim: usize,
    pub dim: usize,
}

impl Embedding {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert_uniform(self.name("w"), &[self.in_dim, self.dim], self.in_dim, rng);
        store.insert(self.name("pos"), uniform(&[self.tokens * self.dim], 0.02, rng));
    }

    /// `x[steps·B, C, h, w]` with `h·w = tokens` → tokens `[steps·B·tokens, dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var, steps: usize, act: &Activation) -> Result<Var> {
        let (tb, c, l) = match tape.shape(x)[..] {
            [tb, c, h, w] => (tb, c, h * w),
            ref s => return dim_err(format!("embedding input must be rank 4, got {s:?}")),
        };
        if c != self.in_dim || l != self.tokens {
            return dim_err(format!(
                "embedding expects {} channels and {} tokens, got {c} and {l}",
                self.in_dim, self.tokens
            ));
        }
        tape.set_stage(self.prefix.as_str());
        let t = tape.permute(x, &[0, 2, 3, 1])?;
        let t = tape.reshape(t, &[tb * l, c])?;
        let e = tape.matmul(t, params.var(&self.name("w"))?)?;
        tape.mark(self.name("w"), e);
        let e = tape.reshape(e, &[tb, l * self.dim])?;
        let e = tape.add_bias(e, params.var(&self.name("pos"))?)?;
        let e = act.apply(tape, e, steps)?;
        tape.reshape(e, &[tb * l, self.dim])
    }
}

/// Bidirectional spiking cross-attention between two token sets, followed
/// by a feed-forward sublayer.
///
/// Each direction takes queries from one modality and keys and values from
/// the other. Queries and keys are ternary spikes, so attention scores are
/// integer sums; they are scaled by `1/sqrt(d_head)` with no softmax. The two
/// directions' projected outputs are summed into a shared residual stream.
/// LayerNorm acts on membrane currents, before thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossFusion {
    pub prefix: String,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
}

const DIRECTIONS: [&str; 2] = ["ab", "ba"];
const LN_EPS: f64 = 1e-5;

impl CrossFusion {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.dim;
        for dir in DIRECTIONS {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert_uniform(self.name(&format!("{dir}.{w}")), &[d, d], d, rng);
            }
        }
        for ln in ["ln1", "ln2"] {
            store.insert(self.name(&format!("{ln}.gamma")), DenseArray::ones(&[d]));
            store.insert(self.name(&format!("{ln}.beta")), DenseArray::zeros(&[d]));
        }
        store.insert_uniform(self.name("ffn.w1"), &[d, self.ffn], d, rng);
        store.insert(self.name("ffn.b1"), DenseArray::zeros(&[self.ffn]));
        store.insert_uniform(self.name("ffn.w2"), &[self.ffn, d], self.ffn, rng);
        store.insert(self.name("ffn.b2"), DenseArray::zeros(&[d]));
    }

    /// `[steps·B·L, D]` → `[steps·B·heads, L, d_head]`.
    fn split_heads(&self, tape: &mut Tape, x: Var, tb: usize) -> Result<Var> {
        let (l, h, dh) = (self.tokens, self.heads, self.head_dim());
        let x = tape.reshape(x, &[tb, l, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[tb * h, l, dh])
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, tb: usize) -> Result<Var> {
        let (l, h, dh) = (self.tokens, self.heads, self.head_dim());
        let x = tape.reshape(x, &[tb, h, l, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[tb * l, self.dim])
    }

    /// Attention scores of one direction, `[steps·B·heads, L, L]`, before scaling.
    #[allow(clippy::too_many_arguments)]
    pub fn scores(
        &self,
        tape: &mut Tape,
        params: &Bound,
        dir: usize,
        queries: Var,
        keys: Var,
        steps: usize,
        neurons: &Neurons,
    ) -> Result<Var> {
        let tb = tape.shape(queries)[0] / self.tokens;
        let dir = DIRECTIONS[dir];
        let (wq, wk) = (self.name(&format!("{dir}.wq")), self.name(&format!("{dir}.wk")));
        let q = tape.matmul(queries, params.var(&wq)?)?;
        tape.mark(wq, q);
        let q = neurons.ternary.apply(tape, q, steps)?;
        let k = tape.matmul(keys, params.var(&wk)?)?;
        tape.mark(wk, k);
        let k = neurons.ternary.apply(tape, k, steps)?;
        let q = self.split_heads(tape, q, tb)?;
        let k = self.split_heads(tape, k, tb)?;
        tape.batch_matmul(q, k, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        tape: &mut Tape,
        params: &Bound,
        dir: usize,
        queries: Var,
        kv: Var,
        steps: usize,
        neurons: &Neurons,
    ) -> Result<Var> {
        let tb = tape.shape(queries)[0] / self.tokens;
        let scores = self.scores(tape, params, dir, queries, kv, steps, neurons)?;
        let scores = tape.scale(scores, 1.0 / (self.head_dim() as f64).sqrt());
        let name = DIRECTIONS[dir];
        let wv = self.name(&format!("{name}.wv"));
        let v = tape.matmul(kv, params.var(&wv)?)?;
        tape.mark(wv, v);
        let v = neurons.binary.apply(tape, v, steps)?;
        let v = self.split_heads(tape, v, tb)?;
        let att = tape.batch_matmul(scores, v, false)?;
        let att = self.merge_heads(tape, att, tb)?;
        let att = neurons.binary.apply(tape, att, steps)?;
        tape.matmul(att, params.var(&self.name(&format!("{name}.wo")))?)
    }

    /// Fuses token sets `a`, `b` (each `[steps·B·L, D]`) into `[steps·B·L, D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        a: Var,
        b: Var,
        steps: usize,
        neurons: &Neurons,
    ) -> Result<Var> {
        let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
        if sa != sb || sa.len() != 2 || sa[1] != self.dim || sa[0] % self.tokens != 0 {
            return dim_err(format!(
                "cross fusion needs two [steps·B·{}, {}] token sets, got {sa:?} and {sb:?}",
                self.tokens, self.dim
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return dim_err(format!("{} heads do not divide width {}", self.heads, self.dim));
        }
        tape.set_stage(self.prefix.as_str());
        let ab = self.direction(tape, params, 0, a, b, steps, neurons)?;
        let ba = self.direction(tape, params, 1, b, a, steps, neurons)?;
        let mut z = tape.add(a, b)?;
        z = tape.add(z, ab)?;
        z = tape.add(z, ba)?;
        let z = self.norm(tape, params, z, "ln1")?;
        let s1 = neurons.binary.apply(tape, z, steps)?;
        let f = tape.matmul(s1, params.var(&self.name("ffn.w1"))?)?;
        let f = tape.add_bias(f, params.var(&self.name("ffn.b1"))?)?;
        tape.mark(self.name("ffn.w1"), f);
        let f = neurons.binary.apply(tape, f, steps)?;
        let f = tape.matmul(f, params.var(&self.name("ffn.w2"))?)?;
        let f = tape.add_bias(f, params.var(&self.name("ffn.b2"))?)?;
        let z = tape.add(s1, f)?;
        let z = self.norm(tape, params, z, "ln2")?;
        neurons.binary.apply(tape, z, steps)
    }

    fn norm(&self, tape: &mut Tape, params: &Bound, x: Var, ln: &str) -> Result<Var> {
        let gamma = self.name(&format!("{ln}.gamma"));
        let g = params.var(&gamma)?;
        let b = params.var(&self.name(&format!("{ln}.beta")))?;
        let y = tape.layer_norm(x, g, b, LN_EPS)?;
        tape.mark(gamma, y);
        Ok(y)
    }
}

/// Fully connected hidden layer followed by the population readout.
#[derive(Clone, Debug, PartialEq)]
pub struct FcHead {
    pub prefix: String,
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    /// Adds a bias to the readout (used by the non-spiking baseline).
    pub output_bias: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Hidden activations, `[steps·B, hidden]`.
    pub hidden: Var,
    /// Readout summed over time, `[B, outputs]`.
    pub lambda: Var,
}

impl FcHead {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert_uniform(self.name("w1"), &[self.inputs, self.hidden], self.inputs, rng);
        store.insert(self.name("b1"), DenseArray::zeros(&[self.hidden]));
        store.insert_uniform(self.name("w_out"), &[self.hidden, self.outputs], self.hidden, rng);
        if self.output_bias {
            store.insert(self.name("b_out"), DenseArray::zeros(&[self.outputs]));
        }
    }

    /// `x[steps·B, inputs]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        steps: usize,
        act: &Activation,
    ) -> Result<HeadOutput> {
        tape.set_stage(self.prefix.as_str());
        let h = tape.matmul(x, params.var(&self.name("w1"))?)?;
        let h = tape.add_bias(h, params.var(&self.name("b1"))?)?;
        tape.mark(self.name("w1"), h);
        let hidden = act.apply(tape, h, steps)?;
        let mut y = tape.matmul(hidden, params.var(&self.name("w_out"))?)?;
        if self.output_bias {
            y = tape.add_bias(y, params.var(&self.name("b_out"))?)?;
        }
        let lambda = tape.sum_time(y, steps)?;
        Ok(HeadOutput { hidden, lambda })
    }
}
