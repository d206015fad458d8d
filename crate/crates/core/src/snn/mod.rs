//! Leaky integrate-and-fire dynamics and the spiking layers of the Q-network:
//! convolution blocks, token embedding, ternary cross-attention fusion and
//! the fully connected head.
//!
//! Layers run on a [`Tape`](crate::Tape) over time-major batches
//! `[T·B, ...]` so that one forward pass covers the whole simulation window
//! and backpropagation through time falls out of the tape.

mod layers;
mod lif;

pub use layers::{Activation, ConvStack, CrossFusion, Embedding, FcHead, HeadOutput, Neurons};
pub use lif::{lif_step, LifState};

use crate::autodiff::{Dynamics, NeuronSpec, Surrogate};
use crate::error::{dim_err, Result};
use crate::kernels::conv_out_extent;

impl Neurons {
    /// Binary LIF everywhere, ternary LIF with `theta_neg` for queries and keys.
    pub fn spiking(tau: f64, theta: f64, theta_neg: f64, surrogate: Surrogate) -> Self {
        let dynamics = Dynamics::Leaky { tau };
        Self {
            binary: Activation::Spiking(NeuronSpec::binary(dynamics, theta, surrogate)),
            ternary: Activation::Spiking(NeuronSpec::ternary(dynamics, theta, theta_neg, surrogate)),
        }
    }
}

/// Shape-level description of one stage, used to validate a topology.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    ConvLif {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        height: usize,
        width: usize,
    },
    Embed {
        tokens: usize,
        in_dim: usize,
        dim: usize,
    },
    CrossFusion {
        tokens: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
    },
    FcLif {
        inputs: usize,
        hidden: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    /// Values per sample consumed.
    pub fn input_len(&self) -> usize {
        match *self {
            LayerSpec::ConvLif {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
            LayerSpec::Embed { tokens, in_dim, .. } => tokens * in_dim,
            LayerSpec::CrossFusion { tokens, dim, .. } => tokens * dim,
            LayerSpec::FcLif { inputs, .. } => inputs,
        }
    }

    /// Values per sample produced, or `None` if the shapes do not fit.
    pub fn output_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::ConvLif {
                out_channels,
                kernel,
                stride,
                padding,
                height,
                width,
                ..
            } => {
                let h = conv_out_extent(height, kernel, stride, padding)?;
                let w = conv_out_extent(width, kernel, stride, padding)?;
                Some(out_channels * h * w)
            }
            LayerSpec::Embed { tokens, dim, .. } => Some(tokens * dim),
            LayerSpec::CrossFusion { tokens, dim, heads, .. } => {
                (heads > 0 && dim % heads == 0).then_some(tokens * dim)
            }
            LayerSpec::FcLif { outputs, .. } => Some(outputs),
        }
    }
}

/// Checks that each stage consumes what the previous one produces.
pub fn check_chain(layers: &[LayerSpec]) -> Result<()> {
    for (i, pair) in layers.windows(2).enumerate() {
        let out = pair[0].output_len();
        if out != Some(pair[1].input_len()) {
            return dim_err(format!(
                "layer {} produces {out:?} values but layer {} expects {}",
                i,
                i + 1,
                pair[1].input_len()
            ));
        }
    }
    if let Some(last) = layers.last() {
        if last.output_len().is_none() {
            return dim_err(format!("layer {} has inconsistent shapes", layers.len() - 1));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, SpikeMode, Tape};
    use crate::params::ParamStore;
    use crate::spikes::Alphabet;
    use crate::tensor::DenseArray;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lif() -> Neurons {
        Neurons::spiking(2.0, 1.0, -4.0, Surrogate::default())
    }

    fn binary_frames(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> DenseArray {
        let n = shape.iter().product();
        let data = (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
        DenseArray::new(shape, data).unwrap()
    }

    fn in_alphabet(a: &DenseArray, alphabet: Alphabet) -> bool {
        a.data().iter().all(|&v| alphabet.contains(v))
    }

    fn stack() -> ConvStack {
        ConvStack {
            prefix: "c".into(),
            in_channels: 2,
            channels: vec![4, 3],
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }

    #[test]
    fn conv_block_zero_in_zero_out() {
        let s = stack();
        let mut store = ParamStore::new();
        s.register(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(DenseArray::zeros(&[3 * 2, 2, 8, 8]));
        let y = s.forward(&mut tape, &p, x, 3, &lif().binary).unwrap();
        assert_eq!(tape.shape(y), &[6, 3, 2, 2]);
        assert_eq!(tape.value(y).sum(), 0.0);
        assert_eq!(s.output_shape(8, 8), Some((3, 2, 2)));
    }

    #[test]
    fn unit_kernel_passes_single_spike_through() {
        let s = ConvStack {
            prefix: "c".into(),
            in_channels: 1,
            channels: vec![1],
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let mut store = ParamStore::new();
        store.insert("c.conv1.w", DenseArray::full(&[1, 1, 1, 1], 2.0));
        store.insert("c.conv1.b", DenseArray::zeros(&[1]));
        let steps = 3;
        let mut frames = DenseArray::zeros(&[steps, 1, 3, 3]);
        frames.set(&[1, 0, 1, 2], 1.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(frames.clone());
        let y = s.forward(&mut tape, &p, x, steps, &lif().binary).unwrap();
        assert_eq!(tape.value(y), &frames);
    }

    #[test]
    fn cross_fusion_single_head_score() {
        let d = 4;
        let f = CrossFusion {
            prefix: "f".into(),
            tokens: 1,
            dim: d,
            heads: 1,
            ffn: 8,
        };
        let mut store = ParamStore::new();
        f.register(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        // Identity projections with a strong drive make Q = K = +1.
        store.insert("f.ab.wq", DenseArray::identity(d));
        store.insert("f.ab.wk", DenseArray::identity(d));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let e = tape.constant(DenseArray::full(&[1, d], 2.0));
        let s = f.scores(&mut tape, &p, 0, e, e, 1, &lif()).unwrap();
        assert_eq!(tape.value(s).data(), &[d as f64]);
        assert_eq!(tape.counters().score_multiplications, 0);
        assert_eq!(tape.counters().ternary_accumulations, d as u64);
    }

    fn fusion() -> CrossFusion {
        CrossFusion {
            prefix: "f".into(),
            tokens: 4,
            dim: 8,
            heads: 2,
            ffn: 16,
        }
    }

    #[test]
    fn cross_fusion_zero_input_has_zero_scores() {
        let f = fusion();
        let mut store = ParamStore::new();
        f.register(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = tape.constant(DenseArray::zeros(&[2 * 4, 8]));
        let s = f.scores(&mut tape, &p, 0, z, z, 2, &lif()).unwrap();
        assert_eq!(tape.value(s).max_abs(), 0.0);
        let out = f.forward(&mut tape, &p, z, z, 2, &lif()).unwrap();
        assert!(in_alphabet(tape.value(out), Alphabet::Binary));
    }

    #[test]
    fn cross_fusion_rejects_token_mismatch() {
        let f = fusion();
        let mut store = ParamStore::new();
        f.register(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(DenseArray::zeros(&[8, 8]));
        let b = tape.constant(DenseArray::zeros(&[12, 8]));
        assert!(f.forward(&mut tape, &p, a, b, 2, &lif()).is_err());
    }

    #[test]
    fn ternary_scores_use_no_multiplications() {
        let f = fusion();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        f.register(&mut store, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(binary_frames(&[3 * 4, 8], 0.5, &mut rng).map(|v| 3.0 * v));
        let b = tape.constant(binary_frames(&[3 * 4, 8], 0.5, &mut rng).map(|v| -9.0 * v));
        let before = tape.counters().score_multiplications;
        let s = f.scores(&mut tape, &p, 0, a, b, 3, &lif()).unwrap();
        assert_eq!(tape.counters().score_multiplications, before);
        assert!(tape.counters().ternary_accumulations > 0);
        assert!(tape.value(s).data().iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn head_zero_input_gives_zero_lambda() {
        let h = FcHead {
            prefix: "h".into(),
            inputs: 6,
            hidden: 5,
            outputs: 4,
            output_bias: false,
        };
        let mut store = ParamStore::new();
        h.register(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(DenseArray::zeros(&[3 * 2, 6]));
        let out = h.forward(&mut tape, &p, x, 3, &lif().binary).unwrap();
        assert_eq!(tape.shape(out.lambda), &[2, 4]);
        assert_eq!(tape.value(out.lambda).max_abs(), 0.0);
    }

    #[test]
    fn scaling_positive_weights_does_not_reduce_spikes() {
        // 4-unit toy layer, fixed positive input, brute force over seeds.
        let steps = 6;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = FcHead {
                prefix: "h".into(),
                inputs: 3,
                hidden: 4,
                outputs: 1,
                output_bias: false,
            };
            let mut store = ParamStore::new();
            h.register(&mut store, &mut rng);
            let x: Vec<f64> = (0..steps * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let count = |store: &ParamStore| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let xv = tape.constant(DenseArray::new(&[steps, 3], x.clone()).unwrap());
                let out = h.forward(&mut tape, &p, xv, steps, &lif().binary).unwrap();
                tape.value(out.hidden).sum()
            };
            let base = count(&store);
            let w = store.get_mut("h.w1").unwrap();
            *w = w.map(|v| if v > 0.0 { 10.0 * v } else { v });
            assert!(count(&store) >= base, "seed {seed}");
        }
    }

    #[test]
    fn two_layer_toy_gradients_match_finite_differences() {
        let steps = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DenseArray::new(&[steps, 3], (0..6).map(|_| rng.gen_range(0.0..1.5)).collect()).unwrap();
        let w2 = DenseArray::new(&[4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w1 = DenseArray::new(&[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let neurons = lif();
        let check = grad_check(
            |tape, w| {
                tape.set_spike_mode(SpikeMode::Smooth);
                let xv = tape.constant(x.clone());
                let h = tape.matmul(xv, w)?;
                let h = neurons.binary.apply(tape, h, steps)?;
                let w2v = tape.constant(w2.clone());
                let o = tape.matmul(h, w2v)?;
                let o = neurons.binary.apply(tape, o, steps)?;
                Ok(tape.sum(o))
            },
            &w1,
            1e-3,
        )
        .unwrap();
        assert!(check.analytic.all_finite());
        assert!(check.max_rel_error < 1e-3, "{}", check.max_rel_error);
    }

    #[test]
    fn chain_validation() {
        let conv = LayerSpec::ConvLif {
            in_channels: 2,
            out_channels: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
            height: 8,
            width: 8,
        };
        let embed = LayerSpec::Embed {
            tokens: 16,
            in_dim: 4,
            dim: 8,
        };
        let fuse = LayerSpec::CrossFusion {
            tokens: 16,
            dim: 8,
            heads: 2,
            ffn: 16,
        };
        let fc = LayerSpec::FcLif {
            inputs: 128,
            hidden: 10,
            outputs: 5,
        };
        check_chain(&[conv.clone(), embed.clone(), fuse.clone(), fc]).unwrap();
        let bad_fc = LayerSpec::FcLif {
            inputs: 100,
            hidden: 10,
            outputs: 5,
        };
        assert!(check_chain(&[conv, embed, fuse, bad_fc]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn layers_stay_in_alphabet_and_reset(seed in 0u64..1000, p in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let steps = 3;
            let s = stack();
            let emb = Embedding { prefix: "e".into(), tokens: 4, in_dim: 3, dim: 8 };
            let f = fusion();
            let mut store = ParamStore::new();
            s.register(&mut store, &mut rng);
            emb.register(&mut store, &mut rng);
            f.register(&mut store, &mut rng);
            let frames = binary_frames(&[steps, 2, 8, 8], p, &mut rng);
            let run = || {
                let mut tape = Tape::new();
                let params = store.bind(&mut tape);
                let x = tape.constant(frames.clone());
                let c = s.forward(&mut tape, &params, x, steps, &lif().binary).unwrap();
                let e = emb.forward(&mut tape, &params, c, steps, &lif().binary).unwrap();
                let out = f.forward(&mut tape, &params, e, e, steps, &lif()).unwrap();
                let q = f.scores(&mut tape, &params, 1, e, e, steps, &lif()).unwrap();
                (tape.value(c).clone(), tape.value(e).clone(), tape.value(out).clone(), tape.value(q).clone())
            };
            let (c, e, out, q) = run();
            prop_assert!(in_alphabet(&c, Alphabet::Binary));
            prop_assert!(in_alphabet(&e, Alphabet::Binary));
            prop_assert!(in_alphabet(&out, Alphabet::Binary));
            prop_assert!(q.data().iter().all(|v| v.fract() == 0.0));
            let again = run();
            prop_assert_eq!(&again.2, &out);
        }
    }
}
