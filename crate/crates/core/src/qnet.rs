//! End-to-end Q-networks: fuzzy encoder–decoder spiking network, the
//! rate-coded spiking baseline and the non-spiking baseline, all on the same
//! two-modality convolution / embedding / cross-fusion / head topology.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::analysis::{conv_multiplications, fuzzy_encoder_multiplications, ConvSpec};
use crate::autodiff::{MembershipKind, Surrogate, Tape, Var};
use crate::codec::{bernoulli_frames, encoder_neuron, MembershipBank, NeuralDecoder, PopulationActivation, QVector};
use crate::error::{dim_err, Error, Result};
use crate::kernels::conv_out_extent;
use crate::params::{Bound, ParamStore};
use crate::snn::{check_chain, Activation, ConvStack, CrossFusion, Embedding, FcHead, LayerSpec, LifState, Neurons};
use crate::tensor::DenseArray;

/// The two image modalities, in fusion order.
pub const MODALITIES: [&str; 2] = ["bev", "lidar"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Encoder {
    Fuzzy(MembershipKind),
    Rate,
    /// Raw pixels into a non-spiking network.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decoder {
    /// Population readout followed by a small ReLU network.
    Neural,
    /// One output unit per action; Q is its accumulated activation.
    WeightedSum,
    /// Linear readout of the non-spiking network.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Variant {
    pub const FUZZY: Variant = Variant {
        encoder: Encoder::Fuzzy(MembershipKind::Triangular),
        decoder: Decoder::Neural,
    };
    pub const FUZZY_WS: Variant = Variant {
        encoder: Encoder::Fuzzy(MembershipKind::Triangular),
        decoder: Decoder::WeightedSum,
    };
    pub const GAUSSIAN: Variant = Variant {
        encoder: Encoder::Fuzzy(MembershipKind::Gaussian),
        decoder: Decoder::Neural,
    };
    pub const RATE: Variant = Variant {
        encoder: Encoder::Rate,
        decoder: Decoder::WeightedSum,
    };
    pub const ANN: Variant = Variant {
        encoder: Encoder::None,
        decoder: Decoder::None,
    };

    /// The ablation matrix.
    pub const ABLATION: [Variant; 5] = [
        Variant::FUZZY,
        Variant::FUZZY_WS,
        Variant::ANN,
        Variant::GAUSSIAN,
        Variant::RATE,
    ];

    pub fn new(encoder: Encoder, decoder: Decoder) -> Result<Self> {
        let spiking = encoder != Encoder::None;
        if spiking == (decoder == Decoder::None) {
            return Err(Error::Config(format!(
                "encoder {encoder:?} cannot be combined with decoder {decoder:?}"
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn is_spiking(&self) -> bool {
        self.encoder != Encoder::None
    }

    pub fn name(&self) -> &'static str {
        match (self.encoder, self.decoder) {
            (Encoder::Fuzzy(MembershipKind::Triangular), Decoder::Neural) => "fuzzy",
            (Encoder::Fuzzy(MembershipKind::Triangular), Decoder::WeightedSum) => "fuzzy-ws",
            (Encoder::Fuzzy(MembershipKind::Gaussian), Decoder::Neural) => "gaussian",
            (Encoder::Fuzzy(MembershipKind::Gaussian), Decoder::WeightedSum) => "gaussian-ws",
            (Encoder::Rate, Decoder::Neural) => "rate-neural",
            (Encoder::Rate, Decoder::WeightedSum) => "rate",
            _ => "ann",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tri = Encoder::Fuzzy(MembershipKind::Triangular);
        let gauss = Encoder::Fuzzy(MembershipKind::Gaussian);
        let (e, d) = match s {
            "fuzzy" => (tri, Decoder::Neural),
            "fuzzy-ws" => (tri, Decoder::WeightedSum),
            "gaussian" => (gauss, Decoder::Neural),
            "gaussian-ws" => (gauss, Decoder::WeightedSum),
            "rate" => (Encoder::Rate, Decoder::WeightedSum),
            "rate-neural" => (Encoder::Rate, Decoder::Neural),
            "ann" => (Encoder::None, Decoder::None),
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant `{s}` (expected fuzzy, fuzzy-ws, gaussian, gaussian-ws, rate, rate-neural or ann)"
                )))
            }
        };
        Variant::new(e, d)
    }
}

/// Shapes and neuron constants shared by every variant.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// `[C, H, W]` of the bird's-eye view.
    pub bev_shape: [usize; 3],
    /// `[C, H, W]` of the LiDAR occupancy grid.
    pub lidar_shape: [usize; 3],
    /// Simulation window of the spiking variants.
    pub steps: usize,
    /// Membership functions per input channel.
    pub memberships: usize,
    /// Output neurons per action for the neural decoder.
    pub populations: usize,
    pub actions: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub head_hidden: usize,
    pub decoder_hidden: usize,
    pub tau: f64,
    pub threshold: f64,
    pub negative_threshold: f64,
    pub surrogate_alpha: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            bev_shape: [1, 32, 32],
            lidar_shape: [1, 32, 32],
            steps: 5,
            memberships: 3,
            populations: 5,
            actions: 5,
            conv_channels: vec![8, 16, 16],
            kernel: 3,
            stride: 2,
            padding: 1,
            embed_dim: 32,
            heads: 8,
            ffn: 128,
            head_hidden: 512,
            decoder_hidden: 64,
            tau: 2.0,
            threshold: 1.0,
            negative_threshold: -4.0,
            surrogate_alpha: 2.0,
        }
    }
}

/// A batch of observations, `[B, C, H, W]` per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub bev: DenseArray,
    pub lidar: DenseArray,
}

impl ObsBatch {
    pub fn new(bev: DenseArray, lidar: DenseArray) -> Result<Self> {
        if bev.rank() != 4 || lidar.rank() != 4 || bev.shape()[0] != lidar.shape()[0] {
            return dim_err(format!(
                "observation batch needs [B, C, H, W] per modality, got {:?} and {:?}",
                bev.shape(),
                lidar.shape()
            ));
        }
        Ok(Self { bev, lidar })
    }

    /// Stacks `[C, H, W]` frames into a batch.
    pub fn stack<'a>(frames: impl IntoIterator<Item = (&'a DenseArray, &'a DenseArray)>) -> Result<Self> {
        let mut bev = Vec::new();
        let mut lidar = Vec::new();
        let mut shapes: Option<(Vec<usize>, Vec<usize>)> = None;
        let mut n = 0;
        for (b, l) in frames {
            match &shapes {
                None => shapes = Some((b.shape().to_vec(), l.shape().to_vec())),
                Some((sb, sl)) if sb != b.shape() || sl != l.shape() => {
                    return dim_err("observation frames differ in shape")
                }
                _ => {}
            }
            bev.extend_from_slice(b.data());
            lidar.extend_from_slice(l.data());
            n += 1;
        }
        let (sb, sl) = shapes.ok_or_else(|| Error::Dimension("empty observation batch".into()))?;
        let batched = |s: &[usize]| [&[n][..], s].concat();
        Self::new(
            DenseArray::new(&batched(&sb), bev)?,
            DenseArray::new(&batched(&sl), lidar)?,
        )
    }

    pub fn len(&self) -> usize {
        self.bev.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn modality(&self, i: usize) -> &DenseArray {
        if i == 0 {
            &self.bev
        } else {
            &self.lidar
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct QOutput {
    /// `[B, actions]`.
    pub q: Var,
    /// Accumulated readout `[B, P]` (the population activation for the
    /// neural decoder).
    pub lambda: Var,
    /// Hidden activity of the head, `[T·B, head_hidden]`.
    pub hidden: Var,
}

/// Per-stage multiplication counts for one observation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCounts {
    /// Closed-form counts for the encoder and first convolution of each modality.
    pub analytic: BTreeMap<String, u64>,
    /// Counts recorded by the tape, for every stage.
    pub instrumented: BTreeMap<String, u64>,
}

#[derive(Clone, Debug)]
struct Stream {
    conv: ConvStack,
    embed: Embedding,
    shape: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct QNetwork {
    config: NetworkConfig,
    variant: Variant,
    streams: Vec<Stream>,
    fusion: CrossFusion,
    head: FcHead,
    decoder: Option<NeuralDecoder>,
    neurons: Neurons,
    tokens: usize,
}

impl QNetwork {
    pub fn new(config: NetworkConfig, variant: Variant) -> Result<Self> {
        Variant::new(variant.encoder, variant.decoder)?;
        let c = &config;
        if c.steps == 0 || c.memberships == 0 || c.populations == 0 || c.actions == 0 {
            return Err(Error::Config(
                "steps, memberships, populations and actions must be positive".into(),
            ));
        }
        if c.conv_channels.is_empty() {
            return Err(Error::Config("at least one convolution is required".into()));
        }
        if c.heads == 0 || !c.embed_dim.is_multiple_of(c.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide embedding width {}",
                c.heads, c.embed_dim
            )));
        }
        let surrogate = Surrogate::new(c.surrogate_alpha)?;
        let neurons = if variant.is_spiking() {
            // validates the neuron constants
            LifState::new(&[1], c.tau, c.threshold, Some(c.negative_threshold))?;
            Neurons::spiking(c.tau, c.threshold, c.negative_threshold, surrogate)
        } else {
            Neurons::relu()
        };
        let fan = match variant.encoder {
            Encoder::Fuzzy(_) => c.memberships,
            _ => 1,
        };
        let mut streams = Vec::new();
        let mut grid = None;
        for (name, shape) in MODALITIES.iter().zip([c.bev_shape, c.lidar_shape]) {
            let conv = ConvStack {
                prefix: (*name).into(),
                in_channels: fan * shape[0],
                channels: c.conv_channels.clone(),
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            };
            let out = conv.output_shape(shape[1], shape[2]).ok_or_else(|| {
                Error::Config(format!("{name} input {shape:?} is too small for the convolution stack"))
            })?;
            if grid.is_some_and(|g| g != out) {
                return Err(Error::Config("both modalities must produce the same token grid".into()));
            }
            grid = Some(out);
            let embed = Embedding {
                prefix: format!("{name}.embed"),
                tokens: out.1 * out.2,
                in_dim: out.0,
                dim: c.embed_dim,
            };
            streams.push(Stream { conv, embed, shape });
        }
        let tokens = streams[0].embed.tokens;
        let fusion = CrossFusion {
            prefix: "fusion".into(),
            tokens,
            dim: c.embed_dim,
            heads: c.heads,
            ffn: c.ffn,
        };
        let readout = match variant.decoder {
            Decoder::Neural => c.populations * c.actions,
            _ => c.actions,
        };
        let head = FcHead {
            prefix: "head".into(),
            inputs: tokens * c.embed_dim,
            hidden: c.head_hidden,
            outputs: readout,
            output_bias: !variant.is_spiking(),
        };
        let decoder = (variant.decoder == Decoder::Neural)
            .then(|| NeuralDecoder::new("decoder", readout, c.decoder_hidden, c.actions));
        let net = Self {
            config,
            variant,
            streams,
            fusion,
            head,
            decoder,
            neurons,
            tokens,
        };
        net.check_topology()?;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Time steps per forward pass: the simulation window, or 1 when non-spiking.
    pub fn steps(&self) -> usize {
        if self.variant.is_spiking() {
            self.config.steps
        } else {
            1
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Channels entering the first convolution of each modality.
    pub fn first_conv_channels(&self) -> [usize; 2] {
        [self.streams[0].conv.in_channels, self.streams[1].conv.in_channels]
    }

    pub fn membership_param(modality: &str) -> String {
        format!("{modality}.membership")
    }

    /// Registers all trainable parameters, membership banks included.
    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for s in &self.streams {
            if let Encoder::Fuzzy(kind) = self.variant.encoder {
                let bank = MembershipBank::evenly_spaced(kind, self.config.memberships)?;
                store.insert(Self::membership_param(&s.conv.prefix), bank.raw().clone());
            }
            s.conv.register(store, rng);
            s.embed.register(store, rng);
        }
        self.fusion.register(store, rng);
        self.head.register(store, rng);
        if let Some(d) = &self.decoder {
            d.register(store, rng);
        }
        Ok(())
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.register(&mut store, rng)?;
        Ok(store)
    }

    /// Membership bank of a modality as stored in `store`.
    pub fn bank(&self, store: &ParamStore, modality: &str) -> Result<MembershipBank> {
        let Encoder::Fuzzy(kind) = self.variant.encoder else {
            return Err(Error::Usage(format!(
                "variant {} has no membership banks",
                self.variant
            )));
        };
        MembershipBank::from_raw(kind, store.require(&Self::membership_param(modality))?.clone())
    }

    /// Layer chain: the convolution and embedding layers of each modality
    /// stream in turn, then fusion and head.
    pub fn topology(&self) -> Vec<LayerSpec> {
        let c = &self.config;
        let mut out = Vec::new();
        for s in &self.streams {
            let (mut ch, mut h, mut w) = (s.conv.in_channels, s.shape[1], s.shape[2]);
            for &o in &c.conv_channels {
                out.push(LayerSpec::ConvLif {
                    in_channels: ch,
                    out_channels: o,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    height: h,
                    width: w,
                });
                ch = o;
                h = conv_out_extent(h, c.kernel, c.stride, c.padding).unwrap_or(0);
                w = conv_out_extent(w, c.kernel, c.stride, c.padding).unwrap_or(0);
            }
            out.push(LayerSpec::Embed {
                tokens: s.embed.tokens,
                in_dim: s.embed.in_dim,
                dim: s.embed.dim,
            });
        }
        out.push(LayerSpec::CrossFusion {
            tokens: self.tokens,
            dim: c.embed_dim,
            heads: c.heads,
            ffn: c.ffn,
        });
        out.push(LayerSpec::FcLif {
            inputs: self.head.inputs,
            hidden: self.head.hidden,
            outputs: self.head.outputs,
        });
        out
    }

    fn check_topology(&self) -> Result<()> {
        let layers = self.topology();
        let k = self.config.conv_channels.len() + 1;
        check_chain(&layers[..k])?;
        check_chain(&layers[k..2 * k])?;
        check_chain(&layers[2 * k - 1..])
    }

    /// Digest of the layers every variant shares: everything except the
    /// input channels of the first convolutions and the readout width.
    pub fn shared_topology_hash(&self) -> String {
        let mut shared = self.topology();
        let k = self.config.conv_channels.len() + 1;
        for i in [0, k] {
            if let LayerSpec::ConvLif { in_channels, .. } = &mut shared[i] {
                *in_channels = 0;
            }
        }
        if let Some(LayerSpec::FcLif { outputs, .. }) = shared.last_mut() {
            *outputs = 0;
        }
        let digest = Sha256::digest(format!("{shared:?}").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn encode(
        &self,
        tape: &mut Tape,
        params: &Bound,
        modality: usize,
        x: &DenseArray,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let s = &self.streams[modality];
        let expect = [x.shape()[0], s.shape[0], s.shape[1], s.shape[2]];
        if x.shape() != expect {
            return dim_err(format!(
                "{} observations must be [B, {}, {}, {}], got {:?}",
                s.conv.prefix,
                s.shape[0],
                s.shape[1],
                s.shape[2],
                x.shape()
            ));
        }
        tape.set_stage(format!("{}.encoder", s.conv.prefix));
        let steps = self.steps();
        match self.variant.encoder {
            Encoder::Fuzzy(kind) => {
                let xv = tape.constant(x.clone());
                let p = params.var(&Self::membership_param(&s.conv.prefix))?;
                let mu = tape.membership(xv, p, kind)?;
                let currents = tape.repeat_time(mu, steps)?;
                tape.neurons(currents, steps, encoder_neuron())
            }
            Encoder::Rate => {
                let (frames, _) = bernoulli_frames(x.data(), steps, rng);
                let mut shape = x.shape().to_vec();
                shape[0] *= steps;
                Ok(tape.constant(DenseArray::new(&shape, frames)?))
            }
            Encoder::None => Ok(tape.constant(x.clone())),
        }
    }

    /// Runs the network on a batch. `rng` drives the rate encoder only.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, obs: &ObsBatch, rng: &mut impl Rng) -> Result<QOutput> {
        let steps = self.steps();
        let batch = obs.len();
        let mut tokens = Vec::with_capacity(2);
        for (i, s) in self.streams.iter().enumerate() {
            let x = self.encode(tape, params, i, obs.modality(i), rng)?;
            let h = s.conv.forward(tape, params, x, steps, &self.neurons.binary)?;
            tokens.push(s.embed.forward(tape, params, h, steps, &self.neurons.binary)?);
        }
        let fused = self
            .fusion
            .forward(tape, params, tokens[0], tokens[1], steps, &self.neurons)?;
        let flat = tape.reshape(fused, &[steps * batch, self.head.inputs])?;
        let act = self.neurons.binary;
        let head = self.head.forward(tape, params, flat, steps, &act)?;
        let q = match &self.decoder {
            Some(d) => {
                tape.set_stage("decoder");
                d.forward(tape, params, head.lambda)?
            }
            None => head.lambda,
        };
        Ok(QOutput {
            q,
            lambda: head.lambda,
            hidden: head.hidden,
        })
    }

    /// Greedy-evaluation helper: Q-vectors for every observation in `obs`.
    pub fn q_values(&self, store: &ParamStore, obs: &ObsBatch, rng: &mut impl Rng) -> Result<Vec<QVector>> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let out = self.forward(&mut tape, &params, obs, rng)?;
        let lambda = tape.value(out.lambda);
        let p = lambda.shape()[1];
        let a = self.config.actions;
        tape.value(out.q)
            .data()
            .chunks(a)
            .enumerate()
            .map(|(i, q)| {
                let population = match self.decoder {
                    Some(_) => Some(PopulationActivation::new(
                        a,
                        p / a,
                        lambda.data()[i * p..(i + 1) * p].to_vec(),
                    )?),
                    None => None,
                };
                Ok(QVector {
                    values: q.to_vec(),
                    population,
                })
            })
            .collect()
    }

    /// Runs one observation with counters on and pairs them with the closed forms.
    pub fn count_multiplications(&self, store: &ParamStore, rng: &mut impl Rng) -> Result<StageCounts> {
        let frames: Vec<DenseArray> = self
            .streams
            .iter()
            .map(|s| DenseArray::full(&[1, s.shape[0], s.shape[1], s.shape[2]], 0.5))
            .collect();
        let obs = ObsBatch::new(frames[0].clone(), frames[1].clone())?;
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        self.forward(&mut tape, &params, &obs, rng)?;
        let instrumented = tape.counters().multiplications.clone();
        let mut analytic = BTreeMap::new();
        let c = &self.config;
        let conv = ConvSpec {
            out_channels: c.conv_channels[0],
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
        };
        for s in &self.streams {
            let [ch, h, w] = s.shape;
            let enc = match self.variant.encoder {
                Encoder::Fuzzy(kind) => fuzzy_encoder_multiplications(kind, ch, c.memberships, h, w),
                _ => 0,
            };
            analytic.insert(format!("{}.encoder", s.conv.prefix), enc);
            let first = conv_multiplications(&conv, s.conv.in_channels, h, w)? * self.steps() as u64;
            analytic.insert(format!("{}.conv1", s.conv.prefix), first);
        }
        Ok(StageCounts { analytic, instrumented })
    }

    /// Data-driven initialization: visits every marked layer in forward
    /// order and rescales its weight so the pre-activation currents on `obs`
    /// have standard deviation `target_std`. Without it, currents in a
    /// freshly initialized spiking stack stay far below threshold and
    /// activity dies out after the first layer.
    pub fn calibrate(
        &self,
        store: &mut ParamStore,
        obs: &ObsBatch,
        target_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<(String, f64)>> {
        if !(target_std > 0.0 && target_std.is_finite()) {
            return Err(Error::Config(format!(
                "calibration target must be > 0, got {target_std}"
            )));
        }
        let seed: u64 = rng.gen();
        let run = |store: &ParamStore| -> Result<Tape> {
            let mut tape = Tape::new();
            let params = store.bind(&mut tape);
            self.forward(&mut tape, &params, obs, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok(tape)
        };
        let names: Vec<String> = run(store)?.marks().iter().map(|(n, _)| n.clone()).collect();
        let mut scales = Vec::with_capacity(names.len());
        for name in names {
            let tape = run(store)?;
            let (_, var) = tape.marks().iter().find(|(n, _)| *n == name).expect("mark present");
            let std = std_dev(tape.value(*var).data());
            if std <= 1e-12 {
                scales.push((name, 1.0));
                continue;
            }
            let k = target_std / std;
            let w = store.require(&name)?.map(|v| v * k);
            store.insert(name.clone(), w);
            scales.push((name, k));
        }
        Ok(scales)
    }

    /// Activation used by the hidden layers.
    pub fn activation(&self) -> Activation {
        self.neurons.binary
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::SpikeMode;
    use crate::codec::accumulate_population;
    use crate::spikes::Alphabet;
    use crate::spikes::SpikeTrain;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            bev_shape: [1, 8, 8],
            lidar_shape: [1, 8, 8],
            steps: 3,
            conv_channels: vec![4, 4],
            embed_dim: 8,
            heads: 2,
            ffn: 16,
            head_hidden: 24,
            decoder_hidden: 16,
            ..NetworkConfig::default()
        }
    }

    fn random_obs(cfg: &NetworkConfig, batch: usize, rng: &mut ChaCha8Rng) -> ObsBatch {
        let mut frame = |s: [usize; 3]| {
            let n = batch * s.iter().product::<usize>();
            DenseArray::new(
                &[batch, s[0], s[1], s[2]],
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap()
        };
        let bev = frame(cfg.bev_shape);
        let lidar = frame(cfg.lidar_shape);
        ObsBatch::new(bev, lidar).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ABLATION {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        assert!(Variant::new(Encoder::Rate, Decoder::None).is_err());
        assert!(Variant::new(Encoder::None, Decoder::Neural).is_err());
    }

    #[test]
    fn default_network_builds_for_every_variant() {
        for v in Variant::ABLATION {
            let net = QNetwork::new(NetworkConfig::default(), v).unwrap();
            assert_eq!(net.tokens(), 16);
        }
    }

    #[test]
    fn first_conv_channels_follow_encoder() {
        let cfg = NetworkConfig {
            bev_shape: [3, 8, 8],
            ..tiny()
        };
        let fuzzy = QNetwork::new(cfg.clone(), Variant::FUZZY).unwrap();
        let rate = QNetwork::new(cfg, Variant::RATE).unwrap();
        assert_eq!(fuzzy.first_conv_channels(), [9, 3]);
        assert_eq!(rate.first_conv_channels(), [3, 1]);
    }

    #[test]
    fn shared_topology_matches_across_variants() {
        let hashes: Vec<String> = Variant::ABLATION
            .iter()
            .map(|&v| QNetwork::new(tiny(), v).unwrap().shared_topology_hash())
            .collect();
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
        let wider = NetworkConfig {
            head_hidden: 32,
            ..tiny()
        };
        assert_ne!(
            QNetwork::new(wider, Variant::FUZZY).unwrap().shared_topology_hash(),
            hashes[0]
        );
    }

    #[test]
    fn deterministic_forward_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny();
        for v in Variant::ABLATION {
            let net = QNetwork::new(cfg.clone(), v).unwrap();
            let store = net.init_params(&mut rng).unwrap();
            let obs = random_obs(&cfg, 2, &mut rng);
            let a = net.q_values(&store, &obs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = net.q_values(&store, &obs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a, b, "{v}");
            assert_eq!(a.len(), 2);
            assert!(a
                .iter()
                .all(|q| q.values.len() == 5 && q.values.iter().all(|x| x.is_finite())));
            assert_eq!(
                a[0].population.as_ref().map(|p| p.values().len()),
                (v.decoder == Decoder::Neural).then_some(25)
            );
        }
    }

    #[test]
    fn zero_observation_with_zero_readout_gives_decoder_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny();
        let net = QNetwork::new(cfg.clone(), Variant::FUZZY).unwrap();
        let mut store = net.init_params(&mut rng).unwrap();
        store.insert("head.w_out", DenseArray::zeros(&[24, 25]));
        store.insert("decoder.b2", DenseArray::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
        let obs = ObsBatch::new(DenseArray::zeros(&[1, 1, 8, 8]), DenseArray::zeros(&[1, 1, 8, 8])).unwrap();
        let q = &net.q_values(&store, &obs, &mut rng).unwrap()[0];
        for (got, want) in q.values.iter().zip([0.1, 0.2, 0.3, 0.4, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_is_accumulated_head_spikes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny();
        let net = QNetwork::new(cfg.clone(), Variant::FUZZY).unwrap();
        let store = net.init_params(&mut rng).unwrap();
        let obs = random_obs(&cfg, 1, &mut rng);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let out = net.forward(&mut tape, &params, &obs, &mut rng).unwrap();
        let hidden = tape.value(out.hidden);
        let spikes = SpikeTrain::new(3, &[24], Alphabet::Binary, hidden.data().to_vec()).unwrap();
        let lambda = accumulate_population(&spikes, store.get("head.w_out").unwrap(), 5).unwrap();
        for (a, b) in lambda.values().iter().zip(tape.value(out.lambda).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn multiplication_counts_match_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = NetworkConfig {
            bev_shape: [3, 8, 8],
            lidar_shape: [3, 8, 8],
            conv_channels: vec![8, 4],
            stride: 1,
            embed_dim: 8,
            heads: 2,
            ffn: 8,
            head_hidden: 8,
            decoder_hidden: 8,
            ..NetworkConfig::default()
        };
        let cases = [
            (Variant::FUZZY, 576, 5 * 8 * 9 * 9 * 64),
            (Variant::RATE, 0, 5 * 8 * 3 * 9 * 64),
            (Variant::ANN, 0, 13824),
        ];
        for (v, enc, conv) in cases {
            let net = QNetwork::new(cfg.clone(), v).unwrap();
            let store = net.init_params(&mut rng).unwrap();
            let counts = net.count_multiplications(&store, &mut rng).unwrap();
            for m in MODALITIES {
                let e = format!("{m}.encoder");
                let c = format!("{m}.conv1");
                assert_eq!(counts.analytic[&e], enc, "{v} {e}");
                assert_eq!(counts.instrumented.get(&e).copied().unwrap_or(0), enc, "{v} {e}");
                assert_eq!(counts.analytic[&c], conv, "{v} {c}");
                assert_eq!(counts.instrumented[&c], conv, "{v} {c}");
            }
        }
    }

    #[test]
    fn membership_peak_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny();
        let net = QNetwork::new(cfg.clone(), Variant::FUZZY).unwrap();
        let mut store = net.init_params(&mut rng).unwrap();
        let calib = random_obs(&cfg, 16, &mut rng);
        net.calibrate(&mut store, &calib, 2.0, &mut rng).unwrap();
        let obs = random_obs(&cfg, 1, &mut rng);
        let max_q = |store: &ParamStore, mode: SpikeMode| -> (f64, Vec<f64>) {
            let mut tape = Tape::with_spike_mode(mode);
            let params = store.bind(&mut tape);
            let out = net
                .forward(&mut tape, &params, &obs, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            let q = tape.value(out.q).data().to_vec();
            let best = crate::codec::QVector {
                values: q.clone(),
                population: None,
            }
            .argmax();
            let picked = tape.gather(out.q, &[best]).unwrap();
            let loss = tape.sum(picked);
            let grads = tape.backward(loss).unwrap();
            let g = grads
                .get(params.var("bev.membership").unwrap())
                .unwrap()
                .data()
                .to_vec();
            (q[best], g)
        };
        // Heaviside forward: the surrogate path still delivers a gradient.
        let (_, g) = max_q(&store, SpikeMode::Heaviside);
        assert!(g[1] != 0.0 || g[2] != 0.0);

        // Smooth forward: compare d maxQ / d b1 with a central difference in b1.
        let (_, g) = max_q(&store, SpikeMode::Smooth);
        let bank = net.bank(&store, "bev").unwrap();
        let tri = bank.triangles().unwrap();
        let (a, b, c) = tri[0];
        let analytic = g[1] / (b - a) - g[2] / (c - b);
        let h = 1e-4;
        let eval = |b1: f64| {
            let mut t = tri.clone();
            t[0].1 = b1;
            let mut s = store.clone();
            s.insert("bev.membership", MembershipBank::triangular(&t).unwrap().raw().clone());
            max_q(&s, SpikeMode::Smooth).0
        };
        let numeric = (eval(b + h) - eval(b - h)) / (2.0 * h);
        assert!(analytic.abs() > 1e-8, "{analytic}");
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-3, "analytic {analytic} numeric {numeric}");
    }
}
