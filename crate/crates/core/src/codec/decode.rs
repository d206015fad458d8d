use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Adam, AdamConfig, Bound, ParamStore};
use crate::spikes::SpikeTrain;
use crate::tensor::DenseArray;

/// `M` accumulated activations per action, stored action-major
/// (`values[a·M + m]`).
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationActivation {
    actions: usize,
    populations: usize,
    values: Vec<f64>,
}

impl PopulationActivation {
    pub fn new(actions: usize, populations: usize, values: Vec<f64>) -> Result<Self> {
        if actions == 0 || populations == 0 || values.len() != actions * populations {
            return dim_err(format!(
                "{} activations cannot form {actions} populations of {populations}",
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite population activation".into()));
        }
        Ok(Self {
            actions,
            populations,
            values,
        })
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn populations(&self) -> usize {
        self.populations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn action(&self, a: usize) -> &[f64] {
        &self.values[a * self.populations..(a + 1) * self.populations]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }
}

/// Action values, with the population activity they came from when known.
#[derive(Clone, Debug, PartialEq)]
pub struct QVector {
    pub values: Vec<f64>,
    pub population: Option<PopulationActivation>,
}

impl QVector {
    /// Index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `λ[a, m] = Σ_t Σ_i w[i, (a, m)] · s[t, i]` for hidden spikes `s[T, H]`
/// and weights `w[H, M·|A|]`.
pub fn accumulate_population(
    spikes: &SpikeTrain,
    weights: &DenseArray,
    actions: usize,
) -> Result<PopulationActivation> {
    let (hidden, outputs) = weights.as_matrix()?;
    if spikes.frame_len() != hidden {
        return dim_err(format!(
            "{} hidden neurons but weights have {hidden} rows",
            spikes.frame_len()
        ));
    }
    if actions == 0 || outputs % actions != 0 {
        return dim_err(format!("{outputs} outputs do not split into {actions} actions"));
    }
    let counts = DenseArray::new(&[1, hidden], spikes.counts())?;
    let lambda = counts.matmul(weights)?;
    PopulationActivation::new(actions, outputs / actions, lambda.into_data())
}

/// Uniform grid of `m` centroid positions on `[-1, 1]`.
pub fn centroid_positions(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.0];
    }
    (0..m).map(|i| -1.0 + 2.0 * i as f64 / (m - 1) as f64).collect()
}

/// Discrete centroid `Σ x_m λ_m / Σ λ_m` per action. An action whose
/// activations sum to zero decodes to the midpoint of `positions`.
pub fn decode_centroid(lambda: &PopulationActivation, positions: &[f64]) -> Result<QVector> {
    if positions.len() != lambda.populations() {
        return dim_err(format!(
            "{} positions for populations of {}",
            positions.len(),
            lambda.populations()
        ));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("centroid positions must be strictly increasing".into()));
    }
    let mid = (positions[0] + positions[positions.len() - 1]) / 2.0;
    let values = (0..lambda.actions())
        .map(|a| {
            let pop = lambda.action(a);
            let mass: f64 = pop.iter().sum();
            if mass == 0.0 {
                mid
            } else {
                pop.iter().zip(positions).map(|(l, x)| l * x).sum::<f64>() / mass
            }
        })
        .collect();
    Ok(QVector {
        values,
        population: Some(lambda.clone()),
    })
}

/// `Q(a) = Σ_t Σ_i w[i, a] · s[t, i]`, one output unit per action.
pub fn decode_weighted_sum(spikes: &SpikeTrain, weights: &DenseArray) -> Result<QVector> {
    let (_, actions) = weights.as_matrix()?;
    let lambda = accumulate_population(spikes, weights, actions)?;
    Ok(QVector {
        values: lambda.values().to_vec(),
        population: None,
    })
}

/// Fully connected decoder: `M·|A|` → ReLU hidden layer → `|A|` values.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralDecoder {
    prefix: String,
    pub inputs: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl NeuralDecoder {
    pub fn new(prefix: impl Into<String>, inputs: usize, hidden: usize, actions: usize) -> Self {
        Self {
            prefix: prefix.into(),
            inputs,
            hidden,
            actions,
        }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        // Small uniform weights: He-scale init tends to stall at the
        // best linear fit of the centroid.
        let mut linear = |w: &str, b: &str, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            store.insert(
                self.name(w),
                DenseArray::new(&[fan_in, fan_out], data).expect("valid shape"),
            );
            store.insert(self.name(b), DenseArray::zeros(&[fan_out]));
        };
        linear("w1", "b1", self.inputs, self.hidden);
        linear("w2", "b2", self.hidden, self.actions);
    }

    /// `lambda` is `[B, M·|A|]`; returns `[B, |A|]`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, lambda: Var) -> Result<Var> {
        let h = tape.matmul(lambda, params.var(&self.name("w1"))?)?;
        let h = tape.add_bias(h, params.var(&self.name("b1"))?)?;
        let h = tape.relu(h);
        let q = tape.matmul(h, params.var(&self.name("w2"))?)?;
        tape.add_bias(q, params.var(&self.name("b2"))?)
    }

    /// Decodes one population activation outside of training.
    pub fn decode(&self, store: &ParamStore, lambda: &PopulationActivation) -> Result<QVector> {
        if lambda.values().len() != self.inputs {
            return dim_err(format!(
                "decoder expects {} inputs, got {}",
                self.inputs,
                lambda.values().len()
            ));
        }
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let x = tape.constant(DenseArray::new(&[1, self.inputs], lambda.values().to_vec())?);
        let q = self.forward(&mut tape, &params, x)?;
        Ok(QVector {
            values: tape.value(q).data().to_vec(),
            population: Some(lambda.clone()),
        })
    }
}

/// Supervised fit of a [`NeuralDecoder`] to centroid defuzzification.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidFit {
    pub steps: usize,
    pub batch: usize,
    /// Activations are drawn uniformly from this range.
    pub lambda_range: (f64, f64),
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub held_out: usize,
}

impl Default for CentroidFit {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 128,
            lambda_range: (0.1, 1.0),
            lr: 1e-2,
            held_out: 1000,
        }
    }
}

/// Trains `decoder` on random `(λ, centroid(λ))` pairs with centroid
/// positions on a uniform `[-1, 1]` grid. Returns the held-out MSE.
pub fn fit_centroid(
    decoder: &NeuralDecoder,
    store: &mut ParamStore,
    fit: &CentroidFit,
    rng: &mut impl Rng,
) -> Result<f64> {
    let a = decoder.actions;
    if a == 0 || !decoder.inputs.is_multiple_of(a) {
        return dim_err("decoder inputs must split evenly into actions");
    }
    let m = decoder.inputs / a;
    let positions = centroid_positions(m);
    let (lo, hi) = fit.lambda_range;
    let sample = |rng: &mut dyn rand::RngCore| -> Result<(PopulationActivation, Vec<f64>)> {
        let vals = (0..m * a).map(|_| rng.gen_range(lo..hi)).collect();
        let l = PopulationActivation::new(a, m, vals)?;
        let target = decode_centroid(&l, &positions)?.values;
        Ok((l, target))
    };
    let mut opt = Adam::new(store, AdamConfig::default());
    for step in 0..fit.steps {
        let progress = step as f64 / fit.steps as f64;
        opt.config.lr = fit.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let mut xs = Vec::with_capacity(fit.batch * m * a);
        let mut ys = Vec::with_capacity(fit.batch * a);
        for _ in 0..fit.batch {
            let (l, t) = sample(rng)?;
            xs.extend_from_slice(l.values());
            ys.extend(t);
        }
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let x = tape.constant(DenseArray::new(&[fit.batch, m * a], xs)?);
        let q = decoder.forward(&mut tape, &params, x)?;
        let flat = tape.reshape(q, &[fit.batch * a])?;
        let loss = tape.mse_loss(flat, &ys)?;
        let grads = params.collect(&tape.backward(loss)?);
        opt.update(store, &grads)?;
    }
    let mut err = 0.0;
    for _ in 0..fit.held_out {
        let (l, target) = sample(rng)?;
        let q = decoder.decode(store, &l)?;
        err += q
            .values
            .iter()
            .zip(&target)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a as f64;
    }
    Ok(err / fit.held_out.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spikes::Alphabet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hand_spikes() -> SpikeTrain {
        // s1 = [1, 0, 1], s2 = [1, 1, 0], time-major frames [s1_t, s2_t]
        SpikeTrain::new(3, &[2], Alphabet::Binary, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn hand_accumulation() {
        let w = DenseArray::new(&[2, 1], vec![0.5, -0.25]).unwrap();
        let lambda = accumulate_population(&hand_spikes(), &w, 1).unwrap();
        assert_eq!(lambda.values(), &[0.5]);
        let q = decode_weighted_sum(&hand_spikes(), &w).unwrap();
        assert_eq!(q.values, vec![0.5]);
    }

    #[test]
    fn silent_and_unit_weight_cases() {
        let zero = SpikeTrain::new(4, &[3], Alphabet::Binary, vec![0.0; 12]).unwrap();
        let w = DenseArray::full(&[3, 10], 0.7);
        let lambda = accumulate_population(&zero, &w, 2).unwrap();
        assert!(lambda.values().iter().all(|&v| v == 0.0));

        let once = SpikeTrain::new(4, &[1], Alphabet::Binary, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let lambda = accumulate_population(&once, &DenseArray::ones(&[1, 1]), 1).unwrap();
        assert_eq!(lambda.values(), &[3.0]);
    }

    #[test]
    fn accumulation_shape_errors() {
        let w = DenseArray::zeros(&[3, 4]);
        assert!(accumulate_population(&hand_spikes(), &w, 2).is_err());
        let w = DenseArray::zeros(&[2, 5]);
        assert!(accumulate_population(&hand_spikes(), &w, 2).is_err());
    }

    #[test]
    fn centroid_hand_cases() {
        let c = |l: Vec<f64>, x: &[f64]| {
            let m = l.len();
            decode_centroid(&PopulationActivation::new(1, m, l).unwrap(), x)
                .unwrap()
                .values[0]
        };
        assert_eq!(c(vec![0.0, 1.0, 0.0], &[-1.0, 0.0, 1.0]), 0.0);
        assert_eq!(c(vec![1.0, 3.0], &[0.0, 1.0]), 0.75);
        assert_eq!(c(vec![2.0, 2.0, 2.0], &[0.0, 1.0, 2.0]), 1.0);
        assert_eq!(c(vec![0.0; 5], &centroid_positions(5)), 0.0);
        assert!(decode_centroid(&PopulationActivation::new(1, 2, vec![1.0, 1.0]).unwrap(), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn centroid_positions_grid() {
        assert_eq!(centroid_positions(5), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn zero_input_zero_bias_decodes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = NeuralDecoder::new("dec", 25, 64, 5);
        let mut store = ParamStore::new();
        dec.register(&mut store, &mut rng);
        let q = dec
            .decode(&store, &PopulationActivation::new(5, 5, vec![0.0; 25]).unwrap())
            .unwrap();
        assert_eq!(q.values, vec![0.0; 5]);
    }

    #[test]
    fn averaging_decoder_reproduces_population_mean() {
        let (m, a) = (5, 5);
        let dec = NeuralDecoder::new("dec", m * a, m * a, a);
        let mut store = ParamStore::new();
        store.insert("dec.w1", DenseArray::identity(m * a));
        store.insert("dec.b1", DenseArray::zeros(&[m * a]));
        let mut w2 = DenseArray::zeros(&[m * a, a]);
        for act in 0..a {
            for k in 0..m {
                w2.set(&[act * m + k, act], 1.0 / m as f64);
            }
        }
        store.insert("dec.w2", w2);
        store.insert("dec.b2", DenseArray::zeros(&[a]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..m * a).map(|_| rng.gen_range(0.0..4.0)).collect();
        let lambda = PopulationActivation::new(a, m, vals).unwrap();
        let q = dec.decode(&store, &lambda).unwrap();
        for act in 0..a {
            let mean = lambda.action(act).iter().sum::<f64>() / m as f64;
            assert!((q.values[act] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_sum_equals_single_population_identity_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<f64> = (0..4 * 6).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
            let spikes = SpikeTrain::new(4, &[6], Alphabet::Binary, data).unwrap();
            let w = DenseArray::new(&[6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let ws = decode_weighted_sum(&spikes, &w).unwrap();
            let lambda = accumulate_population(&spikes, &w, 3).unwrap();
            // identity decoder with a linear hidden path: ReLU(x) - ReLU(-x) = x
            let mut store = ParamStore::new();
            let mut w1 = DenseArray::zeros(&[3, 6]);
            let mut w2 = DenseArray::zeros(&[6, 3]);
            for i in 0..3 {
                w1.set(&[i, 2 * i], 1.0);
                w1.set(&[i, 2 * i + 1], -1.0);
                w2.set(&[2 * i, i], 1.0);
                w2.set(&[2 * i + 1, i], -1.0);
            }
            store.insert("d.w1", w1);
            store.insert("d.b1", DenseArray::zeros(&[6]));
            store.insert("d.w2", w2);
            store.insert("d.b2", DenseArray::zeros(&[3]));
            let q = NeuralDecoder::new("d", 3, 6, 3).decode(&store, &lambda).unwrap();
            for (x, y) in q.values.iter().zip(&ws.values) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_learns_centroid() {
        let dec = NeuralDecoder::new("dec", 25, 64, 5);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        dec.register(&mut store, &mut rng);
        let mse = fit_centroid(&dec, &mut store, &CentroidFit::default(), &mut rng).unwrap();
        assert!(mse < 1e-3, "held-out mse {mse}");
    }

    proptest! {
        #[test]
        fn centroid_is_scale_invariant(
            vals in prop::collection::vec(0.0f64..10.0, 5),
            k in 0.01f64..100.0,
        ) {
            let l = PopulationActivation::new(1, 5, vals).unwrap();
            let x = centroid_positions(5);
            let a = decode_centroid(&l, &x).unwrap().values[0];
            let b = decode_centroid(&l.scaled(k), &x).unwrap().values[0];
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
