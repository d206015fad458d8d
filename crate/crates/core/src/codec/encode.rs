use rand::Rng;

use super::MembershipBank;
use crate::autodiff::{Dynamics, NeuronSpec, Surrogate, Tape};
use crate::error::{dim_err, Error, Result};
use crate::spikes::{Alphabet, SpikeTrain};
use crate::tensor::DenseArray;

/// Threshold of the encoder's integrate-and-fire neurons.
pub const ENCODER_THRESHOLD: f64 = 1.0;

/// Non-leaky integrate-and-fire neuron with subtractive reset, driven by a
/// constant current for `steps` steps.
pub fn integrate_and_fire(level: f64, steps: usize) -> Vec<u8> {
    let mut v = 0.0;
    (0..steps)
        .map(|_| {
            v += level;
            if v >= ENCODER_THRESHOLD {
                v -= ENCODER_THRESHOLD;
                1
            } else {
                0
            }
        })
        .collect()
}

pub(crate) fn encoder_neuron() -> NeuronSpec {
    NeuronSpec::binary(Dynamics::Integrate, ENCODER_THRESHOLD, Surrogate::default())
}

/// Expands `image[C, H, W]` into `N·C` spiking channels over `steps` steps.
///
/// Output frames are `[N·C, H, W]`; channel `c·N + i` carries membership
/// function `i` of input channel `c`.
pub fn fuzzy_encode(bank: &MembershipBank, image: &DenseArray, steps: usize) -> Result<SpikeTrain> {
    if steps == 0 {
        return Err(Error::Config("simulation window must be positive".into()));
    }
    let (c, h, w) = match image.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return dim_err(format!("image must be [C, H, W], got {:?}", image.shape())),
    };
    let mut tape = Tape::new();
    let x = tape.constant(image.reshape(&[1, c, h, w])?);
    let params = tape.constant(bank.raw().clone());
    let mu = tape.membership(x, params, bank.kind())?;
    let currents = tape.repeat_time(mu, steps)?;
    let spikes = tape.neurons(currents, steps, encoder_neuron())?;
    let n = bank.len();
    SpikeTrain::new(
        steps,
        &[n * c, h, w],
        Alphabet::Binary,
        tape.value(spikes).data().to_vec(),
    )
}

/// Independent Bernoulli frames: `steps` copies of `values`, each entry
/// firing with probability equal to its (clamped) value. Returns the frames
/// and the number of values that needed clamping.
pub fn bernoulli_frames(values: &[f64], steps: usize, rng: &mut impl Rng) -> (Vec<f64>, usize) {
    let clamped = values.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    let mut out = Vec::with_capacity(values.len() * steps);
    for _ in 0..steps {
        out.extend(values.iter().map(|&p| {
            let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
            if rng.gen::<f64>() < p {
                1.0
            } else {
                0.0
            }
        }));
    }
    (out, clamped)
}

#[derive(Clone, Debug)]
pub struct RateEncoding {
    pub spikes: SpikeTrain,
    /// Pixels that were outside `[0, 1]` and got clamped.
    pub clamped: usize,
}

pub fn rate_encode(image: &DenseArray, steps: usize, rng: &mut impl Rng) -> Result<RateEncoding> {
    if steps == 0 {
        return Err(Error::Config("simulation window must be positive".into()));
    }
    let (data, clamped) = bernoulli_frames(image.data(), steps, rng);
    let spikes = SpikeTrain::new(steps, image.shape(), Alphabet::Binary, data)?;
    Ok(RateEncoding { spikes, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::MembershipKind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_degree_fires_every_step() {
        assert_eq!(integrate_and_fire(1.0, 5), vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn quarter_degree_fires_on_fourth_step() {
        let s = integrate_and_fire(0.25, 5);
        assert_eq!(s, vec![0, 0, 0, 1, 0]);
        let rate = s.iter().map(|&v| v as f64).sum::<f64>() / 5.0;
        assert!((rate - 0.2).abs() < 1e-15);
        assert!((rate - 0.25).abs() <= 1.0 / 5.0);
    }

    #[test]
    fn zero_degree_is_silent() {
        assert!(integrate_and_fire(0.0, 50).iter().all(|&s| s == 0));
    }

    #[test]
    fn fuzzy_encode_matches_scalar_neurons() {
        let bank = MembershipBank::evenly_spaced(MembershipKind::Triangular, 3).unwrap();
        let image = DenseArray::new(&[1, 1, 2], vec![0.35, 0.75]).unwrap();
        let s = fuzzy_encode(&bank, &image, 5).unwrap();
        assert_eq!(s.frame_shape(), &[3, 1, 2]);
        let counts = s.counts();
        // channel-major: [mu1(p1), mu1(p2), mu2(p1), mu2(p2), mu3(p1), mu3(p2)]
        let expect = |lvl: f64| integrate_and_fire(lvl, 5).iter().map(|&v| v as f64).sum::<f64>();
        assert_eq!(counts, vec![expect(0.25), 0.0, expect(0.25), 0.0, 0.0, expect(0.75)]);
    }

    #[test]
    fn fuzzy_encode_rejects_zero_window() {
        let bank = MembershipBank::evenly_spaced(MembershipKind::Triangular, 3).unwrap();
        let image = DenseArray::zeros(&[1, 2, 2]);
        assert!(matches!(fuzzy_encode(&bank, &image, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rate_extremes_and_concentration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = DenseArray::new(&[1, 1, 3], vec![1.0, 0.0, 0.5]).unwrap();
        let enc = rate_encode(&image, 10_000, &mut rng).unwrap();
        let r = enc.spikes.rates();
        assert_eq!(r[0], 1.0);
        assert_eq!(r[1], 0.0);
        assert!((0.48..=0.52).contains(&r[2]), "{}", r[2]);
        assert_eq!(enc.clamped, 0);
    }

    #[test]
    fn rate_clamps_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image = DenseArray::new(&[1, 1, 2], vec![1.5, -0.2]).unwrap();
        let enc = rate_encode(&image, 20, &mut rng).unwrap();
        assert_eq!(enc.clamped, 2);
        assert_eq!(enc.spikes.rates(), vec![1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn if_rate_within_one_over_t(mu in 0.0f64..=1.0, steps in 1usize..100) {
            let s = integrate_and_fire(mu, steps);
            let rate = s.iter().map(|&v| v as f64).sum::<f64>() / steps as f64;
            prop_assert!((rate - mu).abs() <= 1.0 / steps as f64 + 1e-12);
        }
    }
}
