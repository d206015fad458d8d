use crate::error::{Error, Result};

/// Bits needed to represent an observation or a Q-value under each coding
/// scheme. Raw values are 32-bit words; a spike carries one bit per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapacityReport {
    /// `32·C·H·W`.
    pub raw_bits: u64,
    /// `T·C·H·W`.
    pub rate_bits: u64,
    /// `N·T·C·H·W`.
    pub pop_bits: u64,
    /// One 32-bit Q-value.
    pub q_raw_bits: u64,
    /// `M·T` spikes per action population.
    pub q_pop_bits: u64,
}

impl CapacityReport {
    /// `pop_bits / rate_bits`, which equals `N`.
    pub fn population_gain(&self) -> f64 {
        self.pop_bits as f64 / self.rate_bits as f64
    }

    /// Fraction of the raw observation capacity kept by rate coding.
    pub fn rate_retention(&self) -> f64 {
        self.rate_bits as f64 / self.raw_bits as f64
    }

    pub fn pop_retention(&self) -> f64 {
        self.pop_bits as f64 / self.raw_bits as f64
    }

    pub fn q_retention(&self) -> f64 {
        self.q_pop_bits as f64 / self.q_raw_bits as f64
    }
}

pub fn capacity(c: u64, h: u64, w: u64, t: u64, n: u64, m: u64) -> Result<CapacityReport> {
    if [c, h, w, t, n, m].contains(&0) {
        return Err(Error::Config("capacity inputs must be positive".into()));
    }
    let overflow = || Error::Numeric("capacity overflows 64 bits".into());
    let pixels = c.checked_mul(h).and_then(|x| x.checked_mul(w)).ok_or_else(overflow)?;
    let rate_bits = t.checked_mul(pixels).ok_or_else(overflow)?;
    Ok(CapacityReport {
        raw_bits: pixels.checked_mul(32).ok_or_else(overflow)?,
        rate_bits,
        pop_bits: n.checked_mul(rate_bits).ok_or_else(overflow)?,
        q_raw_bits: 32,
        q_pop_bits: m.checked_mul(t).ok_or_else(overflow)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        let r = capacity(1, 4, 4, 5, 3, 5).unwrap();
        assert_eq!(r.raw_bits, 512);
        assert_eq!(r.rate_bits, 80);
        assert_eq!(r.pop_bits, 240);
        assert_eq!(r.q_pop_bits, 25);
        assert_eq!(r.q_raw_bits, 32);
    }

    #[test]
    fn zero_rejected() {
        assert!(capacity(0, 4, 4, 5, 3, 5).is_err());
    }

    proptest! {
        #[test]
        fn population_gain_is_n(c in 1u64..8, h in 1u64..128, w in 1u64..128, t in 1u64..64, n in 1u64..10, m in 1u64..10) {
            let r = capacity(c, h, w, t, n, m).unwrap();
            prop_assert_eq!(r.pop_bits, n * r.rate_bits);
            prop_assert_eq!(r.population_gain(), n as f64);
        }
    }
}
