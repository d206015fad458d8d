use crate::autodiff::{decode_bank, MembershipKind};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// A bank of `N` trainable membership functions.
///
/// Triangles are stored as free parameters `(a, ln(b - a), ln(c - b))` so any
/// gradient step keeps `a < b < c`; Gaussians as `(mean, ln sigma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipBank {
    kind: MembershipKind,
    raw: DenseArray,
}

impl MembershipBank {
    pub fn triangular(triples: &[(f64, f64, f64)]) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::Config("membership bank needs at least one function".into()));
        }
        let mut raw = Vec::with_capacity(3 * triples.len());
        for &(a, b, c) in triples {
            if !(a < b && b < c) || !(a.is_finite() && c.is_finite()) {
                return Err(Error::Config(format!("triangle ({a}, {b}, {c}) violates a < b < c")));
            }
            raw.extend([a, (b - a).ln(), (c - b).ln()]);
        }
        Self::from_raw(MembershipKind::Triangular, DenseArray::new(&[triples.len(), 3], raw)?)
    }

    pub fn gaussian(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("membership bank needs at least one function".into()));
        }
        let mut raw = Vec::with_capacity(2 * pairs.len());
        for &(mean, sigma) in pairs {
            if !(sigma > 0.0 && sigma.is_finite() && mean.is_finite()) {
                return Err(Error::Config(format!("gaussian sigma must be > 0, got {sigma}")));
            }
            raw.extend([mean, sigma.ln()]);
        }
        Self::from_raw(MembershipKind::Gaussian, DenseArray::new(&[pairs.len(), 2], raw)?)
    }

    /// `n` functions spread over `[0, 1]`: first support starts at 0, last
    /// ends at 1, adjacent peaks `1.5·h` apart for half-width `h`. With
    /// `n = 3` the triangles are (0, .2, .4), (.3, .5, .7), (.6, .8, 1).
    /// Gaussians share the peaks and use `sigma = h / 2`.
    pub fn evenly_spaced(kind: MembershipKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("membership bank needs at least one function".into()));
        }
        let h = 1.0 / (1.5 * (n as f64 - 1.0) + 2.0);
        let peak = |i: usize| h + 1.5 * h * i as f64;
        match kind {
            MembershipKind::Triangular => {
                let t: Vec<_> = (0..n).map(|i| (peak(i) - h, peak(i), peak(i) + h)).collect();
                Self::triangular(&t)
            }
            MembershipKind::Gaussian => {
                let g: Vec<_> = (0..n).map(|i| (peak(i), h / 2.0)).collect();
                Self::gaussian(&g)
            }
        }
    }

    pub fn from_raw(kind: MembershipKind, raw: DenseArray) -> Result<Self> {
        let k = kind.params_per_function();
        if raw.rank() != 2 || raw.shape()[1] != k {
            return Err(Error::Format(format!(
                "{kind:?} bank needs [N, {k}] parameters, got {:?}",
                raw.shape()
            )));
        }
        raw.check_finite("membership parameters")?;
        Ok(Self { kind, raw })
    }

    pub fn kind(&self) -> MembershipKind {
        self.kind
    }

    pub fn raw(&self) -> &DenseArray {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Natural `(a, b, c)` parameters, if triangular.
    pub fn triangles(&self) -> Option<Vec<(f64, f64, f64)>> {
        if self.kind != MembershipKind::Triangular {
            return None;
        }
        let d = self.raw.data();
        Some(
            (0..self.len())
                .map(|i| {
                    let a = d[3 * i];
                    let b = a + d[3 * i + 1].exp();
                    (a, b, b + d[3 * i + 2].exp())
                })
                .collect(),
        )
    }

    /// `(mean, sigma)` pairs, if Gaussian.
    pub fn gaussians(&self) -> Option<Vec<(f64, f64)>> {
        if self.kind != MembershipKind::Gaussian {
            return None;
        }
        let d = self.raw.data();
        Some((0..self.len()).map(|i| (d[2 * i], d[2 * i + 1].exp())).collect())
    }

    /// Location of each function's maximum.
    pub fn peaks(&self) -> Vec<f64> {
        match self.kind {
            MembershipKind::Triangular => self.triangles().unwrap().iter().map(|t| t.1).collect(),
            MembershipKind::Gaussian => self.gaussians().unwrap().iter().map(|g| g.0).collect(),
        }
    }

    /// Membership degrees of `p` (clamped to `[0, 1]`).
    pub fn eval(&self, p: f64) -> Vec<f64> {
        let p = p.clamp(0.0, 1.0);
        decode_bank(self.raw.data(), self.kind, self.len())
            .iter()
            .map(|f| f.eval(p))
            .collect()
    }

    /// Curves sampled at `samples` evenly spaced points on `[0, 1]`.
    pub fn curves(&self, samples: usize) -> Vec<(f64, Vec<f64>)> {
        let denom = samples.saturating_sub(1).max(1) as f64;
        (0..samples)
            .map(|i| {
                let p = i as f64 / denom;
                (p, self.eval(p))
            })
            .collect()
    }
}

pub fn membership_eval(bank: &MembershipBank, p: f64) -> Vec<f64> {
    bank.eval(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn worked_example() -> MembershipBank {
        MembershipBank::triangular(&[(0.0, 0.2, 0.4), (0.3, 0.5, 0.7), (0.6, 0.8, 1.0)]).unwrap()
    }

    #[test]
    fn worked_example_values() {
        let bank = worked_example();
        let lo = bank.eval(0.35);
        let hi = bank.eval(0.75);
        for (got, want) in lo.iter().zip([0.25, 0.25, 0.0]) {
            assert!((got - want).abs() < 1e-9, "{lo:?}");
        }
        for (got, want) in hi.iter().zip([0.0, 0.0, 0.75]) {
            assert!((got - want).abs() < 1e-9, "{hi:?}");
        }
    }

    #[test]
    fn peaks_are_one() {
        let bank = worked_example();
        for (i, b) in bank.peaks().into_iter().enumerate() {
            assert!((bank.eval(b)[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn default_three_matches_worked_example() {
        let bank = MembershipBank::evenly_spaced(MembershipKind::Triangular, 3).unwrap();
        for (got, want) in bank
            .triangles()
            .unwrap()
            .iter()
            .zip(worked_example().triangles().unwrap())
        {
            assert!((got.0 - want.0).abs() < 1e-12);
            assert!((got.1 - want.1).abs() < 1e-12);
            assert!((got.2 - want.2).abs() < 1e-12);
        }
    }

    #[test]
    fn support_edges() {
        let bank = MembershipBank::triangular(&[(0.2, 0.5, 0.6)]).unwrap();
        assert_eq!(bank.eval(0.2), vec![0.0]);
        assert_eq!(bank.eval(0.1), vec![0.0]);
        assert!(bank.eval(0.6)[0].abs() < 1e-12);
        assert_eq!(bank.eval(0.7), vec![0.0]);
    }

    #[test]
    fn invalid_banks_rejected() {
        assert!(MembershipBank::triangular(&[(0.2, 0.2, 0.4)]).is_err());
        assert!(MembershipBank::triangular(&[]).is_err());
        assert!(MembershipBank::gaussian(&[(0.5, 0.0)]).is_err());
    }

    #[test]
    fn gaussian_values() {
        let bank = MembershipBank::gaussian(&[(0.5, 0.1)]).unwrap();
        assert!((bank.eval(0.5)[0] - 1.0).abs() < 1e-12);
        assert!((bank.eval(0.6)[0] - (-0.5f64).exp()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn triangular_outputs_in_unit_interval(
            a in -0.5f64..0.9,
            w1 in 0.01f64..0.8,
            w2 in 0.01f64..0.8,
            p in 0.0f64..=1.0,
        ) {
            let bank = MembershipBank::triangular(&[(a, a + w1, a + w1 + w2)]).unwrap();
            let mu = bank.eval(p)[0];
            prop_assert!((0.0..=1.0).contains(&mu));
        }
    }
}
