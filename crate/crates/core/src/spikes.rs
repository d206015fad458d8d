use crate::error::{dim_err, Error, Result};
use crate::tensor::DenseArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alphabet {
    /// {0, 1}
    Binary,
    /// {-1, 0, +1}
    Ternary,
}

impl Alphabet {
    pub fn contains(self, v: f64) -> bool {
        match self {
            Alphabet::Binary => v == 0.0 || v == 1.0,
            Alphabet::Ternary => v == 0.0 || v == 1.0 || v == -1.0,
        }
    }
}

/// Time-major spike activity: `steps` frames of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    steps: usize,
    frame_shape: Vec<usize>,
    alphabet: Alphabet,
    data: Vec<f64>,
}

impl SpikeTrain {
    pub fn new(steps: usize, frame_shape: &[usize], alphabet: Alphabet, data: Vec<f64>) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("spike train needs at least one step".into()));
        }
        let frame: usize = frame_shape.iter().product();
        if frame == 0 || frame * steps != data.len() {
            return dim_err(format!(
                "{} values cannot form {steps} frames of {frame_shape:?}",
                data.len()
            ));
        }
        if let Some(bad) = data.iter().find(|&&v| !alphabet.contains(v)) {
            return Err(Error::Numeric(format!(
                "value {bad} is outside the {alphabet:?} spike alphabet"
            )));
        }
        Ok(Self {
            steps,
            frame_shape: frame_shape.to_vec(),
            alphabet,
            data,
        })
    }

    /// Interprets the leading axis of `arr` as time.
    pub fn from_dense(arr: &DenseArray, alphabet: Alphabet) -> Result<Self> {
        let shape = arr.shape();
        let frame = if shape.len() == 1 { vec![1] } else { shape[1..].to_vec() };
        Self::new(shape[0], &frame, alphabet, arr.data().to_vec())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.frame_shape
    }

    pub fn frame_len(&self) -> usize {
        self.data.len() / self.steps
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Per-neuron sum over time.
    pub fn counts(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.frame_len()];
        for t in 0..self.steps {
            for (o, v) in out.iter_mut().zip(self.frame(t)) {
                *o += v;
            }
        }
        out
    }

    /// Per-neuron firing rate (count / steps).
    pub fn rates(&self) -> Vec<f64> {
        let t = self.steps as f64;
        self.counts().into_iter().map(|c| c / t).collect()
    }

    pub fn total_spikes(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn to_dense(&self) -> Result<DenseArray> {
        let mut shape = vec![self.steps];
        shape.extend_from_slice(&self.frame_shape);
        DenseArray::new(&shape, self.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_values_outside_alphabet() {
        assert!(SpikeTrain::new(2, &[2], Alphabet::Binary, vec![0.0, 1.0, -1.0, 0.0]).is_err());
        assert!(SpikeTrain::new(2, &[2], Alphabet::Ternary, vec![0.0, 1.0, -1.0, 0.0]).is_ok());
        assert!(SpikeTrain::new(2, &[3], Alphabet::Binary, vec![0.0; 4]).is_err());
    }

    #[test]
    fn counts_and_rates() {
        let s = SpikeTrain::new(3, &[2], Alphabet::Binary, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(s.counts(), vec![2.0, 2.0]);
        assert_eq!(s.frame(1), &[0.0, 1.0]);
        assert!((s.rates()[0] - 2.0 / 3.0).abs() < 1e-15);
    }
}
