use crate::autodiff::{Dynamics, NeuronSpec, Surrogate};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Membrane state of a leaky integrate-and-fire population stepped outside
/// of a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: DenseArray,
    pub tau_m: f64,
    pub theta_pos: f64,
    /// `Some` makes the population ternary.
    pub theta_neg: Option<f64>,
}

impl LifState {
    pub fn new(shape: &[usize], tau_m: f64, theta_pos: f64, theta_neg: Option<f64>) -> Result<Self> {
        if !(tau_m >= 1.0 && tau_m.is_finite()) {
            return Err(Error::Config(format!(
                "membrane time constant must be >= 1, got {tau_m}"
            )));
        }
        if !(theta_pos > 0.0 && theta_pos.is_finite()) {
            return Err(Error::Config(format!(
                "positive threshold must be > 0, got {theta_pos}"
            )));
        }
        if let Some(neg) = theta_neg {
            if !(neg < 0.0 && neg.is_finite()) {
                return Err(Error::Config(format!("negative threshold must be < 0, got {neg}")));
            }
        }
        Ok(Self {
            v: DenseArray::zeros(shape),
            tau_m,
            theta_pos,
            theta_neg,
        })
    }

    /// Fresh zero state for a tape neuron spec. Integrate dynamics map to `tau_m = 1`.
    pub fn from_spec(shape: &[usize], spec: &NeuronSpec) -> Result<Self> {
        let tau = match spec.dynamics {
            Dynamics::Integrate => 1.0,
            Dynamics::Leaky { tau } => tau,
        };
        Self::new(shape, tau, spec.threshold, spec.negative_threshold)
    }

    pub fn spec(&self, surrogate: Surrogate) -> NeuronSpec {
        NeuronSpec {
            dynamics: Dynamics::Leaky { tau: self.tau_m },
            threshold: self.theta_pos,
            negative_threshold: self.theta_neg,
            surrogate,
        }
    }

    pub fn reset(&mut self) {
        self.v.data_mut().fill(0.0);
    }

    /// One step: `v ← v + (x − v)/τ`, then `+1` with `v ← v − θ⁺` where
    /// `v ≥ θ⁺`, and for ternary neurons `−1` with `v ← v − θ⁻` where `v ≤ θ⁻`.
    pub fn step(&mut self, x: &DenseArray) -> Result<DenseArray> {
        x.expect_same_shape(&self.v)?;
        let (decay, gain) = Dynamics::Leaky { tau: self.tau_m }.coefficients();
        let mut spikes = DenseArray::zeros(x.shape());
        for ((v, &xi), s) in self.v.data_mut().iter_mut().zip(x.data()).zip(spikes.data_mut()) {
            let u = decay * *v + gain * xi;
            *v = u;
            if u >= self.theta_pos {
                *s = 1.0;
                *v -= self.theta_pos;
            } else if let Some(neg) = self.theta_neg {
                if u <= neg {
                    *s = -1.0;
                    *v -= neg;
                }
            }
        }
        self.v.check_finite("membrane potential")?;
        Ok(spikes)
    }
}

/// Free-function form of [`LifState::step`].
pub fn lif_step(state: &mut LifState, x: &DenseArray) -> Result<DenseArray> {
    state.step(x)
}
