//! WebAssembly bindings for the browser demo: membership evaluation,
//! integrate-and-fire encoding and an interactive highway episode.
//!
//! Everything here is plain Rust as well, so the bindings are tested natively.

use fuzzspike::autodiff::MembershipKind;
use fuzzspike::codec::{integrate_and_fire, membership_eval, MembershipBank};
use fuzzspike::highway::{Action, EnvConfig, Highway, Observation};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn bank(triples: &[f64]) -> Result<MembershipBank, fuzzspike::Error> {
    if triples.is_empty() || !triples.len().is_multiple_of(3) {
        return Err(fuzzspike::Error::Config(format!(
            "expected (a, b, c) triples, got {} numbers",
            triples.len()
        )));
    }
    let t: Vec<(f64, f64, f64)> = triples.chunks(3).map(|c| (c[0], c[1], c[2])).collect();
    MembershipBank::triangular(&t)
}

/// Membership degrees of `p` under triangles given as flat `a, b, c` triples.
#[wasm_bindgen]
pub fn membership(p: f64, triples: &[f64]) -> Result<Vec<f64>, JsError> {
    Ok(membership_eval(&bank(triples).map_err(js_err)?, p))
}

/// `samples` points per triangle on `[0, 1]`, function-major.
#[wasm_bindgen]
pub fn membership_curves(triples: &[f64], samples: usize) -> Result<Vec<f64>, JsError> {
    let b = bank(triples).map_err(js_err)?;
    let curves = b.curves(samples);
    Ok((0..b.len())
        .flat_map(|i| curves.iter().map(move |(_, mu)| mu[i]))
        .collect())
}

/// Default bank of `n` evenly spaced triangles as flat triples.
#[wasm_bindgen]
pub fn default_triangles(n: usize) -> Result<Vec<f64>, JsError> {
    let b = MembershipBank::evenly_spaced(MembershipKind::Triangular, n).map_err(js_err)?;
    Ok(b.triangles()
        .unwrap_or_default()
        .into_iter()
        .flat_map(|(a, b, c)| [a, b, c])
        .collect())
}

/// Spike train of an integrate-and-fire neuron driven by `level` for `steps` steps.
#[wasm_bindgen]
pub fn encode_spikes(level: f64, steps: usize) -> Vec<u8> {
    integrate_and_fire(level, steps)
}

/// One highway episode driven from the page.
#[wasm_bindgen]
pub struct HighwayDemo {
    sim: Highway,
    obs: Observation,
    total_reward: f64,
    done: bool,
    crashed: bool,
}

#[wasm_bindgen]
impl HighwayDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<HighwayDemo, JsError> {
        let mut sim = Highway::new(EnvConfig::default()).map_err(js_err)?;
        let obs = sim.reset(seed);
        Ok(Self {
            sim,
            obs,
            total_reward: 0.0,
            done: false,
            crashed: false,
        })
    }

    /// Applies action `0..5` (LEFT, IDLE, RIGHT, FASTER, SLOWER) and
    /// returns the step reward.
    pub fn step(&mut self, action: usize) -> Result<f64, JsError> {
        if self.done {
            return Err(JsError::new("episode is over; create a new demo"));
        }
        let s = self
            .sim
            .step(Action::from_index(action).map_err(js_err)?)
            .map_err(js_err)?;
        self.total_reward += s.reward;
        self.done = s.done();
        self.crashed = s.info.crashed;
        self.obs = s.observation;
        Ok(s.reward)
    }

    pub fn rows(&self) -> usize {
        self.sim.config().grid.0
    }

    pub fn cols(&self) -> usize {
        self.sim.config().grid.1
    }

    /// Row-major bird's-eye view.
    pub fn bev(&self) -> Vec<f64> {
        self.obs.bev.data().to_vec()
    }

    /// Row-major LiDAR grid.
    pub fn lidar(&self) -> Vec<f64> {
        self.obs.lidar.data().to_vec()
    }

    pub fn speed(&self) -> f64 {
        self.sim.world().ego.speed
    }

    pub fn lane(&self) -> usize {
        self.sim.world().ego.lane
    }

    pub fn time(&self) -> usize {
        self.sim.time()
    }

    pub fn total_reward(&self) -> f64 {
        self.total_reward
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn crashed(&self) -> bool {
        self.crashed
    }
}
