//! DQN: replay buffer, Bellman targets, ε-greedy acting, training and
//! greedy evaluation on the highway environment.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::QVector;
use crate::error::{Error, Result};
use crate::highway::{Action, EnvConfig, Highway, Observation};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::qnet::{ObsBatch, QNetwork};
use crate::tensor::DenseArray;
use crate::Tape;

/// Network input for one observation, stored compactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    bev: Vec<f32>,
    lidar: Vec<f32>,
}

impl Frame {
    /// BEV plus the LiDAR grid carrying the kinematic scalars.
    pub fn from_observation(obs: &Observation, env: &EnvConfig) -> Self {
        let lidar = obs.lidar_with_kinematics(env);
        Self {
            bev: obs.bev.data().iter().map(|&v| v as f32).collect(),
            lidar: lidar.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn stack<'a>(
        frames: impl IntoIterator<Item = &'a Frame>,
        bev: [usize; 3],
        lidar: [usize; 3],
    ) -> Result<ObsBatch> {
        let (mut b, mut l, mut n) = (Vec::new(), Vec::new(), 0);
        for f in frames {
            if f.bev.len() != bev.iter().product::<usize>() || f.lidar.len() != lidar.iter().product::<usize>() {
                return Err(Error::Dimension("frame does not match the network input shape".into()));
            }
            b.extend(f.bev.iter().map(|&v| f64::from(v)));
            l.extend(f.lidar.iter().map(|&v| f64::from(v)));
            n += 1;
        }
        ObsBatch::new(
            DenseArray::new(&[n, bev[0], bev[1], bev[2]], b)?,
            DenseArray::new(&[n, lidar[0], lidar[1], lidar[2]], l)?,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Arc<Frame>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Arc<Frame>,
    /// True only for crashes; horizon truncation still bootstraps.
    pub terminal: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        })
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.action >= Action::ALL.len() || !t.reward.is_finite() {
            return Err(Error::Usage(format!(
                "invalid transition: action {} reward {}",
                t.action, t.reward
            )));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `batch` transitions drawn uniformly with replacement, or `None` when
    /// fewer than `batch` are stored.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Option<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some(
            (0..batch)
                .map(|_| &self.items[rng.gen_range(0..self.items.len())])
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    /// Gradient updates between hard target copies.
    pub target_update_every: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of `total_steps` over which ε decays linearly.
    pub eps_fraction: f64,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
    /// Environment steps per gradient update.
    pub train_every: usize,
    /// Environment steps collected before the first update.
    pub learning_starts: usize,
    pub max_grad_norm: f64,
    /// Observations gathered by a random policy for weight calibration.
    pub calibration_samples: usize,
    /// Target standard deviation of every calibrated input current.
    pub init_current_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-4,
            batch: 64,
            buffer_capacity: 50_000,
            target_update_every: 200,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.3,
            total_steps: 60_000,
            checkpoint_every: 5_000,
            eval_episodes: 20,
            train_every: 4,
            learning_starts: 1_000,
            max_grad_norm: 10.0,
            calibration_samples: 128,
            init_current_std: 2.0,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.batch == 0 || self.batch > self.buffer_capacity {
            return bad("batch must be in 1..=buffer_capacity");
        }
        if self.target_update_every == 0 || self.checkpoint_every == 0 || self.train_every == 0 {
            return bad("target_update_every, checkpoint_every and train_every must be positive");
        }
        let unit = 0.0..=1.0;
        if !(unit.contains(&self.eps_start) && unit.contains(&self.eps_end) && unit.contains(&self.eps_fraction)) {
            return bad("eps_start, eps_end and eps_fraction must lie in [0, 1]");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be > 0");
        }
        if self.calibration_samples == 0 || !(self.init_current_std > 0.0) {
            return bad("calibration needs samples and a positive target");
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over the first
    /// `eps_fraction · total_steps` steps, then constant.
    pub fn epsilon(&self, step: usize) -> f64 {
        let span = self.eps_fraction * self.total_steps as f64;
        if span <= 0.0 {
            return self.eps_end;
        }
        let frac = step as f64 / span;
        if frac >= 1.0 {
            return self.eps_end;
        }
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// `y = r + γ·max_a' Q_target(s', a')`, or `y = r` for terminal transitions.
pub fn td_targets(rewards: &[f64], terminal: &[bool], next_max_q: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(terminal)
        .zip(next_max_q)
        .map(|((&r, &t), &q)| if t { r } else { r + gamma * q })
        .collect()
}

/// Bellman targets for `batch`, evaluating the successors with `target`.
pub fn bellman_target(
    net: &QNetwork,
    target: &ParamStore,
    batch: &[&Transition],
    gamma: f64,
    rng: &mut impl Rng,
) -> Result<DenseArray> {
    let cfg = net.config();
    let next = Frame::stack(
        batch.iter().map(|t| t.next_obs.as_ref()),
        cfg.bev_shape,
        cfg.lidar_shape,
    )?;
    let q = net.q_values(target, &next, rng)?;
    let max_q: Vec<f64> = q.iter().map(|v| v.values[v.argmax()]).collect();
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let terminal: Vec<bool> = batch.iter().map(|t| t.terminal).collect();
    Ok(DenseArray::from_vec(td_targets(&rewards, &terminal, &max_q, gamma)))
}

/// ε-greedy choice: uniform with probability `eps`, else the greedy action
/// (ties to the lowest index). `q` is only evaluated when exploiting.
pub fn select_action(
    q: impl FnOnce() -> Result<Vec<f64>>,
    eps: f64,
    actions: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Usage(format!("epsilon {eps} outside [0, 1]")));
    }
    if rng.gen::<f64>() < eps {
        return Ok(rng.gen_range(0..actions));
    }
    let values = q()?;
    Ok(QVector {
        values,
        population: None,
    }
    .argmax())
}

/// Online and target networks with their optimizer.
#[derive(Clone, Debug)]
pub struct Agent {
    pub net: QNetwork,
    pub online: ParamStore,
    pub target: ParamStore,
    optimizer: Adam,
    updates: u64,
    gamma: f64,
    target_update_every: u64,
}

impl Agent {
    pub fn new(net: QNetwork, params: ParamStore, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Adam::new(
            &params,
            AdamConfig {
                lr: cfg.lr,
                max_grad_norm: Some(cfg.max_grad_norm),
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            net,
            target: params.clone(),
            online: params,
            optimizer,
            updates: 0,
            gamma: cfg.gamma,
            target_update_every: cfg.target_update_every as u64,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn q_values(&self, frames: &[&Frame], rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let cfg = self.net.config();
        let obs = Frame::stack(frames.iter().copied(), cfg.bev_shape, cfg.lidar_shape)?;
        Ok(self
            .net
            .q_values(&self.online, &obs, rng)?
            .into_iter()
            .map(|q| q.values)
            .collect())
    }

    pub fn act(&self, frame: &Frame, eps: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
        let mut qrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let actions = self.net.config().actions;
        select_action(|| Ok(self.q_values(&[frame], &mut qrng)?.remove(0)), eps, actions, rng)
    }

    /// One gradient step on `batch`; returns the MSE before the update.
    pub fn update(&mut self, batch: &[&Transition], rng: &mut impl Rng) -> Result<f64> {
        let targets = bellman_target(&self.net, &self.target, batch, self.gamma, rng)?;
        let cfg = self.net.config();
        let obs = Frame::stack(batch.iter().map(|t| t.obs.as_ref()), cfg.bev_shape, cfg.lidar_shape)?;
        let mut tape = Tape::new();
        let params = self.online.bind(&mut tape);
        let out = self.net.forward(&mut tape, &params, &obs, rng)?;
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let picked = tape.gather(out.q, &actions)?;
        let loss = tape.mse_loss(picked, targets.data())?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value}")));
        }
        let grads = tape.backward(loss)?;
        let grads = params.collect(&grads);
        self.optimizer.update(&mut self.online, &grads)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.target_update_every) {
            self.sync_target();
        }
        Ok(value)
    }

    /// Samples a batch and updates; `None` when the buffer is too small.
    pub fn train_step(&mut self, buffer: &ReplayBuffer, batch: usize, rng: &mut impl Rng) -> Result<Option<f64>> {
        let Some(sample) = buffer.sample(batch, rng) else {
            return Ok(None);
        };
        self.update(&sample, rng).map(Some)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Mean cumulative reward per episode.
    pub avg_reward: f64,
    /// Mean ego speed over every step.
    pub avg_speed: f64,
    /// Crashes per environment step.
    pub crash_freq: f64,
    pub episodes: usize,
    pub steps: usize,
}

/// Chooses actions for a batch of observations.
pub trait Policy {
    fn act(&mut self, observations: &[&Observation]) -> Result<Vec<Action>>;
}

impl<F: FnMut(&Observation) -> Action> Policy for F {
    fn act(&mut self, observations: &[&Observation]) -> Result<Vec<Action>> {
        Ok(observations.iter().map(|o| self(o)).collect())
    }
}

/// Greedy network policy; observations are batched per call.
pub struct GreedyPolicy<'a> {
    pub net: &'a QNetwork,
    pub params: &'a ParamStore,
    pub env: &'a EnvConfig,
    pub rng: ChaCha8Rng,
}

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, observations: &[&Observation]) -> Result<Vec<Action>> {
        let frames: Vec<Frame> = observations
            .iter()
            .map(|o| Frame::from_observation(o, self.env))
            .collect();
        let cfg = self.net.config();
        let obs = Frame::stack(&frames, cfg.bev_shape, cfg.lidar_shape)?;
        self.net
            .q_values(self.params, &obs, &mut self.rng)?
            .iter()
            .map(|q| Action::from_index(q.argmax()))
            .collect()
    }
}

/// Runs one episode per seed, all environments in lockstep.
pub fn evaluate(policy: &mut impl Policy, env: &EnvConfig, seeds: &[u64]) -> Result<EvalMetrics> {
    let mut envs: Vec<Highway> = seeds.iter().map(|_| Highway::new(env.clone())).collect::<Result<_>>()?;
    let obs: Vec<Observation> = envs.iter_mut().zip(seeds).map(|(e, &s)| e.reset(s)).collect();
    evaluate_envs(policy, envs, obs)
}

/// Runs already-initialised environments to completion, one episode each.
pub fn evaluate_envs(
    policy: &mut impl Policy,
    mut envs: Vec<Highway>,
    mut obs: Vec<Observation>,
) -> Result<EvalMetrics> {
    if envs.len() != obs.len() {
        return Err(Error::Usage("one observation per environment is required".into()));
    }
    let mut active: Vec<usize> = (0..envs.len()).collect();
    let (mut total_reward, mut speed_sum, mut crashes, mut steps) = (0.0, 0.0, 0usize, 0usize);
    while !active.is_empty() {
        let batch: Vec<&Observation> = active.iter().map(|&i| &obs[i]).collect();
        let actions = policy.act(&batch)?;
        if actions.len() != active.len() {
            return Err(Error::Usage("policy returned the wrong number of actions".into()));
        }
        let mut still = Vec::with_capacity(active.len());
        for (&i, a) in active.iter().zip(actions) {
            let s = envs[i].step(a)?;
            total_reward += s.reward;
            speed_sum += s.info.speed;
            steps += 1;
            crashes += usize::from(s.info.crashed);
            if !s.done() {
                still.push(i);
            }
            obs[i] = s.observation;
        }
        active = still;
    }
    let episodes = envs.len();
    Ok(EvalMetrics {
        avg_reward: if episodes > 0 {
            total_reward / episodes as f64
        } else {
            0.0
        },
        avg_speed: if steps > 0 { speed_sum / steps as f64 } else { 0.0 },
        crash_freq: if steps > 0 { crashes as f64 / steps as f64 } else { 0.0 },
        episodes,
        steps,
    })
}

/// Seeds of the fixed evaluation environments, disjoint from training seeds.
pub fn eval_seeds(episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|i| 1_000_000 + i).collect()
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub eps: f64,
    /// Mean loss of the updates since the previous checkpoint (NaN if none).
    pub train_loss: f64,
}

/// Observations from uniformly random rollouts, used for calibration.
pub fn random_rollout_frames(env: &EnvConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Frame>> {
    let mut sim = Highway::new(env.clone())?;
    let mut obs = sim.reset(rng.gen());
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        out.push(Frame::from_observation(&obs, env));
        let s = sim.step(Action::from_index(rng.gen_range(0..Action::ALL.len()))?)?;
        obs = if s.done() { sim.reset(rng.gen()) } else { s.observation };
    }
    Ok(out)
}

/// Full DQN run for one seed. `on_checkpoint` sees every evaluation.
pub fn train(
    net: QNetwork,
    env: &EnvConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(&CheckpointRecord, &Agent) -> Result<()>,
) -> Result<(Agent, Vec<CheckpointRecord>)> {
    cfg.validate()?;
    let ncfg = net.config();
    if ncfg.bev_shape != [1, env.grid.0, env.grid.1] || ncfg.lidar_shape != [1, env.grid.0, env.grid.1] {
        return Err(Error::Config(format!(
            "network inputs {:?}/{:?} do not match the {:?} environment grid",
            ncfg.bev_shape, ncfg.lidar_shape, env.grid
        )));
    }
    if ncfg.actions != Action::ALL.len() {
        return Err(Error::Config("network must output one value per meta-action".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init_params(&mut rng)?;
    let calib = random_rollout_frames(env, cfg.calibration_samples, &mut rng)?;
    let calib = Frame::stack(&calib, ncfg.bev_shape, ncfg.lidar_shape)?;
    net.calibrate(&mut params, &calib, cfg.init_current_std, &mut rng)?;
    let mut agent = Agent::new(net, params, cfg)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut sim = Highway::new(env.clone())?;
    let mut episode_seed = || -> u64 { rng.gen() };
    let first = episode_seed();
    let mut rng = ChaCha8Rng::seed_from_u64(first ^ 0x9e37_79b9_7f4a_7c15);
    let mut frame = Arc::new(Frame::from_observation(&sim.reset(first), env));
    let seeds = eval_seeds(cfg.eval_episodes);
    let mut records = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for step in 1..=cfg.total_steps {
        let eps = cfg.epsilon(step - 1);
        let action = agent.act(&frame, eps, &mut rng)?;
        let s = sim.step(Action::from_index(action)?)?;
        let next = Arc::new(Frame::from_observation(&s.observation, env));
        buffer.push(Transition {
            obs: frame,
            action,
            reward: s.reward,
            next_obs: next.clone(),
            terminal: s.terminal,
        })?;
        frame = if s.done() {
            Arc::new(Frame::from_observation(&sim.reset(rng.gen()), env))
        } else {
            next
        };
        if step >= cfg.learning_starts && step % cfg.train_every == 0 {
            if let Some(loss) = agent.train_step(&buffer, cfg.batch, &mut rng)? {
                loss_sum += loss;
                loss_count += 1;
            }
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
            let mut policy = GreedyPolicy {
                net: &agent.net,
                params: &agent.online,
                env,
                rng: ChaCha8Rng::seed_from_u64(seed ^ step as u64),
            };
            let metrics = evaluate(&mut policy, env, &seeds)?;
            let record = CheckpointRecord {
                step,
                seed,
                metrics,
                eps,
                train_loss: if loss_count > 0 {
                    loss_sum / loss_count as f64
                } else {
                    f64::NAN
                },
            };
            (loss_sum, loss_count) = (0.0, 0);
            on_checkpoint(&record, &agent)?;
            records.push(record);
        }
    }
    Ok((agent, records))
}
