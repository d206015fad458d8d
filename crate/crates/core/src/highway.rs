//! Deterministic multi-lane highway with ego-centred BEV and LiDAR grids.
//!
//! World frame: `x` is the longitudinal position along the road (metres,
//! increasing in the driving direction), `y` the lateral position measured
//! from the left road edge, so lane `i` is centred at `(i + 0.5)·lane_width`.
//! Grids are ego-centred: row index grows towards the rear, column index
//! grows to the right, and the ego sits at the fixed anchor cell.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

pub const BEV_EGO: f64 = 1.0;
pub const BEV_VEHICLE: f64 = 0.6;
pub const BEV_MARKING: f64 = 0.3;

/// Meta-actions in index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Left,
    Idle,
    Right,
    Faster,
    Slower,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Left,
        Action::Idle,
        Action::Right,
        Action::Faster,
        Action::Slower,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Usage(format!("action index {i} out of range 0..5")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Left => "LEFT",
            Action::Idle => "IDLE",
            Action::Right => "RIGHT",
            Action::Faster => "FASTER",
            Action::Slower => "SLOWER",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown action `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub lanes: usize,
    pub lane_width: f64,
    pub dt: f64,
    pub speed_step: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub ego_lane: usize,
    pub ego_speed: f64,
    pub vehicles: usize,
    /// Speed range of the other vehicles.
    pub traffic_speed: (f64, f64),
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub lane_change_steps: usize,
    pub horizon: usize,
    pub speed_weight: f64,
    pub crash_weight: f64,
    /// `(rows, cols)` of both grids.
    pub grid: (usize, usize),
    /// Metres per row.
    pub resolution: f64,
    /// Metres per column.
    pub lateral_resolution: f64,
    /// `(row, col)` of the ego in both grids.
    pub anchor: (usize, usize),
    pub lidar_sectors: usize,
    /// Minimum same-lane spacing between vehicle centres when placing traffic.
    pub spawn_gap: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            lanes: 4,
            lane_width: 4.0,
            dt: 0.25,
            speed_step: 2.0,
            v_min: 10.0,
            v_max: 30.0,
            ego_lane: 1,
            ego_speed: 20.0,
            vehicles: 6,
            traffic_speed: (15.0, 25.0),
            vehicle_length: 5.0,
            vehicle_width: 2.0,
            lane_change_steps: 4,
            horizon: 80,
            speed_weight: 0.4,
            crash_weight: 1.0,
            grid: (32, 32),
            resolution: 2.5,
            lateral_resolution: 1.0,
            anchor: (22, 16),
            lidar_sectors: 32,
            spawn_gap: 10.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("lane_width", self.lane_width),
            ("dt", self.dt),
            ("speed_step", self.speed_step),
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
            ("resolution", self.resolution),
            ("lateral_resolution", self.lateral_resolution),
            ("spawn_gap", self.spawn_gap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.lanes == 0 || self.ego_lane >= self.lanes {
            return bad(format!("ego lane {} outside 0..{}", self.ego_lane, self.lanes));
        }
        if !(self.v_min >= 0.0 && self.v_min < self.v_max && self.v_max.is_finite()) {
            return bad(format!("need 0 <= v_min < v_max, got [{}, {}]", self.v_min, self.v_max));
        }
        if !(self.v_min..=self.v_max).contains(&self.ego_speed) {
            return bad(format!(
                "ego speed {} outside [{}, {}]",
                self.ego_speed, self.v_min, self.v_max
            ));
        }
        let (lo, hi) = self.traffic_speed;
        if !(self.v_min <= lo && lo <= hi && hi <= self.v_max) {
            return bad(format!("traffic speed range [{lo}, {hi}] must lie in [v_min, v_max]"));
        }
        if self.vehicle_width >= self.lane_width {
            return bad("vehicles must be narrower than a lane".into());
        }
        if self.spawn_gap <= self.vehicle_length {
            return bad("spawn_gap must exceed the vehicle length".into());
        }
        if self.lane_change_steps == 0 || self.horizon == 0 || self.lidar_sectors == 0 {
            return bad("lane_change_steps, horizon and lidar_sectors must be positive".into());
        }
        let (h, w) = self.grid;
        if self.anchor.0 >= h || self.anchor.1 >= w {
            return bad(format!("anchor {:?} outside grid {:?}", self.anchor, self.grid));
        }
        if w < 2 {
            return bad("grid needs at least two columns".into());
        }
        if !(self.speed_weight >= 0.0 && self.crash_weight >= 0.0) {
            return bad("reward weights must be non-negative".into());
        }
        let slots = self.spawn_slots().len();
        if slots < self.vehicles {
            return bad(format!(
                "only {slots} spawn slots in view for {} vehicles",
                self.vehicles
            ));
        }
        Ok(())
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Visible distance ahead of / behind the ego centre.
    pub fn view(&self) -> (f64, f64) {
        let ahead = self.anchor.0 as f64 * self.resolution;
        let behind = (self.grid.0 - 1 - self.anchor.0) as f64 * self.resolution;
        (ahead, behind)
    }

    pub fn normalized_speed(&self, v: f64) -> f64 {
        ((v - self.v_min) / (self.v_max - self.v_min)).clamp(0.0, 1.0)
    }

    /// Relative radial speed range mapped onto `[0, 1]` by the LiDAR grid.
    pub fn relative_speed_range(&self) -> (f64, f64) {
        let span = self.v_max - self.v_min;
        (-span, span)
    }

    /// Reset placement slots `(lane, offset from ego)`, each `1.5·spawn_gap`
    /// long so a jitter of `±spawn_gap/4` keeps neighbours `spawn_gap` apart.
    fn spawn_slots(&self) -> Vec<(usize, f64)> {
        let slot = 1.5 * self.spawn_gap;
        let (ahead, behind) = self.view();
        let lo = -behind + self.vehicle_length;
        let hi = ahead - self.vehicle_length;
        let mut out = Vec::new();
        if hi <= lo {
            return out;
        }
        let count = ((hi - lo) / slot).floor() as usize;
        for lane in 0..self.lanes {
            for k in 0..count {
                let centre = lo + (k as f64 + 0.5) * slot;
                if lane == self.ego_lane && centre.abs() < slot {
                    continue;
                }
                out.push((lane, centre));
            }
        }
        out
    }
}

/// Traffic vehicle driving at constant speed in a fixed lane.
#[derive(Clone, Debug, PartialEq)]
pub struct VehicleState {
    pub lane: usize,
    pub position: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgoState {
    /// Lane the ego occupies; updated when a lane change completes.
    pub lane: usize,
    pub position: f64,
    pub speed: f64,
    pub heading: f64,
    pub target_speed: f64,
    pub target_lane: usize,
    /// Steps completed of the current lane change.
    pub change_progress: usize,
}

impl EgoState {
    /// Lateral position, interpolated during a lane change.
    pub fn lateral(&self, cfg: &EnvConfig) -> f64 {
        let from = cfg.lane_center(self.lane);
        let to = cfg.lane_center(self.target_lane);
        from + (to - from) * self.change_progress as f64 / cfg.lane_change_steps as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub ego: EgoState,
    pub others: Vec<VehicleState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub bev: DenseArray,
    pub lidar: DenseArray,
    /// `(speed_norm, heading_norm)`.
    pub kin: (f64, f64),
}

impl Observation {
    /// LiDAR grid with the kinematic scalars written into cells no return
    /// can reach: the ego anchor cell holds the speed, the first column of
    /// the anchor row holds the heading.
    pub fn lidar_with_kinematics(&self, cfg: &EnvConfig) -> DenseArray {
        let mut grid = self.lidar.clone();
        let (r, c) = cfg.anchor;
        grid.set(&[0, r, c], self.kin.0);
        grid.set(&[0, r, 0], self.kin.1);
        grid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub crashed: bool,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    /// Crash; the episode ends and the state has no successor.
    pub terminal: bool,
    /// Horizon reached without a crash.
    pub truncated: bool,
    pub info: StepInfo,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

#[derive(Clone, Debug)]
pub struct Highway {
    config: EnvConfig,
    world: World,
    rng: ChaCha8Rng,
    t: usize,
    done: bool,
}

impl Highway {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let world = World {
            ego: Self::fresh_ego(&config),
            others: Vec::new(),
        };
        Ok(Self {
            config,
            world,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            done: false,
        })
    }

    /// Environment starting from a hand-built world, for scripted scenarios.
    pub fn from_world(config: EnvConfig, world: World, seed: u64) -> Result<Self> {
        config.validate()?;
        let ego = &world.ego;
        if ego.lane >= config.lanes || ego.target_lane >= config.lanes {
            return Err(Error::Config("ego lane outside the road".into()));
        }
        if world.others.iter().any(|v| v.lane >= config.lanes) {
            return Err(Error::Config("vehicle lane outside the road".into()));
        }
        Ok(Self {
            config,
            world,
            rng: ChaCha8Rng::seed_from_u64(seed),
            t: 0,
            done: false,
        })
    }

    fn fresh_ego(cfg: &EnvConfig) -> EgoState {
        EgoState {
            lane: cfg.ego_lane,
            position: 0.0,
            speed: cfg.ego_speed,
            heading: 0.0,
            target_speed: cfg.ego_speed,
            target_lane: cfg.ego_lane,
            change_progress: 0,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let cfg = &self.config;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = cfg.spawn_slots();
        slots.shuffle(&mut self.rng);
        let jitter = cfg.spawn_gap / 4.0;
        let (lo, hi) = cfg.traffic_speed;
        let mut others: Vec<VehicleState> = slots[..cfg.vehicles]
            .iter()
            .map(|&(lane, centre)| VehicleState {
                lane,
                position: centre + self.rng.gen_range(-jitter..=jitter),
                speed: if hi > lo { self.rng.gen_range(lo..=hi) } else { lo },
            })
            .collect();
        others.sort_by(|a, b| (a.lane, a.position).partial_cmp(&(b.lane, b.position)).unwrap());
        self.world = World {
            ego: Self::fresh_ego(cfg),
            others,
        };
        self.t = 0;
        self.done = false;
        self.observe()
    }

    pub fn step(&mut self, action: Action) -> Result<Step> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; reset first".into()));
        }
        let cfg = &self.config;
        let ego = &mut self.world.ego;
        match action {
            Action::Faster => ego.target_speed = (ego.target_speed + cfg.speed_step).min(cfg.v_max),
            Action::Slower => ego.target_speed = (ego.target_speed - cfg.speed_step).max(cfg.v_min),
            Action::Left if ego.target_lane == ego.lane && ego.lane > 0 => ego.target_lane = ego.lane - 1,
            Action::Right if ego.target_lane == ego.lane && ego.lane + 1 < cfg.lanes => ego.target_lane = ego.lane + 1,
            _ => {}
        }
        ego.speed = ego.target_speed;
        ego.position += ego.speed * cfg.dt;
        if ego.target_lane != ego.lane {
            let before = ego.lateral(cfg);
            ego.change_progress += 1;
            let after = ego.lateral(cfg);
            ego.heading = ((after - before) / cfg.dt).atan2(ego.speed);
            if ego.change_progress == cfg.lane_change_steps {
                ego.lane = ego.target_lane;
                ego.change_progress = 0;
            }
        } else {
            ego.heading = 0.0;
        }
        for v in &mut self.world.others {
            v.position += v.speed * cfg.dt;
        }
        self.t += 1;
        let crashed = self.collides();
        self.recycle();
        let cfg = &self.config;
        let speed = self.world.ego.speed;
        let mut reward = cfg.speed_weight * cfg.normalized_speed(speed);
        if crashed {
            reward -= cfg.crash_weight;
        }
        let truncated = !crashed && self.t >= cfg.horizon;
        self.done = crashed || truncated;
        Ok(Step {
            observation: self.observe(),
            reward,
            terminal: crashed,
            truncated,
            info: StepInfo { crashed, speed },
        })
    }

    /// Closed bounding boxes of the ego and some vehicle intersect.
    fn collides(&self) -> bool {
        let cfg = &self.config;
        let ego = &self.world.ego;
        let ey = ego.lateral(cfg);
        self.world.others.iter().any(|v| {
            (v.position - ego.position).abs() <= cfg.vehicle_length
                && (cfg.lane_center(v.lane) - ey).abs() <= cfg.vehicle_width
        })
    }

    /// Vehicles that drift far out of view are respawned just beyond the
    /// forward edge of the view so traffic density stays constant.
    fn recycle(&mut self) {
        let cfg = &self.config;
        let (ahead, behind) = cfg.view();
        let ego_x = self.world.ego.position;
        let (lo, hi) = cfg.traffic_speed;
        for i in 0..self.world.others.len() {
            let dx = self.world.others[i].position - ego_x;
            if dx >= -(behind + 2.0 * cfg.vehicle_length) && dx <= ahead + 4.0 * cfg.spawn_gap {
                continue;
            }
            let lane = self.rng.gen_range(0..cfg.lanes);
            let mut x = ego_x + ahead + cfg.vehicle_length + self.rng.gen_range(0.0..2.0 * cfg.spawn_gap);
            // Push forward until it clears every vehicle already in the lane.
            while self
                .world
                .others
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && o.lane == lane && (o.position - x).abs() < cfg.spawn_gap)
            {
                x += cfg.spawn_gap;
            }
            let speed = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
            self.world.others[i] = VehicleState {
                lane,
                position: x,
                speed,
            };
        }
    }

    pub fn observe(&self) -> Observation {
        let cfg = &self.config;
        let ego = &self.world.ego;
        let heading_norm = (ego.heading / FRAC_PI_2 * 0.5 + 0.5).clamp(0.0, 1.0);
        Observation {
            bev: render_bev(cfg, &self.world),
            lidar: render_lidar_grid(cfg, &self.world),
            kin: (cfg.normalized_speed(ego.speed), heading_norm),
        }
    }
}

/// Pixel centre of `(row, col)` relative to the ego: `(ahead, right)` metres.
fn pixel_offset(cfg: &EnvConfig, row: usize, col: usize) -> (f64, f64) {
    (
        (cfg.anchor.0 as f64 - row as f64) * cfg.resolution,
        (col as f64 - cfg.anchor.1 as f64) * cfg.lateral_resolution,
    )
}

/// Cell containing the point `(ahead, right)` metres from the ego.
fn cell_of(cfg: &EnvConfig, ahead: f64, right: f64) -> Option<(usize, usize)> {
    let r = cfg.anchor.0 as f64 - (ahead / cfg.resolution).round();
    let c = cfg.anchor.1 as f64 + (right / cfg.lateral_resolution).round();
    let (h, w) = cfg.grid;
    (r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64).then_some((r as usize, c as usize))
}

/// Ego-centred top-down raster `[1, H, W]`.
///
/// A pixel belongs to a vehicle when its centre lies in the half-open box
/// `[x − L/2, x + L/2) × [y − W/2, y + W/2)`. Lane boundaries are drawn as
/// full columns.
pub fn render_bev(cfg: &EnvConfig, world: &World) -> DenseArray {
    let (h, w) = cfg.grid;
    let mut grid = DenseArray::zeros(&[1, h, w]);
    let ego = &world.ego;
    let ey = ego.lateral(cfg);
    for boundary in 0..=cfg.lanes {
        let right = boundary as f64 * cfg.lane_width - ey;
        let c = cfg.anchor.1 as f64 + (right / cfg.lateral_resolution).round();
        if c >= 0.0 && c < w as f64 {
            for r in 0..h {
                grid.set(&[0, r, c as usize], BEV_MARKING);
            }
        }
    }
    let mut paint = |dx: f64, dy: f64, value: f64| {
        let (hl, hw) = (cfg.vehicle_length / 2.0, cfg.vehicle_width / 2.0);
        for r in 0..h {
            let (px, _) = pixel_offset(cfg, r, 0);
            if !(px >= dx - hl && px < dx + hl) {
                continue;
            }
            for c in 0..w {
                let (_, py) = pixel_offset(cfg, r, c);
                if py >= dy - hw && py < dy + hw {
                    grid.set(&[0, r, c], value);
                }
            }
        }
    };
    for v in &world.others {
        paint(v.position - ego.position, cfg.lane_center(v.lane) - ey, BEV_VEHICLE);
    }
    paint(0.0, 0.0, BEV_EGO);
    grid
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Ego-centred LiDAR occupancy `[1, H, W]`.
///
/// `S` equal angular sectors are centred on `2πi/S` measured from straight
/// ahead. A vehicle is seen by every sector its angular extent overlaps; each
/// sector keeps only its nearest vehicle, whose closest point is marked with
/// the normalized relative radial speed. Vehicles hidden behind nearer ones
/// in all their sectors do not appear.
pub fn render_lidar_grid(cfg: &EnvConfig, world: &World) -> DenseArray {
    let (h, w) = cfg.grid;
    let mut grid = DenseArray::zeros(&[1, h, w]);
    let ego = &world.ego;
    let ey = ego.lateral(cfg);
    let (hl, hw) = (cfg.vehicle_length / 2.0, cfg.vehicle_width / 2.0);
    let half = PI / cfg.lidar_sectors as f64;
    let mut nearest: Vec<Option<(f64, usize)>> = vec![None; cfg.lidar_sectors];
    for (idx, v) in world.others.iter().enumerate() {
        let dx = v.position - ego.position;
        let dy = cfg.lane_center(v.lane) - ey;
        let ddx = (dx.abs() - hl).max(0.0);
        let ddy = (dy.abs() - hw).max(0.0);
        let dist = ddx.hypot(ddy);
        if dist == 0.0 {
            continue;
        }
        let centre = dy.atan2(dx);
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            let a = wrap_angle((dy + sy * hw).atan2(dx + sx * hl) - centre);
            lo = lo.min(a);
            hi = hi.max(a);
        }
        for (i, slot) in nearest.iter_mut().enumerate() {
            let delta = wrap_angle(2.0 * half * i as f64 - centre);
            if delta + half >= lo && delta - half <= hi && slot.is_none_or(|(d, _)| dist < d) {
                *slot = Some((dist, idx));
            }
        }
    }
    let (vr_lo, vr_hi) = cfg.relative_speed_range();
    for (dist, idx) in nearest.into_iter().flatten() {
        let v = &world.others[idx];
        let dx = v.position - ego.position;
        let dy = cfg.lane_center(v.lane) - ey;
        let px = 0.0f64.clamp(dx - hl, dx + hl);
        let py = 0.0f64.clamp(dy - hw, dy + hw);
        let radial = (v.speed - ego.speed) * px / dist;
        let intensity = ((radial - vr_lo) / (vr_hi - vr_lo)).clamp(0.0, 1.0);
        if let Some((r, c)) = cell_of(cfg, px, py) {
            grid.set(&[0, r, c], intensity);
        }
    }
    grid
}

/// One row of a trajectory dump.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: usize,
    pub ego_lane: usize,
    pub ego_speed: f64,
    pub action: Action,
    pub reward: f64,
    pub crashed: bool,
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["t", "ego_lane", "ego_speed", "action", "reward", "crashed"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.ego_lane.to_string(),
            r.ego_speed.to_string(),
            r.action.to_string(),
            r.reward.to_string(),
            r.crashed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
