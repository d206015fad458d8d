//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so a
//! config file only lists what it changes; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fuzzspike::autodiff::MembershipKind;
use fuzzspike::highway::EnvConfig;
use fuzzspike::qnet::{Encoder, NetworkConfig, QNetwork, Variant};
use fuzzspike::rl::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub env: EnvConfig,
    /// Input shapes are derived from the environment grid; see [`Self::network`].
    pub net: NetworkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            variant: Variant::FUZZY,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            env: EnvConfig::default(),
            net: NetworkConfig::default(),
        };
        cfg.sync_shapes();
        cfg
    }
}

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(f64, usize, u64);

impl<A: Value, B: Value> Value for (A, B) {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("`{s}`: expected two comma-separated values"))?;
        Ok((A::parse(a.trim())?, B::parse(b.trim())?))
    }
    fn show(&self) -> String {
        format!("{},{}", self.0.show(), self.1.show())
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| T::parse(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(",")
    }
}

impl Value for PathBuf {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

struct Field {
    key: &'static str,
    doc: &'static str,
    get: fn(&ExperimentConfig) -> String,
    set: fn(&mut ExperimentConfig, &str) -> std::result::Result<(), String>,
}

macro_rules! field {
    ($key:literal, $doc:literal, $($path:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| Value::show(&c.$($path).+),
            set: |c, v| {
                c.$($path).+ = Value::parse(v)?;
                Ok(())
            },
        }
    };
}

fn kind_name(kind: MembershipKind) -> &'static str {
    match kind {
        MembershipKind::Triangular => "triangular",
        MembershipKind::Gaussian => "gaussian",
    }
}

/// Sections in file order: header comment, then fields.
fn sections() -> Vec<(&'static str, Vec<Field>)> {
    vec![
        (
            "run",
            vec![
                Field {
                    key: "variant",
                    doc: "fuzzy, fuzzy-ws, gaussian, gaussian-ws, rate, rate-neural or ann",
                    get: |c| {
                        // The membership key carries the kind.
                        let mut v = c.variant;
                        if let Encoder::Fuzzy(_) = v.encoder {
                            v.encoder = Encoder::Fuzzy(MembershipKind::Triangular);
                        }
                        v.name().to_string()
                    },
                    set: |c, v| {
                        c.variant = v.parse().map_err(|e: fuzzspike::Error| e.to_string())?;
                        Ok(())
                    },
                },
                Field {
                    key: "membership",
                    doc: "triangular or gaussian; only used by fuzzy encoders",
                    get: |c| match c.variant.encoder {
                        Encoder::Fuzzy(kind) => kind_name(kind).to_string(),
                        _ => kind_name(MembershipKind::Triangular).to_string(),
                    },
                    set: |c, v| {
                        let kind = match v {
                            "triangular" => MembershipKind::Triangular,
                            "gaussian" => MembershipKind::Gaussian,
                            _ => return Err(format!("`{v}`: expected triangular or gaussian")),
                        };
                        match c.variant.encoder {
                            Encoder::Fuzzy(_) => c.variant.encoder = Encoder::Fuzzy(kind),
                            _ if kind == MembershipKind::Triangular => {}
                            _ => return Err(format!("variant {} has no membership functions", c.variant)),
                        }
                        Ok(())
                    },
                },
                field!("seeds", "comma-separated training seeds, one run each", seeds),
                field!(
                    "output_dir",
                    "directory for metrics, checkpoints and the manifest",
                    output_dir
                ),
            ],
        ),
        (
            "training",
            vec![
                field!("train.gamma", "discount factor", train.gamma),
                field!("train.lr", "Adam learning rate", train.lr),
                field!("train.batch", "minibatch size", train.batch),
                field!("train.buffer_capacity", "replay buffer capacity", train.buffer_capacity),
                field!(
                    "train.target_update_every",
                    "gradient updates between target copies",
                    train.target_update_every
                ),
                field!("train.eps_start", "initial exploration rate", train.eps_start),
                field!("train.eps_end", "final exploration rate", train.eps_end),
                field!(
                    "train.eps_fraction",
                    "fraction of total_steps spent decaying epsilon",
                    train.eps_fraction
                ),
                field!("train.total_steps", "environment steps per seed", train.total_steps),
                field!(
                    "train.checkpoint_every",
                    "environment steps between checkpoints",
                    train.checkpoint_every
                ),
                field!(
                    "train.eval_episodes",
                    "greedy evaluation episodes per checkpoint",
                    train.eval_episodes
                ),
                field!(
                    "train.train_every",
                    "environment steps per gradient update",
                    train.train_every
                ),
                field!(
                    "train.learning_starts",
                    "environment steps before the first update",
                    train.learning_starts
                ),
                field!("train.max_grad_norm", "global gradient norm clip", train.max_grad_norm),
                field!(
                    "train.calibration_samples",
                    "random-policy observations for weight calibration",
                    train.calibration_samples
                ),
                field!(
                    "train.init_current_std",
                    "calibrated std of every input current",
                    train.init_current_std
                ),
            ],
        ),
        (
            "environment",
            vec![
                field!("env.lanes", "number of lanes", env.lanes),
                field!("env.lane_width", "lane width in metres", env.lane_width),
                field!("env.dt", "seconds per step", env.dt),
                field!(
                    "env.speed_step",
                    "speed change of FASTER and SLOWER (m/s)",
                    env.speed_step
                ),
                field!("env.v_min", "minimum ego speed (m/s)", env.v_min),
                field!("env.v_max", "maximum ego speed (m/s)", env.v_max),
                field!("env.ego_lane", "starting lane of the ego vehicle", env.ego_lane),
                field!("env.ego_speed", "starting speed of the ego vehicle", env.ego_speed),
                field!("env.vehicles", "other vehicles on the road", env.vehicles),
                field!(
                    "env.traffic_speed",
                    "min,max speed of other vehicles",
                    env.traffic_speed
                ),
                field!("env.vehicle_length", "vehicle length in metres", env.vehicle_length),
                field!("env.vehicle_width", "vehicle width in metres", env.vehicle_width),
                field!(
                    "env.lane_change_steps",
                    "steps to complete a lane change",
                    env.lane_change_steps
                ),
                field!("env.horizon", "steps per episode", env.horizon),
                field!(
                    "env.speed_weight",
                    "reward weight of normalized speed",
                    env.speed_weight
                ),
                field!("env.crash_weight", "reward penalty of a crash", env.crash_weight),
                field!("env.grid", "rows,cols of both observation grids", env.grid),
                field!("env.resolution", "metres per grid row", env.resolution),
                field!(
                    "env.lateral_resolution",
                    "metres per grid column",
                    env.lateral_resolution
                ),
                field!("env.anchor", "row,col of the ego vehicle in the grids", env.anchor),
                field!("env.lidar_sectors", "angular LiDAR sectors", env.lidar_sectors),
                field!(
                    "env.spawn_gap",
                    "minimum same-lane spacing of spawned vehicles",
                    env.spawn_gap
                ),
            ],
        ),
        (
            "network",
            vec![
                field!("net.steps", "simulation window of the spiking variants", net.steps),
                field!(
                    "net.memberships",
                    "membership functions per input channel",
                    net.memberships
                ),
                field!(
                    "net.populations",
                    "output neurons per action of the neural decoder",
                    net.populations
                ),
                field!(
                    "net.conv_channels",
                    "output channels of each convolution",
                    net.conv_channels
                ),
                field!("net.kernel", "convolution kernel size", net.kernel),
                field!("net.stride", "convolution stride", net.stride),
                field!("net.padding", "convolution padding", net.padding),
                field!("net.embed_dim", "token embedding width", net.embed_dim),
                field!("net.heads", "cross-attention heads", net.heads),
                field!("net.ffn", "fusion feed-forward width", net.ffn),
                field!("net.head_hidden", "hidden units of the Q head", net.head_hidden),
                field!(
                    "net.decoder_hidden",
                    "hidden units of the neural decoder",
                    net.decoder_hidden
                ),
                field!("net.tau", "membrane time constant", net.tau),
                field!("net.threshold", "firing threshold", net.threshold),
                field!(
                    "net.negative_threshold",
                    "negative threshold of ternary neurons",
                    net.negative_threshold
                ),
                field!(
                    "net.surrogate_alpha",
                    "steepness of the arctan surrogate gradient",
                    net.surrogate_alpha
                ),
            ],
        ),
    ]
}

impl ExperimentConfig {
    /// Parses `text`, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let sections = sections();
        let fields: Vec<&Field> = sections.iter().flat_map(|(_, f)| f).collect();
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        // The membership kind refines the variant, so it is applied last.
        let mut deferred = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(line_no, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let field = fields
                .iter()
                .find(|f| f.key == key)
                .ok_or_else(|| CliError::config(line_no, format!("unknown key `{key}`")))?;
            if !seen.insert(key.to_string()) {
                return Err(CliError::config(line_no, format!("duplicate key `{key}`")));
            }
            if key == "membership" {
                deferred = Some((line_no, field, value.to_string()));
                continue;
            }
            (field.set)(&mut cfg, value).map_err(|e| CliError::config(line_no, format!("{key}: {e}")))?;
        }
        if let Some((line_no, field, value)) = deferred {
            (field.set)(&mut cfg, &value).map_err(|e| CliError::config(line_no, format!("membership: {e}")))?;
        }
        cfg.sync_shapes();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, grouped in commented sections.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (name, fields)) in sections().iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "# --- {name} ---");
            for f in fields {
                let _ = writeln!(out, "# {}", f.doc);
                let _ = writeln!(out, "{} = {}", f.key, (f.get)(self));
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn keys() -> Vec<&'static str> {
        sections().iter().flat_map(|(_, f)| f.iter().map(|f| f.key)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.env.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::invalid("at least one seed is required"));
        }
        let mut unique = self.seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != self.seeds.len() {
            return Err(CliError::invalid("seeds must be distinct"));
        }
        QNetwork::new(self.network(), self.variant)?;
        Ok(())
    }

    /// Network configuration with input shapes matching the environment.
    pub fn network(&self) -> NetworkConfig {
        let (rows, cols) = self.env.grid;
        NetworkConfig {
            bev_shape: [1, rows, cols],
            lidar_shape: [1, rows, cols],
            actions: fuzzspike::highway::Action::ALL.len(),
            ..self.net.clone()
        }
    }

    pub fn build_network(&self) -> Result<QNetwork> {
        Ok(QNetwork::new(self.network(), self.variant)?)
    }

    fn sync_shapes(&mut self) {
        self.net = self.network();
    }

    /// Copy with another variant, keeping every other setting.
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable_and_documented() {
        let sections = sections();
        for (_, fields) in &sections {
            for f in fields {
                assert!(!f.doc.is_empty(), "{}", f.key);
                let mut cfg = ExperimentConfig::default();
                let value = (f.get)(&cfg);
                (f.set)(&mut cfg, &value).unwrap();
                assert_eq!(cfg, ExperimentConfig::default(), "{}", f.key);
            }
        }
        let keys = ExperimentConfig::keys();
        let mut unique = keys.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), keys.len());
    }

    #[test]
    fn gaussian_membership_applies_regardless_of_order() {
        let a = ExperimentConfig::parse("membership = gaussian\nvariant = fuzzy").unwrap();
        let b = ExperimentConfig::parse("variant = gaussian").unwrap();
        assert_eq!(a.variant, Variant::GAUSSIAN);
        assert_eq!(a, b);
        assert!(ExperimentConfig::parse("variant = ann\nmembership = gaussian").is_err());
        assert!(ExperimentConfig::parse("variant = rate\nmembership = triangular").is_ok());
    }

    #[test]
    fn floats_round_trip_exactly() {
        let cfg = ExperimentConfig::parse("train.lr = 0.1\ntrain.gamma = 0.30000000000000004").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.train.gamma.to_bits(), cfg.train.gamma.to_bits());
        assert_eq!(back, cfg);
    }

    #[test]
    fn grid_drives_network_shapes() {
        let cfg = ExperimentConfig::parse("env.grid = 16,24\nenv.anchor = 10,12\nenv.vehicles = 2").unwrap();
        assert_eq!(cfg.network().bev_shape, [1, 16, 24]);
        assert_eq!(cfg.net.lidar_shape, [1, 16, 24]);
    }
}
