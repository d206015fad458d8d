//! Seed orchestration, checkpointing, metrics and the analysis outputs.
//!
//! A training run writes into its output directory:
//! `config.txt` (resolved config), `metrics.csv` (one row per seed and
//! checkpoint), `checkpoints/seed<S>/step<NNNNNN>.ckpt` and `manifest.txt`
//! (config hash, seeds, code version and final parameter fingerprints).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fuzzspike::analysis::{capacity, cost_model, ConvSpec};
use fuzzspike::autodiff::MembershipKind;
use fuzzspike::checkpoint;
use fuzzspike::codec::MembershipBank;
use fuzzspike::qnet::{QNetwork, Variant, MODALITIES};
use fuzzspike::rl::{self, eval_seeds, CheckpointRecord, EvalMetrics, GreedyPolicy};
use fuzzspike::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Samples per membership curve.
pub const CURVE_SAMPLES: usize = 256;

pub const METRICS_HEADER: [&str; 8] = [
    "variant",
    "seed",
    "step",
    "avg_reward",
    "avg_speed",
    "crash_freq",
    "eps",
    "train_loss",
];

/// Receives one human-readable line per checkpoint.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<CheckpointRecord>,
    /// Fingerprint of the final online parameters.
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub variant: Variant,
    pub dir: PathBuf,
    pub runs: Vec<SeedRun>,
}

impl TrainReport {
    /// Average reward at the last checkpoint, averaged over seeds.
    pub fn final_avg_reward(&self) -> f64 {
        self.final_mean(|m| m.avg_reward)
    }

    pub fn final_mean(&self, f: impl Fn(&EvalMetrics) -> f64) -> f64 {
        let finals: Vec<f64> = self
            .runs
            .iter()
            .filter_map(|r| r.records.last().map(|c| f(&c.metrics)))
            .collect();
        if finals.is_empty() {
            return f64::NAN;
        }
        finals.iter().sum::<f64>() / finals.len() as f64
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn checkpoint_path(dir: &Path, seed: u64, step: usize) -> PathBuf {
    dir.join("checkpoints")
        .join(format!("seed{seed}"))
        .join(format!("step{step:06}.ckpt"))
}

fn metrics_row(variant: Variant, r: &CheckpointRecord) -> [String; 8] {
    [
        variant.to_string(),
        r.seed.to_string(),
        r.step.to_string(),
        r.metrics.avg_reward.to_string(),
        r.metrics.avg_speed.to_string(),
        r.metrics.crash_freq.to_string(),
        r.eps.to_string(),
        r.train_loss.to_string(),
    ]
}

fn write_metrics<'a>(path: &Path, rows: impl IntoIterator<Item = (Variant, &'a CheckpointRecord)>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(METRICS_HEADER)?;
    for (v, r) in rows {
        w.write_record(metrics_row(v, r))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn train_seed(cfg: &ExperimentConfig, dir: &Path, seed: u64, progress: Progress) -> Result<SeedRun> {
    let net = cfg.build_network()?;
    let seed_dir = checkpoint_path(dir, seed, 0)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    create_dir(&seed_dir)?;
    let variant = cfg.variant;
    let (agent, records) = rl::train(net, &cfg.env, &cfg.train, seed, |rec, agent| {
        checkpoint::save(&agent.online, checkpoint_path(dir, seed, rec.step))?;
        progress(&format!(
            "{variant} seed {seed} step {}: avg_reward {:.4} avg_speed {:.2} crash_freq {:.4} eps {:.3} loss {:.5}",
            rec.step, rec.metrics.avg_reward, rec.metrics.avg_speed, rec.metrics.crash_freq, rec.eps, rec.train_loss
        ));
        Ok(())
    })?;
    Ok(SeedRun {
        seed,
        records,
        fingerprint: agent.online.fingerprint(),
    })
}

/// Trains every configured seed into `dir`, using up to `jobs` workers.
/// Outputs depend only on the config, not on `jobs`.
pub fn train(cfg: &ExperimentConfig, dir: &Path, jobs: usize, progress: Progress) -> Result<TrainReport> {
    cfg.validate()?;
    create_dir(dir)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let results: Mutex<Vec<Option<Result<SeedRun>>>> = Mutex::new(cfg.seeds.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&seed) = cfg.seeds.get(i) else { break };
        let run = train_seed(cfg, dir, seed, progress);
        results.lock().expect("no worker panicked")[i] = Some(run);
    };
    let jobs = jobs.clamp(1, cfg.seeds.len());
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let runs = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>>>()?;
    let report = TrainReport {
        variant: cfg.variant,
        dir: dir.to_path_buf(),
        runs,
    };
    write_metrics(
        &dir.join("metrics.csv"),
        report
            .runs
            .iter()
            .flat_map(|r| r.records.iter().map(|c| (cfg.variant, c))),
    )?;
    write_file(&dir.join("manifest.txt"), &manifest(cfg, &report)?)?;
    Ok(report)
}

fn manifest(cfg: &ExperimentConfig, report: &TrainReport) -> Result<String> {
    let net = cfg.build_network()?;
    let mut out = String::new();
    out.push_str(&format!("code_version = {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("config_sha256 = {}\n", cfg.hash()));
    out.push_str(&format!("variant = {}\n", cfg.variant));
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    out.push_str(&format!("seeds = {}\n", seeds.join(",")));
    out.push_str(&format!("shared_topology_sha256 = {}\n", net.shared_topology_hash()));
    for r in &report.runs {
        out.push_str(&format!("final_params_sha256.seed{} = {}\n", r.seed, r.fingerprint));
    }
    Ok(out)
}

/// Trains each ablation variant into `dir/<variant>` and writes
/// `ablation.csv` (one row per variant, seed and checkpoint) and
/// `ablation_summary.csv` (final metrics averaged over seeds).
pub fn ablate(cfg: &ExperimentConfig, dir: &Path, jobs: usize, progress: Progress) -> Result<Vec<TrainReport>> {
    cfg.validate()?;
    create_dir(dir)?;
    let mut reports = Vec::new();
    for variant in Variant::ABLATION {
        let v = cfg.with_variant(variant);
        reports.push(train(&v, &dir.join(variant.name()), jobs, progress)?);
    }
    write_metrics(
        &dir.join("ablation.csv"),
        reports.iter().flat_map(|rep| {
            rep.runs
                .iter()
                .flat_map(move |r| r.records.iter().map(move |c| (rep.variant, c)))
        }),
    )?;
    let path = dir.join("ablation_summary.csv");
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "variant",
        "seeds",
        "final_avg_reward",
        "final_avg_speed",
        "final_crash_freq",
    ])?;
    for rep in &reports {
        w.write_record([
            rep.variant.to_string(),
            rep.runs.len().to_string(),
            rep.final_avg_reward().to_string(),
            rep.final_mean(|m| m.avg_speed).to_string(),
            rep.final_mean(|m| m.crash_freq).to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(reports)
}

/// Loads a checkpoint and checks it holds exactly the parameters of `net`.
pub fn load_params(net: &QNetwork, path: &Path) -> Result<ParamStore> {
    let store = checkpoint::load(path)?;
    let expected = net.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, value) in expected.iter() {
        let got = store.get(name).ok_or_else(|| {
            fuzzspike::Error::Format(format!(
                "checkpoint lacks `{name}` required by variant {}",
                net.variant()
            ))
        })?;
        if got.shape() != value.shape() {
            return Err(fuzzspike::Error::Format(format!(
                "`{name}` has shape {:?}, the network expects {:?}",
                got.shape(),
                value.shape()
            ))
            .into());
        }
    }
    if store.len() != expected.len() {
        return Err(fuzzspike::Error::Format(format!(
            "checkpoint has {} parameters, the network expects {}",
            store.len(),
            expected.len()
        ))
        .into());
    }
    Ok(store)
}

/// Greedy evaluation of a checkpoint on the fixed evaluation seeds.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalMetrics> {
    cfg.validate()?;
    let net = cfg.build_network()?;
    let params = load_params(&net, checkpoint)?;
    let mut policy = GreedyPolicy {
        net: &net,
        params: &params,
        env: &cfg.env,
        rng: ChaCha8Rng::seed_from_u64(0),
    };
    Ok(rl::evaluate(
        &mut policy,
        &cfg.env,
        &eval_seeds(cfg.train.eval_episodes),
    )?)
}

/// Membership banks stored in a checkpoint, by modality. The kind follows
/// from the parameter count per function.
pub fn membership_banks(store: &ParamStore) -> Result<Vec<(String, MembershipBank)>> {
    let mut banks = Vec::new();
    for m in MODALITIES {
        let name = QNetwork::membership_param(m);
        let Some(raw) = store.get(&name) else { continue };
        let kind = match raw.shape() {
            [_, 3] => MembershipKind::Triangular,
            [_, 2] => MembershipKind::Gaussian,
            s => return Err(fuzzspike::Error::Format(format!("`{name}` has unexpected shape {s:?}")).into()),
        };
        banks.push((m.to_string(), MembershipBank::from_raw(kind, raw.clone())?));
    }
    if banks.is_empty() {
        return Err(fuzzspike::Error::Format("checkpoint has no membership records".into()).into());
    }
    Ok(banks)
}

/// Writes `modality,function,x,mu` rows, [`CURVE_SAMPLES`] per curve.
pub fn plot_membership(checkpoint: &Path, out: impl Write) -> Result<()> {
    let banks = membership_banks(&checkpoint::load(checkpoint)?)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["modality", "function", "x", "mu"])?;
    for (modality, bank) in &banks {
        for (x, mus) in bank.curves(CURVE_SAMPLES) {
            for (i, mu) in mus.iter().enumerate() {
                w.write_record([modality.clone(), i.to_string(), x.to_string(), mu.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io("<output>", e))?;
    Ok(())
}

/// Capacity of the input and output codes for one observation shape.
pub fn analyze_capacity(c: u64, h: u64, w: u64, t: u64, n: u64, m: u64, out: impl Write) -> Result<()> {
    let r = capacity(c, h, w, t, n, m)?;
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record([
        "c",
        "h",
        "w",
        "t",
        "n",
        "m",
        "raw_bits",
        "rate_bits",
        "pop_bits",
        "q_raw_bits",
        "q_pop_bits",
        "population_gain",
    ])?;
    wr.write_record(
        [
            c,
            h,
            w,
            t,
            n,
            m,
            r.raw_bits,
            r.rate_bits,
            r.pop_bits,
            r.q_raw_bits,
            r.q_pop_bits,
        ]
        .iter()
        .map(u64::to_string)
        .chain([r.population_gain().to_string()]),
    )?;
    wr.flush().map_err(|e| CliError::io("<output>", e))?;
    Ok(())
}

/// Closed-form input-stage costs of the configured network followed by its
/// per-stage multiplication counts, instrumented next to analytic.
pub fn analyze_cost(cfg: &ExperimentConfig, out: impl Write) -> Result<()> {
    cfg.validate()?;
    let net_cfg = cfg.network();
    let [c, h, w] = net_cfg.bev_shape;
    let conv = ConvSpec {
        out_channels: net_cfg.conv_channels[0],
        kernel: net_cfg.kernel,
        stride: net_cfg.stride,
        padding: net_cfg.padding,
    };
    let model = cost_model(
        (c, h, w),
        &conv,
        net_cfg.memberships,
        net_cfg.populations,
        net_cfg.actions,
    )?;
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["stage", "analytic", "instrumented"])?;
    for (name, v) in [
        ("model.fuzzy_encoder", model.fuzzy_encoder),
        ("model.rate_encoder", model.rate_encoder),
        ("model.first_conv_raw", model.first_conv_raw),
        ("model.first_conv_fuzzy", model.first_conv_fuzzy),
        ("model.decoder_overhead", model.decoder_overhead),
    ] {
        wr.write_record([name.to_string(), v.to_string(), String::new()])?;
    }
    let net = cfg.build_network()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = net.init_params(&mut rng)?;
    let counts = net.count_multiplications(&params, &mut rng)?;
    let mut stages: Vec<&String> = counts.analytic.keys().chain(counts.instrumented.keys()).collect();
    stages.sort();
    stages.dedup();
    for s in stages {
        let show = |m: &std::collections::BTreeMap<String, u64>| m.get(s).map(u64::to_string).unwrap_or_default();
        wr.write_record([s.clone(), show(&counts.analytic), show(&counts.instrumented)])?;
    }
    wr.flush().map_err(|e| CliError::io("<output>", e))?;
    Ok(())
}
