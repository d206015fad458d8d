use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fuzzspike::checkpoint;
use fuzzspike::qnet::Variant;
use fuzzspike_cli::experiment::{self, CURVE_SAMPLES, METRICS_HEADER};
use fuzzspike_cli::{CliError, ExperimentConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn repo_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(name)
}

fn smoke() -> ExperimentConfig {
    ExperimentConfig::load(repo_file("configs/smoke.cfg")).unwrap()
}

/// Smoke config cut down further for tests that train many runs.
fn quick() -> ExperimentConfig {
    let mut cfg = smoke();
    cfg.train.total_steps = 300;
    cfg.train.learning_starts = 100;
    cfg.train.checkpoint_every = 150;
    cfg.seeds = vec![3];
    cfg
}

fn quiet(_: &str) {}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(r.headers().unwrap(), METRICS_HEADER.as_slice());
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn shipped_configs_parse() {
    let default = ExperimentConfig::load(repo_file("configs/default.cfg")).unwrap();
    assert_eq!(default, ExperimentConfig::default());
    let s = smoke();
    assert_eq!(ExperimentConfig::parse(&s.to_text()).unwrap(), s);
}

#[test]
fn smoke_run_writes_checkpoints_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let report = experiment::train(&cfg, dir.path(), 1, &quiet).unwrap();
    assert_eq!(report.runs.len(), 2);
    for run in &report.runs {
        assert_eq!(run.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1000, 2000]);
        for r in &run.records {
            let path = experiment::checkpoint_path(dir.path(), run.seed, r.step);
            let params = checkpoint::load(&path).unwrap();
            assert!(!params.is_empty());
        }
    }
    let rows = csv_rows(&dir.path().join("metrics.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[0] == "fuzzy"));
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains(&format!("config_sha256 = {}", cfg.hash())));
    assert!(manifest.contains("seeds = 0,1"));
    assert!(manifest.contains(&format!("final_params_sha256.seed1 = {}", report.runs[1].fingerprint)));
    let saved = ExperimentConfig::load(dir.path().join("config.txt")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn reruns_reproduce_metrics_byte_for_byte() {
    let cfg = quick();
    let cfg = ExperimentConfig {
        seeds: vec![4, 5],
        ..cfg
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    experiment::train(&cfg, a.path(), 1, &quiet).unwrap();
    // Worker count must not change any output.
    experiment::train(&cfg, b.path(), 2, &quiet).unwrap();
    for file in ["metrics.csv", "manifest.txt", "config.txt"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn variants_share_every_layer_outside_the_codec() {
    let cfg = smoke();
    let fuzzy = cfg.with_variant(Variant::FUZZY).build_network().unwrap();
    let rate = cfg.with_variant(Variant::RATE).build_network().unwrap();
    assert_eq!(fuzzy.shared_topology_hash(), rate.shared_topology_hash());
    assert_ne!(format!("{:?}", fuzzy.topology()), format!("{:?}", rate.topology()));
}

#[test]
fn ablation_matrix_has_five_variants_and_full_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick();
    cfg.seeds = vec![0, 1];
    let reports = experiment::ablate(&cfg, dir.path(), 1, &quiet).unwrap();
    let names: Vec<String> = reports.iter().map(|r| r.variant.to_string()).collect();
    assert_eq!(names, ["fuzzy", "fuzzy-ws", "ann", "gaussian", "rate"]);
    let rows = csv_rows(&dir.path().join("ablation.csv"));
    assert_eq!(rows.len(), 5 * 2 * 2);
    for v in &names {
        for seed in ["0", "1"] {
            let steps: Vec<&str> = rows
                .iter()
                .filter(|r| &r[0] == v && r[1] == seed)
                .map(|r| r[2].as_str())
                .collect();
            assert_eq!(steps, ["150", "300"], "{v} seed {seed}");
        }
        assert!(dir.path().join(v).join("manifest.txt").exists());
    }
    let summary = fs::read_to_string(dir.path().join("ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
}

fn untrained_checkpoint(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
    let net = cfg.build_network().unwrap();
    let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let path = dir.join(format!("{}.ckpt", cfg.variant));
    checkpoint::save(&params, &path).unwrap();
    path
}

#[test]
fn untrained_membership_curves_are_the_initial_triangles() {
    let dir = tempfile::tempdir().unwrap();
    let path = untrained_checkpoint(&ExperimentConfig::default(), dir.path());
    let banks = experiment::membership_banks(&checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(banks.len(), 2);
    let init = [(0.0, 0.2, 0.4), (0.3, 0.5, 0.7), (0.6, 0.8, 1.0)];
    for (_, bank) in &banks {
        for (got, want) in bank.triangles().unwrap().iter().zip(init) {
            // Checkpoints hold f32 values.
            assert!((got.0 - want.0).abs() < 1e-6 && (got.1 - want.1).abs() < 1e-6 && (got.2 - want.2).abs() < 1e-6);
            assert!((bank.eval(got.1).iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        }
    }

    let mut out = Vec::new();
    experiment::plot_membership(&path, &mut out).unwrap();
    let mut r = csv::Reader::from_reader(&out[..]);
    assert_eq!(r.headers().unwrap(), vec!["modality", "function", "x", "mu"]);
    let rows: Vec<(String, usize, f64, f64)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (
                rec[0].to_string(),
                rec[1].parse().unwrap(),
                rec[2].parse().unwrap(),
                rec[3].parse().unwrap(),
            )
        })
        .collect();
    assert_eq!(rows.len(), 2 * 3 * CURVE_SAMPLES);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.3)));
    for modality in ["bev", "lidar"] {
        for (i, (_, b, _)) in init.iter().enumerate() {
            let curve: Vec<_> = rows.iter().filter(|r| r.0 == modality && r.1 == i).collect();
            assert_eq!(curve.len(), CURVE_SAMPLES);
            let peak = curve.iter().max_by(|a, b| a.3.total_cmp(&b.3)).unwrap();
            // The sampled maximum sits on the grid point nearest b.
            assert!(
                (peak.2 - b).abs() <= 0.5 / (CURVE_SAMPLES - 1) as f64 + 1e-9,
                "{modality} {i}"
            );
        }
    }
}

#[test]
fn membership_plot_needs_membership_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = untrained_checkpoint(&ExperimentConfig::default().with_variant(Variant::ANN), dir.path());
    let err = experiment::plot_membership(&path, Vec::new()).unwrap_err();
    assert!(matches!(err, CliError::Core(fuzzspike::Error::Format(_))), "{err}");
}

#[test]
fn evaluation_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let ann = untrained_checkpoint(&cfg.with_variant(Variant::ANN), dir.path());
    assert!(experiment::evaluate(&cfg, &ann).is_err());
    let fuzzy = untrained_checkpoint(&cfg, dir.path());
    let a = experiment::evaluate(&cfg, &fuzzy).unwrap();
    assert_eq!(a, experiment::evaluate(&cfg, &fuzzy).unwrap());
    assert_eq!(a.episodes, cfg.train.eval_episodes);
}

#[test]
fn bad_configs_and_output_dirs_are_errors() {
    let err = ExperimentConfig::parse("train.gama = 0.9").unwrap_err();
    assert!(matches!(err, CliError::Config { line: 1, .. }), "{err}");
    assert!(ExperimentConfig::parse("train.batch = many").is_err());
    assert!(ExperimentConfig::parse("seeds = 1,1").is_err());
    assert!(ExperimentConfig::parse("train.gamma = 1.5").is_err());
    assert!(ExperimentConfig::parse("no equals sign").is_err());

    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let err = experiment::train(&quick(), &blocker.join("out"), 1, &quiet).unwrap_err();
    assert!(matches!(err, CliError::Io { .. }), "{err}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fuzzspike"))
}

#[test]
fn binary_subcommands_and_exit_codes() {
    let out = bin()
        .args(["analyze-capacity", "--c", "2", "--n", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("c,h,w,t,n,m,raw_bits"));
    // 2·32·32 pixels, T = 5, N = 4.
    assert_eq!(lines.next().unwrap(), "2,32,32,5,4,5,65536,10240,40960,32,25,4");

    let out = bin().args(["analyze-cost", "--variant", "fuzzy"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("model.fuzzy_encoder,3072,"));
    assert!(text.lines().any(|l| l.starts_with("bev.encoder,3072,3072")), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    fs::write(&cfg_path, "variant = fuzzy\nbogus = 1\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2: unknown key `bogus`"));

    let ckpt = untrained_checkpoint(&ExperimentConfig::default(), dir.path());
    let csv_path = dir.path().join("curves.csv");
    let out = bin()
        .args(["plot-membership", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(&csv_path).unwrap().lines().count(),
        1 + 2 * 3 * CURVE_SAMPLES
    );

    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("missing.ckpt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn binary_train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick();
    cfg.output_dir = dir.path().join("run");
    let cfg_path = dir.path().join("quick.cfg");
    fs::write(&cfg_path, cfg.to_text()).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fuzzy seed 3 step 300"));
    let ckpt = experiment::checkpoint_path(&cfg.output_dir, 3, 300);
    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with(&format!("{},", cfg.train.eval_episodes)));
}
