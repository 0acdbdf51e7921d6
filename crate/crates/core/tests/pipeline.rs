use std::fs;
use std::path::{Path, PathBuf};

use reggan::metrics::MetricsConfig;
use reggan::nets::{DiscriminatorSpec, GeneratorSpec, RegistrationNetSpec};
use reggan::noise::{CorruptionRecord, NoiseSetting};
use reggan::report::{load_runs, write_report};
use reggan::synthdata::{generate_dataset, PhantomSpec};
use reggan::train::{
    checkpoint_name, epoch_corruption_name, evaluate, run_experiment, ExperimentConfig, ModeKind, NetSpecs, RunReport,
    CORRUPTION_LOG, CURVES_FILE, REPORT_FILE, SAMPLES_DIR,
};
use reggan::Error;

fn small_nets() -> NetSpecs {
    NetSpecs {
        generator: GeneratorSpec { base_channels: 4, n_residual_blocks: 1, n_down: 2, n_up: 2 },
        discriminator: DiscriminatorSpec { base_channels: 4, n_layers: 2 },
        registration: RegistrationNetSpec { base_channels: 4, depth: 3 },
    }
}

fn dataset(root: &Path, seed: u64) -> PathBuf {
    let dir = root.join(format!("data{seed}"));
    generate_dataset(&PhantomSpec { resolution: 32, seed, ..PhantomSpec::default() }, 8, 3, &dir).unwrap();
    dir
}

fn config(data: &Path, out: PathBuf, mode: ModeKind, noise: NoiseSetting) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(data, out, mode);
    c.noise = noise;
    c.nets = small_nets();
    c.optimizer.epochs = 2;
    c.n_samples = 2;
    c
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 1);
    let out = run_experiment(&config(&data, tmp.path().join("run"), ModeKind::NcR, NoiseSetting::Level(4))).unwrap();
    let dir = &out.run_dir;
    assert_eq!(out.curves.len(), 2);
    assert!(dir.join(checkpoint_name(2)).exists());
    let report = RunReport::load(&dir.join(REPORT_FILE)).unwrap();
    assert_eq!(report, out.report);
    assert_eq!(report.metrics.n_pairs, 3);
    assert_eq!(report.parameter_counts.len(), 3);
    assert!(report.final_train_smoothness.is_some());
    let log: Vec<CorruptionRecord> = serde_json::from_str(&fs::read_to_string(dir.join(CORRUPTION_LOG)).unwrap()).unwrap();
    assert_eq!(log.len(), 8);
    assert_eq!(fs::read_dir(dir.join(SAMPLES_DIR)).unwrap().count(), 6);
    let curves = fs::read_to_string(dir.join(CURVES_FILE)).unwrap();
    assert_eq!(reggan::train::parse_curves_csv(&curves).unwrap(), out.curves);
}

#[test]
fn final_metrics_compare_the_generator_with_clean_references() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 1);
    let cfg = config(&data, tmp.path().join("run"), ModeKind::NcR, NoiseSetting::Level(5));
    let out = run_experiment(&cfg).unwrap();
    let state = reggan::checkpoint::load(&out.run_dir.join(checkpoint_name(2))).unwrap();
    let test = reggan::dataset::load_split(&data, reggan::train::TEST_SPLIT).unwrap();
    let again = evaluate(&state.nets.g.net, &test, &MetricsConfig::default()).unwrap();
    assert_eq!(again, out.report.metrics);
}

#[test]
fn redrawn_noise_logs_each_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 1);
    let mut cfg = config(&data, tmp.path().join("run"), ModeKind::Pix2Pix, NoiseSetting::Level(3));
    cfg.redraw_noise = true;
    let out = run_experiment(&cfg).unwrap();
    let e1 = fs::read(out.run_dir.join(epoch_corruption_name(1))).unwrap();
    let e2 = fs::read(out.run_dir.join(epoch_corruption_name(2))).unwrap();
    assert_ne!(e1, e2);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 1);
    run_experiment(&config(&data, tmp.path().join("a"), ModeKind::Nc, NoiseSetting::Level(1))).unwrap();
    let mut other = config(&data, tmp.path().join("b"), ModeKind::NcR, NoiseSetting::Level(1));
    other.resume = Some(tmp.path().join("a").join(checkpoint_name(2)));
    assert!(matches!(run_experiment(&other), Err(Error::Config(_))));
}

#[test]
fn report_requires_a_shared_test_set() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = dataset(tmp.path(), 1);
    let d2 = dataset(tmp.path(), 2);
    let mut dirs = Vec::new();
    for (i, (data, mode, noise)) in [
        (&d1, ModeKind::NcR, NoiseSetting::Level(0)),
        (&d1, ModeKind::NcR, NoiseSetting::Level(2)),
        (&d1, ModeKind::Pix2Pix, NoiseSetting::Level(0)),
    ]
    .into_iter()
    .enumerate()
    {
        let mut c = config(data, tmp.path().join(format!("r{i}")), mode, noise);
        c.optimizer.epochs = 1;
        dirs.push(run_experiment(&c).unwrap().run_dir);
    }
    let runs = load_runs(&dirs).unwrap();
    let summary = write_report(&runs, &tmp.path().join("report")).unwrap();
    assert_eq!(summary.table.lines().count(), 2 + 3);
    let trend = summary.smoothness.iter().find(|t| t.mode == ModeKind::NcR).unwrap();
    assert_eq!(trend.points.iter().map(|p| p.level).collect::<Vec<_>>(), vec![0, 2]);

    let mut c = config(&d2, tmp.path().join("odd"), ModeKind::Pix2Pix, NoiseSetting::Level(0));
    c.optimizer.epochs = 1;
    dirs.push(run_experiment(&c).unwrap().run_dir);
    match load_runs(&dirs) {
        Err(Error::Report(msg)) => assert!(msg.contains("mismatched test sets"), "{msg}"),
        other => panic!("{:?}", other.map(|r| r.len())),
    }
}
