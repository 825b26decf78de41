use std::path::Path;
use std::process::Command;

use cshape::cpe::logit;
use cshape::system::Shaper;
use cshape::trainer::{evaluate_constellation, Checkpoint, EvalSetup, EvalCpe, EVALUATION_INDEX};
use cshape_cli::commands::{self, load_checkpoint};
use cshape_cli::config::{CompareMode, ExperimentConfig};
use cshape_cli::export::ConstellationExport;
use cshape_cli::Context;

fn small(mode: &str, m: usize) -> ExperimentConfig {
    let text = format!(
        "mode = \"{mode}\"\nbits_per_symbol = {m}\nseed = 4\n\
         train.epochs = 2\ntrain.batches_per_epoch = 2\ntrain.batch_size = 400\n\
         bps.num_test_phases = 16\nbps.half_window = 16\n\
         network.demapper_hidden = [16, 16]\nvalidation.symbols = 600\neval.symbols = 2000\n"
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn context(config: ExperimentConfig, dir: &Path) -> Context {
    Context {
        config,
        out: dir.to_path_buf(),
        threads: 1,
    }
}

fn trained(config: ExperimentConfig, dir: &Path) -> (Context, Checkpoint) {
    let ctx = context(config, dir);
    commands::cmd_train(&ctx).unwrap();
    let cp = load_checkpoint(&ctx).unwrap();
    (ctx, cp)
}

fn data_rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# cshape "), "{text}");
    lines.skip(1).map(str::to_string).collect()
}

#[test]
fn zero_epochs_writes_initial_model_and_empty_history() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("gcs", 4);
    c.train.epochs = 0;
    let (_, cp) = trained(c, dir.path());
    assert!(cp.history.is_empty());
    assert!(data_rows(&dir.path().join("history.csv")).is_empty());
}

#[test]
fn history_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cp) = trained(small("geopcs", 4), dir.path());
    let rows = data_rows(&dir.path().join("history.csv"));
    assert_eq!(rows.len(), 2);
    for r in &cp.history {
        assert!(r.validation_bmi.unwrap() <= r.entropy + 1e-9);
    }
}

#[test]
fn sweep_is_sorted_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (mut ctx, _) = trained(small("gcs", 4), dir.path());
    commands::cmd_sweep(&ctx).unwrap();
    assert_eq!(data_rows(&dir.path().join("sweep.csv")).len(), 1);

    ctx.config.eval.snr_db = vec![16.0, 12.0];
    ctx.config.eval.linewidth_hz = vec![200e3, 50e3];
    commands::cmd_sweep(&ctx).unwrap();
    let first = std::fs::read(dir.path().join("sweep.csv")).unwrap();
    let rows = data_rows(&dir.path().join("sweep.csv"));
    let keys: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let f: Vec<f64> = r.split(',').take(2).map(|x| x.parse().unwrap()).collect();
            (f[0], f[1])
        })
        .collect();
    assert_eq!(keys, vec![(12.0, 50e3), (12.0, 200e3), (16.0, 50e3), (16.0, 200e3)]);
    ctx.threads = 3;
    commands::cmd_sweep(&ctx).unwrap();
    assert_eq!(std::fs::read(dir.path().join("sweep.csv")).unwrap(), first);
}

#[test]
fn parameterized_sweep_flags_extrapolation() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("gcs", 4);
    c.parameterized = true;
    c.channel.snr_db = cshape_cli::config::RangeValue::Span([14.0, 18.0]);
    let (mut ctx, cp) = trained(c, dir.path());
    ctx.config.eval.snr_db = vec![16.0, 20.0];
    ctx.config.eval.linewidth_hz = vec![100e3];
    let rows = commands::sweep(&ctx, &cp).unwrap();
    assert_eq!(rows.iter().map(|r| r.extrapolated).collect::<Vec<_>>(), vec![false, true]);
}

#[test]
fn qam_export_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("qam", 2);
    c.train.epochs = 0;
    let (ctx, _) = trained(c, dir.path());
    commands::cmd_export_constellation(&ctx).unwrap();
    let e = ConstellationExport::from_json(&std::fs::read_to_string(dir.path().join("constellation.json")).unwrap())
        .unwrap();
    assert_eq!(e.m, 2);
    assert_eq!(e.convention, "MSB-first");
    assert_eq!(e.points.len(), 4);
    assert!(e.points.iter().all(|p| p.prob == 0.25));
    assert_eq!(data_rows(&dir.path().join("constellation.csv")).len(), 4);
}

#[test]
fn exported_constellation_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (ctx, cp) = trained(small("geopcs", 4), dir.path());
    let e = commands::export_constellation(&ctx, &cp).unwrap();
    let sum: f64 = e.points.iter().map(|p| p.prob).sum();
    assert!((sum - 1.0).abs() <= 1e-9);
    let imported = ConstellationExport::from_json(&e.to_json()).unwrap().constellation().unwrap();
    let original = cp.model.constellation(e.sigma_n, e.sigma_phi).unwrap();
    assert_eq!(imported, original);
    let setup = EvalSetup {
        cpe: EvalCpe::Regular,
        num_test_phases: 16,
        half_window: 16,
        square_qam: false,
    };
    let run = |c| {
        evaluate_constellation(c, &cp.model.demapper, &setup, e.sigma_n, e.sigma_phi, 3000, 4, EVALUATION_INDEX)
            .unwrap()
    };
    assert_eq!(run(&imported), run(&original));
}

#[test]
fn region_grids_are_clipped() {
    let dir = tempfile::tempdir().unwrap();
    let (mut ctx, _) = trained(small("gcs", 4), dir.path());
    ctx.config.regions.resolution = 2;
    ctx.config.regions.bits = vec![1];
    commands::cmd_regions(&ctx).unwrap();
    let text = std::fs::read_to_string(dir.path().join("regions_bit1.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let v: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|x| x.abs() <= 5.0));
    }

    ctx.config.regions.resolution = 20;
    ctx.config.regions.bits = Vec::new();
    commands::cmd_regions(&ctx).unwrap();
    for bit in 1..=4 {
        assert!(dir.path().join(format!("regions_bit{bit}.csv")).exists());
    }
}

#[test]
fn fit_mb_needs_probabilistic_shaping() {
    let dir = tempfile::tempdir().unwrap();
    let (ctx, cp) = trained(small("gcs", 4), dir.path());
    let err = commands::fit_mb(&ctx, &cp).unwrap_err();
    assert!(err.to_string().contains("no probabilistic shaper"), "{err}");
}

#[test]
fn fit_mb_recovers_planted_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("qam_pcs", 4);
    c.train.epochs = 0;
    let (ctx, mut cp) = trained(c, dir.path());
    cp.model.shaper = Shaper::MbLambda { raw: logit(0.3) };
    let fits = commands::fit_mb(&ctx, &cp).unwrap();
    assert_eq!(fits.len(), 1);
    assert!((fits[0].lambda - 0.3).abs() < 1e-6, "{}", fits[0].lambda);
    assert!(fits[0].kl < 1e-12);
}

#[test]
fn single_compare_entry_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small("gcs", 4);
    c.compare.num_test_phases = vec![16];
    c.compare.modes = vec![CompareMode::Regular];
    c.compare.seeds = vec![1];
    let ctx = context(c, dir.path());
    commands::cmd_compare_bps(&ctx).unwrap();
    let rows = data_rows(&dir.path().join("compare_bps.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("16,regular,"));
}

fn cshape(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cshape"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nbps.half_window = 128\ntrain.batch_size = 200\n").unwrap();
    let r = cshape(&["train", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));

    std::fs::write(&bad, "seed = 1\nunknown.key = 3\n").unwrap();
    let r = cshape(&["train", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(2));

    let r = cshape(&["sweep", "--out", out]);
    assert_eq!(r.status.code(), Some(4));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "bits_per_symbol = 4\ntrain.epochs = 1\ntrain.batches_per_epoch = 1\ntrain.batch_size = 400\n\
         bps.half_window = 16\nbps.num_test_phases = 8\nnetwork.demapper_hidden = [8]\nvalidation.symbols = 500\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let r = cshape(&["train", "--config", cfg.to_str().unwrap(), "--seed", "77", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.lines().next().unwrap().ends_with("seed=77"));
    let cp = Checkpoint::from_json(&std::fs::read_to_string(out.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(cp.config.seed, 77);
}
