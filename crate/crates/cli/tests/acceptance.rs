//! Acceptance criteria. Prints one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- AC2 AC5`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cshape::channel::{complex_noise, sigma_n_from_snr, sigma_phi_from_linewidth, wiener_phase_trace};
use cshape::cpe::{bps, test_phases, BpsConfig, BpsMode, PhaseSpan};
use cshape::demapper::{gaussian_reference_demap, LlrBatch};
use cshape::metrics::{bmi, entropy, fit_mb_lambda, gcs_loss, geopcs_loss};
use cshape::rng::{substream, Stream};
use cshape::shaping::{label_bit, mb_pmf, probs_from_logits, square_qam};
use cshape::trainer::{train, Checkpoint, TrainMode};
use cshape::{Complex64, Constellation};
use cshape_cli::commands::{compare_bps, fit_mb, gradient_checks, summarize};
use cshape_cli::config::{CompareMode, ExperimentConfig};
use cshape_cli::Context;
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    let results = gradient_checks(&config.gradcheck, config.channel.symbol_rate, 1).expect("gradient checks run");
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} t={}", r.case, r.temperature))
        .collect();
    let max = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let passed = failed.is_empty() && results.len() == 6 && within(elapsed, 120);
    outcome(
        passed,
        format!(
            "{} checks (gcs and geopcs at t = 1, 0.1, 0.001), max rel err {max:.2e}, failed [{}], {:.1} s",
            results.len(),
            failed.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

/// Distance from `phi` to the nearest multiple of `period`.
fn boundary_distance(phi: f64, period: f64) -> f64 {
    let r = phi.rem_euclid(period);
    r.min(period - r)
}

fn ac2() -> Outcome {
    let start = Instant::now();
    let n = 10_000;
    let seed = 2;
    let qam = Constellation::uniform(square_qam(4).unwrap()).unwrap();
    let sn = sigma_n_from_snr(17.0, 1.0);
    let sp = sigma_phi_from_linewidth(100e3, 32e9);
    let mut rng = substream(seed, Stream::DataBits, 0);
    let x: Vec<Complex64> = (0..n).map(|_| qam.points[rng.random_range(0..16)]).collect();
    let trace = wiener_phase_trace(
        n,
        sp,
        &mut substream(seed, Stream::Phase, 0),
        &mut substream(seed, Stream::StartPhase, 0),
        true,
    )
    .unwrap();
    let noise = complex_noise(n, sn, &mut substream(seed, Stream::Noise, 0));
    let z = cshape::channel::apply_channel_with_noise(&x, &noise, &trace).unwrap();
    let base = BpsConfig {
        num_test_phases: 60,
        half_window: 128,
        mode: BpsMode::Regular,
        temperature: 1e-3,
        phase_span: PhaseSpan::Quadrant,
    };
    let regular = bps(&z, &qam.points, &base).unwrap();
    let soft = bps(&z, &qam.points, &base.with_mode(BpsMode::Differentiable)).unwrap();
    let period = PhaseSpan::Quadrant.period();
    let tol = 2.0 * PI / 60.0;
    let (mut total, mut agree) = (0usize, 0usize);
    for k in regular.valid.clone() {
        if boundary_distance(trace.phases[k], period) < tol {
            continue;
        }
        total += 1;
        if (regular.raw[k] - soft.raw[k]).abs() <= tol {
            agree += 1;
        }
    }
    let frac = agree as f64 / total as f64;
    let elapsed = start.elapsed();
    outcome(
        frac >= 0.99 && within(elapsed, 60),
        format!(
            "16-QAM quadrant BPS, L=60 N=128 t=0.001: {agree}/{total} = {:.4} agree within 2pi/60 (need >= 0.99), {:.2} s",
            frac,
            elapsed.as_secs_f64()
        ),
    )
}

fn ac3() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(3, Stream::Init, 0);
    let points: Vec<Complex64> = (0..16)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let c = Constellation::uniform(points).unwrap();
    let labels: Vec<usize> = (0..400).map(|_| rng.random_range(0..16)).collect();
    let x: Vec<Complex64> = labels.iter().map(|&l| c.points[l]).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for l in [4usize, 16, 60] {
        let config = BpsConfig {
            num_test_phases: l,
            half_window: 16,
            ..BpsConfig::default()
        };
        for theta in test_phases(l, PhaseSpan::Full) {
            let rot = Complex64::from_polar(1.0, theta);
            let z: Vec<Complex64> = x.iter().map(|v| v * rot).collect();
            let out = bps(&z, &c.points, &config).unwrap();
            for k in out.valid.clone() {
                let d = (out.unwrapped[k] - theta).rem_euclid(2.0 * PI);
                worst = worst.max(d.min(2.0 * PI - d));
                worst = worst.max((out.corrected[k] - x[k]).norm());
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && within(elapsed, 10),
        format!(
            "L in {{4, 16, 60}}, every test phase: {checked} symbols, worst phase/symbol error {worst:.1e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn ac4() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(4, Stream::DataBits, 0);
    let (mut worst_gcs, mut worst_pcs, mut worst_bound) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..100 {
        let m = rng.random_range(1..=6);
        let n = rng.random_range(1..200);
        let llrs: Vec<f64> = (0..m * n).map(|_| rng.random_range(-40.0..40.0)).collect();
        let bits: Vec<u8> = (0..m * n).map(|_| rng.random_range(0..=1)).collect();
        let batch = LlrBatch::new(llrs, bits, m).unwrap();
        let logits: Vec<f64> = (0..1 << m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let probs = probs_from_logits(&logits);
        let h = entropy(&probs);
        let uniform = bmi(&batch, m as f64).unwrap().value;
        let shaped = bmi(&batch, h).unwrap().value;
        worst_gcs = worst_gcs.max((gcs_loss(&batch).unwrap() - (m as f64 - uniform)).abs());
        worst_pcs = worst_pcs.max((geopcs_loss(&batch, &probs).unwrap() + shaped).abs());
        worst_bound = worst_bound.max(shaped - h).max(uniform - m as f64);
    }
    let elapsed = start.elapsed();
    outcome(
        worst_gcs <= 1e-12 && worst_pcs <= 1e-12 && worst_bound <= 0.0 && within(elapsed, 10),
        format!(
            "100 batches: |gcs - (m - BMI)| <= {worst_gcs:.1e}, |geopcs + BMI| <= {worst_pcs:.1e}, max(BMI - H) = {worst_bound:.3}"
        ),
    )
}

/// BMI of a uniform constellation over complex AWGN by integration on a grid.
fn awgn_bmi_by_integration(c: &Constellation, sigma_n: f64, step: f64) -> f64 {
    let m = c.bits_per_symbol;
    let size = c.points.len();
    let var = sigma_n * sigma_n;
    let extent = c.points.iter().map(|p| p.re.abs().max(p.im.abs())).fold(0.0, f64::max) + 9.0 * sigma_n;
    let cells = (2.0 * extent / step).ceil() as usize;
    let density = 1.0 / (PI * var);
    let mut loss = 0.0;
    let mut like = vec![0.0; size];
    for a in 0..cells {
        for b in 0..cells {
            let y = Complex64::new(-extent + (a as f64 + 0.5) * step, -extent + (b as f64 + 0.5) * step);
            for (i, p) in c.points.iter().enumerate() {
                like[i] = density * (-(y - p).norm_sqr() / var).exp();
            }
            let total: f64 = like.iter().sum();
            if total == 0.0 {
                continue;
            }
            for j in 0..m {
                let ones: f64 = (0..size).filter(|&i| label_bit(i, j, m) == 1).map(|i| like[i]).sum();
                let zeros: f64 = (0..size).filter(|&i| label_bit(i, j, m) == 0).map(|i| like[i]).sum();
                for (i, &l) in like.iter().enumerate() {
                    if l == 0.0 {
                        continue;
                    }
                    let same = if label_bit(i, j, m) == 1 { ones } else { zeros };
                    loss += l * (total / same).log2();
                }
            }
        }
    }
    m as f64 - loss * step * step / size as f64
}

fn ac5() -> Outcome {
    let start = Instant::now();
    let qam = Constellation::uniform(square_qam(4).unwrap()).unwrap();
    let sn = sigma_n_from_snr(12.0, 1.0);
    let n = 1_000_000;
    let mut rng = substream(5, Stream::DataBits, 0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..16)).collect();
    let noise = complex_noise(n, sn, &mut substream(5, Stream::Noise, 0));
    let mut llrs = Vec::with_capacity(4 * n);
    for (l, w) in labels.iter().zip(&noise) {
        llrs.extend(gaussian_reference_demap(qam.points[*l] + w, &qam, sn));
    }
    let mc = bmi(&LlrBatch::from_labels(llrs, &labels, 4).unwrap(), 4.0).unwrap().value;
    let oracle = awgn_bmi_by_integration(&qam, sn, 0.005);
    let elapsed = start.elapsed();
    outcome(
        (mc - oracle).abs() <= 0.02 && within(elapsed, 120),
        format!(
            "16-QAM at 12 dB: Monte-Carlo {mc:.4} vs integration {oracle:.4} (|diff| {:.4} <= 0.02), {:.1} s",
            (mc - oracle).abs(),
            elapsed.as_secs_f64()
        ),
    )
}

const SEEDS: [u64; 3] = [1, 2, 3];

type Check = fn() -> Outcome;
type DeskCheck = fn(&DeskRuns) -> Outcome;

fn desk_config(mode: TrainMode, m: usize, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        mode,
        bits_per_symbol: m,
        seed,
        ..Default::default()
    };
    c.train.epochs = 50;
    c.train.batches_per_epoch = 10;
    c.train.batch_size = 2000;
    c.validation.symbols = 20_000;
    c.validation.interval = 50;
    c
}

fn final_bmi(cp: &Checkpoint) -> f64 {
    cp.history.last().and_then(|r| r.validation_bmi).expect("final validation")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Desk-scale runs shared by criteria 6 to 8.
struct DeskRuns {
    runs: HashMap<(TrainMode, u64), Checkpoint>,
    elapsed: HashMap<TrainMode, Duration>,
}

impl DeskRuns {
    fn new() -> Self {
        let mut runs = HashMap::new();
        let mut elapsed = HashMap::new();
        for mode in [TrainMode::Qam, TrainMode::Gcs, TrainMode::Geopcs] {
            let start = Instant::now();
            for seed in SEEDS {
                let cp = train(&desk_config(mode, 6, seed).train_config()).expect("desk-scale training");
                runs.insert((mode, seed), cp);
            }
            elapsed.insert(mode, start.elapsed());
        }
        Self { runs, elapsed }
    }

    fn bmis(&self, mode: TrainMode) -> Vec<f64> {
        SEEDS.iter().map(|&s| final_bmi(&self.runs[&(mode, s)])).collect()
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn ac6(desk: &DeskRuns) -> Outcome {
    let gcs = desk.bmis(TrainMode::Gcs);
    let qam = desk.bmis(TrainMode::Qam);
    let gain = median(gcs.clone()) - median(qam.clone());
    let time = desk.elapsed[&TrainMode::Gcs] + desk.elapsed[&TrainMode::Qam];
    outcome(
        gain >= 0.03 && within(time, 7200),
        format!(
            "m=6, 17 dB, 100 kHz, 50x10x2000: GCS [{}] vs QAM [{}], median gain {gain:+.4} (need >= +0.03), {:.0} s",
            fmt_list(&gcs),
            fmt_list(&qam),
            time.as_secs_f64()
        ),
    )
}

fn ac7(desk: &DeskRuns) -> Outcome {
    let gcs = desk.bmis(TrainMode::Gcs);
    let pcs = desk.bmis(TrainMode::Geopcs);
    let gap = median(pcs.clone()) - median(gcs.clone());
    let time = desk.elapsed[&TrainMode::Gcs] + desk.elapsed[&TrainMode::Geopcs];
    outcome(
        gap >= -0.01 && within(time, 7200),
        format!(
            "GeoPCS [{}] vs GCS [{}], median gap {gap:+.4} (need >= -0.01), {:.0} s",
            fmt_list(&pcs),
            fmt_list(&gcs),
            time.as_secs_f64()
        ),
    )
}

fn ac8(desk: &DeskRuns) -> Outcome {
    let start = Instant::now();
    let pts = square_qam(6).unwrap();
    let planted = 0.3;
    let (lambda, kl) = fit_mb_lambda(&pts, &mb_pmf(&pts, planted).unwrap()).unwrap();
    let oracle_ok = (lambda - planted).abs() <= 1e-6 && kl <= 1e-12 && within(start.elapsed(), 1);
    let ctx = Context {
        config: ExperimentConfig::default(),
        out: std::env::temp_dir(),
        threads: 1,
    };
    let kls: Vec<f64> = SEEDS
        .iter()
        .map(|&s| fit_mb(&ctx, &desk.runs[&(TrainMode::Geopcs, s)]).unwrap()[0].kl)
        .collect();
    let max_kl = kls.iter().copied().fold(0.0, f64::max);
    outcome(
        oracle_ok && max_kl <= 1e-3,
        format!(
            "planted lambda 0.3 -> {lambda:.9} (KL {kl:.1e}); trained GeoPCS KL [{}] (need <= 1e-3)",
            kls.iter().map(|k| format!("{k:.2e}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn ac9() -> Outcome {
    let start = Instant::now();
    let mut config = desk_config(TrainMode::Gcs, 4, 1);
    config.compare.num_test_phases = vec![30, 60];
    config.compare.modes = vec![CompareMode::Regular, CompareMode::Trainable];
    config.compare.seeds = SEEDS.to_vec();
    config.eval.symbols = 20_000;
    let ctx = Context {
        config,
        out: std::env::temp_dir(),
        threads: 1,
    };
    let runs = compare_bps(&ctx).expect("comparison runs");
    let summary = summarize(&runs);
    let cell = |mode| {
        summary
            .iter()
            .find(|s| s.num_test_phases == 60 && s.mode == mode)
            .expect("L = 60 cell")
    };
    let (reg, tr) = (cell(CompareMode::Regular), cell(CompareMode::Trainable));
    let elapsed = start.elapsed();
    let table: Vec<String> = summary
        .iter()
        .map(|s| format!("L={} {} {:.4}/{:.1e}", s.num_test_phases, s.mode.name(), s.bmi, s.run_variance))
        .collect();
    outcome(
        reg.bmi >= tr.bmi && tr.run_variance > reg.run_variance && within(elapsed, 7200),
        format!(
            "mean/variance [{}]; L=60 regular {:.4} >= trainable {:.4}, variance {:.1e} > {:.1e}, {:.0} s",
            table.join(", "),
            reg.bmi,
            tr.bmi,
            tr.run_variance,
            reg.run_variance,
            elapsed.as_secs_f64()
        ),
    )
}

fn run_train(dir: &Path, config: &Path) -> bool {
    std::process::Command::new(env!("CARGO_BIN_EXE_cshape"))
        .args(["train", "--config"])
        .arg(config)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn ac10() -> Outcome {
    let start = Instant::now();
    let root = std::env::temp_dir().join(format!("cshape-ac10-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let config = root.join("config.toml");
    std::fs::write(
        &config,
        "mode = \"geopcs\"\nbits_per_symbol = 4\nseed = 10\ntrain.epochs = 4\ntrain.batches_per_epoch = 5\n\
         train.batch_size = 1000\nnetwork.demapper_hidden = [32, 32]\nvalidation.symbols = 4000\n",
    )
    .unwrap();
    let (a, b) = (root.join("a"), root.join("b"));
    let ran = run_train(&a, &config) && run_train(&b, &config);
    let same = |name: &str| match (std::fs::read(a.join(name)), std::fs::read(b.join(name))) {
        (Ok(x), Ok(y)) => x == y && !x.is_empty(),
        _ => false,
    };
    let history = ran && same("history.csv");
    let checkpoint = ran && same("checkpoint.json");
    let _ = std::fs::remove_dir_all(&root);
    let elapsed = start.elapsed();
    outcome(
        history && checkpoint && within(elapsed, 600),
        format!(
            "two train runs: history.csv identical {history}, checkpoint.json identical {checkpoint}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| f == name);
    let mut desk: Option<DeskRuns> = None;
    let mut failures = 0;
    let mut report = |name: &str, o: Outcome| {
        let line = format!("{name} {} {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        let mut err = std::io::stderr();
        let _ = writeln!(err, "{line}");
        if !o.passed {
            failures += 1;
        }
    };
    let simple: [(&str, Check); 5] = [("AC1", ac1), ("AC2", ac2), ("AC3", ac3), ("AC4", ac4), ("AC5", ac5)];
    for (name, f) in simple {
        if wanted(name) {
            report(name, f());
        }
    }
    let shared: [(&str, DeskCheck); 3] = [("AC6", ac6), ("AC7", ac7), ("AC8", ac8)];
    for (name, f) in shared {
        if wanted(name) {
            let d = desk.get_or_insert_with(DeskRuns::new);
            report(name, f(d));
        }
    }
    if wanted("AC9") {
        report("AC9", ac9());
    }
    if wanted("AC10") {
        report("AC10", ac10());
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
