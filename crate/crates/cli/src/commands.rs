//! Subcommand implementations.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cshape::channel::{linewidth_from_sigma_phi, sigma_n_from_snr, sigma_phi_from_linewidth, snr_db_from_sigma_n};
use cshape::cpe::{BpsConfig, BpsMode, PhaseSpan};
use cshape::demapper::{decision_region_grid, GridBounds};
use cshape::grad::finite_difference_check;
use cshape::metrics::{fit_mb_lambda, BmiEstimate};
use cshape::rng::{substream, Stream};
use cshape::system::{
    draw_batch, BatchObjective, GeometryKind, LabelSource, LossKind, Model, ModelSpec, Recovery, Shaper, ShapingKind,
};
use cshape::trainer::{evaluate, train, Checkpoint, EvalCpe, Trainer, EVALUATION_INDEX};
use cshape::Error;
use rand::Rng;

use crate::config::{CompareMode, CpeChoice, GradcheckSection};
use crate::export::ConstellationExport;
use crate::output::{num, opt, read_file, write_file, Csv};
use crate::{CliError, Context};

/// Maps `f` over `0..n` on up to `threads` workers; results keep index order.
pub fn par_map<R: Send>(threads: usize, n: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index computed"))
        .collect()
}

fn history_csv(ctx: &Context, cp: &Checkpoint) -> Csv {
    let mut csv = Csv::new(&ctx.config, &["epoch", "loss", "validation_bmi", "entropy", "temperature"]);
    for r in &cp.history {
        csv.row(&[
            r.epoch.to_string(),
            num(r.loss),
            opt(r.validation_bmi),
            num(r.entropy),
            num(r.temperature),
        ]);
    }
    csv
}

fn save_checkpoint(ctx: &Context, cp: &Checkpoint) -> Result<(), CliError> {
    write_file(&ctx.out.join("checkpoint.json"), &cp.to_json()?)?;
    history_csv(ctx, cp).write(&ctx.out.join("history.csv"))
}

pub fn cmd_train(ctx: &Context) -> Result<(), CliError> {
    let config = ctx.config.train_config();
    let mut trainer = Trainer::new(config).map_err(|e| CliError::Config(e.to_string()))?;
    match trainer.run() {
        Ok(()) => {
            let cp = trainer.checkpoint();
            save_checkpoint(ctx, &cp)?;
            match cp.history.last().and_then(|r| r.validation_bmi) {
                Some(v) => println!("final validation BMI: {v:.4} bit/symbol"),
                None => println!("no epochs run; wrote the initial model"),
            }
            Ok(())
        }
        Err(diverged) => {
            save_checkpoint(ctx, &diverged.checkpoint)?;
            Err(diverged.into())
        }
    }
}

pub fn load_checkpoint(ctx: &Context) -> Result<Checkpoint, CliError> {
    let path = ctx.checkpoint_path();
    let text = read_file(&path)?;
    Checkpoint::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Channel point of an evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub snr_db: f64,
    pub linewidth_hz: f64,
    pub sigma_n: f64,
    pub sigma_phi: f64,
}

/// Configured grid sorted by (SNR, linewidth), or the validation point.
pub fn grid(ctx: &Context, cp: &Checkpoint) -> Vec<GridPoint> {
    let rate = cp.config.channel.symbol_rate;
    let e = &ctx.config.eval;
    if e.snr_db.is_empty() {
        let (sigma_n, sigma_phi) = cp.config.validation_point();
        return vec![GridPoint {
            snr_db: snr_db_from_sigma_n(sigma_n, 1.0),
            linewidth_hz: linewidth_from_sigma_phi(sigma_phi, rate),
            sigma_n,
            sigma_phi,
        }];
    }
    let mut points = Vec::new();
    for &snr_db in &e.snr_db {
        for &linewidth_hz in &e.linewidth_hz {
            points.push(GridPoint {
                snr_db,
                linewidth_hz,
                sigma_n: sigma_n_from_snr(snr_db, 1.0),
                sigma_phi: sigma_phi_from_linewidth(linewidth_hz, rate),
            });
        }
    }
    points.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db).then(a.linewidth_hz.total_cmp(&b.linewidth_hz)));
    points.dedup();
    points
}

fn eval_cpe(ctx: &Context, cp: &Checkpoint) -> EvalCpe {
    match ctx.config.eval.cpe {
        CpeChoice::Regular => EvalCpe::Regular,
        CpeChoice::Genie => EvalCpe::Genie,
        CpeChoice::Soft => EvalCpe::Soft {
            temperature: ctx.config.eval.soft_temperature.unwrap_or(if cp.config.trainable_temperature {
                cp.model.trained_temperature()
            } else {
                cp.config.temperature_end
            }),
        },
    }
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: GridPoint,
    pub estimate: BmiEstimate,
    pub extrapolated: bool,
}

pub fn sweep(ctx: &Context, cp: &Checkpoint) -> Result<Vec<SweepRow>, CliError> {
    let points = grid(ctx, cp);
    let cpe = eval_cpe(ctx, cp);
    let c = &ctx.config;
    let results = par_map(ctx.threads, points.len(), |i| {
        let p = points[i];
        evaluate(
            &cp.model,
            p.sigma_n,
            p.sigma_phi,
            c.eval.symbols,
            cpe,
            c.bps.num_test_phases,
            c.bps.half_window,
            c.seed,
            EVALUATION_INDEX + i as u64,
        )
    });
    points
        .into_iter()
        .zip(results)
        .map(|(point, est)| {
            Ok(SweepRow {
                point,
                estimate: est?,
                extrapolated: cp.model.parameterized() && !cp.config.channel.contains(point.snr_db, point.linewidth_hz),
            })
        })
        .collect()
}

pub fn cmd_sweep(ctx: &Context) -> Result<(), CliError> {
    let cp = load_checkpoint(ctx)?;
    let rows = sweep(ctx, &cp)?;
    let mut csv = Csv::new(
        &ctx.config,
        &["snr_db", "linewidth_hz", "sigma_n", "sigma_phi", "bmi", "entropy", "valid_symbols", "extrapolated"],
    );
    for r in &rows {
        if r.extrapolated {
            log::warn!(
                "SNR {} dB, linewidth {} Hz lies outside the training range",
                r.point.snr_db,
                r.point.linewidth_hz
            );
        }
        csv.row(&[
            num(r.point.snr_db),
            num(r.point.linewidth_hz),
            num(r.point.sigma_n),
            num(r.point.sigma_phi),
            num(r.estimate.value),
            num(r.estimate.entropy),
            r.estimate.valid_symbols.to_string(),
            if r.extrapolated { "extrapolated".into() } else { String::new() },
        ]);
    }
    csv.write(&ctx.out.join("sweep.csv"))
}

pub fn export_constellation(ctx: &Context, cp: &Checkpoint) -> Result<ConstellationExport, CliError> {
    let p = grid(ctx, cp)[0];
    let c = cp.model.constellation(p.sigma_n, p.sigma_phi)?;
    Ok(ConstellationExport::new(&c, cp.config.symmetry, p.sigma_n, p.sigma_phi))
}

pub fn cmd_export_constellation(ctx: &Context) -> Result<(), CliError> {
    let cp = load_checkpoint(ctx)?;
    let e = export_constellation(ctx, &cp)?;
    write_file(&ctx.out.join("constellation.json"), &e.to_json())?;
    let mut csv = Csv::new(&ctx.config, &["index", "hex_label", "re", "im", "prob"]);
    for p in &e.points {
        csv.row(&[p.index.to_string(), p.hex_label.clone(), num(p.re), num(p.im), num(p.prob)]);
    }
    csv.write(&ctx.out.join("constellation.csv"))
}

pub fn cmd_regions(ctx: &Context) -> Result<(), CliError> {
    let cp = load_checkpoint(ctx)?;
    let p = grid(ctx, &cp)[0];
    let r = &ctx.config.regions;
    let m = cp.model.bits_per_symbol;
    let bits: Vec<usize> = if r.bits.is_empty() { (1..=m).collect() } else { r.bits.clone() };
    for bit in bits {
        let g = decision_region_grid(
            &cp.model.demapper,
            bit,
            GridBounds::square(r.half_width),
            r.resolution,
            p.sigma_n,
            p.sigma_phi,
        )?;
        let path = ctx.out.join(format!("regions_bit{bit}.csv"));
        let mut text = crate::output::provenance(&ctx.config);
        text.push_str(&g.to_csv());
        write_file(&path, &text)?;
    }
    Ok(())
}

/// Maxwell-Boltzmann fit at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbFit {
    pub point: GridPoint,
    pub lambda: f64,
    pub kl: f64,
    pub entropy: f64,
}

pub fn fit_mb(ctx: &Context, cp: &Checkpoint) -> Result<Vec<MbFit>, CliError> {
    if !cp.model.shaper.is_probabilistic() {
        return Err(Error::NoShaper.into());
    }
    grid(ctx, cp)
        .into_iter()
        .map(|point| {
            let c = cp.model.constellation(point.sigma_n, point.sigma_phi)?;
            let (lambda, kl) = fit_mb_lambda(&c.points, &c.probs)?;
            Ok(MbFit {
                point,
                lambda,
                kl,
                entropy: cshape::metrics::entropy(&c.probs),
            })
        })
        .collect()
}

pub fn cmd_fit_mb(ctx: &Context) -> Result<(), CliError> {
    let cp = load_checkpoint(ctx)?;
    let fits = fit_mb(ctx, &cp)?;
    let mut csv = Csv::new(&ctx.config, &["snr_db", "linewidth_hz", "lambda", "kl", "entropy"]);
    for f in &fits {
        csv.row(&[
            num(f.point.snr_db),
            num(f.point.linewidth_hz),
            num(f.lambda),
            num(f.kl),
            num(f.entropy),
        ]);
    }
    csv.write(&ctx.out.join("fit_mb.csv"))
}

/// One training and validation run of the BPS comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRun {
    pub num_test_phases: usize,
    pub mode: CompareMode,
    pub seed: u64,
    pub temperature: f64,
    pub bmi: f64,
}

/// Across-seed summary of one (L, mode) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub num_test_phases: usize,
    pub mode: CompareMode,
    pub temperature: f64,
    pub bmi: f64,
    /// Sample variance of the BMI across seeds.
    pub run_variance: f64,
}

pub fn compare_bps(ctx: &Context) -> Result<Vec<CompareRun>, CliError> {
    let c = &ctx.config;
    let mut jobs = Vec::new();
    for &l in &c.compare.num_test_phases {
        for &mode in &c.compare.modes {
            for &seed in &c.compare.seeds {
                jobs.push((l, mode, seed));
            }
        }
    }
    let results = par_map(ctx.threads, jobs.len(), |i| -> Result<CompareRun, CliError> {
        let (l, mode, seed) = jobs[i];
        let mut tc = c.train_config();
        tc.num_test_phases = l;
        tc.seed = seed;
        tc.trainable_temperature = mode == CompareMode::Trainable;
        let cp = train(&tc).map_err(|e| match e {
            cshape::trainer::TrainError::Invalid(e) => CliError::Config(e.to_string()),
            cshape::trainer::TrainError::Diverged(d) => d.into(),
        })?;
        let (temperature, cpe) = match mode {
            CompareMode::Regular => (tc.temperature_end, EvalCpe::Regular),
            CompareMode::Trainable => {
                let t = cp.model.trained_temperature();
                (t, EvalCpe::Soft { temperature: t })
            }
        };
        let (sn, sp) = tc.validation_point();
        let est = evaluate(&cp.model, sn, sp, c.eval.symbols, cpe, l, tc.half_window, seed, EVALUATION_INDEX)?;
        log::info!("L = {l} {} seed {seed}: BMI {:.4} t {temperature:.4e}", mode.name(), est.value);
        Ok(CompareRun {
            num_test_phases: l,
            mode,
            seed,
            temperature,
            bmi: est.value,
        })
    });
    results.into_iter().collect()
}

pub fn summarize(runs: &[CompareRun]) -> Vec<CompareSummary> {
    let mut keys: Vec<(usize, CompareMode)> = runs.iter().map(|r| (r.num_test_phases, r.mode)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(l, mode)| {
            let cell: Vec<&CompareRun> = runs.iter().filter(|r| r.num_test_phases == l && r.mode == mode).collect();
            let n = cell.len() as f64;
            let bmi = cell.iter().map(|r| r.bmi).sum::<f64>() / n;
            let run_variance = if cell.len() > 1 {
                cell.iter().map(|r| (r.bmi - bmi).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            CompareSummary {
                num_test_phases: l,
                mode,
                temperature: cell.iter().map(|r| r.temperature).sum::<f64>() / n,
                bmi,
                run_variance,
            }
        })
        .collect()
}

pub fn cmd_compare_bps(ctx: &Context) -> Result<(), CliError> {
    let runs = compare_bps(ctx)?;
    let mut csv = Csv::new(&ctx.config, &["L", "mode", "seed", "t", "bmi"]);
    for r in &runs {
        csv.row(&[
            r.num_test_phases.to_string(),
            r.mode.name().into(),
            r.seed.to_string(),
            num(r.temperature),
            num(r.bmi),
        ]);
    }
    csv.write(&ctx.out.join("compare_bps_runs.csv"))?;
    let mut csv = Csv::new(&ctx.config, &["L", "mode", "t", "bmi", "run_variance"]);
    for s in summarize(&runs) {
        println!(
            "L = {:3} {:9} t = {:.4e} BMI = {:.4} variance = {:.3e}",
            s.num_test_phases,
            s.mode.name(),
            s.temperature,
            s.bmi,
            s.run_variance
        );
        csv.row(&[
            s.num_test_phases.to_string(),
            s.mode.name().into(),
            num(s.temperature),
            num(s.bmi),
            num(s.run_variance),
        ]);
    }
    csv.write(&ctx.out.join("compare_bps.csv"))
}

/// Outcome of one finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub case: &'static str,
    pub temperature: f64,
    pub num_params: usize,
    pub flagged: usize,
    pub unverifiable: usize,
    pub max_rel_error: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.flagged == 0 && self.unverifiable == 0
    }
}

/// Checks the uniform (cross-entropy) and shaped (negative BMI) losses through soft BPS.
pub fn gradient_checks(g: &GradcheckSection, symbol_rate: f64, seed: u64) -> Result<Vec<GradCheckResult>, CliError> {
    let sn = sigma_n_from_snr(g.snr_db, 1.0);
    let sp = sigma_phi_from_linewidth(g.linewidth_hz, symbol_rate);
    let mut results = Vec::new();
    for (case, shaping, loss) in [
        ("gcs", ShapingKind::Uniform, LossKind::CrossEntropy),
        ("geopcs", ShapingKind::Learned, LossKind::NegativeBmi),
    ] {
        let spec = ModelSpec {
            bits_per_symbol: g.bits_per_symbol,
            geometry: GeometryKind::Learned,
            shaping,
            parameterized: false,
            symmetry: 0,
            demapper_hidden: g.demapper_hidden.clone(),
            mapper_hidden: 1,
            shaper_hidden: 1,
            initial_raw_temperature: 0.0,
        };
        let mut model = Model::new(&spec, &mut substream(seed, Stream::Init, 0))?;
        if let Shaper::Logits { logits, .. } = &mut model.shaper {
            let mut rng = substream(seed, Stream::Init, 1);
            logits.iter_mut().for_each(|l| *l = rng.random_range(-1.0..1.0));
        }
        let probs = model.constellation(sn, sp)?.probs;
        let source = if shaping == ShapingKind::Learned {
            LabelSource::Quantized
        } else {
            LabelSource::Uniform
        };
        let input = draw_batch(&probs, source, g.batch_size, sn, sp, true, seed, 0);
        let params = model.param_vector()?;
        for &t in &g.temperatures {
            let objective = BatchObjective {
                model: &model,
                input: &input,
                recovery: Recovery::Bps {
                    config: BpsConfig {
                        num_test_phases: g.num_test_phases,
                        half_window: g.half_window,
                        mode: BpsMode::Differentiable,
                        temperature: t,
                        phase_span: PhaseSpan::Full,
                    },
                    trained_temperature: false,
                },
                loss,
            };
            let report = finite_difference_check(&objective, &params, g.rel_step, g.tolerance)?;
            for e in report.flagged().chain(report.unverifiable()).take(5) {
                log::warn!("{case} t = {t}: {} analytic {} numeric {:?}", e.name, e.analytic, e.numeric);
            }
            results.push(GradCheckResult {
                case,
                temperature: t,
                num_params: params.len(),
                flagged: report.num_flagged(),
                unverifiable: report.unverifiable().count(),
                max_rel_error: report.max_rel_error(),
            });
        }
    }
    Ok(results)
}

pub fn cmd_check_gradients(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let results = gradient_checks(&c.gradcheck, c.channel.symbol_rate, c.seed)?;
    let mut csv = Csv::new(
        &ctx.config,
        &["case", "temperature", "num_params", "flagged", "unverifiable", "max_rel_error", "passed"],
    );
    for r in &results {
        println!(
            "{:7} t = {:<6} params {:5} flagged {:3} unverifiable {:3} max rel error {:.2e} {}",
            r.case,
            r.temperature,
            r.num_params,
            r.flagged,
            r.unverifiable,
            r.max_rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        csv.row(&[
            r.case.into(),
            num(r.temperature),
            r.num_params.to_string(),
            r.flagged.to_string(),
            r.unverifiable.to_string(),
            num(r.max_rel_error),
            r.passed().to_string(),
        ]);
    }
    csv.write(&ctx.out.join("check_gradients.csv"))?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} at t = {}", r.case, r.temperature))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradientCheck(failed.join(", ")))
    }
}
