//! Experiments driven by a [`RunConfig`]: single attacks, parameter sweeps
//! and their file outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::attack::{check_separable, run_attack, AttackResult};
use crate::config::RunConfig;
use crate::data::{extract_subject, gen_synthetic_batch, snap_to_8bit, write_ppm_file, ImageBatch, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::flsim::{diff_histogram, make_users, train, TrainSettings, TrainTrace, VictimSchedule};
use crate::ldp::protect;
use crate::metrics::{overlap_flags, psnr, DiffHistogram, QualityReport, DIFF_BIN_LABELS};
use crate::model::{build_structure, calibrate_laplace, forward_backward, GlobalModel, StructureConfig, WEIGHT};
use crate::numeric::{l2_norm, LaplaceParams, SeededRng, Tensor};

/// Fork labels of the per-run random streams.
const STREAM_PUBLIC: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_DATA: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_GUESS: u64 = 5;
const STREAM_USERS: u64 = 6;
const STREAM_TEST: u64 = 7;
const STREAM_ROUNDS: u64 = 8;
const STREAM_HISTOGRAM: u64 = 9;

/// Bias grid of a run: explicit, or fitted to a public batch drawn from a
/// stream of its own.
pub fn laplace_for(cfg: &RunConfig, rng: &SeededRng) -> Result<LaplaceParams> {
    if let (Some(mu), Some(s)) = (cfg.laplace_mu, cfg.laplace_s) {
        return LaplaceParams::new(mu, s);
    }
    let public = gen_synthetic_batch(
        &mut rng.fork(STREAM_PUBLIC),
        cfg.calibration_samples,
        cfg.channels,
        cfg.height,
        cfg.width,
        &cfg.subject,
    )?;
    let public = extract_subject(&public, &cfg.mask)?;
    calibrate_laplace(&public, cfg.w0, cfg.bias_inputs)
}

/// Structure settings of a run.
pub fn structure_for(cfg: &RunConfig, rng: &SeededRng) -> Result<StructureConfig> {
    Ok(cfg.structure(laplace_for(cfg, rng)?))
}

/// One attack from data generation to scoring.
#[derive(Debug, Clone)]
pub struct SingleRun {
    pub seed: u64,
    pub structure: StructureConfig,
    pub original: ImageBatch,
    pub masked: ImageBatch,
    /// True reverse units of the victim's samples.
    pub true_units: Vec<usize>,
    pub result: AttackResult,
    pub report: QualityReport,
    /// Mean PSNR of uniformly random images against the masked samples.
    pub random_guess_psnr: f64,
    /// Weight-layer gradient norm before clipping.
    pub weight_grad_norm: f64,
    pub elapsed: Duration,
}

impl SingleRun {
    /// Fraction of samples that own their unit.
    pub fn separation_ratio(&self) -> f64 {
        let flags = overlap_flags(&self.true_units);
        flags.iter().filter(|&&o| !o).count() as f64 / flags.len() as f64
    }

    pub fn mean(&self, pick: impl Fn(&crate::attack::SampleQuality) -> f64) -> f64 {
        let q = self.result.quality.as_deref().unwrap_or(&[]);
        q.iter().map(pick).sum::<f64>() / q.len().max(1) as f64
    }
}

/// Runs one attack with every random stream derived from `seed`.
pub fn run_single(cfg: &RunConfig, seed: u64) -> Result<SingleRun> {
    let start = Instant::now();
    cfg.validate()?;
    check_separable(cfg.batch, cfg.units)?;
    let rng = SeededRng::new(seed);
    let structure = structure_for(cfg, &rng)?;
    build_structure(&structure)?;
    let model = GlobalModel::new(&structure, cfg.hidden, NUM_CLASSES, &mut rng.fork(STREAM_MODEL))?;
    let original = gen_synthetic_batch(
        &mut rng.fork(STREAM_DATA),
        cfg.batch,
        cfg.channels,
        cfg.height,
        cfg.width,
        &cfg.subject,
    )?;
    let masked = extract_subject(&original, &cfg.mask)?;
    let fr = forward_backward(&model, &original, &masked, cfg.tau)?;
    let weight_grad_norm = l2_norm(fr.bundle.get(WEIGHT)?);
    let protected = protect(fr.bundle, &cfg.ldp, &mut rng.fork(STREAM_NOISE))?;
    let mut result = run_attack(&protected.upload(), &structure, &cfg.attack)?;
    let qualities = result.score(&masked)?.iter().map(|q| q.final_image).collect();
    let report = QualityReport::new(qualities)?;
    let random_guess_psnr = random_guess(&masked, &mut rng.fork(STREAM_GUESS))?;
    Ok(SingleRun {
        seed,
        structure,
        true_units: fr.reverse.iter().map(|r| r.unit).collect(),
        original,
        masked,
        result,
        report,
        random_guess_psnr,
        weight_grad_norm,
        elapsed: start.elapsed(),
    })
}

/// Mean PSNR of uniform 8-bit noise images against every sample.
pub fn random_guess(truth: &ImageBatch, rng: &mut SeededRng) -> Result<f64> {
    let (c, h, w) = truth.geometry();
    let mut total = 0.0;
    for i in 0..truth.len() {
        let guess = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| snap_to_8bit(rng.uniform())).collect())?;
        total += psnr(&guess, &truth.image(i))?;
    }
    Ok(total / truth.len() as f64)
}

pub const QUALITY_HEADER: &str =
    "sample,true_unit,recovered_unit,overlapped,mse,psnr,ssim,psnr_no_optimization,psnr_no_denoising";

/// Writes images, `quality.csv` and `manifest.txt` of a single run.
pub fn write_attack_outputs(dir: &Path, cfg: &RunConfig, run: &SingleRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..run.original.len() {
        write_ppm_file(&dir.join(format!("ground_truth_{i}.ppm")), &run.original.image(i))?;
        write_ppm_file(&dir.join(format!("masked_{i}.ppm")), &run.masked.image(i))?;
    }
    let quality = run.result.quality.as_deref().unwrap_or(&[]);
    let mut csv = format!("{QUALITY_HEADER}\n");
    for (s, q) in run.result.samples.iter().zip(quality) {
        let i = s.slot;
        let clamp = |t: &Tensor| t.map(|v| v.clamp(0.0, 1.0));
        write_ppm_file(&dir.join(format!("raw_{i}.ppm")), &clamp(&s.raw))?;
        write_ppm_file(&dir.join(format!("optimized_{i}.ppm")), &clamp(&s.optimized))?;
        write_ppm_file(&dir.join(format!("final_{i}.ppm")), &clamp(&s.image))?;
        let truth = run.true_units.get(i).map_or(String::new(), |u| u.to_string());
        writeln!(
            csv,
            "{i},{truth},{},{},{:e},{:.6},{:.6},{:.6},{:.6}",
            s.unit,
            s.overlapped,
            q.final_image.mse,
            q.final_image.psnr,
            q.final_image.ssim,
            q.filtered_only.psnr,
            q.raw.psnr
        )
        .expect("writing to a String cannot fail");
    }
    fs::write(dir.join("quality.csv"), csv)?;

    let r = &run.result;
    let mut m = String::new();
    writeln!(m, "# configuration").unwrap();
    m.push_str(&cfg.to_text());
    writeln!(m, "# results").unwrap();
    writeln!(m, "run_seed = {}", run.seed).unwrap();
    writeln!(m, "laplace_mu_used = {}", run.structure.laplace.mu).unwrap();
    writeln!(m, "laplace_s_used = {}", run.structure.laplace.s).unwrap();
    writeln!(m, "sigma_hat = {}", r.sigma.sigma).unwrap();
    writeln!(m, "sigma_hat_variance_based = {}", r.sigma.variance_based).unwrap();
    writeln!(m, "negatives = {}", r.sigma.negatives).unwrap();
    writeln!(m, "discarded_candidates = {}", r.discarded).unwrap();
    writeln!(m, "mean_mse = {:e}", run.report.mean_mse).unwrap();
    writeln!(m, "mean_psnr = {:.6}", run.report.mean_psnr).unwrap();
    writeln!(m, "mean_ssim = {:.6}", run.report.mean_ssim).unwrap();
    writeln!(m, "random_guess_psnr = {:.6}", run.random_guess_psnr).unwrap();
    writeln!(m, "separation_ratio = {:.6}", run.separation_ratio()).unwrap();
    for w in &r.warnings {
        writeln!(m, "warning = {w}").unwrap();
    }
    for s in &r.samples {
        for e in &s.errors {
            writeln!(m, "sample_error = {}: {e}", s.slot).unwrap();
        }
    }
    fs::write(dir.join("manifest.txt"), m)?;
    fs::write(dir.join("timings.txt"), format!("attack_seconds = {:.3}\n", run.elapsed.as_secs_f64()))?;
    Ok(())
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Epsilon,
    ClipBound,
    Batch,
    Units,
    BiasInputs,
    Rounds,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::ClipBound => "clip_bound",
            SweepAxis::Batch => "batch",
            SweepAxis::Units => "units",
            SweepAxis::BiasInputs => "bias_inputs",
            SweepAxis::Rounds => "rounds",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "epsilon" => SweepAxis::Epsilon,
            "clip_bound" => SweepAxis::ClipBound,
            "batch" => SweepAxis::Batch,
            "units" => SweepAxis::Units,
            "bias_inputs" => SweepAxis::BiasInputs,
            "rounds" => SweepAxis::Rounds,
            _ => return Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        })
    }
}

/// One sweep measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub separation_ratio: f64,
    pub weight_grad_norm: f64,
    pub elapsed: Duration,
}

pub const SWEEP_HEADER: &str = "axis,value,seed,mse,psnr,ssim,separation_ratio,weight_grad_norm";

/// Runs `cfg.sweep_seeds` attacks per value. Seed `j` of every value is the
/// same, so values are compared on identical data and noise.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String], jobs: usize) -> Result<Vec<SweepRow>> {
    let mut points = Vec::new();
    for v in values {
        let mut point = cfg.clone();
        point.set(axis.key(), v)?;
        if axis == SweepAxis::Batch && point.batch > point.metric_slots {
            point.metric_slots = point.batch;
        }
        point.validate()?;
        for j in 0..cfg.sweep_seeds {
            points.push((v.clone(), point.clone(), SeededRng::derive_seed(cfg.seed, j as u64)));
        }
    }
    parallel_map(&points, jobs, |(v, point, seed)| {
        let run = run_single(point, *seed)?;
        Ok(SweepRow {
            value: v.clone(),
            seed: *seed,
            mse: run.report.mean_mse,
            psnr: run.report.mean_psnr,
            ssim: run.report.mean_ssim,
            separation_ratio: run.separation_ratio(),
            weight_grad_norm: run.weight_grad_norm,
            elapsed: run.elapsed,
        })
    })
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:e},{:.6},{:.6},{:.6},{:e}",
            axis.key(),
            r.value,
            r.seed,
            r.mse,
            r.psnr,
            r.ssim,
            r.separation_ratio,
            r.weight_grad_norm
        )
        .unwrap();
    }
    s
}

pub fn sweep_timings_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,seed,seconds\n");
    for r in rows {
        writeln!(s, "{},{},{:.3}", r.value, r.seed, r.elapsed.as_secs_f64()).unwrap();
    }
    s
}

/// Paired federated runs with and without the attack, plus the
/// gradient-difference histograms.
#[derive(Debug, Clone)]
pub struct FlOutcome {
    pub seed: u64,
    pub with_attack: TrainTrace,
    pub without_attack: TrainTrace,
    /// `(user count, histogram)` in configuration order.
    pub histograms: Vec<(usize, DiffHistogram)>,
    pub elapsed: Duration,
}

impl FlOutcome {
    /// Final accuracy with the attack minus without, in percentage points.
    pub fn accuracy_delta_points(&self) -> f64 {
        100.0 * (self.with_attack.final_accuracy() - self.without_attack.final_accuracy())
    }
}

/// Runs the federated simulation with every stream derived from `seed`.
///
/// Both trainings start from the same model, users and round streams; the
/// attacked one rotates the victim through the users and excludes it from
/// aggregation, the other keeps every user at `tau = 0`.
pub fn run_flsim(cfg: &RunConfig, seed: u64) -> Result<FlOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    check_separable(cfg.batch, cfg.units)?;
    if cfg.fl_users < 2 {
        return Err(Error::Config("fl_users must be at least 2".into()));
    }
    if cfg.fl_pool < cfg.batch || cfg.fl_test == 0 {
        return Err(Error::Config(format!(
            "fl_pool ({}) must hold a batch of {} and fl_test must be positive",
            cfg.fl_pool, cfg.batch
        )));
    }
    if let Some(&n) = cfg.fl_histogram_users.iter().find(|&&n| n < 2) {
        return Err(Error::Config(format!("histogram user count {n} is below 2")));
    }
    let rng = SeededRng::new(seed);
    let structure = structure_for(cfg, &rng)?;
    let model = GlobalModel::new(&structure, cfg.hidden, NUM_CLASSES, &mut rng.fork(STREAM_MODEL))?;
    let geometry = (cfg.channels, cfg.height, cfg.width);
    let users_for = |n: usize| {
        make_users(n, cfg.fl_pool, geometry, &cfg.subject, &cfg.mask, Some(cfg.ldp), 0.0, &rng.fork(STREAM_USERS))
    };
    let test = gen_synthetic_batch(
        &mut rng.fork(STREAM_TEST),
        cfg.fl_test,
        cfg.channels,
        cfg.height,
        cfg.width,
        &cfg.subject,
    )?;
    let attacked = TrainSettings {
        rounds: cfg.fl_rounds,
        lr: cfg.fl_lr,
        batch: cfg.batch,
        schedule: VictimSchedule::RoundRobin {
            tau: cfg.tau,
            tau_small: cfg.tau_small,
        },
        attack: cfg.fl_attack.then_some(cfg.attack),
    };
    let plain = TrainSettings {
        schedule: VictimSchedule::None,
        attack: None,
        ..attacked.clone()
    };
    let rounds = rng.fork(STREAM_ROUNDS);
    let with_attack = train(&mut users_for(cfg.fl_users)?, &mut model.clone(), &test, &attacked, &rounds)?;
    let without_attack = train(&mut users_for(cfg.fl_users)?, &mut model.clone(), &test, &plain, &rounds)?;

    let hist_settings = TrainSettings {
        rounds: cfg.fl_histogram_rounds,
        ..attacked
    };
    let mut histograms = Vec::with_capacity(cfg.fl_histogram_users.len());
    for &n in &cfg.fl_histogram_users {
        let h = diff_histogram(
            &mut users_for(n)?,
            &mut model.clone(),
            &hist_settings,
            &rng.fork(STREAM_HISTOGRAM),
        )?;
        histograms.push((n, h));
    }
    Ok(FlOutcome {
        seed,
        with_attack,
        without_attack,
        histograms,
        elapsed: start.elapsed(),
    })
}

pub const ACCURACY_HEADER: &str = "round,accuracy_with_attack,accuracy_without_attack,delta,victim_psnr";
pub const HISTOGRAM_HEADER: &str = "users,bin,proportion";

/// Accuracy after every round of both trainings; empty cells where the
/// victim was not attacked.
pub fn accuracy_csv(outcome: &FlOutcome) -> String {
    let mut s = format!("{ACCURACY_HEADER}\n");
    let (a, b) = (&outcome.with_attack, &outcome.without_attack);
    for (r, (x, y)) in a.accuracy.iter().zip(&b.accuracy).enumerate() {
        let p = a.attack_psnr.get(r).copied().flatten().map_or(String::new(), |p| format!("{p:.6}"));
        writeln!(s, "{},{x:.6},{y:.6},{:.6},{p}", r + 1, x - y).unwrap();
    }
    s
}

pub fn histogram_csv(outcome: &FlOutcome) -> String {
    let mut s = format!("{HISTOGRAM_HEADER}\n");
    for (n, h) in &outcome.histograms {
        for (label, p) in DIFF_BIN_LABELS.iter().zip(h.proportions()) {
            writeln!(s, "{n},{label},{p:.6}").unwrap();
        }
    }
    s
}

/// Writes `accuracy.csv`, `histogram.csv`, `manifest.txt` and `timings.txt`.
pub fn write_flsim_outputs(dir: &Path, cfg: &RunConfig, outcome: &FlOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("accuracy.csv"), accuracy_csv(outcome))?;
    fs::write(dir.join("histogram.csv"), histogram_csv(outcome))?;
    let mut m = String::new();
    writeln!(m, "# configuration").unwrap();
    m.push_str(&cfg.to_text());
    writeln!(m, "# results").unwrap();
    writeln!(m, "run_seed = {}", outcome.seed).unwrap();
    writeln!(m, "initial_accuracy = {:.6}", outcome.with_attack.initial_accuracy).unwrap();
    writeln!(m, "final_accuracy_with_attack = {:.6}", outcome.with_attack.final_accuracy()).unwrap();
    writeln!(m, "final_accuracy_without_attack = {:.6}", outcome.without_attack.final_accuracy()).unwrap();
    writeln!(m, "accuracy_delta_points = {:.6}", outcome.accuracy_delta_points()).unwrap();
    let psnrs: Vec<f64> = outcome.with_attack.attack_psnr.iter().flatten().copied().collect();
    if !psnrs.is_empty() {
        writeln!(m, "mean_victim_psnr = {:.6}", psnrs.iter().sum::<f64>() / psnrs.len() as f64).unwrap();
    }
    fs::write(dir.join("manifest.txt"), m)?;
    fs::write(
        dir.join("timings.txt"),
        format!("flsim_seconds = {:.3}\n", outcome.elapsed.as_secs_f64()),
    )?;
    Ok(())
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order and
/// returning the first error.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let collected = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                collected.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}
