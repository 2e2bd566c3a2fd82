//! Flat `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Every
//! key except the required ones has a default; unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attack::AttackConfig;
use crate::data::{MaskProvider, SubjectSpec};
use crate::error::{Error, Result};
use crate::ldp::{ClipMode, LdpConfig};
use crate::model::{MetricFactors, StructureConfig};
use crate::numeric::LaplaceParams;

/// Keys that must appear in every configuration.
pub const REQUIRED_KEYS: [&str; 4] = ["batch", "units", "epsilon", "clip_bound"];

/// Every accepted key with its default (`-` for required keys) and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("channels", "3", "image channels (1 or 3)"),
    ("height", "32", "image height"),
    ("width", "32", "image width"),
    ("batch", "-", "victim batch size B"),
    ("units", "-", "separation units K"),
    ("bias_inputs", "100", "bias-layer input size D_b"),
    ("w0", "2e-4", "shared weight-layer weight"),
    ("laplace_mu", "auto", "bias quantile location; auto fits public samples"),
    ("laplace_s", "auto", "bias quantile scale; auto fits public samples"),
    ("calibration_samples", "512", "public samples used by the auto fit"),
    ("metric_units", "16", "metric-layer units N_m"),
    ("metric_slots", "32", "samples the metric layer can carry"),
    ("metric_gain", "0.05", "scale of the metric-layer output"),
    ("mean_factor", "1", "metric factor of channel means"),
    ("variance_factor", "10", "metric factor of channel variances"),
    ("tv_factor", "1e-3", "metric factor of channel total variation"),
    ("index_factor", "10", "metric factor of reverse-index entries"),
    ("tau", "1000", "structure output coefficient of the victim"),
    ("tau_small", "1e-8", "structure output coefficient of other users"),
    ("hidden", "16", "target-model hidden units"),
    ("subject_min_frac", "0.12", "smallest generated subject, fraction of side"),
    ("subject_max_frac", "0.42", "largest generated subject, fraction of side"),
    ("mask", "oracle", "oracle | luminance:<threshold> | external:<dir>"),
    ("epsilon", "-", "privacy budget"),
    ("delta", "0.01", "privacy slack, reported only"),
    ("clip_bound", "-", "L2 clipping bound C"),
    ("c_const", "1", "noise constant c"),
    ("min_dataset", "1000", "minimal local dataset size m"),
    ("clip_mode", "global", "global | per_layer"),
    ("w_mu", "1e6", "objective weight of means"),
    ("w_sigma", "2e4", "objective weight of variances"),
    ("w_tv", "1e4", "objective weight of total variation"),
    ("lr", "1e-5", "descent step size"),
    ("rounds", "1000", "descent rounds R"),
    ("max_halvings", "10", "step halvings before the descent stops"),
    ("z", "2.576", "noise-filter confidence multiplier"),
    ("division_floor", "1e-12", "smallest bias gradient divided by"),
    ("min_negatives", "1000", "fewest negatives for noise estimation"),
    ("snap_radius", "3", "reach of decoded-unit snapping"),
    ("quantize", "true", "snap reconstructions to 8-bit levels"),
    ("sweep_seeds", "5", "seeds per sweep point"),
    ("fl_users", "50", "users per federated round"),
    ("fl_rounds", "200", "federated rounds"),
    ("fl_lr", "0.2", "server learning rate"),
    ("fl_pool", "64", "local samples per user"),
    ("fl_test", "400", "held-out test samples"),
    ("fl_attack", "true", "run the reconstruction on every victim"),
    ("fl_histogram_users", "2,5,10,50", "user counts of the gradient-difference histogram"),
    ("fl_histogram_rounds", "20", "rounds per gradient-difference histogram"),
];

/// A fully specified run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub units: usize,
    pub bias_inputs: usize,
    pub w0: f64,
    /// `None` means fitted to public samples.
    pub laplace_mu: Option<f64>,
    pub laplace_s: Option<f64>,
    pub calibration_samples: usize,
    pub metric_units: usize,
    pub metric_slots: usize,
    pub metric_gain: f64,
    pub metric_factors: MetricFactors,
    pub tau: f64,
    pub tau_small: f64,
    pub hidden: usize,
    pub subject: SubjectSpec,
    pub mask: MaskProvider,
    pub ldp: LdpConfig,
    pub attack: AttackConfig,
    pub sweep_seeds: usize,
    pub fl_users: usize,
    pub fl_rounds: usize,
    pub fl_lr: f64,
    pub fl_pool: usize,
    pub fl_test: usize,
    pub fl_attack: bool,
    pub fl_histogram_users: Vec<usize>,
    pub fl_histogram_rounds: usize,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_mask(value: &str) -> Result<MaskProvider> {
    match value.split_once(':') {
        None if value == "oracle" => Ok(MaskProvider::Oracle),
        Some(("luminance", t)) => Ok(MaskProvider::Luminance {
            threshold: parse("mask", t)?,
        }),
        Some(("external", dir)) if !dir.is_empty() => Ok(MaskProvider::External { dir: PathBuf::from(dir) }),
        _ => Err(Error::Config(format!("mask: unknown provider {value:?}"))),
    }
}

fn mask_string(m: &MaskProvider) -> String {
    match m {
        MaskProvider::Oracle => "oracle".into(),
        MaskProvider::Luminance { threshold } => format!("luminance:{threshold}"),
        MaskProvider::External { dir } => format!("external:{}", dir.display()),
    }
}

impl RunConfig {
    fn defaults() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            channels: 0,
            height: 0,
            width: 0,
            batch: 0,
            units: 0,
            bias_inputs: 0,
            w0: 0.0,
            laplace_mu: None,
            laplace_s: None,
            calibration_samples: 0,
            metric_units: 0,
            metric_slots: 0,
            metric_gain: 0.0,
            metric_factors: MetricFactors::default(),
            tau: 0.0,
            tau_small: 0.0,
            hidden: 0,
            subject: SubjectSpec::default(),
            mask: MaskProvider::Oracle,
            ldp: LdpConfig::default(),
            attack: AttackConfig::default(),
            sweep_seeds: 0,
            fl_users: 0,
            fl_rounds: 0,
            fl_lr: 0.0,
            fl_pool: 0,
            fl_test: 0,
            fl_attack: true,
            fl_histogram_users: Vec::new(),
            fl_histogram_rounds: 0,
        };
        for (key, default, _) in KEYS {
            if *default != "-" {
                cfg.set(key, default).expect("built-in default parses");
            }
        }
        cfg
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "units" => self.units = parse(key, v)?,
            "bias_inputs" => self.bias_inputs = parse(key, v)?,
            "w0" => self.w0 = parse(key, v)?,
            "laplace_mu" => self.laplace_mu = parse_auto(key, v)?,
            "laplace_s" => self.laplace_s = parse_auto(key, v)?,
            "calibration_samples" => self.calibration_samples = parse(key, v)?,
            "metric_units" => self.metric_units = parse(key, v)?,
            "metric_slots" => self.metric_slots = parse(key, v)?,
            "metric_gain" => self.metric_gain = parse(key, v)?,
            "mean_factor" => self.metric_factors.mean = parse(key, v)?,
            "variance_factor" => self.metric_factors.variance = parse(key, v)?,
            "tv_factor" => self.metric_factors.tv = parse(key, v)?,
            "index_factor" => self.metric_factors.index = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "tau_small" => self.tau_small = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "subject_min_frac" | "subject_max_frac" => {
                let x: f64 = parse(key, v)?;
                let SubjectSpec::Random { min_frac, max_frac } = &mut self.subject else {
                    unreachable!("configs only build random subjects")
                };
                if key == "subject_min_frac" {
                    *min_frac = x;
                } else {
                    *max_frac = x;
                }
            }
            "mask" => self.mask = parse_mask(v)?,
            "epsilon" => self.ldp.epsilon = parse(key, v)?,
            "delta" => self.ldp.delta = parse(key, v)?,
            "clip_bound" => self.ldp.clip_bound = parse(key, v)?,
            "c_const" => self.ldp.c_const = parse(key, v)?,
            "min_dataset" => self.ldp.min_dataset = parse(key, v)?,
            "clip_mode" => {
                self.ldp.clip_mode = match v {
                    "global" => ClipMode::Global,
                    "per_layer" => ClipMode::PerLayer,
                    _ => return Err(Error::Config(format!("clip_mode: expected global or per_layer, got {v:?}"))),
                }
            }
            "w_mu" => self.attack.objective.w_mu = parse(key, v)?,
            "w_sigma" => self.attack.objective.w_sigma = parse(key, v)?,
            "w_tv" => self.attack.objective.w_tv = parse(key, v)?,
            "lr" => self.attack.objective.lr = parse(key, v)?,
            "rounds" => self.attack.objective.rounds = parse(key, v)?,
            "max_halvings" => self.attack.objective.max_halvings = parse(key, v)?,
            "z" => self.attack.z = parse(key, v)?,
            "division_floor" => self.attack.division_floor = parse(key, v)?,
            "min_negatives" => self.attack.min_negatives = parse(key, v)?,
            "snap_radius" => self.attack.snap_radius = parse(key, v)?,
            "quantize" => self.attack.quantize = parse_bool(key, v)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, v)?,
            "fl_users" => self.fl_users = parse(key, v)?,
            "fl_rounds" => self.fl_rounds = parse(key, v)?,
            "fl_lr" => self.fl_lr = parse(key, v)?,
            "fl_pool" => self.fl_pool = parse(key, v)?,
            "fl_test" => self.fl_test = parse(key, v)?,
            "fl_attack" => self.fl_attack = parse_bool(key, v)?,
            "fl_histogram_users" => {
                self.fl_histogram_users = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "fl_histogram_rounds" => self.fl_histogram_rounds = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Builds a configuration from `(key, value)` pairs; later pairs win.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::defaults();
        let mut seen = BTreeSet::new();
        for (k, v) in pairs {
            cfg.set(k, v)?;
            seen.insert(k.to_string());
        }
        if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !seen.contains(**k)) {
            return Err(Error::Config(format!("missing required key {missing:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses configuration text, then applies `overrides` on top.
    pub fn parse_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("batch", self.batch),
            ("units", self.units),
            ("bias_inputs", self.bias_inputs),
            ("metric_units", self.metric_units),
            ("metric_slots", self.metric_slots),
            ("hidden", self.hidden),
            ("calibration_samples", self.calibration_samples),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.batch > self.metric_slots {
            return Err(Error::Config(format!(
                "batch {} exceeds metric_slots {}",
                self.batch, self.metric_slots
            )));
        }
        if self.laplace_mu.is_some() != self.laplace_s.is_some() {
            return Err(Error::Config("laplace_mu and laplace_s must both be set or both auto".into()));
        }
        if let (Some(mu), Some(s)) = (self.laplace_mu, self.laplace_s) {
            LaplaceParams::new(mu, s).map_err(|e| Error::Config(e.to_string()))?;
        }
        for (k, v) in [("w0", self.w0), ("tau", self.tau), ("tau_small", self.tau_small), ("fl_lr", self.fl_lr)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{k} must be finite")));
            }
        }
        self.ldp.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Structure settings with a given Laplace grid.
    pub fn structure(&self, laplace: LaplaceParams) -> StructureConfig {
        StructureConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            units: self.units,
            w0: self.w0,
            bias_inputs: self.bias_inputs,
            laplace,
            metric_units: self.metric_units,
            metric_factors: self.metric_factors,
            metric_gain: self.metric_gain,
            metric_slots: self.metric_slots,
        }
    }

    /// All settings as `key = value` lines, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let auto = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let (min_frac, max_frac) = match self.subject {
            SubjectSpec::Random { min_frac, max_frac } => (min_frac, max_frac),
            SubjectSpec::CenteredDisk { .. } => (f64::NAN, f64::NAN),
        };
        let o = &self.attack.objective;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.channels.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.batch.to_string(),
            self.units.to_string(),
            self.bias_inputs.to_string(),
            self.w0.to_string(),
            auto(self.laplace_mu),
            auto(self.laplace_s),
            self.calibration_samples.to_string(),
            self.metric_units.to_string(),
            self.metric_slots.to_string(),
            self.metric_gain.to_string(),
            self.metric_factors.mean.to_string(),
            self.metric_factors.variance.to_string(),
            self.metric_factors.tv.to_string(),
            self.metric_factors.index.to_string(),
            self.tau.to_string(),
            self.tau_small.to_string(),
            self.hidden.to_string(),
            min_frac.to_string(),
            max_frac.to_string(),
            mask_string(&self.mask),
            self.ldp.epsilon.to_string(),
            self.ldp.delta.to_string(),
            self.ldp.clip_bound.to_string(),
            self.ldp.c_const.to_string(),
            self.ldp.min_dataset.to_string(),
            match self.ldp.clip_mode {
                ClipMode::Global => "global".into(),
                ClipMode::PerLayer => "per_layer".into(),
            },
            o.w_mu.to_string(),
            o.w_sigma.to_string(),
            o.w_tv.to_string(),
            o.lr.to_string(),
            o.rounds.to_string(),
            o.max_halvings.to_string(),
            self.attack.z.to_string(),
            self.attack.division_floor.to_string(),
            self.attack.min_negatives.to_string(),
            self.attack.snap_radius.to_string(),
            self.attack.quantize.to_string(),
            self.sweep_seeds.to_string(),
            self.fl_users.to_string(),
            self.fl_rounds.to_string(),
            self.fl_lr.to_string(),
            self.fl_pool.to_string(),
            self.fl_test.to_string(),
            self.fl_attack.to_string(),
            self.fl_histogram_users
                .iter()
                .map(|u| u.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.fl_histogram_rounds.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        KEYS.iter()
            .zip(values)
            .map(|((k, _, _), v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Splits configuration text into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
