//! Experiment runner behind the command-line tool.
//!
//! A [`HarnessConfig`] is one JSON object. Every command derives its random
//! streams from the single master `seed`, writes into `output_dir` and
//! returns the paths it wrote. Reruns with the same config are byte identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{self, GapRow, RationalTF};
use crate::error::{Error, Result};
use crate::feedback::Threshold;
use crate::learner::{self, Coupling, DetectorKind, MetricsReport, TrainConfig, Trained};
use crate::mlp;
use crate::rng;
use crate::stats::{self, MomentSet, UniformErrorModel};
use crate::synth::{self, Dataset, DatasetSpec, Sample};

/// Substream indices of the master seed.
const DATA_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const STATS_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Stats,
    Control,
    Train,
    CompareDetectors,
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub grid: Vec<f64>,
    pub mc_n: u64,
    /// Thresholds that get a `moments_<theta1>.json` file in addition to `theta1`.
    pub moment_thetas: Vec<f64>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.1, 0.01, 1e-3, 1e-4, 1e-6],
            mc_n: 1_000_000,
            moment_thetas: vec![0.2, 0.1, 0.05, 0.01],
        }
    }
}

/// Rational transfer function as ascending coefficient lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfSpec {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl TfSpec {
    pub fn constant(c: f64) -> Self {
        Self { num: vec![c], den: vec![1.0] }
    }

    pub fn integrator(gain: f64) -> Self {
        Self { num: vec![gain], den: vec![0.0, 1.0] }
    }

    pub fn build(&self) -> Result<RationalTF> {
        RationalTF::new(self.num.clone(), self.den.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPreset {
    pub name: String,
    /// Open-loop map of the residual learner.
    pub t_phi1: TfSpec,
    /// Error detector in the feedback path.
    pub t_phi: TfSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub presets: Vec<ControlPreset>,
    /// Defaults to `0` followed by 61 log-spaced points on `[1e-3, 1e3]`.
    pub frequencies: Option<Vec<f64>>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            presets: vec![
                ControlPreset {
                    name: "constant".into(),
                    t_phi1: TfSpec::constant(0.8),
                    t_phi: TfSpec::constant(100.0),
                },
                ControlPreset {
                    name: "integrator".into(),
                    t_phi1: TfSpec::constant(0.8),
                    t_phi: TfSpec::integrator(10.0),
                },
                ControlPreset {
                    name: "identity".into(),
                    t_phi1: TfSpec::constant(1.0),
                    t_phi: TfSpec::constant(100.0),
                },
            ],
            frequencies: None,
        }
    }
}

impl ControlConfig {
    pub fn frequency_grid(&self) -> Vec<f64> {
        self.frequencies.clone().unwrap_or_else(|| {
            std::iter::once(0.0).chain(control::default_frequency_grid()).collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Informational; the subcommand decides what runs.
    pub experiment: Option<Experiment>,
    pub theta1: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub n_train: usize,
    pub n_held_out: usize,
    pub dataset: DatasetSpec,
    /// `dataset_path` replaces generation; its samples are split at `n_train`.
    pub dataset_path: Option<PathBuf>,
    /// `train.seed` is overwritten by the seed derived from `seed`.
    pub train: TrainConfig,
    pub stats: StatsConfig,
    pub control: ControlConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            theta1: 0.05,
            seed: 7,
            output_dir: PathBuf::from("out"),
            n_train: 4096,
            n_held_out: 512,
            dataset: DatasetSpec::default(),
            dataset_path: None,
            train: TrainConfig::default(),
            stats: StatsConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn threshold(&self) -> Result<Threshold> {
        Threshold::new(self.theta1)
    }

    pub fn validate(&self) -> Result<()> {
        self.threshold()?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if self.dataset_path.is_none() && self.n_held_out == 0 {
            return Err(Error::Config("n_held_out must be positive".into()));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        if self.stats.grid.is_empty() {
            return Err(Error::Config("stats.grid is empty".into()));
        }
        if let Some(&t) = self.stats.grid.iter().chain(&self.stats.moment_thetas).find(|&&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config(format!("stats threshold {t} outside (0, 1)")));
        }
        if self.stats.mc_n < 2 {
            return Err(Error::Config("stats.mc_n must be at least 2".into()));
        }
        if self.control.presets.is_empty() {
            return Err(Error::Config("control.presets is empty".into()));
        }
        for p in &self.control.presets {
            p.t_phi1.build().and(p.t_phi.build()).map_err(|e| Error::Config(format!("preset {}: {e}", p.name)))?;
        }
        if let Some(bad) = self.control.frequency_grid().iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("frequency {bad} must be finite and nonnegative")));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        rng::derive_seed(self.seed, DATA_STREAM)
    }

    pub fn train_seed(&self) -> u64 {
        rng::derive_seed(self.seed, TRAIN_STREAM)
    }

    pub fn stats_seed(&self) -> u64 {
        rng::derive_seed(self.seed, STATS_STREAM)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.train_seed(), ..self.train.clone() }
    }
}

/// Process exit code for an error: 1 config, 2 I/O, 3 divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Format(_) | Error::Checksum { .. } => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentComparison {
    pub theta1: f64,
    pub mc_n: u64,
    pub seed: u64,
    pub closed_form: MomentSet,
    pub monte_carlo: MomentSet,
    /// `|mc - exact| / |exact|` per field.
    pub relative_error: MomentSet,
}

pub fn moment_comparison(theta1: f64, mc_n: u64, seed: u64) -> Result<MomentComparison> {
    let model = UniformErrorModel::new(theta1)?;
    let exact = stats::closed_form_moments(model);
    let mc = stats::monte_carlo_moments(model, mc_n, seed)?;
    let rel = |a: f64, b: f64| (b - a).abs() / a.abs();
    Ok(MomentComparison {
        theta1,
        mc_n,
        seed,
        closed_form: exact,
        monte_carlo: mc,
        relative_error: MomentSet {
            mean_x: rel(exact.mean_x, mc.mean_x),
            var_x: rel(exact.var_x, mc.var_x),
            mean_y: rel(exact.mean_y, mc.mean_y),
            var_y: rel(exact.var_y, mc.var_y),
            cov_xy: rel(exact.cov_xy, mc.cov_xy),
            corr_xy: rel(exact.corr_xy, mc.corr_xy),
        },
    })
}

/// `corr_scan.csv` plus one `moments_<theta1>.json` per configured threshold.
pub fn cmd_stats(cfg: &HarnessConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    prepare_dir(dir)?;
    let seed = cfg.stats_seed();
    let mut written = Vec::new();
    let rows = stats::corr_scan(&cfg.stats.grid, cfg.stats.mc_n, seed)?;
    write(dir, "corr_scan.csv", stats::corr_scan_csv(&rows), &mut written)?;

    let mut thetas = cfg.stats.moment_thetas.clone();
    if !thetas.contains(&cfg.theta1) {
        thetas.push(cfg.theta1);
    }
    for t in thetas {
        let cmp = moment_comparison(t, cfg.stats.mc_n, seed)?;
        write(dir, &format!("moments_{t}.json"), json(&cmp)?, &mut written)?;
    }
    Ok(written)
}

pub const PRESET_GAP_HEADER: &str = "preset,omega,open_loop_gap,closed_loop_gap";

/// Gap rows for every preset, in config order.
pub fn control_rows(cfg: &ControlConfig) -> Result<Vec<(String, Vec<GapRow>)>> {
    let freqs = cfg.frequency_grid();
    cfg.presets
        .iter()
        .map(|p| Ok((p.name.clone(), control::identity_gap(&p.t_phi1.build()?, &p.t_phi.build()?, &freqs)?)))
        .collect()
}

pub fn preset_gap_csv(rows: &[(String, Vec<GapRow>)]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "pole".to_string(), |x| x.to_string());
    let mut out = String::from(PRESET_GAP_HEADER);
    out.push('\n');
    for (name, gaps) in rows {
        for r in gaps {
            let _ = writeln!(out, "{name},{},{},{}", r.omega, cell(r.open_loop_gap), cell(r.closed_loop_gap));
        }
    }
    out
}

/// `identity_gap.csv` with one block of rows per preset.
pub fn cmd_control(cfg: &HarnessConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let rows = control_rows(&cfg.control)?;
    let mut written = Vec::new();
    write(&cfg.output_dir, "identity_gap.csv", preset_gap_csv(&rows), &mut written)?;
    Ok(written)
}

/// The configured dataset, loaded from `dataset_path` or generated.
pub fn build_dataset(cfg: &HarnessConfig) -> Result<Dataset> {
    match &cfg.dataset_path {
        Some(path) => synth::load_dataset(path),
        None => synth::generate_dataset(&cfg.dataset, cfg.n_train + cfg.n_held_out, cfg.data_seed()),
    }
}

fn split<'a>(cfg: &HarnessConfig, ds: &'a Dataset) -> Result<(&'a [Sample], &'a [Sample])> {
    if ds.len() <= cfg.n_train {
        return Err(Error::Config(format!(
            "dataset has {} samples, need more than n_train = {}",
            ds.len(),
            cfg.n_train
        )));
    }
    ds.split(cfg.n_train)
}

/// `dataset.bin` for later use with `dataset_path`.
pub fn cmd_generate(cfg: &HarnessConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let ds = synth::generate_dataset(&cfg.dataset, cfg.n_train + cfg.n_held_out, cfg.data_seed())?;
    let mut written = Vec::new();
    write(&cfg.output_dir, "dataset.bin", synth::encode_dataset(&ds)?, &mut written)?;
    Ok(written)
}

fn write_model(
    cfg: &HarnessConfig,
    name: &str,
    role: &str,
    trained: &Trained,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let bytes = mlp::encode_model(&trained.model, role, &[cfg.seed, cfg.train_seed()])?;
    write(&cfg.output_dir, &format!("{name}.model"), bytes, written)?;
    write(&cfg.output_dir, &format!("loss_{name}.csv"), learner::loss_curve_csv(&trained.curve), written)
}

pub struct TrainOutcome {
    pub metrics: MetricsReport,
    pub files: Vec<PathBuf>,
}

/// Two-phase training and held-out evaluation.
pub fn cmd_train(cfg: &HarnessConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let theta1 = cfg.threshold()?;
    let ds = build_dataset(cfg)?;
    let (train, held) = split(cfg, &ds)?;
    let tc = cfg.train_config();

    let phi1 = learner::train_phi1(train, Some(held), &tc)?;
    let det = learner::train_detector_inverse(train, Some(held), &phi1.model, theta1, &tc)?;
    let metrics = learner::evaluate_metrics(&phi1.model, &det.model, held, theta1)?;

    let mut files = Vec::new();
    write(&cfg.output_dir, "metrics.json", json(&metrics)?, &mut files)?;
    write_model(cfg, "phi1", "phi1", &phi1, &mut files)?;
    write_model(cfg, "detector", "detector-inverse", &det, &mut files)?;
    Ok(TrainOutcome { metrics, files })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub theta1: f64,
    pub inverse: MetricsReport,
    pub naive: MetricsReport,
    pub coupling: Coupling,
    /// Closed-form corr(x, theta1 / x) for uniform errors on `[theta1, 1]`.
    pub closed_form_corr: f64,
}

pub struct CompareOutcome {
    pub report: CompareReport,
    pub files: Vec<PathBuf>,
}

/// Both detector kinds on one frozen `phi1`.
pub fn cmd_compare_detectors(cfg: &HarnessConfig) -> Result<CompareOutcome> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let theta1 = cfg.threshold()?;
    let ds = build_dataset(cfg)?;
    let (train, held) = split(cfg, &ds)?;
    let tc = cfg.train_config();

    let phi1 = learner::train_phi1(train, Some(held), &tc)?;
    let inv = learner::train_detector_inverse(train, Some(held), &phi1.model, theta1, &tc)?;
    let naive = learner::train_detector_naive(train, Some(held), &phi1.model, &tc)?;
    let report = CompareReport {
        theta1: cfg.theta1,
        inverse: learner::evaluate_metrics_with(&phi1.model, &inv.model, DetectorKind::InverseError, held, theta1)?,
        naive: learner::evaluate_metrics_with(&phi1.model, &naive.model, DetectorKind::SignedError, held, theta1)?,
        coupling: learner::detector_coupling(train, &phi1.model, theta1)?,
        closed_form_corr: stats::closed_form_moments(UniformErrorModel::new(cfg.theta1)?).corr_xy,
    };

    let mut files = Vec::new();
    write(&cfg.output_dir, "compare.json", json(&report)?, &mut files)?;
    write_model(cfg, "phi1", "phi1", &phi1, &mut files)?;
    write_model(cfg, "detector", "detector-inverse", &inv, &mut files)?;
    write_model(cfg, "detector_naive", "detector-naive", &naive, &mut files)?;
    Ok(CompareOutcome { report, files })
}

/// Runs one experiment and returns the files it wrote.
pub fn run(cfg: &HarnessConfig, experiment: Experiment) -> Result<Vec<PathBuf>> {
    match experiment {
        Experiment::Stats => cmd_stats(cfg),
        Experiment::Control => cmd_control(cfg),
        Experiment::Train => cmd_train(cfg).map(|o| o.files),
        Experiment::CompareDetectors => cmd_compare_detectors(cfg).map(|o| o.files),
        Experiment::Generate => cmd_generate(cfg),
    }
}
