//! Two-phase training and compensated evaluation.
//!
//! Phase one fits the residual map function `phi1` on `(I, R)` pairs. Phase
//! two freezes `phi1` and fits a detector on the same inputs, either on the
//! truncated inverse error `min(1, theta1 / |R - phi1(I)|)` or, for the naive
//! comparison, on the signed error `R - phi1(I)` directly.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{self, DetectorMap, ResidualMap, Threshold};
use crate::mlp::{LossKind, Mlp, OutputActivation};
use crate::rng;
use crate::synth::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub hidden_sizes: Vec<usize>,
    /// Output activation of `phi1`. Detectors use a fixed activation per kind.
    pub phi1_output: OutputActivation,
    /// Output activation of the inverse-error detector during training.
    pub detector_output: OutputActivation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.0,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            loss_kind: LossKind::L1,
            hidden_sizes: vec![128],
            phi1_output: OutputActivation::Affine,
            detector_output: OutputActivation::Affine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }

    fn layer_sizes(&self, dim: usize) -> Vec<usize> {
        let mut sizes = vec![dim];
        sizes.extend(&self.hidden_sizes);
        sizes.push(dim);
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    /// Loss on the validation set, `None` when none was given.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Mlp,
    pub curve: Vec<EpochLoss>,
}

pub const LOSS_CURVE_HEADER: &str = "epoch,train_loss,val_loss";

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut out = String::from(LOSS_CURVE_HEADER);
    out.push('\n');
    for e in curve {
        let val = e.val_loss.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, val);
    }
    out
}

/// Observed patches as rows.
pub fn input_matrix(samples: &[Sample]) -> Result<Array2<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("empty sample set".into()))?;
    let dim = first.observed().len();
    let mut out = Array2::zeros((samples.len(), dim));
    for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
        if s.observed().len() != dim {
            return Err(Error::Dimension { expected: dim, got: s.observed().len() });
        }
        row.iter_mut().zip(s.observed()).for_each(|(o, &v)| *o = f64::from(v));
    }
    Ok(out)
}

/// Residual truths as rows.
pub fn residual_matrix(samples: &[Sample]) -> Result<Array2<f64>> {
    let dim = samples
        .first()
        .ok_or_else(|| Error::Config("empty sample set".into()))?
        .residual_truth()
        .len();
    let mut out = Array2::zeros((samples.len(), dim));
    for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
        if s.residual_truth().len() != dim {
            return Err(Error::Dimension { expected: dim, got: s.residual_truth().len() });
        }
        row.iter_mut().zip(s.residual_truth()).for_each(|(o, &v)| *o = f64::from(v));
    }
    Ok(out)
}

/// Consecutive epochs above `DIVERGENCE_FACTOR` times the initial loss that abort training.
pub const DIVERGENCE_PATIENCE: usize = 5;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Minibatch gradient descent from `model`. Epoch `e` shuffles with
/// substream `e + 1` of `config.seed`.
pub fn fit(
    mut model: Mlp,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    validation: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    if targets.nrows() != n {
        return Err(Error::Dimension { expected: n, got: targets.nrows() });
    }
    let full_loss = |m: &Mlp, x: ArrayView2<f64>, y: ArrayView2<f64>| -> Result<f64> {
        Ok(config.loss_kind.loss(m.forward_batch(x)?.view(), y))
    };
    let initial = full_loss(&model, inputs, targets)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut above = 0;
    let dim_in = inputs.ncols();
    let dim_out = targets.ncols();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::substream(config.seed, epoch as u64 + 1));
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut bx = Array2::zeros((chunk.len(), dim_in));
            let mut by = Array2::zeros((chunk.len(), dim_out));
            for (r, &i) in chunk.iter().enumerate() {
                bx.row_mut(r).assign(&inputs.row(i));
                by.row_mut(r).assign(&targets.row(i));
            }
            let (loss, grads) = model.grad(bx.view(), by.view(), config.loss_kind)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            weighted += loss * chunk.len() as f64;
            model.sgd_step(&grads, config.learning_rate);
        }
        let train_loss = weighted / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_loss });
        }
        above = if train_loss > DIVERGENCE_FACTOR * initial { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence { epoch, loss: train_loss });
        }
        let val_loss = validation
            .map(|(vx, vy)| full_loss(&model, vx, vy))
            .transpose()?;
        curve.push(EpochLoss { epoch, train_loss, val_loss });
    }
    Ok(Trained { model, curve })
}

fn init_model(dim: usize, activation: OutputActivation, config: &TrainConfig) -> Result<Mlp> {
    Mlp::new(&config.layer_sizes(dim), activation, rng::derive_seed(config.seed, 0))
}

/// Fits `phi1` on `(observed, residual_truth)`.
pub fn train_phi1(train: &[Sample], validation: Option<&[Sample]>, config: &TrainConfig) -> Result<Trained> {
    let x = input_matrix(train)?;
    let y = residual_matrix(train)?;
    let val = validation.map(|v| Ok::<_, Error>((input_matrix(v)?, residual_matrix(v)?))).transpose()?;
    let model = init_model(x.ncols(), config.phi1_output, config)?;
    fit(model, x.view(), y.view(), val.as_ref().map(|(a, b)| (a.view(), b.view())), config)
}

/// `phi1(I)` clamped into `[0, 1]`, one row per sample.
pub fn predict_residuals(phi1: &Mlp, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = phi1.forward_batch(inputs)?;
    out.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
    Ok(out)
}

/// Truncated-inverse detector targets for every pixel.
pub fn inverse_targets(truth: ArrayView2<f64>, pred: ArrayView2<f64>, theta1: Threshold) -> Array2<f64> {
    let mut out = &truth - &pred;
    out.mapv_inplace(|e| feedback::detector_target(e.abs(), theta1));
    out
}

/// Signed residual errors `R - phi1(I)`.
pub fn signed_targets(truth: ArrayView2<f64>, pred: ArrayView2<f64>) -> Array2<f64> {
    &truth - &pred
}

fn train_detector(
    train: &[Sample],
    validation: Option<&[Sample]>,
    phi1: &Mlp,
    config: &TrainConfig,
    activation: OutputActivation,
    targets: impl Fn(ArrayView2<f64>, ArrayView2<f64>) -> Array2<f64>,
) -> Result<Trained> {
    let prepare = |set: &[Sample]| -> Result<(Array2<f64>, Array2<f64>)> {
        let x = input_matrix(set)?;
        let pred = predict_residuals(phi1, x.view())?;
        let t = targets(residual_matrix(set)?.view(), pred.view());
        Ok((x, t))
    };
    let (x, t) = prepare(train)?;
    let val = validation.map(prepare).transpose()?;
    let model = init_model(x.ncols(), activation, config)?;
    fit(model, x.view(), t.view(), val.as_ref().map(|(a, b)| (a.view(), b.view())), config)
}

/// Fits the inverse-error detector against a frozen `phi1`.
pub fn train_detector_inverse(
    train: &[Sample],
    validation: Option<&[Sample]>,
    phi1: &Mlp,
    theta1: Threshold,
    config: &TrainConfig,
) -> Result<Trained> {
    train_detector(
        train,
        validation,
        phi1,
        config,
        config.detector_output,
        |truth, pred| inverse_targets(truth, pred, theta1),
    )
}

/// Fits the naive detector on signed errors against a frozen `phi1`.
pub fn train_detector_naive(
    train: &[Sample],
    validation: Option<&[Sample]>,
    phi1: &Mlp,
    config: &TrainConfig,
) -> Result<Trained> {
    train_detector(train, validation, phi1, config, OutputActivation::Affine, signed_targets)
}

/// Compensated residual map for one observed patch.
pub fn apply_feedback(
    phi1: &Mlp,
    detector: &Mlp,
    input: &[f64],
    side: usize,
    theta1: Threshold,
) -> Result<ResidualMap> {
    let pred: Vec<f64> = phi1
        .forward(input)?
        .into_iter()
        .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
        .collect();
    let phi1_map = ResidualMap::new(side, side, pred)?;
    let det = DetectorMap::from_raw_clamped(side, side, &detector.forward(input)?)?;
    feedback::compensate_map(&phi1_map, &det, theta1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    /// Trained on `min(1, theta1 / |e|)`, compensates through `err` and the update rule.
    InverseError,
    /// Trained on the signed error, compensates additively.
    SignedError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_baseline: f64,
    pub mae_compensated: f64,
    pub mae_super_threshold_baseline: f64,
    pub mae_super_threshold_compensated: f64,
    pub detector_val_loss: f64,
    pub fraction_sign_aligned: f64,
    pub super_threshold_pixels: usize,
    /// True when no held-out pixel exceeds the threshold; the subset metrics are then 0.
    pub super_threshold_empty: bool,
}

fn compensated_pixel(kind: DetectorKind, p: f64, d: f64, theta1: Threshold) -> f64 {
    match kind {
        DetectorKind::InverseError => {
            let err = feedback::err_from_detector(feedback::clamp_detector(d), theta1)
                .expect("clamped detector output lies in (0, 1]");
            feedback::compensate(p, err)
        }
        DetectorKind::SignedError => (p + d).clamp(0.0, 1.0),
    }
}

/// Held-out metrics for a `phi1` and a detector of the given kind.
pub fn evaluate_metrics_with(
    phi1: &Mlp,
    detector: &Mlp,
    kind: DetectorKind,
    held_out: &[Sample],
    theta1: Threshold,
) -> Result<MetricsReport> {
    if held_out.is_empty() {
        return Err(Error::Config("held-out set is empty".into()));
    }
    let x = input_matrix(held_out)?;
    let truth = residual_matrix(held_out)?;
    let pred = predict_residuals(phi1, x.view())?;
    let det = detector.forward_batch(x.view())?;

    let mut sum_base = 0.0;
    let mut sum_comp = 0.0;
    let mut sum_sup_base = 0.0;
    let mut sum_sup_comp = 0.0;
    let mut sum_det = 0.0;
    let mut sup = 0usize;
    let mut aligned = 0usize;
    for ((&r, &p), &d) in truth.iter().zip(&pred).zip(&det) {
        let base = (r - p).abs();
        let comp = (r - compensated_pixel(kind, p, d, theta1)).abs();
        sum_base += base;
        sum_comp += comp;
        sum_det += match kind {
            DetectorKind::InverseError => (feedback::clamp_detector(d) - feedback::detector_target(base, theta1)).abs(),
            DetectorKind::SignedError => (d - (r - p)).abs(),
        };
        if base > theta1.get() {
            sup += 1;
            sum_sup_base += base;
            sum_sup_comp += comp;
            if (p - r).signum() == (1.0 - 2.0 * p).signum() && p != 0.5 {
                aligned += 1;
            }
        }
    }
    let n = truth.len() as f64;
    let sub = |s: f64| if sup == 0 { 0.0 } else { s / sup as f64 };
    Ok(MetricsReport {
        mae_baseline: sum_base / n,
        mae_compensated: sum_comp / n,
        mae_super_threshold_baseline: sub(sum_sup_base),
        mae_super_threshold_compensated: sub(sum_sup_comp),
        detector_val_loss: sum_det / n,
        fraction_sign_aligned: sub(aligned as f64),
        super_threshold_pixels: sup,
        super_threshold_empty: sup == 0,
    })
}

/// Held-out metrics for the inverse-error detector.
pub fn evaluate_metrics(phi1: &Mlp, detector: &Mlp, held_out: &[Sample], theta1: Threshold) -> Result<MetricsReport> {
    evaluate_metrics_with(phi1, detector, DetectorKind::InverseError, held_out, theta1)
}

/// Pearson correlation. Returns 0 when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::Domain("correlation needs at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Training-set coupling between each detector's targets and `phi1`'s errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    /// corr(naive targets, signed training residuals); the targets are the residuals.
    pub naive_target_residual_corr: f64,
    /// corr(|e|, theta1 / |e|) over super-threshold training pixels.
    pub inverse_target_error_corr: f64,
    pub super_threshold_pixels: usize,
}

pub fn detector_coupling(train: &[Sample], phi1: &Mlp, theta1: Threshold) -> Result<Coupling> {
    let x = input_matrix(train)?;
    let truth = residual_matrix(train)?;
    let pred = predict_residuals(phi1, x.view())?;
    let residuals = signed_targets(truth.view(), pred.view());
    let naive = signed_targets(truth.view(), pred.view());
    let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    let naive_target_residual_corr = pearson(&flat(&naive), &flat(&residuals))?;

    let (errs, inv): (Vec<f64>, Vec<f64>) = residuals
        .iter()
        .map(|e| e.abs())
        .filter(|&e| e > theta1.get())
        .map(|e| (e, feedback::detector_target(e, theta1)))
        .unzip();
    let inverse_target_error_corr = if errs.len() >= 2 { pearson(&errs, &inv)? } else { 0.0 };
    Ok(Coupling {
        naive_target_residual_corr,
        inverse_target_error_corr,
        super_threshold_pixels: errs.len(),
    })
}
