//! Desk-scale synthetic deraining samples.
//!
//! A sample is a smooth background `B`, a streak residual `R` and the
//! observation `I = clamp01(B + R)`. All planes are `f32`, which is also the
//! on-disk representation, so saving and loading is bit exact.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::ResidualMap;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Side of the square patch in pixels.
    pub patch_size: usize,
    /// Inclusive range for the number of streaks per sample.
    pub streak_count_range: [u32; 2],
    pub streak_intensity_range: [f64; 2],
    /// Streak orientation in radians, measured from the x axis.
    pub streak_angle_range: [f64; 2],
    /// Streak length in pixels.
    pub streak_length_range: [f64; 2],
    /// Lattice spacing of the background value noise, in pixels.
    pub background_smoothness: f64,
    pub background_range: [f64; 2],
    /// Mean intensity over streak pixels that each sample is rescaled toward.
    pub residual_mean_target: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            patch_size: 16,
            streak_count_range: [1, 3],
            streak_intensity_range: [0.25, 0.75],
            streak_angle_range: [FRAC_PI_2, FRAC_PI_2],
            streak_length_range: [40.0, 40.0],
            background_smoothness: 8.0,
            background_range: [0.0, 0.5],
            residual_mean_target: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, [lo, hi]: [f64; 2]| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be an ordered finite interval, got [{lo}, {hi}]")))
            }
        };
        let unit = |name: &str, [lo, hi]: [f64; 2]| {
            if (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie within [0, 1]")))
            }
        };
        if self.patch_size < 4 {
            return Err(Error::Config(format!("patch_size must be at least 4, got {}", self.patch_size)));
        }
        let [c0, c1] = self.streak_count_range;
        if c0 > c1 {
            return Err(Error::Config(format!("streak_count_range [{c0}, {c1}] is not ordered")));
        }
        ordered("streak_intensity_range", self.streak_intensity_range)?;
        unit("streak_intensity_range", self.streak_intensity_range)?;
        ordered("streak_angle_range", self.streak_angle_range)?;
        ordered("streak_length_range", self.streak_length_range)?;
        if self.streak_length_range[0] < 0.0 {
            return Err(Error::Config("streak_length_range must be nonnegative".into()));
        }
        ordered("background_range", self.background_range)?;
        unit("background_range", self.background_range)?;
        if !(self.background_smoothness >= 0.0 && self.background_smoothness.is_finite()) {
            return Err(Error::Config("background_smoothness must be finite and nonnegative".into()));
        }
        if !(self.residual_mean_target > 0.0 && self.residual_mean_target < 1.0) {
            return Err(Error::Config("residual_mean_target must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    side: usize,
    observed: Vec<f32>,
    residual_truth: Vec<f32>,
    background: Vec<f32>,
}

impl Sample {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn observed(&self) -> &[f32] {
        &self.observed
    }

    pub fn residual_truth(&self) -> &[f32] {
        &self.residual_truth
    }

    pub fn background(&self) -> &[f32] {
        &self.background
    }

    pub fn residual_map(&self) -> ResidualMap {
        let values = self.residual_truth.iter().map(|&v| f64::from(v)).collect();
        ResidualMap::new(self.side, self.side, values).expect("residual planes are valid by construction")
    }

    pub fn observed_f64(&self) -> Vec<f64> {
        self.observed.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Fraction of the gap between a sample's mean streak intensity and the
/// target that is removed by the per-sample shift.
const MEAN_PULL: f64 = 0.5;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn uniform(rng: &mut rng::Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn background(spec: &DatasetSpec, rng: &mut rng::Rng) -> Vec<f64> {
    let side = spec.patch_size;
    let cell = spec.background_smoothness.max(1.0);
    let nodes = (side as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..nodes * nodes)
        .map(|_| uniform(rng, spec.background_range))
        .collect();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..side {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let at = |i: usize, j: usize| lattice[j * nodes + i];
            let top = lerp(at(ix, iy), at(ix + 1, iy), tx);
            let bottom = lerp(at(ix, iy + 1), at(ix + 1, iy + 1), tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    out
}

fn streaks(spec: &DatasetSpec, rng: &mut rng::Rng) -> Vec<f64> {
    let side = spec.patch_size;
    let mut out = vec![0.0f64; side * side];
    let [c0, c1] = spec.streak_count_range;
    let count = rng.random_range(c0..=c1);
    for _ in 0..count {
        let angle = uniform(rng, spec.streak_angle_range);
        let length = uniform(rng, spec.streak_length_range);
        let intensity = uniform(rng, spec.streak_intensity_range);
        let cx = rng.random::<f64>() * side as f64;
        let cy = rng.random::<f64>() * side as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        for y in 0..side {
            for x in 0..side {
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                let along = px * dx + py * dy;
                let across = (-px * dy + py * dx).abs();
                if across < 0.5 && along.abs() <= length / 2.0 {
                    let v = &mut out[y * side + x];
                    *v = v.max(intensity);
                }
            }
        }
    }
    let (sum, hits) = out
        .iter()
        .filter(|&&v| v > 0.0)
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    if hits > 0 {
        let shift = MEAN_PULL * (spec.residual_mean_target - sum / hits as f64);
        for v in out.iter_mut().filter(|v| **v > 0.0) {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }
    out
}

/// One sample, fully determined by `(spec, seed)`.
pub fn generate_sample(spec: &DatasetSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let bg = background(spec, &mut rng);
    let res = streaks(spec, &mut rng);
    let background: Vec<f32> = bg.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect();
    let residual_truth: Vec<f32> = res.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect();
    let observed = background
        .iter()
        .zip(&residual_truth)
        .map(|(b, r)| (b + r).clamp(0.0, 1.0))
        .collect();
    Ok(Sample {
        side: spec.patch_size,
        observed,
        residual_truth,
        background,
    })
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    rng::derive_seed(seed, index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: DatasetSpec,
    seed: u64,
    samples: Vec<Sample>,
}

pub fn generate_dataset(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let samples = (0..n as u64)
        .map(|i| generate_sample(spec, sample_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        samples,
    })
}

impl Dataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n_train` samples and the rest.
    pub fn split(&self, n_train: usize) -> Result<(&[Sample], &[Sample])> {
        if n_train == 0 || n_train >= self.samples.len() {
            return Err(Error::Config(format!(
                "cannot split {} samples with {} for training",
                self.samples.len(),
                n_train
            )));
        }
        Ok(self.samples.split_at(n_train))
    }
}

// On-disk layout:
//   [0..12)  magic
//   [12..16) version, u32 LE
//   u64 LE metadata length, JSON metadata
//   per sample: observed, residual_truth, background planes, f32 LE
//   u64 LE FNV-1a checksum of every preceding byte

pub const DATASET_MAGIC: &[u8; 12] = b"FEEDREP\0DSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    spec: DatasetSpec,
    n: usize,
    seed: u64,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Metadata {
        spec: ds.spec.clone(),
        n: ds.samples.len(),
        seed: ds.seed,
    })?;
    let plane = ds.spec.pixels();
    let mut out = Vec::with_capacity(32 + meta.len() + ds.samples.len() * plane * 12);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for s in &ds.samples {
        for v in s.observed.iter().chain(&s.residual_truth).chain(&s.background) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 16 || &bytes[..12] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    if bytes.len() < 24 {
        return Err(Error::Format("truncated header".into()));
    }
    let meta_len = usize::try_from(read_u64(bytes, 16))
        .map_err(|_| Error::Format("metadata length overflows".into()))?;
    let meta_end = 24usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated metadata".into()))?;
    let meta: Metadata = serde_json::from_slice(&bytes[24..meta_end])
        .map_err(|e| Error::Format(format!("malformed metadata: {e}")))?;
    meta.spec.validate()?;
    let plane = meta.spec.pixels();
    let expected = meta
        .n
        .checked_mul(plane * 3 * 4)
        .and_then(|b| b.checked_add(meta_end + 8))
        .ok_or_else(|| Error::Format("sample count overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "length mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let body_end = bytes.len() - 8;
    let stored = read_u64(bytes, body_end);
    let computed = fnv1a64(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let floats: Vec<f32> = bytes[meta_end..body_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let samples = floats
        .chunks_exact(plane * 3)
        .map(|chunk| Sample {
            side: meta.spec.patch_size,
            observed: chunk[..plane].to_vec(),
            residual_truth: chunk[plane..2 * plane].to_vec(),
            background: chunk[2 * plane..].to_vec(),
        })
        .collect();
    Ok(Dataset {
        spec: meta.spec,
        seed: meta.seed,
        samples,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
