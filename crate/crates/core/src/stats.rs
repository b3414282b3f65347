//! Moments of a super-threshold error `x ~ Uniform(theta1, 1)` and its
//! proportional inverse `y = theta1 / x`.
//!
//! The closed forms are
//!
//! ```text
//! E[x]     = (1 + t) / 2
//! var(x)   = (1 - t)^2 / 12
//! E[y]     = t / (1 - t) * ln(1 / t)
//! var(y)   = t * (1 - t * (ln t / (1 - t))^2)
//! cov(x,y) = t * (1 + (1 + t) / (2 (1 - t)) * ln t)
//! ```
//!
//! and the correlation behaves like `0.5 * ln t * sqrt(12 t)` as `t -> 0`.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformErrorModel {
    theta1: f64,
}

impl UniformErrorModel {
    pub fn new(theta1: f64) -> Result<Self> {
        if theta1 > 0.0 && theta1 < 1.0 {
            Ok(Self { theta1 })
        } else {
            Err(Error::InvalidThreshold(theta1))
        }
    }

    pub fn theta1(&self) -> f64 {
        self.theta1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub mean_x: f64,
    pub var_x: f64,
    pub mean_y: f64,
    pub var_y: f64,
    pub cov_xy: f64,
    pub corr_xy: f64,
}

impl MomentSet {
    fn from_parts(mean_x: f64, var_x: f64, mean_y: f64, var_y: f64, cov_xy: f64) -> Self {
        let corr_xy = if var_x > 0.0 && var_y > 0.0 {
            cov_xy / (var_x * var_y).sqrt()
        } else {
            0.0
        };
        Self {
            mean_x,
            var_x,
            mean_y,
            var_y,
            cov_xy,
            corr_xy,
        }
    }

    /// Named fields in declaration order, for reports.
    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("mean_x", self.mean_x),
            ("var_x", self.var_x),
            ("mean_y", self.mean_y),
            ("var_y", self.var_y),
            ("cov_xy", self.cov_xy),
            ("corr_xy", self.corr_xy),
        ]
    }
}

/// Density of `y = theta1 / x`, supported on `[theta1, 1]`.
pub fn inverse_pdf(y: f64, model: UniformErrorModel) -> f64 {
    let t = model.theta1;
    if y >= t && y <= 1.0 {
        (t / (1.0 - t)) / (y * y)
    } else {
        0.0
    }
}

pub fn closed_form_moments(model: UniformErrorModel) -> MomentSet {
    let t = model.theta1;
    let ln_t = t.ln();
    let mean_x = (1.0 + t) / 2.0;
    let var_x = (1.0 - t) * (1.0 - t) / 12.0;
    let mean_y = t / (1.0 - t) * (1.0 / t).ln();
    let ratio = ln_t / (1.0 - t);
    let var_y = t * (1.0 - t * ratio * ratio);
    let cov_xy = t * (1.0 + (1.0 + t) / (2.0 * (1.0 - t)) * ln_t);
    MomentSet::from_parts(mean_x, var_x, mean_y, var_y, cov_xy)
}

/// Leading-order correlation as `theta1 -> 0`.
pub fn asymptotic_corr(model: UniformErrorModel) -> f64 {
    let t = model.theta1;
    0.5 * t * t.ln() / (t / 12.0).sqrt()
}

/// Streaming bivariate moments (Welford), mergeable across shards.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentAccumulator {
    n: u64,
    mean_x: f64,
    mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    c_xy: f64,
    sum_xy: f64,
}

impl MomentAccumulator {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        self.mean_x += dx / n;
        let dy = y - self.mean_y;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c_xy += dx * (y - self.mean_y);
        self.sum_xy += x * y;
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        let dx = other.mean_x - self.mean_x;
        let dy = other.mean_y - self.mean_y;
        self.mean_x += dx * nb / n;
        self.mean_y += dy * nb / n;
        self.m2_x += other.m2_x + dx * dx * na * nb / n;
        self.m2_y += other.m2_y + dy * dy * na * nb / n;
        self.c_xy += other.c_xy + dx * dy * na * nb / n;
        self.sum_xy += other.sum_xy;
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Sample mean of `x * y`.
    pub fn mean_xy(&self) -> f64 {
        self.sum_xy / self.n as f64
    }

    /// Unbiased (n - 1) sample moments. Needs at least two observations.
    pub fn moments(&self) -> Result<MomentSet> {
        if self.n < 2 {
            return Err(Error::Domain(format!(
                "sample moments need n >= 2, got {}",
                self.n
            )));
        }
        let d = (self.n - 1) as f64;
        Ok(MomentSet::from_parts(
            self.mean_x,
            self.m2_x / d,
            self.mean_y,
            self.m2_y / d,
            self.c_xy / d,
        ))
    }
}

/// Draws `n` samples `x ~ Uniform(theta1, 1)` from `seed` and accumulates
/// `(x, theta1 / x)`.
pub fn monte_carlo_accumulate(model: UniformErrorModel, n: u64, seed: u64) -> MomentAccumulator {
    let t = model.theta1;
    let span = 1.0 - t;
    let mut rng = rng::seeded(seed);
    let mut acc = MomentAccumulator::default();
    for _ in 0..n {
        let u: f64 = rng.random();
        let x = t + span * u;
        acc.push(x, t / x);
    }
    acc
}

pub fn monte_carlo_moments(model: UniformErrorModel, n: u64, seed: u64) -> Result<MomentSet> {
    if n < 2 {
        return Err(Error::Domain(format!(
            "Monte Carlo moments need n >= 2, got {n}"
        )));
    }
    monte_carlo_accumulate(model, n, seed).moments()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrRow {
    pub theta1: f64,
    pub exact_corr: f64,
    pub asymptotic_corr: f64,
    pub mc_corr: f64,
    pub mc_n: u64,
    pub seed: u64,
}

pub const CORR_SCAN_HEADER: &str = "theta1,exact_corr,asymptotic_corr,mc_corr,mc_n,seed";

/// Exact, asymptotic and sampled correlation for every `theta1` in `grid`.
/// Every row uses the same `seed`.
pub fn corr_scan(grid: &[f64], mc_n: u64, seed: u64) -> Result<Vec<CorrRow>> {
    if grid.is_empty() {
        return Err(Error::Config("correlation scan grid is empty".into()));
    }
    grid.iter()
        .map(|&theta1| {
            let model = UniformErrorModel::new(theta1)?;
            let mc = monte_carlo_moments(model, mc_n, seed)?;
            Ok(CorrRow {
                theta1,
                exact_corr: closed_form_moments(model).corr_xy,
                asymptotic_corr: asymptotic_corr(model),
                mc_corr: mc.corr_xy,
                mc_n,
                seed,
            })
        })
        .collect()
}

pub fn corr_scan_csv(rows: &[CorrRow]) -> String {
    let mut out = String::from(CORR_SCAN_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.theta1, r.exact_corr, r.asymptotic_corr, r.mc_corr, r.mc_n, r.seed
        );
    }
    out
}
