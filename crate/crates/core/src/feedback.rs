//! Detector targets, error recovery and the compensation update.
//!
//! The residual map function `phi1` predicts a residual map from an observed
//! patch. The error detector `phi` is trained on the truncated inverse of the
//! residual error, `min(1, theta1 / |r - phi1|)`. At inference the detector
//! output is turned back into an error estimate `theta1 / phi - theta1` and
//! fed to `phi1` through `phi1 - err * (1 - 2 * phi1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to detector outputs before recovering an error.
pub const EPSILON_PHI: f64 = 1e-6;

/// Tolerance threshold for residual map errors, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(theta1: f64) -> Result<Self> {
        if theta1 > 0.0 && theta1 < 1.0 {
            Ok(Self(theta1))
        } else {
            Err(Error::InvalidThreshold(theta1))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Threshold {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

/// Row-major 2-D grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMap(format!(
                "dimensions must be at least 1, got {width}x{height}"
            )));
        }
        if width * height != values.len() {
            return Err(Error::InvalidMap(format!(
                "{width}x{height} grid needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn check_same_shape(&self, other: &Grid) -> Result<()> {
        if self.width == other.width && self.height == other.height {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                left_width: self.width,
                left_height: self.height,
                right_width: other.width,
                right_height: other.height,
            })
        }
    }
}

macro_rules! map_newtype {
    ($(#[$meta:meta])* $name:ident, $check:expr, $desc:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Grid);

        impl $name {
            pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
                Self::from_grid(Grid::new(width, height, values)?)
            }

            pub fn from_grid(grid: Grid) -> Result<Self> {
                let check: fn(f64) -> bool = $check;
                if let Some(bad) = grid.values.iter().find(|v| !check(**v)) {
                    return Err(Error::InvalidMap(format!(
                        concat!("value {} outside ", $desc),
                        bad
                    )));
                }
                Ok(Self(grid))
            }

            pub fn grid(&self) -> &Grid {
                &self.0
            }

            pub fn width(&self) -> usize {
                self.0.width
            }

            pub fn height(&self) -> usize {
                self.0.height
            }

            pub fn values(&self) -> &[f64] {
                &self.0.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.0.values
            }
        }
    };
}

map_newtype!(
    /// Residual intensities in `[0, 1]`.
    ResidualMap,
    |v| (0.0..=1.0).contains(&v),
    "[0, 1]"
);
map_newtype!(
    /// Detector outputs or targets in `(0, 1]`.
    DetectorMap,
    |v| v > 0.0 && v <= 1.0,
    "(0, 1]"
);
map_newtype!(
    /// Recovered residual errors, all nonnegative.
    ErrorMap,
    |v| v >= 0.0 && !v.is_nan(),
    "[0, inf)"
);

impl DetectorMap {
    /// Builds a detector map from raw outputs, clamping each into `[EPSILON_PHI, 1]`.
    pub fn from_raw_clamped(width: usize, height: usize, raw: &[f64]) -> Result<Self> {
        let values = raw.iter().map(|&v| clamp_detector(v)).collect();
        Self::new(width, height, values)
    }
}

/// Truncated inverse `min(1, theta1 / abs_err)`.
///
/// Errors at or below the threshold (zero included) take the truncation
/// branch and never reach the division.
#[inline]
pub fn detector_target(abs_err: f64, theta1: Threshold) -> f64 {
    let t = theta1.get();
    if abs_err <= t {
        1.0
    } else {
        (t / abs_err).min(1.0)
    }
}

pub fn detector_target_map(
    residual_truth: &ResidualMap,
    residual_pred: &ResidualMap,
    theta1: Threshold,
) -> Result<DetectorMap> {
    residual_truth.grid().check_same_shape(residual_pred.grid())?;
    let values = residual_truth
        .values()
        .iter()
        .zip(residual_pred.values())
        .map(|(r, p)| detector_target((r - p).abs(), theta1))
        .collect();
    DetectorMap::new(residual_truth.width(), residual_truth.height(), values)
}

/// Clamps a raw detector output into `[EPSILON_PHI, 1]`. NaN maps to `EPSILON_PHI`.
#[inline]
pub fn clamp_detector(phi: f64) -> f64 {
    if phi.is_nan() {
        EPSILON_PHI
    } else {
        phi.clamp(EPSILON_PHI, 1.0)
    }
}

/// Error recovered from a detector output, `theta1 / phi - theta1`.
pub fn err_from_detector(phi: f64, theta1: Threshold) -> Result<f64> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(Error::Domain(format!(
            "detector output must lie in (0, 1], got {phi}"
        )));
    }
    let t = theta1.get();
    Ok(t / phi - t)
}

/// The unclamped compensation update `phi1 - err * (1 - 2 * phi1)`.
#[inline]
pub fn compensate_raw(phi1: f64, err: f64) -> f64 {
    phi1 - err * (1.0 - 2.0 * phi1)
}

/// Compensation update clamped back into `[0, 1]`.
#[inline]
pub fn compensate(phi1: f64, err: f64) -> f64 {
    compensate_raw(phi1, err).clamp(0.0, 1.0)
}

pub fn error_map(detector_map: &DetectorMap, theta1: Threshold) -> Result<ErrorMap> {
    let values = detector_map
        .values()
        .iter()
        .map(|&phi| err_from_detector(phi, theta1))
        .collect::<Result<Vec<_>>>()?;
    ErrorMap::new(detector_map.width(), detector_map.height(), values)
}

pub fn compensate_map(
    phi1_map: &ResidualMap,
    detector_map: &DetectorMap,
    theta1: Threshold,
) -> Result<ResidualMap> {
    phi1_map.grid().check_same_shape(detector_map.grid())?;
    let values = phi1_map
        .values()
        .iter()
        .zip(detector_map.values())
        .map(|(&p, &phi)| Ok(compensate(p, err_from_detector(phi, theta1)?)))
        .collect::<Result<Vec<_>>>()?;
    ResidualMap::new(phi1_map.width(), phi1_map.height(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn th(t: f64) -> Threshold {
        Threshold::new(t).unwrap()
    }

    #[test]
    fn threshold_bounds() {
        assert!(Threshold::new(0.0).is_err());
        assert!(Threshold::new(1.0).is_err());
        assert!(Threshold::new(f64::NAN).is_err());
        assert_eq!(Threshold::new(0.05).unwrap().get(), 0.05);
        let parsed: Threshold = serde_json::from_str("0.1").unwrap();
        assert_eq!(parsed.get(), 0.1);
        assert!(serde_json::from_str::<Threshold>("1.5").is_err());
    }

    #[test]
    fn detector_target_examples() {
        assert!((detector_target(0.25, th(0.05)) - 0.2).abs() < 1e-15);
        assert_eq!(detector_target(0.01, th(0.05)), 1.0);
        assert_eq!(detector_target(0.05, th(0.05)), 1.0);
        assert_eq!(detector_target(0.0, th(0.05)), 1.0);
    }

    #[test]
    fn detector_target_map_examples() {
        let m = ResidualMap::new(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let ones = detector_target_map(&m, &m, th(0.1)).unwrap();
        assert!(ones.values().iter().all(|&v| v == 1.0));

        let truth = ResidualMap::new(1, 1, vec![0.9]).unwrap();
        let pred = ResidualMap::new(1, 1, vec![0.4]).unwrap();
        let d = detector_target_map(&truth, &pred, th(0.05)).unwrap();
        assert!((d.values()[0] - 0.1).abs() < 1e-15);

        let truth = ResidualMap::new(2, 2, vec![0.2; 4]).unwrap();
        let pred = ResidualMap::new(2, 2, vec![0.2, 0.3, 0.5, 0.2]).unwrap();
        let d = detector_target_map(&truth, &pred, th(0.1)).unwrap();
        let expected = [1.0, 1.0, 1.0 / 3.0, 1.0];
        for (got, want) in d.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = ResidualMap::new(2, 1, vec![0.0, 0.0]).unwrap();
        let b = ResidualMap::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            detector_target_map(&a, &b, th(0.1)),
            Err(Error::ShapeMismatch { .. })
        ));
        let d = DetectorMap::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            compensate_map(&a, &d, th(0.1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn map_validation() {
        assert!(ResidualMap::new(0, 1, vec![]).is_err());
        assert!(ResidualMap::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ResidualMap::new(1, 1, vec![1.5]).is_err());
        assert!(DetectorMap::new(1, 1, vec![0.0]).is_err());
        assert!(ErrorMap::new(1, 1, vec![-0.1]).is_err());
        let d = DetectorMap::from_raw_clamped(3, 1, &[-1.0, 2.0, f64::NAN]).unwrap();
        assert_eq!(d.values(), &[EPSILON_PHI, 1.0, EPSILON_PHI]);
    }

    #[test]
    fn err_from_detector_examples() {
        assert_eq!(err_from_detector(1.0, th(0.05)).unwrap(), 0.0);
        assert!((err_from_detector(0.2, th(0.05)).unwrap() - 0.2).abs() < 1e-15);
        assert!((err_from_detector(0.5, th(0.1)).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(err_from_detector(0.0, th(0.1)), Err(Error::Domain(_))));
        assert!(err_from_detector(-0.3, th(0.1)).is_err());
        assert!(err_from_detector(1.2, th(0.1)).is_err());
    }

    #[test]
    fn compensate_examples() {
        assert_eq!(compensate(0.5, 0.7), 0.5);
        assert_eq!(compensate(0.3, 0.0), 0.3);
        assert!((compensate(0.2, 0.1) - 0.14).abs() < 1e-15);
        assert!((compensate(0.8, 0.1) - 0.86).abs() < 1e-15);
        // Raw variant leaves the formula value unclamped.
        assert!((compensate_raw(0.9, 2.0) - 2.5).abs() < 1e-15);
        assert_eq!(compensate(0.9, 2.0), 1.0);
    }

    #[test]
    fn compensate_map_examples() {
        let phi1 = ResidualMap::new(2, 1, vec![0.3, 0.7]).unwrap();
        let ones = DetectorMap::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(compensate_map(&phi1, &ones, th(0.05)).unwrap(), phi1);

        let half = ResidualMap::new(2, 1, vec![0.5, 0.5]).unwrap();
        let det = DetectorMap::new(2, 1, vec![0.1, 0.9]).unwrap();
        for t in [0.01, 0.3, 0.9] {
            assert_eq!(compensate_map(&half, &det, th(t)).unwrap(), half);
        }

        let phi1 = ResidualMap::new(1, 1, vec![0.2]).unwrap();
        let det = DetectorMap::new(1, 1, vec![0.2]).unwrap();
        let out = compensate_map(&phi1, &det, th(0.05)).unwrap();
        assert!((out.values()[0] - 0.08).abs() < 1e-15);

        let errs = error_map(&det, th(0.05)).unwrap();
        assert!((errs.values()[0] - 0.2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn target_is_one_iff_below_threshold(e in 0.0f64..2.0, t in 0.001f64..0.999) {
            let v = detector_target(e, th(t));
            prop_assert!(v > 0.0 && v <= 1.0);
            prop_assert_eq!(v == 1.0, e <= t);
        }

        #[test]
        fn perfect_detector_round_trip(e in 0.0f64..1.0, t in 0.001f64..0.999) {
            let err = err_from_detector(detector_target(e, th(t)), th(t)).unwrap();
            if e <= t {
                prop_assert_eq!(err, 0.0);
            } else {
                prop_assert!((err - (e - t)).abs() < 1e-12);
            }
        }

        #[test]
        fn err_strictly_decreasing(a in 1e-6f64..1.0, b in 1e-6f64..1.0, t in 0.001f64..0.999) {
            prop_assume!(a < b);
            prop_assert!(err_from_detector(a, th(t)).unwrap() > err_from_detector(b, th(t)).unwrap());
        }

        #[test]
        fn compensate_fixed_point_and_identity(p in 0.0f64..=1.0, err in 0.0f64..10.0) {
            prop_assert_eq!(compensate(0.5, err), 0.5);
            prop_assert_eq!(compensate(p, 0.0), p);
        }

        #[test]
        fn compensate_is_affine_in_err(p in 0.0f64..=1.0, err in 0.0f64..10.0) {
            let slope = -(1.0 - 2.0 * p);
            prop_assert_eq!(compensate_raw(p, err), p + slope * err);
        }

        #[test]
        fn sign_aligned_improvement(p in 0.0f64..=1.0, r in 0.0f64..=1.0, t in 0.001f64..0.5) {
            let e = p - r;
            let dir = 1.0 - 2.0 * p;
            prop_assume!(e != 0.0 && dir != 0.0 && e.signum() == dir.signum());
            let err = err_from_detector(detector_target(e.abs(), th(t)), th(t)).unwrap();
            let after = (compensate_raw(p, err) - r).abs();
            // The error shrinks by err * |1 - 2p|, never by more than |e|.
            prop_assert!((after - (e.abs() - err * dir.abs())).abs() < 1e-12);
            prop_assert!(after <= e.abs() + 1e-15);
            if e.abs() > t {
                prop_assert!(after < e.abs());
            }
            // The clamped update is never worse than the raw one for a target in [0, 1].
            prop_assert!((compensate(p, err) - r).abs() <= after + 1e-15);
        }
    }
}
