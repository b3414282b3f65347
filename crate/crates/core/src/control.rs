//! Rational transfer functions and the open-loop / closed-loop comparison.
//!
//! Training processes are treated as linear time-invariant blocks: `T1` maps
//! the expected residual function to the learned one, `T2` is the detector
//! branch. Without feedback the input-output map is `T1` itself; with the
//! detector in the loop it becomes
//!
//! ```text
//! H = T1 T2 / (1 + T1 T2) * (1 + 1 / T2)
//! ```
//!
//! which tends to the identity when `T2` is large or contains an integrator.

use std::fmt::{self, Write as _};
use std::ops::{Add, Mul};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold on `|den(s)|` below which `s` is treated as a pole.
pub const POLE_TOLERANCE: f64 = 1e-12;

/// Real polynomial in `s`, coefficients in ascending powers. Trailing zeros
/// are trimmed, the zero polynomial has no coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Poly(Vec<f64>);

impl Poly {
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        while coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        Poly(coeffs)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c])
    }

    /// The monomial `s`.
    pub fn s() -> Self {
        Poly(vec![0.0, 1.0])
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> Option<usize> {
        self.0.len().checked_sub(1)
    }

    /// Power of the lowest nonzero term.
    pub fn lowest_order(&self) -> Option<usize> {
        self.0.iter().position(|&c| c != 0.0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.0.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Horner evaluation.
    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.0
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c)
    }

    fn shift_down(&self, k: usize) -> Poly {
        Poly(self.0[k.min(self.0.len())..].to_vec())
    }
}

impl From<Vec<f64>> for Poly {
    fn from(v: Vec<f64>) -> Self {
        Poly::new(v)
    }
}

impl From<Poly> for Vec<f64> {
    fn from(p: Poly) -> Self {
        p.0
    }
}

impl Add for &Poly {
    type Output = Poly;

    fn add(self, rhs: &Poly) -> Poly {
        let n = self.0.len().max(rhs.0.len());
        let coeffs = (0..n)
            .map(|i| self.0.get(i).copied().unwrap_or(0.0) + rhs.0.get(i).copied().unwrap_or(0.0))
            .collect();
        Poly::new(coeffs)
    }
}

impl Mul for &Poly {
    type Output = Poly;

    fn mul(self, rhs: &Poly) -> Poly {
        if self.is_zero() || rhs.is_zero() {
            return Poly(Vec::new());
        }
        let mut out = vec![0.0; self.0.len() + rhs.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in rhs.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly::new(out)
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let terms: Vec<String> = self
            .0
            .iter()
            .enumerate()
            .rev()
            .filter(|(_, c)| **c != 0.0)
            .map(|(k, c)| match k {
                0 => format!("{c}"),
                1 => format!("{c}s"),
                _ => format!("{c}s^{k}"),
            })
            .collect();
        write!(f, "{}", terms.join(" + ").replace("+ -", "- "))
    }
}

/// `num(s) / den(s)` with a nonzero denominator.
///
/// The only simplification ever applied is removal of a common `s^k` factor,
/// which is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalTF {
    num: Poly,
    den: Poly,
}

/// Limit of a transfer function as `s -> 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DcGain {
    Finite(f64),
    Divergent,
}

impl DcGain {
    pub fn finite(self) -> Option<f64> {
        match self {
            DcGain::Finite(v) => Some(v),
            DcGain::Divergent => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfOp {
    Add,
    Mul,
    Div,
}

impl RationalTF {
    pub fn new(num: impl Into<Poly>, den: impl Into<Poly>) -> Result<Self> {
        let (num, den) = (num.into(), den.into());
        if den.is_zero() {
            return Err(Error::ZeroDivisor);
        }
        if num.0.iter().chain(&den.0).any(|c| !c.is_finite()) {
            return Err(Error::Domain("transfer function coefficients must be finite".into()));
        }
        Ok(Self::cancel_monomial(num, den))
    }

    pub fn constant(c: f64) -> Self {
        Self {
            num: Poly::constant(c),
            den: Poly::constant(1.0),
        }
    }

    /// `gain / s`.
    pub fn integrator(gain: f64) -> Self {
        Self {
            num: Poly::constant(gain),
            den: Poly::s(),
        }
    }

    pub fn num(&self) -> &Poly {
        &self.num
    }

    pub fn den(&self) -> &Poly {
        &self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    fn cancel_monomial(num: Poly, den: Poly) -> Self {
        if num.is_zero() {
            return Self {
                num,
                den: Poly::constant(1.0),
            };
        }
        let k = num
            .lowest_order()
            .unwrap_or(0)
            .min(den.lowest_order().unwrap_or(0));
        if k == 0 {
            Self { num, den }
        } else {
            Self {
                num: num.shift_down(k),
                den: den.shift_down(k),
            }
        }
    }

    pub fn add(&self, other: &RationalTF) -> RationalTF {
        if self.den == other.den {
            return Self::cancel_monomial(&self.num + &other.num, self.den.clone());
        }
        let num = &(&self.num * &other.den) + &(&other.num * &self.den);
        Self::cancel_monomial(num, &self.den * &other.den)
    }

    pub fn mul(&self, other: &RationalTF) -> RationalTF {
        Self::cancel_monomial(&self.num * &other.num, &self.den * &other.den)
    }

    pub fn div(&self, other: &RationalTF) -> Result<RationalTF> {
        if other.is_zero() {
            return Err(Error::ZeroDivisor);
        }
        Ok(Self::cancel_monomial(
            &self.num * &other.den,
            &self.den * &other.num,
        ))
    }

    pub fn recip(&self) -> Result<RationalTF> {
        RationalTF::constant(1.0).div(self)
    }

    pub fn arith(&self, other: &RationalTF, op: TfOp) -> Result<RationalTF> {
        match op {
            TfOp::Add => Ok(self.add(other)),
            TfOp::Mul => Ok(self.mul(other)),
            TfOp::Div => self.div(other),
        }
    }

    pub fn evaluate(&self, s: Complex64) -> Result<Complex64> {
        let den = self.den.eval(s);
        if den.norm() < POLE_TOLERANCE * self.den.max_abs_coeff() {
            return Err(Error::Pole { re: s.re, im: s.im });
        }
        Ok(self.num.eval(s) / den)
    }

    /// Evaluates at `s = i * omega`.
    pub fn frequency_response(&self, omega: f64) -> Result<Complex64> {
        self.evaluate(Complex64::new(0.0, omega))
    }

    pub fn dc_gain(&self) -> DcGain {
        let Some(n) = self.num.lowest_order() else {
            return DcGain::Finite(0.0);
        };
        let d = self
            .den
            .lowest_order()
            .expect("denominator is never the zero polynomial");
        match n.cmp(&d) {
            std::cmp::Ordering::Equal => DcGain::Finite(self.num.0[n] / self.den.0[d]),
            std::cmp::Ordering::Greater => DcGain::Finite(0.0),
            std::cmp::Ordering::Less => DcGain::Divergent,
        }
    }
}

impl fmt::Display for RationalTF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) / ({})", self.num, self.den)
    }
}

/// Holistic transfer function of the feedback architecture, built in the
/// product form `T1 T2 / (1 + T1 T2) * (1 + 1 / T2)`.
pub fn holistic_closed_loop(t_phi1: &RationalTF, t_phi: &RationalTF) -> Result<RationalTF> {
    let one = RationalTF::constant(1.0);
    let loop_gain = t_phi1.mul(t_phi);
    let tracking = loop_gain.div(&one.add(&loop_gain))?;
    let correction = one.add(&t_phi.recip()?);
    Ok(tracking.mul(&correction))
}

/// The algebraically simplified closed loop `T1 (1 + T2) / (1 + T1 T2)`.
pub fn holistic_closed_loop_simplified(
    t_phi1: &RationalTF,
    t_phi: &RationalTF,
) -> Result<RationalTF> {
    let one = RationalTF::constant(1.0);
    t_phi1
        .mul(&one.add(t_phi))
        .div(&one.add(&t_phi1.mul(t_phi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub omega: f64,
    /// `|T1(i w) - 1|`, `None` at a pole.
    pub open_loop_gap: Option<f64>,
    /// `|H(i w) - 1|`, `None` at a pole.
    pub closed_loop_gap: Option<f64>,
}

pub const IDENTITY_GAP_HEADER: &str = "omega,open_loop_gap,closed_loop_gap";

/// Distance from the identity of the open-loop and closed-loop responses
/// at each frequency. Poles produce per-row markers, not errors.
pub fn identity_gap(
    t_phi1: &RationalTF,
    t_phi: &RationalTF,
    freqs: &[f64],
) -> Result<Vec<GapRow>> {
    if let Some(bad) = freqs.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Domain(format!("frequency must be finite and nonnegative, got {bad}")));
    }
    let closed = holistic_closed_loop(t_phi1, t_phi)?;
    let gap = |tf: &RationalTF, w: f64| tf.frequency_response(w).ok().map(|v| (v - 1.0).norm());
    Ok(freqs
        .iter()
        .map(|&omega| GapRow {
            omega,
            open_loop_gap: gap(t_phi1, omega),
            closed_loop_gap: gap(&closed, omega),
        })
        .collect())
}

/// `points` logarithmically spaced frequencies on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            let step = (b - a) / (points - 1) as f64;
            (0..points)
                .map(|i| 10f64.powf(a + step * i as f64))
                .collect()
        }
    }
}

/// Default report grid: 61 points on `[1e-3, 1e3]`.
pub fn default_frequency_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 61)
}

/// CSV rows; poles are written as `pole`.
pub fn identity_gap_csv(rows: &[GapRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "pole".to_string(), |x| x.to_string());
    let mut out = String::from(IDENTITY_GAP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.omega,
            cell(r.open_loop_gap),
            cell(r.closed_loop_gap)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn poly_trims_and_evaluates() {
        let p = Poly::new(vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(p.coeffs(), &[1.0, 2.0]);
        assert_eq!(p.degree(), Some(1));
        assert!(Poly::new(vec![0.0, 0.0]).is_zero());
        assert_eq!(p.eval(c(2.0, 0.0)), c(5.0, 0.0));
        assert_eq!(format!("{}", Poly::new(vec![1.0, -2.0, 3.0])), "3s^2 - 2s + 1");
    }

    #[test]
    fn arith_examples() {
        let one = RationalTF::constant(1.0);
        assert_eq!(one.arith(&one, TfOp::Add).unwrap(), RationalTF::constant(2.0));

        let k = 3.5;
        let s_over_1 = RationalTF::new(Poly::s(), Poly::constant(1.0)).unwrap();
        let prod = RationalTF::integrator(k).arith(&s_over_1, TfOp::Mul).unwrap();
        assert_eq!(prod, RationalTF::constant(k));

        let q = one.arith(&RationalTF::integrator(k), TfOp::Div).unwrap();
        assert_eq!(q.dc_gain(), DcGain::Finite(0.0));
        let v = q.evaluate(c(2.0, 0.0)).unwrap();
        assert!((v - c(2.0 / k, 0.0)).norm() < 1e-15);

        let zero = RationalTF::constant(0.0);
        assert!(matches!(one.div(&zero), Err(Error::ZeroDivisor)));
        assert!(matches!(RationalTF::new(vec![1.0], vec![0.0]), Err(Error::ZeroDivisor)));
    }

    #[test]
    fn no_cancellation_of_non_monomial_factors() {
        // (s + 1) / (s + 1) stays unreduced.
        let a = RationalTF::new(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.num().coeffs(), &[1.0, 1.0]);
        assert_eq!(a.den().coeffs(), &[1.0, 1.0]);
    }

    #[test]
    fn evaluate_examples() {
        let k = 10.0;
        assert_eq!(RationalTF::constant(0.8).evaluate(c(3.0, -1.0)).unwrap(), c(0.8, 0.0));
        let v = RationalTF::integrator(k).evaluate(c(0.0, 1.0)).unwrap();
        assert!((v - c(0.0, -k)).norm() < 1e-15);
        let h = RationalTF::new(vec![0.8 * k, 0.8], vec![0.8 * k, 1.0]).unwrap();
        assert_eq!(h.evaluate(c(0.0, 0.0)).unwrap(), c(1.0, 0.0));
        assert!(matches!(
            RationalTF::integrator(k).evaluate(c(0.0, 0.0)),
            Err(Error::Pole { .. })
        ));
    }

    #[test]
    fn dc_gain_examples() {
        let k = 7.0;
        assert_eq!(RationalTF::constant(0.8).dc_gain(), DcGain::Finite(0.8));
        let h = RationalTF::new(vec![0.8 * k, 0.8], vec![0.8 * k, 1.0]).unwrap();
        assert_eq!(h.dc_gain(), DcGain::Finite(1.0));
        assert_eq!(RationalTF::integrator(k).dc_gain(), DcGain::Divergent);
        assert_eq!(RationalTF::constant(0.0).dc_gain(), DcGain::Finite(0.0));
    }

    #[test]
    fn holistic_examples() {
        let h = holistic_closed_loop(&RationalTF::constant(0.8), &RationalTF::constant(10.0)).unwrap();
        let h0 = h.dc_gain().finite().unwrap();
        assert!((h0 - 8.0 / 9.0 * 1.1).abs() < 1e-12);
        assert!((h0 - 1.0).abs() < 0.2);

        let h = holistic_closed_loop(&RationalTF::constant(0.8), &RationalTF::integrator(10.0)).unwrap();
        assert_eq!(h.dc_gain(), DcGain::Finite(1.0));

        for cst in [0.3, 2.0, 50.0, -4.0] {
            let h = holistic_closed_loop(&RationalTF::constant(1.0), &RationalTF::constant(cst)).unwrap();
            assert!((h.dc_gain().finite().unwrap() - 1.0).abs() < 1e-15, "c = {cst}");
        }

        assert!(holistic_closed_loop(&RationalTF::constant(0.8), &RationalTF::constant(0.0)).is_err());
    }

    #[test]
    fn identity_gap_examples() {
        let rows = identity_gap(&RationalTF::constant(0.8), &RationalTF::constant(100.0), &[0.0]).unwrap();
        assert!((rows[0].open_loop_gap.unwrap() - 0.2).abs() < 1e-15);
        let expected = 1.0 - 80.0 / 81.0 * 1.01;
        assert!((rows[0].closed_loop_gap.unwrap() - expected).abs() < 1e-12);
        assert!((rows[0].closed_loop_gap.unwrap() - 0.00247).abs() < 1e-5);

        let freqs = default_frequency_grid();
        assert_eq!(freqs.len(), 61);
        let rows = identity_gap(&RationalTF::constant(1.0), &RationalTF::constant(3.0), &freqs).unwrap();
        assert!(rows.iter().all(|r| r.open_loop_gap == Some(0.0)));

        let rows = identity_gap(&RationalTF::constant(0.8), &RationalTF::integrator(10.0), &[0.0, 0.01]).unwrap();
        assert_eq!(rows[0].closed_loop_gap, Some(0.0));
        assert!(rows[1].closed_loop_gap.unwrap() < 0.2);

        // A plant with a pole on the grid yields a marker row.
        let rows = identity_gap(&RationalTF::integrator(1.0), &RationalTF::constant(2.0), &[0.0, 1.0]).unwrap();
        assert_eq!(rows[0].open_loop_gap, None);
        assert!(rows[1].open_loop_gap.is_some());
        assert!(identity_gap_csv(&rows).lines().nth(1).unwrap().contains("pole"));
        assert!(identity_gap(&RationalTF::constant(1.0), &RationalTF::constant(1.0), &[-1.0]).is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-3, 1e3, 61);
        assert!((g[0] - 1e-3).abs() < 1e-18);
        assert!((g[60] - 1e3).abs() < 1e-9);
        assert!((g[30] - 1.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}
