#![allow(dead_code, clippy::too_many_arguments)]

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Moments of `x ~ U(t, 1)`, `y = t / x` by quadrature over `x`:
/// `(mean_x, var_x, mean_y, var_y, cov_xy)`.
pub fn quadrature_moments(t: f64) -> [f64; 5] {
    let density = 1.0 / (1.0 - t);
    let e = |g: &dyn Fn(f64) -> f64| simpson(&|x| g(x) * density, t, 1.0, 1e-13);
    let mx = e(&|x| x);
    let my = e(&|x| t / x);
    let vx = e(&|x| (x - mx) * (x - mx));
    let vy = e(&|x| (t / x - my) * (t / x - my));
    let cxy = e(&|x| (x - mx) * (t / x - my));
    [mx, vx, my, vy, cxy]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
