mod common;

use feedrep::stats::{self, MomentAccumulator, UniformErrorModel};
use proptest::prelude::*;

#[test]
fn closed_forms_match_quadrature_across_thresholds() {
    for t in [0.9, 0.5, 0.3, 1e-3, 1e-5] {
        let q = common::quadrature_moments(t);
        let c = stats::closed_form_moments(UniformErrorModel::new(t).unwrap());
        for (name, a, b) in [
            ("mean_x", c.mean_x, q[0]),
            ("var_x", c.var_x, q[1]),
            ("mean_y", c.mean_y, q[2]),
            ("var_y", c.var_y, q[3]),
            ("cov_xy", c.cov_xy, q[4]),
        ] {
            assert!(common::rel_err(a, b) < 1e-8, "{name} at {t}: {a} vs {b}");
        }
    }
}

#[test]
fn inverse_pdf_integrates_to_one() {
    for t in [0.5, 0.1, 0.01] {
        let m = UniformErrorModel::new(t).unwrap();
        let mass = common::simpson(&|y| stats::inverse_pdf(y, m), t, 1.0, 1e-12);
        assert!((mass - 1.0).abs() < 1e-9, "{t}: {mass}");
    }
}

#[test]
fn corr_scan_rows_follow_grid() {
    let grid = [0.3, 0.03, 0.003];
    let rows = stats::corr_scan(&grid, 5000, 9).unwrap();
    assert_eq!(rows.iter().map(|r| r.theta1).collect::<Vec<_>>(), grid);
    assert!(rows.iter().all(|r| r.seed == 9 && r.mc_n == 5000));
    let csv = stats::corr_scan_csv(&rows);
    assert_eq!(csv.lines().count(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_matches_sequential(xs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..200), cut in 0usize..200) {
        let cut = cut.min(xs.len());
        let mut all = MomentAccumulator::default();
        let (mut a, mut b) = (MomentAccumulator::default(), MomentAccumulator::default());
        for (i, &(x, y)) in xs.iter().enumerate() {
            all.push(x, y);
            if i < cut { a.push(x, y) } else { b.push(x, y) }
        }
        a.merge(&b);
        let (m1, m2) = (all.moments().unwrap(), a.moments().unwrap());
        for ((_, u), (_, v)) in m1.fields().iter().zip(m2.fields().iter()) {
            if u.is_finite() {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn correlation_is_negative(t in 1e-9f64..0.99) {
        let c = stats::closed_form_moments(UniformErrorModel::new(t).unwrap()).corr_xy;
        prop_assert!((-1.0..0.0).contains(&c));
    }
}
