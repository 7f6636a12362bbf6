use golden_layer::eval::{t_test, stats::student_two_sided};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Textbook Welch statistic, written out independently of the crate.
fn welch(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
    };
    let (qa, qb) = (var(a) / a.len() as f64, var(b) / b.len() as f64);
    let t = (mean(a) - mean(b)) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa.powi(2) / (a.len() as f64 - 1.0) + qb.powi(2) / (b.len() as f64 - 1.0));
    (t, df)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn worked_example() {
    let r = t_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert!((r.t + 3.674_234_614_174_767).abs() < 1e-12);
    assert!((r.df - 4.0).abs() < 1e-12);
    let oracle = 2.0 * StudentsT::new(0.0, 1.0, 4.0).unwrap().cdf(r.t);
    assert!(rel(r.p, oracle) < 1e-9);
    assert!((r.p - 0.0213).abs() < 1e-3);
    assert!(r.different);
}

proptest! {
    #[test]
    fn matches_independent_welch(
        a in prop::collection::vec(-50.0f64..50.0, 2..30),
        b in prop::collection::vec(-50.0f64..50.0, 2..30),
    ) {
        let r = t_test(&a, &b).unwrap();
        let (t, df) = welch(&a, &b);
        prop_assume!(t.is_finite());
        prop_assert!(rel(r.t, t) <= 1e-9);
        prop_assert!(rel(r.df, df) <= 1e-9);
        let p = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs());
        prop_assert!(rel(r.p, p) <= 1e-9, "p {} vs {}", r.p, p);
        prop_assert_eq!(r.different, r.p < 0.05);
    }

    #[test]
    fn self_comparison_is_never_different(a in prop::collection::vec(-5.0f64..5.0, 2..20)) {
        let r = t_test(&a, &a).unwrap();
        prop_assert!(!r.different);
        prop_assert_eq!(r.p, 1.0);
    }

    #[test]
    fn p_decreases_with_abs_t(df in 1.0f64..60.0, t1 in 0.0f64..8.0, dt in 0.001f64..4.0) {
        prop_assert!(student_two_sided(t1 + dt, df) <= student_two_sided(t1, df));
        prop_assert_eq!(student_two_sided(-t1, df), student_two_sided(t1, df));
    }
}
