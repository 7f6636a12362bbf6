mod common;

use golden_layer::attribution::*;
use golden_layer::par::Exec;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn phi_is_symmetric_and_matches_the_full_gradient() {
    let (world, model) = common::untrained(3);
    let edits = common::edits(&world, 3);
    for e in &edits {
        let (z, v) = (e.old_sequence(), e.new_sequence());
        // oracle: restrict the full-model gradient to the block's MLP slice
        let (_, gz) = model.loss_and_gradient(&z).unwrap();
        let (_, gv) = model.loss_and_gradient(&v).unwrap();
        for layer in 0..model.n_layers() {
            let a = phi_layer(&model, &z, &v, layer).unwrap();
            let b = phi_layer(&model, &v, &z, layer).unwrap();
            assert_eq!(a, b);
            let r = model.layout.layers[layer].mlp();
            let want: f64 = gz[r.clone()].iter().zip(&gv[r]).map(|(x, y)| x * y).sum();
            assert!(rel(a, want) <= 1e-10, "layer {layer}: {a} vs {want}");
            assert!(phi_layer(&model, &z, &z, layer).unwrap() >= 0.0);
        }
        let contrib = lga_contribution(&model, e).unwrap();
        for (layer, c) in contrib.iter().enumerate() {
            assert!(rel(*c, phi_layer(&model, &z, &v, layer).unwrap()) <= 1e-10);
        }
    }
}

#[test]
fn lga_scores_are_additive_over_the_proxy_set() {
    let (world, model) = common::untrained(4);
    let edits = common::edits(&world, 6);
    let opts = LgaOptions::default();
    let all = lga_scores(&model, &edits, &opts).unwrap();
    let a = lga_scores(&model, &edits[..2], &opts).unwrap();
    let b = lga_scores(&model, &edits[2..], &opts).unwrap();
    for l in 0..model.n_layers() {
        assert!(rel(all.scores[l], a.scores[l] + b.scores[l]) <= 1e-9);
    }
    let seq = lga_scores(&model, &edits, &LgaOptions { exec: Exec::Sequential, ..opts }).unwrap();
    assert_eq!(seq, all);
    assert!(lga_scores(&model, &[], &opts).is_err());
}

#[test]
fn cma_without_noise_has_no_effect() {
    let (world, model) = common::untrained(3);
    let edits = common::edits(&world, 3);
    let opts = CmaOptions {
        noise_multiplier: 0.0,
        noise_seeds: 2,
        ..CmaOptions::default()
    };
    let t = cma_scores(&model, &edits, &opts).unwrap();
    assert!(t.scores.iter().all(|&s| s.abs() < 1e-12), "{:?}", t.scores);
}

#[test]
fn cma_is_deterministic_and_mode_independent() {
    let (world, model) = common::untrained(3);
    let edits = common::edits(&world, 4);
    let par = CmaOptions {
        noise_seeds: 3,
        exec: Exec::Parallel,
        ..CmaOptions::default()
    };
    let seq = CmaOptions { exec: Exec::Sequential, ..par };
    let a = cma_scores(&model, &edits, &par).unwrap();
    assert_eq!(a, cma_scores(&model, &edits, &par).unwrap());
    assert_eq!(a, cma_scores(&model, &edits, &seq).unwrap());
    let other = cma_scores(&model, &edits, &CmaOptions { seed: 9, ..par }).unwrap();
    assert_ne!(a.scores, other.scores);
}

#[test]
fn restoring_the_first_residual_recovers_the_clean_run() {
    let (world, model) = common::untrained(3);
    let opts = CmaOptions {
        site: CmaSite::Residual,
        ..CmaOptions::default()
    };
    for (i, e) in common::edits(&world, 3).iter().enumerate() {
        let sigma = 3.0 * subject_embedding_std(&model, std::slice::from_ref(e));
        let trace = cma_trace(&model, e, sigma, i, &opts).unwrap().unwrap();
        for row in &trace.p_restore {
            assert!((row[0] - trace.p_clean).abs() < 1e-12);
        }
        let all = restore_all_probability(&model, e, sigma, i, &opts).unwrap();
        assert!((all - trace.p_clean).abs() < 1e-12);
    }
}

/// Textbook linear-interpolation quartiles (the "type 7" rule).
fn quartiles(v: &[f64]) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let h = (s.len() - 1) as f64 * p;
        let lo = h.floor();
        s[lo as usize] + (h - lo) * (s[h.ceil() as usize] - s[lo as usize])
    };
    (q(0.25), q(0.75))
}

proptest! {
    #[test]
    fn tukey_matches_the_textbook_rule(v in prop::collection::vec(-100.0f64..100.0, 4..40), k in 0.5f64..3.0) {
        let f = tukey_outliers(&v, k);
        let (q1, q3) = quartiles(&v);
        prop_assert!((f.q1 - q1).abs() <= 1e-12 && (f.q3 - q3).abs() <= 1e-12);
        let (lo, hi) = (q1 - k * (q3 - q1), q3 + k * (q3 - q1));
        let want: Vec<bool> = v.iter().map(|&x| x < lo || x > hi).collect();
        if want.iter().all(|&w| w) {
            prop_assert!(f.flags.iter().all(|&w| !w));
        } else {
            prop_assert_eq!(f.flags, want);
        }
    }

    #[test]
    fn selection_is_scale_invariant(
        scores in prop::collection::vec(-10.0f64..10.0, 1..12),
        mask in prop::collection::vec(any::<bool>(), 12),
        c in 1e-3f64..1e3,
    ) {
        let mask = &mask[..scores.len()];
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let sel = select_layer(&scores, mask);
        prop_assert_eq!(sel, select_layer(&scaled, mask));
        match sel {
            None => prop_assert!(mask.iter().all(|&m| m)),
            Some(i) => {
                prop_assert!(!mask[i]);
                for (j, (&s, &m)) in scores.iter().zip(mask).enumerate() {
                    prop_assert!(m || s < scores[i] || (s == scores[i] && j >= i));
                }
            }
        }
    }
}
