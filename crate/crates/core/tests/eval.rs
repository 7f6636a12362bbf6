mod common;

use golden_layer::editors::{estimate_covariances, CovarianceSite, EditorKind, EditorSpec};
use golden_layer::eval::*;
use golden_layer::par::Exec;

fn sweep_opts(metric: SelectionMetric) -> SweepOptions {
    SweepOptions {
        metric,
        ..SweepOptions::default()
    }
}

fn covs(world: &golden_layer::corpus::FactWorld, model: &golden_layer::model::ToyModel) -> Vec<golden_layer::editors::CovarianceEstimate> {
    estimate_covariances(model, &world.training_sequences(), &world.entities, 1e-2, CovarianceSite::AllPositions, Exec::default()).unwrap()
}

#[test]
fn sweep_report_matches_a_hand_recomputation() {
    let (world, model) = common::trained();
    let cs = covs(&world, &model);
    let edits = common::edits(&world, 5);
    let spec = EditorSpec::new(EditorKind::RRome, 0);
    let sweep = layer_sweep(&model, &edits, &spec, &cs, &sweep_opts(SelectionMetric::Overall)).unwrap();
    let (nl, n) = (model.n_layers(), edits.len());
    assert_eq!(sweep.outcomes.rows.len(), nl * n);

    let grid: Vec<Vec<f64>> = (0..nl)
        .map(|l| {
            (0..n)
                .map(|s| {
                    let row = sweep.outcomes.rows.iter().find(|r| r.layer == l && r.sample_id == edits[s].id).unwrap();
                    row.metrics.overall
                })
                .collect()
        })
        .collect();
    let layer_mean: Vec<f64> = grid.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let mut golden = 0;
    for l in 1..nl {
        if layer_mean[l] > layer_mean[golden] {
            golden = l;
        }
    }
    let best: Vec<f64> = (0..n).map(|s| (0..nl).map(|l| grid[l][s]).fold(f64::MIN, f64::max)).collect();
    let optimum = best.iter().sum::<f64>() / n as f64;

    let r = &sweep.report;
    assert_eq!(r.golden_layer, golden);
    assert!((r.sample_wise_optimal_score - optimum).abs() < 1e-12);
    assert!(r.sample_wise_optimal_score + 1e-12 >= r.golden_score);
    for l in 0..nl {
        assert!((r.deviation[l] - (layer_mean[l] - optimum).abs()).abs() < 1e-12);
    }
    let t = t_test(&best, &grid[golden]).unwrap();
    assert_eq!(r.t_test, Some(t));

    // the CSV alone regenerates the report
    let back = OutcomeMatrix::from_csv(&sweep.outcomes.to_csv()).unwrap();
    let again = SweepReport::from_outcomes(&back, SelectionMetric::Overall, &MetricWeights::default()).unwrap();
    let mut want = r.clone();
    want.diagnostics.retain(|d| d.starts_with("t-test"));
    assert_eq!(again, want);
}

#[test]
fn single_layer_sweep_has_no_gap() {
    let (world, model) = common::untrained(1);
    let cs = covs(&world, &model);
    let edits = common::edits(&world, 3);
    let mut spec = EditorSpec::new(EditorKind::Rome, 0);
    spec.value.steps = 3;
    let s = layer_sweep(&model, &edits, &spec, &cs, &sweep_opts(SelectionMetric::Rewrite)).unwrap();
    let r = &s.report;
    assert_eq!(r.golden_layer, 0);
    assert_eq!(r.per_sample_best, vec![0; 3]);
    assert_eq!(r.deviation, vec![0.0]);
    assert_eq!(r.golden_score, r.sample_wise_optimal_score);
    let t = r.t_test.unwrap();
    assert!(!t.different);
    assert_eq!(t.p, 1.0);
}

#[test]
fn sweep_is_mode_independent_and_rejects_bad_input() {
    let (world, model) = common::untrained(2);
    let cs = covs(&world, &model);
    let edits = common::edits(&world, 3);
    let mut spec = EditorSpec::new(EditorKind::RRome, 0);
    spec.value.steps = 3;
    let par = layer_sweep(&model, &edits, &spec, &cs, &SweepOptions { exec: Exec::Parallel, ..SweepOptions::default() }).unwrap();
    let seq = layer_sweep(&model, &edits, &spec, &cs, &SweepOptions { exec: Exec::Sequential, ..SweepOptions::default() }).unwrap();
    assert_eq!(par, seq);
    assert!(layer_sweep(&model, &[], &spec, &cs, &SweepOptions::default()).is_err());
    assert!(layer_sweep(&model, &edits, &spec, &cs[..1], &SweepOptions::default()).is_err());
    let mut dup = edits.clone();
    dup[1].id = dup[0].id.clone();
    assert!(layer_sweep(&model, &dup, &spec, &cs, &SweepOptions::default()).is_err());
}

#[test]
fn proxy_protocol_from_grid_matches_separate_sweeps() {
    let (world, model) = common::untrained(2);
    let cs = covs(&world, &model);
    let edits = common::edits(&world, 10);
    let mut spec = EditorSpec::new(EditorKind::RRome, 0);
    spec.value.steps = 3;
    let opts = SweepOptions::default();
    let direct = proxy_generalization(&model, &edits, &spec, &cs, 0.5, 3, &opts).unwrap();
    let full = layer_sweep(&model, &edits, &spec, &cs, &opts).unwrap();
    let (p, t) = golden_layer::corpus::split_proxy_test(&edits, 0.5, 3).unwrap();
    let pid: Vec<String> = p.iter().map(|e| e.id.clone()).collect();
    let tid: Vec<String> = t.iter().map(|e| e.id.clone()).collect();
    let from = proxy_generalization_from(&full.outcomes, &pid, &tid, opts.metric, &opts.weights).unwrap();
    assert_eq!(from.proxy_layer, direct.proxy_layer);
    assert_eq!(from.test_layer, direct.test_layer);
    assert_eq!(from.gap, direct.gap);
    assert!(from.gap >= 0.0);
    assert_eq!(from.n_proxy + from.n_test, edits.len());
}

#[test]
fn comparison_rows_and_heatmap() {
    let (world, model) = common::trained();
    let cs = covs(&world, &model);
    let edits = common::edits(&world, 4);
    let opts = SweepOptions::default();
    let mut rows = Vec::new();
    for kind in EditorKind::ALL {
        let spec = EditorSpec::new(kind, 1);
        let (m, diags) = evaluate_at_layer(&model, &edits, &spec, &cs[1], 2, &opts).unwrap();
        assert_eq!(m.len(), edits.len());
        assert!(diags.is_empty(), "{diags:?}");
        // the editor writes the new answer
        assert!(m.iter().filter(|v| v.rewrite == 1.0).count() >= 3, "{kind}: {m:?}");
        rows.push(ComparisonRow::new(kind, golden_layer::attribution::Method::Lga, 1, &m, &opts));
    }
    let csv = comparison_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(COMPARISON_HEADER));
    assert_eq!(lines.count(), 3);

    let s = layer_sweep(&model, &edits[..2], &EditorSpec::new(EditorKind::RRome, 0), &cs, &opts).unwrap();
    let h = heatmap_csv(&[("a", &s.report), ("b", &s.report)]).unwrap();
    assert_eq!(h.lines().count(), 1 + model.n_layers());
    assert!(heatmap_csv(&[]).is_err());
}

#[test]
fn rewrite_and_locality_follow_the_model() {
    let (world, model) = common::trained();
    let e = &common::edits(&world, 1)[0];
    // scoring the unedited model: nothing rewritten, locality intact
    let m = evaluate_edit(&model, &model, e).unwrap();
    assert_eq!(m.rewrite, 0.0);
    assert_eq!(m.locality.unwrap_or(1.0), 1.0);
    assert!((0.0..=1.0).contains(&m.fluency));
    let f = MetricVector::failed(e);
    assert_eq!((f.rewrite, f.fluency, f.overall), (0.0, 1.0, 0.0));
}
