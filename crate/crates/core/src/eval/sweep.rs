use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_with, Baseline, MetricVector, MetricWeights};
use super::stats::{t_test, TTestRecord};
use crate::attribution::select_layer;
use crate::corpus::{split_proxy_test, EditQuery};
use crate::editors::{apply_edit, CovarianceEstimate, EditorSpec};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::par::{self, Exec};

pub const OUTCOME_HEADER: &str = "layer,sample_id,rewrite,rephrase,locality,portability,fluency,overall";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    #[default]
    Rewrite,
    Overall,
}

impl SelectionMetric {
    pub fn of(self, m: &MetricVector) -> f64 {
        match self {
            SelectionMetric::Rewrite => m.rewrite,
            SelectionMetric::Overall => m.overall,
        }
    }
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rewrite" => Ok(SelectionMetric::Rewrite),
            "overall" => Ok(SelectionMetric::Overall),
            _ => Err(Error::invalid(format!("unknown metric `{s}` (rewrite|overall)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepOptions {
    pub metric: SelectionMetric,
    pub weights: MetricWeights,
    pub exec: Exec,
}

/// One (layer, sample) cell of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub layer: usize,
    pub sample_id: String,
    pub metrics: MetricVector,
}

/// Layer-major grid of outcomes: every sample at layer 0, then layer 1, ...
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeMatrix {
    pub n_layers: usize,
    pub sample_ids: Vec<String>,
    pub rows: Vec<Outcome>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl OutcomeMatrix {
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn get(&self, layer: usize, sample: usize) -> &Outcome {
        &self.rows[layer * self.sample_ids.len() + sample]
    }

    fn check(&self) -> Result<()> {
        let n = self.sample_ids.len();
        if self.n_layers == 0 || n == 0 {
            return Err(Error::Validation("outcome matrix is empty".into()));
        }
        if self.rows.len() != self.n_layers * n {
            return Err(Error::Validation(format!(
                "outcome matrix has {} rows, expected {} layers × {n} samples",
                self.rows.len(),
                self.n_layers
            )));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.layer != i / n || r.sample_id != self.sample_ids[i % n] {
                return Err(Error::Validation(format!(
                    "outcome row {} is ({}, {}), expected ({}, {})",
                    i + 1,
                    r.layer,
                    r.sample_id,
                    i / n,
                    self.sample_ids[i % n]
                )));
            }
        }
        Ok(())
    }

    /// Comma-separated dump with [`OUTCOME_HEADER`]. Absent metrics are
    /// empty fields; reals use the shortest exact representation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(OUTCOME_HEADER);
        s.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.layer,
                r.sample_id,
                m.rewrite,
                fmt_opt(m.rephrase),
                fmt_opt(m.locality),
                fmt_opt(m.portability),
                m.fluency,
                m.overall
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == OUTCOME_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{OUTCOME_HEADER}`"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { line: i + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("expected 8 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            rows.push(Outcome {
                layer: f[0].parse().map_err(|e| bad(format!("layer `{}`: {e}", f[0])))?,
                sample_id: f[1].to_string(),
                metrics: MetricVector {
                    rewrite: num(f[2])?,
                    rephrase: opt(f[3])?,
                    locality: opt(f[4])?,
                    portability: opt(f[5])?,
                    fluency: num(f[6])?,
                    overall: num(f[7])?,
                },
            });
        }
        let n_layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let sample_ids: Vec<String> = rows.iter().take_while(|r| r.layer == 0).map(|r| r.sample_id.clone()).collect();
        let m = Self {
            n_layers,
            sample_ids,
            rows,
        };
        m.check()?;
        Ok(m)
    }

    /// The grid restricted to `ids`, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let index: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.sample_ids
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| Error::invalid(format!("sample `{id}` not in the outcome matrix")))
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(self.n_layers * ids.len());
        for l in 0..self.n_layers {
            rows.extend(index.iter().map(|&i| self.get(l, i).clone()));
        }
        Ok(Self {
            n_layers: self.n_layers,
            sample_ids: ids.to_vec(),
            rows,
        })
    }
}

/// Means of each metric over samples; optional metrics average over the
/// samples where present. `overall` follows the aggregate formula on those
/// means.
pub fn aggregate_metrics(values: &[MetricVector], weights: &MetricWeights) -> MetricVector {
    let n = values.len().max(1) as f64;
    let opt_mean = |get: fn(&MetricVector) -> Option<f64>| {
        let present: Vec<f64> = values.iter().filter_map(get).collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    };
    MetricVector::weighted(
        values.iter().map(|m| m.rewrite).sum::<f64>() / n,
        opt_mean(|m| m.rephrase),
        opt_mean(|m| m.locality),
        opt_mean(|m| m.portability),
        values.iter().map(|m| m.fluency).sum::<f64>() / n,
        weights,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric: SelectionMetric,
    pub n_layers: usize,
    pub n_samples: usize,
    /// Aggregate metrics of editing every sample at each fixed layer.
    pub per_layer: Vec<MetricVector>,
    /// Mean per-sample selection metric at each layer.
    pub per_layer_score: Vec<f64>,
    /// Argmax layer of the selection metric for each sample (ties → lowest).
    pub per_sample_best: Vec<usize>,
    pub sample_wise_optimal: MetricVector,
    pub sample_wise_optimal_score: f64,
    pub golden_layer: usize,
    pub golden: MetricVector,
    pub golden_score: f64,
    /// `|per_layer_score − sample_wise_optimal_score|` per layer.
    pub deviation: Vec<f64>,
    /// Per-sample optimal scores against golden-layer scores.
    pub t_test: Option<TTestRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl SweepReport {
    /// Every statistic, recomputed from the raw outcome grid.
    pub fn from_outcomes(m: &OutcomeMatrix, metric: SelectionMetric, weights: &MetricWeights) -> Result<Self> {
        m.check()?;
        let (nl, n) = (m.n_layers, m.n_samples());
        let score = |l: usize, s: usize| metric.of(&m.get(l, s).metrics);
        let per_layer: Vec<MetricVector> = (0..nl)
            .map(|l| {
                let v: Vec<MetricVector> = (0..n).map(|s| m.get(l, s).metrics).collect();
                aggregate_metrics(&v, weights)
            })
            .collect();
        let per_layer_score: Vec<f64> = (0..nl).map(|l| (0..n).map(|s| score(l, s)).sum::<f64>() / n as f64).collect();
        let none = vec![false; nl];
        let per_sample_best: Vec<usize> = (0..n)
            .map(|s| {
                let col: Vec<f64> = (0..nl).map(|l| score(l, s)).collect();
                select_layer(&col, &none).expect("non-empty")
            })
            .collect();
        let optimal: Vec<MetricVector> = per_sample_best.iter().enumerate().map(|(s, &l)| m.get(l, s).metrics).collect();
        let optimal_scores: Vec<f64> = optimal.iter().map(|x| metric.of(x)).collect();
        let sample_wise_optimal_score = optimal_scores.iter().sum::<f64>() / n as f64;
        let golden_layer = select_layer(&per_layer_score, &none).expect("non-empty");
        let golden_scores: Vec<f64> = (0..n).map(|s| score(golden_layer, s)).collect();
        let mut diagnostics = Vec::new();
        let t = if n >= 2 {
            Some(t_test(&optimal_scores, &golden_scores)?)
        } else {
            diagnostics.push("t-test skipped: fewer than two samples".to_string());
            None
        };
        Ok(Self {
            metric,
            n_layers: nl,
            n_samples: n,
            deviation: per_layer_score.iter().map(|s| (s - sample_wise_optimal_score).abs()).collect(),
            golden: per_layer[golden_layer],
            golden_score: per_layer_score[golden_layer],
            per_layer,
            per_layer_score,
            per_sample_best,
            sample_wise_optimal: aggregate_metrics(&optimal, weights),
            sample_wise_optimal_score,
            golden_layer,
            t_test: t,
            diagnostics,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Outcome grid plus the report derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub outcomes: OutcomeMatrix,
    pub report: SweepReport,
}

fn check_ids(edits: &[EditQuery]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in edits {
        if e.id.is_empty() || e.id.contains([',', '\n', '\r']) {
            return Err(Error::invalid(format!("sample id `{}` cannot be written to CSV", e.id)));
        }
        if !seen.insert(e.id.as_str()) {
            return Err(Error::invalid(format!("duplicate sample id `{}`", e.id)));
        }
    }
    Ok(())
}

/// Pre-edit locality answers for every edit.
pub fn baselines(model: &ToyModel, edits: &[EditQuery], exec: Exec) -> Result<Vec<Baseline>> {
    par::map(exec, edits, |e| Baseline::new(model, e)).into_iter().collect()
}

/// Edits a fresh copy of `model` for every (layer, sample) pair, scores it
/// and discards it. Editor failures become zero outcomes with a diagnostic.
/// `covs[l]` is the preservation estimate for layer `l`.
pub fn layer_sweep(
    model: &ToyModel,
    edits: &[EditQuery],
    spec: &EditorSpec,
    covs: &[CovarianceEstimate],
    opts: &SweepOptions,
) -> Result<Sweep> {
    let nl = model.n_layers();
    if edits.is_empty() {
        return Err(Error::invalid("sweep needs at least one edit"));
    }
    if covs.len() != nl || covs.iter().enumerate().any(|(l, c)| c.layer != l) {
        return Err(Error::invalid("sweep needs one covariance estimate per layer, in layer order"));
    }
    check_ids(edits)?;
    spec.validate()?;
    let base = baselines(model, edits, opts.exec)?;
    let n = edits.len();
    let cells = par::map_range(opts.exec, nl * n, |i| {
        let (l, s) = (i / n, i % n);
        let e = &edits[s];
        match apply_edit(model, std::slice::from_ref(e), &spec.at_layer(l), &covs[l]) {
            Ok(out) => evaluate_with(model, &out.model, e, &base[s], &opts.weights).map(|m| (m, None)),
            Err(err) => Ok((MetricVector::failed(e), Some(format!("layer {l}, {}: {err}", e.id)))),
        }
    });
    let mut rows = Vec::with_capacity(nl * n);
    let mut diagnostics = Vec::new();
    for (i, c) in cells.into_iter().enumerate() {
        let (metrics, diag) = c?;
        diagnostics.extend(diag);
        rows.push(Outcome {
            layer: i / n,
            sample_id: edits[i % n].id.clone(),
            metrics,
        });
    }
    let outcomes = OutcomeMatrix {
        n_layers: nl,
        sample_ids: edits.iter().map(|e| e.id.clone()).collect(),
        rows,
    };
    let mut report = SweepReport::from_outcomes(&outcomes, opts.metric, &opts.weights)?;
    report.diagnostics.splice(0..0, diagnostics);
    Ok(Sweep { outcomes, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub n_proxy: usize,
    pub n_test: usize,
    pub proxy_layer: usize,
    pub test_layer: usize,
    /// Test-set score of the proxy-selected layer.
    pub proxy_layer_test_score: f64,
    /// Test-set score of the test-optimal fixed layer.
    pub test_optimal_score: f64,
    /// `test_optimal_score − proxy_layer_test_score` (never negative).
    pub gap: f64,
    pub proxy: SweepReport,
    pub test: SweepReport,
}

/// Proxy/test protocol evaluated from an existing outcome grid. Since
/// every cell is an independent edit of the base model, sweeping the proxy
/// and test sets separately yields exactly these rows.
pub fn proxy_generalization_from(
    outcomes: &OutcomeMatrix,
    proxy_ids: &[String],
    test_ids: &[String],
    metric: SelectionMetric,
    weights: &MetricWeights,
) -> Result<ProxyReport> {
    let proxy = SweepReport::from_outcomes(&outcomes.subset(proxy_ids)?, metric, weights)?;
    let test = SweepReport::from_outcomes(&outcomes.subset(test_ids)?, metric, weights)?;
    let proxy_layer_test_score = test.per_layer_score[proxy.golden_layer];
    Ok(ProxyReport {
        n_proxy: proxy_ids.len(),
        n_test: test_ids.len(),
        proxy_layer: proxy.golden_layer,
        test_layer: test.golden_layer,
        proxy_layer_test_score,
        test_optimal_score: test.golden_score,
        gap: test.golden_score - proxy_layer_test_score,
        proxy,
        test,
    })
}

/// Splits `edits`, sweeps proxy and test independently and reports how well
/// the proxy selection transfers.
pub fn proxy_generalization(
    model: &ToyModel,
    edits: &[EditQuery],
    spec: &EditorSpec,
    covs: &[CovarianceEstimate],
    proxy_fraction: f64,
    seed: u64,
    opts: &SweepOptions,
) -> Result<ProxyReport> {
    let (proxy, test) = split_proxy_test(edits, proxy_fraction, seed)?;
    let p = layer_sweep(model, &proxy, spec, covs, opts)?;
    let t = layer_sweep(model, &test, spec, covs, opts)?;
    let proxy_layer_test_score = t.report.per_layer_score[p.report.golden_layer];
    Ok(ProxyReport {
        n_proxy: proxy.len(),
        n_test: test.len(),
        proxy_layer: p.report.golden_layer,
        test_layer: t.report.golden_layer,
        proxy_layer_test_score,
        test_optimal_score: t.report.golden_score,
        gap: t.report.golden_score - proxy_layer_test_score,
        proxy: p.report,
        test: t.report,
    })
}

/// Rows = layers, columns = named reports, values = absolute deviation of
/// the fixed-layer score from the sample-wise optimum.
pub fn heatmap_csv(columns: &[(&str, &SweepReport)]) -> Result<String> {
    let nl = match columns.first() {
        Some((_, r)) => r.n_layers,
        None => return Err(Error::invalid("heatmap needs at least one report")),
    };
    if columns.iter().any(|(_, r)| r.n_layers != nl) {
        return Err(Error::invalid("heatmap columns have different layer counts"));
    }
    let mut s = String::from("layer");
    for (name, _) in columns {
        if name.contains([',', '\n']) {
            return Err(Error::invalid(format!("column name `{name}` cannot be written to CSV")));
        }
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for l in 0..nl {
        s.push_str(&l.to_string());
        for (_, r) in columns {
            let _ = write!(s, ",{}", r.deviation[l]);
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(layer: usize, id: &str, rewrite: f64) -> Outcome {
        Outcome {
            layer,
            sample_id: id.to_string(),
            metrics: MetricVector::new(rewrite, None, Some(1.0), None, 0.1),
        }
    }

    fn grid() -> OutcomeMatrix {
        // samples a, b, c over 3 layers
        let vals = [[0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
        let mut rows = Vec::new();
        for (l, row) in vals.iter().enumerate() {
            for (id, &v) in ["a", "b", "c"].iter().zip(row) {
                rows.push(cell(l, id, v));
            }
        }
        OutcomeMatrix {
            n_layers: 3,
            sample_ids: vec!["a".into(), "b".into(), "c".into()],
            rows,
        }
    }

    #[test]
    fn report_from_grid() {
        let r = SweepReport::from_outcomes(&grid(), SelectionMetric::Rewrite, &MetricWeights::default()).unwrap();
        assert_eq!(r.per_sample_best, vec![1, 0, 2]);
        assert_eq!(r.sample_wise_optimal_score, 1.0);
        // layers 1 and 2 tie at 2/3; lowest wins
        assert_eq!(r.golden_layer, 1);
        assert!((r.deviation[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.golden_score <= r.sample_wise_optimal_score);
        assert!(r.t_test.is_some());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut g = grid();
        g.rows[4].metrics = MetricVector::new(0.1 + 0.2, Some(1.0 / 3.0), None, Some(0.5), 0.123456789);
        let back = OutcomeMatrix::from_csv(&g.to_csv()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_csv(), g.to_csv());
    }

    #[test]
    fn malformed_grids_are_rejected() {
        let text = grid().to_csv();
        let short: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(OutcomeMatrix::from_csv(&short).is_err());
        assert!(OutcomeMatrix::from_csv("layer,id\n").is_err());
        let bad = text.replace("\n1,a,", "\n1,z,");
        assert!(OutcomeMatrix::from_csv(&bad).is_err());
    }

    #[test]
    fn identical_proxy_and_test_agree() {
        let g = grid();
        let ids = g.sample_ids.clone();
        let p = proxy_generalization_from(&g, &ids, &ids, SelectionMetric::Rewrite, &MetricWeights::default()).unwrap();
        assert_eq!(p.proxy_layer, p.test_layer);
        assert_eq!(p.gap, 0.0);
    }

    #[test]
    fn heatmap_layout() {
        let r = SweepReport::from_outcomes(&grid(), SelectionMetric::Rewrite, &MetricWeights::default()).unwrap();
        let h = heatmap_csv(&[("x", &r), ("y", &r)]).unwrap();
        let lines: Vec<&str> = h.lines().collect();
        assert_eq!(lines[0], "layer,x,y");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("1,"));
    }
}
