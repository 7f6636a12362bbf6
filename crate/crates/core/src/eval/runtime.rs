use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::sweep::{layer_sweep, SweepOptions};
use crate::attribution::{cma_scores, lga_scores, CmaOptions, LgaOptions};
use crate::corpus::EditQuery;
use crate::editors::{CovarianceEstimate, EditorSpec};
use crate::error::Result;
use crate::model::ToyModel;

/// Wall-clock cost of the three layer-selection strategies on one proxy set.
/// Brute force excludes covariance estimation, which is a cached one-off
/// shared with ordinary editing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRecord {
    pub n_queries: usize,
    pub n_layers: usize,
    pub lga_seconds: f64,
    pub cma_seconds: f64,
    pub bf_seconds: f64,
    pub bf_over_lga: f64,
    pub bf_over_cma: f64,
    pub lga_layer: usize,
    pub cma_layer: usize,
    pub bf_layer: usize,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        f64::INFINITY
    }
}

pub fn runtime_benchmark(
    model: &ToyModel,
    proxy: &[EditQuery],
    spec: &EditorSpec,
    covs: &[CovarianceEstimate],
    lga: &LgaOptions,
    cma: &CmaOptions,
    sweep: &SweepOptions,
) -> Result<RuntimeRecord> {
    let t = Instant::now();
    let l = lga_scores(model, proxy, lga)?;
    let lga_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let c = cma_scores(model, proxy, cma)?;
    let cma_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let bf = layer_sweep(model, proxy, spec, covs, sweep)?;
    let bf_seconds = t.elapsed().as_secs_f64();

    Ok(RuntimeRecord {
        n_queries: proxy.len(),
        n_layers: model.n_layers(),
        lga_seconds,
        cma_seconds,
        bf_seconds,
        bf_over_lga: ratio(bf_seconds, lga_seconds),
        bf_over_cma: ratio(bf_seconds, cma_seconds),
        lga_layer: l.selected_layer,
        cma_layer: c.selected_layer,
        bf_layer: bf.report.golden_layer,
    })
}
