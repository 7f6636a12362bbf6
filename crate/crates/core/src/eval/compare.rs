use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_with, MetricVector};
use super::sweep::{aggregate_metrics, baselines, SweepOptions};
use crate::attribution::Method;
use crate::corpus::EditQuery;
use crate::editors::{apply_edit, CovarianceEstimate, EditorKind, EditorSpec};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::par;

pub const COMPARISON_HEADER: &str = "editor,selection,layer,RwA,RpA,LOC,PRT,FLC,OV";

/// Edits `edits` at `spec.layer` and scores each one. ROME-family editors
/// edit one sample per copy; EMMET edits consecutive batches of
/// `emmet_batch` and scores every member on the batch-edited copy.
/// Editor failures become zero outcomes with a diagnostic.
pub fn evaluate_at_layer(
    model: &ToyModel,
    edits: &[EditQuery],
    spec: &EditorSpec,
    cov: &CovarianceEstimate,
    emmet_batch: usize,
    opts: &SweepOptions,
) -> Result<(Vec<MetricVector>, Vec<String>)> {
    if emmet_batch == 0 {
        return Err(Error::invalid("emmet batch size must be positive"));
    }
    let size = if spec.kind == EditorKind::Emmet { emmet_batch } else { 1 };
    let base = baselines(model, edits, opts.exec)?;
    let chunks: Vec<(usize, &[EditQuery])> = edits.chunks(size).enumerate().map(|(i, c)| (i * size, c)).collect();
    let scored = par::map(opts.exec, &chunks, |&(start, batch)| -> Result<(Vec<MetricVector>, Option<String>)> {
        match apply_edit(model, batch, spec, cov) {
            Ok(out) => {
                let v = batch
                    .iter()
                    .enumerate()
                    .map(|(j, e)| evaluate_with(model, &out.model, e, &base[start + j], &opts.weights))
                    .collect::<Result<_>>()?;
                Ok((v, None))
            }
            Err(err) => {
                let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
                Ok((
                    batch.iter().map(MetricVector::failed).collect(),
                    Some(format!("layer {}, {}: {err}", spec.layer, ids.join("+"))),
                ))
            }
        }
    });
    let mut metrics = Vec::with_capacity(edits.len());
    let mut diagnostics = Vec::new();
    for s in scored {
        let (v, d) = s?;
        metrics.extend(v);
        diagnostics.extend(d);
    }
    Ok((metrics, diagnostics))
}

/// One row of the selection-strategy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub editor: EditorKind,
    pub selection: Method,
    pub layer: usize,
    pub metrics: MetricVector,
}

impl ComparisonRow {
    pub fn new(editor: EditorKind, selection: Method, layer: usize, per_sample: &[MetricVector], opts: &SweepOptions) -> Self {
        Self {
            editor,
            selection,
            layer,
            metrics: aggregate_metrics(per_sample, &opts.weights),
        }
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Lga => "lga",
        Method::Cma => "cma",
        Method::BruteForce => "brute-force",
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.editor,
            method_name(r.selection),
            r.layer,
            m.rewrite,
            cell(m.rephrase),
            cell(m.locality),
            cell(m.portability),
            m.fluency,
            m.overall
        );
    }
    s
}
