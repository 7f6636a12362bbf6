use serde::{Deserialize, Serialize};

use crate::corpus::{with_bos, EditQuery, TokenId};
use crate::error::Result;
use crate::model::ToyModel;

/// Tokens generated for the fluency probe.
pub const FLUENCY_TOKENS: usize = 16;

/// Weights of the Overall aggregate. The default is the plain mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricWeights {
    pub rewrite: f64,
    pub rephrase: f64,
    pub locality: f64,
    pub portability: f64,
    pub fluency: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self {
            rewrite: 1.0,
            rephrase: 1.0,
            locality: 1.0,
            portability: 1.0,
            fluency: 1.0,
        }
    }
}

/// One edit's scores. Absent metrics (no probes of that kind) are `None`
/// and are left out of `overall`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub rewrite: f64,
    pub rephrase: Option<f64>,
    pub locality: Option<f64>,
    pub portability: Option<f64>,
    /// Lower is better.
    pub fluency: f64,
    pub overall: f64,
}

impl MetricVector {
    pub fn new(rewrite: f64, rephrase: Option<f64>, locality: Option<f64>, portability: Option<f64>, fluency: f64) -> Self {
        Self::weighted(rewrite, rephrase, locality, portability, fluency, &MetricWeights::default())
    }

    pub fn weighted(
        rewrite: f64,
        rephrase: Option<f64>,
        locality: Option<f64>,
        portability: Option<f64>,
        fluency: f64,
        w: &MetricWeights,
    ) -> Self {
        let terms = [
            (Some(rewrite), w.rewrite),
            (rephrase, w.rephrase),
            (locality, w.locality),
            (portability, w.portability),
            (Some(1.0 - fluency), w.fluency),
        ];
        let (mut num, mut den) = (0.0, 0.0);
        for (v, wt) in terms {
            if let Some(v) = v {
                num += wt * v;
                den += wt;
            }
        }
        Self {
            rewrite,
            rephrase,
            locality,
            portability,
            fluency,
            overall: if den > 0.0 { num / den } else { 0.0 },
        }
    }

    /// Outcome recorded when the editor itself fails: every present
    /// goodness metric is zero and fluency is worst-case.
    pub fn failed(edit: &EditQuery) -> Self {
        let zero_if = |present: bool| present.then_some(0.0);
        Self::new(
            0.0,
            zero_if(!edit.rephrases.is_empty()),
            zero_if(!edit.locality.is_empty()),
            zero_if(!edit.portability.is_empty()),
            1.0,
        )
    }
}

/// Pre-edit answers to an edit's locality probes; computed once per edit and
/// reused for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub locality_answers: Vec<Vec<TokenId>>,
}

impl Baseline {
    pub fn new(pre: &ToyModel, edit: &EditQuery) -> Result<Self> {
        let locality_answers = edit
            .locality
            .iter()
            .map(|p| pre.greedy_decode(&with_bos(&p.query), p.answer.len()))
            .collect::<Result<_>>()?;
        Ok(Self { locality_answers })
    }
}

fn decodes_to(model: &ToyModel, query: &[TokenId], expected: &[TokenId]) -> Result<bool> {
    Ok(model.greedy_decode(&with_bos(query), expected.len())? == expected)
}

fn mean(hits: &[bool]) -> Option<f64> {
    (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Scores `post` (an edit of `pre`) on one edit query.
pub fn evaluate_edit(pre: &ToyModel, post: &ToyModel, edit: &EditQuery) -> Result<MetricVector> {
    evaluate_with(pre, post, edit, &Baseline::new(pre, edit)?, &MetricWeights::default())
}

pub fn evaluate_with(
    pre: &ToyModel,
    post: &ToyModel,
    edit: &EditQuery,
    base: &Baseline,
    weights: &MetricWeights,
) -> Result<MetricVector> {
    let prompt = edit.prompt();
    // The first |new| tokens of the fluency continuation are exactly the
    // greedy rewrite decode, so one generation serves both.
    let continuation = post.greedy_decode(&prompt, FLUENCY_TOKENS)?;
    let rewrite = continuation.starts_with(&edit.new_knowledge) && !edit.new_knowledge.is_empty();

    let rephrase: Vec<bool> = edit
        .rephrases
        .iter()
        .map(|r| decodes_to(post, r, &edit.new_knowledge))
        .collect::<Result<_>>()?;
    let locality: Vec<bool> = edit
        .locality
        .iter()
        .zip(&base.locality_answers)
        .map(|(p, before)| Ok(post.greedy_decode(&with_bos(&p.query), p.answer.len())? == *before))
        .collect::<Result<_>>()?;
    let portability: Vec<bool> = edit
        .portability
        .iter()
        .map(|p| decodes_to(post, &p.query, &p.answer))
        .collect::<Result<_>>()?;

    let fluency = fluency_score(pre, &prompt, &continuation)?;
    Ok(MetricVector::weighted(
        if rewrite { 1.0 } else { 0.0 },
        mean(&rephrase),
        mean(&locality),
        mean(&portability),
        fluency,
        weights,
    ))
}

/// Mean NLL the pre-edit model assigns to `continuation` after `prompt`,
/// divided by `ln |V|` and clamped to `[0, 1]`.
pub fn fluency_score(pre: &ToyModel, prompt: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(0.0);
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(continuation);
    let cache = pre.forward(&seq)?;
    let (nll, _) = pre.target_nll(&cache, prompt.len()..seq.len());
    Ok((nll / (pre.config.vocab_size as f64).ln()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overall_is_mean_of_present_terms() {
        let m = MetricVector::new(1.0, Some(1.0), Some(1.0), Some(1.0), 0.0);
        assert_eq!(m.overall, 1.0);
        let m = MetricVector::new(1.0, None, Some(0.5), None, 0.5);
        assert!((m.overall - (1.0 + 0.5 + 0.5) / 3.0).abs() < 1e-15);
        let m = MetricVector::new(0.0, Some(0.0), Some(0.0), None, 1.0);
        assert_eq!(m.overall, 0.0);
    }

    #[test]
    fn weights_shift_the_aggregate() {
        let w = MetricWeights {
            rewrite: 3.0,
            ..MetricWeights::default()
        };
        let m = MetricVector::weighted(1.0, None, Some(0.0), None, 1.0, &w);
        assert!((m.overall - 3.0 / 5.0).abs() < 1e-15);
    }
}
