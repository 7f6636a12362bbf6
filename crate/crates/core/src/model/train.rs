use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToyModel;
use crate::corpus::{FactWorld, TokenId};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Stop once greedy accuracy on the probe prompts reaches this value.
    pub stop_accuracy: f64,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Accuracy is measured every this many steps (0 = once per epoch).
    pub eval_every: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            stop_accuracy: 0.99,
            max_steps: 20_000,
            learning_rate: 3e-3,
            batch_size: 32,
            eval_every: 0,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainOutcome {
    Converged,
    Underfit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    pub steps: usize,
    pub final_accuracy: f64,
    pub outcome: TrainOutcome,
}

impl TrainingLog {
    /// One JSON object per line: every step record, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "steps": self.steps,
            "final_accuracy": self.final_accuracy,
            "outcome": self.outcome,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fraction of prompts whose greedy next token equals the answer.
pub(crate) fn probe_accuracy(model: &ToyModel, probes: &[(Vec<TokenId>, TokenId)], exec: Exec) -> Result<f64> {
    if probes.is_empty() {
        return Ok(1.0);
    }
    let hits = par::map(exec, probes, |(prompt, answer)| {
        model.greedy_decode(prompt, 1).map(|out| out.first() == Some(answer))
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / probes.len() as f64)
}

/// Minibatch Adam on full-sequence loss until the probe accuracy reaches
/// `opts.stop_accuracy` or `opts.max_steps` is exhausted.
pub fn train_sequences(
    model: &mut ToyModel,
    sequences: &[Vec<TokenId>],
    probes: &[(Vec<TokenId>, TokenId)],
    opts: &TrainOptions,
) -> Result<TrainingLog> {
    if !(opts.stop_accuracy > 0.0 && opts.stop_accuracy <= 1.0) {
        return Err(Error::invalid(format!(
            "stop accuracy must lie in (0, 1], got {}",
            opts.stop_accuracy
        )));
    }
    if sequences.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    for s in sequences {
        model.check_tokens(s)?;
        if s.len() < 2 {
            return Err(Error::invalid("training sequences need two or more tokens"));
        }
    }
    let batch = opts.batch_size.min(sequences.len());
    let per_epoch = sequences.len().div_ceil(batch);
    let eval_every = if opts.eval_every == 0 { per_epoch } else { opts.eval_every };
    let total = model.layout.total;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(total);
    let mut records = Vec::new();
    let mut accuracy = probe_accuracy(model, probes, opts.exec)?;
    let mut step = 0;

    while step < opts.max_steps && accuracy < opts.stop_accuracy {
        let mut picked: Vec<&[TokenId]> = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&sequences[order[cursor]]);
            cursor += 1;
        }
        let mut acc = par::sum_vectors(opts.exec, &picked, total + 1, 4, |seq, acc| {
            let (g, l) = acc.split_at_mut(total);
            l[0] += model
                .accumulate_gradient(seq, g)
                .expect("sequences validated above");
        });
        let loss = acc[total] / batch as f64;
        acc.truncate(total);
        for g in acc.iter_mut() {
            *g /= batch as f64;
        }
        adam.step(&mut model.params, &acc, opts.learning_rate);
        step += 1;
        if !loss.is_finite() || !model.all_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        let measured = if step % eval_every == 0 || step == opts.max_steps {
            accuracy = probe_accuracy(model, probes, opts.exec)?;
            Some(accuracy)
        } else {
            None
        };
        records.push(StepRecord {
            step,
            loss,
            accuracy: measured,
        });
    }

    Ok(TrainingLog {
        records,
        steps: step,
        final_accuracy: accuracy,
        outcome: if accuracy >= opts.stop_accuracy {
            TrainOutcome::Converged
        } else {
            TrainOutcome::Underfit
        },
    })
}

/// Trains `model` to memorize every fact, paraphrase and chain of `world`.
pub fn train_memorize(model: &mut ToyModel, world: &FactWorld, opts: &TrainOptions) -> Result<TrainingLog> {
    let longest = world.max_sequence_len();
    if longest > model.config.context_len {
        return Err(Error::invalid(format!(
            "context length {} is shorter than the longest sentence ({longest})",
            model.config.context_len
        )));
    }
    if world.vocab.len() != model.config.vocab_size {
        return Err(Error::invalid(format!(
            "model vocabulary {} does not match world vocabulary {}",
            model.config.vocab_size,
            world.vocab.len()
        )));
    }
    train_sequences(model, &world.training_sequences(), &world.probe_prompts(), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_world;
    use crate::model::ModelConfig;

    #[test]
    fn zero_budget_is_underfit() {
        let w = generate_world(1, 10, 4, 30).unwrap();
        let mut m = ToyModel::init(ModelConfig::with_vocab(w.vocab.len()), 0).unwrap();
        let opts = TrainOptions {
            max_steps: 0,
            ..TrainOptions::default()
        };
        let log = train_memorize(&mut m, &w, &opts).unwrap();
        assert_eq!(log.steps, 0);
        assert_eq!(log.outcome, TrainOutcome::Underfit);
        assert!(log.records.is_empty());
    }

    #[test]
    fn rejects_bad_threshold() {
        let w = generate_world(1, 10, 4, 30).unwrap();
        let mut m = ToyModel::init(ModelConfig::with_vocab(w.vocab.len()), 0).unwrap();
        let opts = TrainOptions {
            stop_accuracy: 0.0,
            ..TrainOptions::default()
        };
        assert!(train_memorize(&mut m, &w, &opts).is_err());
    }

    #[test]
    fn memorizes_a_single_sequence() {
        let c = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            context_len: 8,
            vocab_size: 12,
        };
        let mut m = ToyModel::init(c, 1).unwrap();
        let seq = vec![0, 5, 7, 3, 9, 1];
        let probes = vec![(vec![0, 5, 7, 3], 9)];
        let opts = TrainOptions {
            stop_accuracy: 1.0,
            max_steps: 300,
            learning_rate: 1e-2,
            batch_size: 1,
            eval_every: 1000,
            ..TrainOptions::default()
        };
        let log = train_sequences(&mut m, &[seq.clone()], &probes, &opts).unwrap();
        assert_eq!(log.steps, 300);
        assert!(m.loss_full(&seq).unwrap() < 0.05);
        assert_eq!(m.greedy_decode(&[0, 5, 7, 3], 2).unwrap(), vec![9, 1]);
        let mut again = ToyModel::init(c, 1).unwrap();
        let log2 = train_sequences(&mut again, &[seq], &probes, &opts).unwrap();
        assert_eq!(log, log2);
        assert_eq!(m, again);
    }
}
