//! Closed-form editors acting on one layer's MLP down-projection `W_out`.
//!
//! `W_out` is stored input-major (`d_mlp × d_model`), so the layer computes
//! `out = W_outᵀ k + b_out` for a key `k`. Every update below is written
//! in that orientation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EditQuery, TokenId, BOS, SPECIALS};
use crate::error::{Error, Result};
use crate::linalg::{dot, matmul_at_b_acc, Cholesky};
use crate::model::{Hooks, MlpPatch, ToyModel};
use crate::par::{self, Exec};

const MAX_PREFIX_LEN: usize = 3;
const RIDGE_RETRIES: usize = 3;
const DEGENERATE_KEY: f64 = 1e-12;
/// Relative pivot floor for the batch Gram matrix `Kᵀ C⁻¹ K`.
const GRAM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditorKind {
    #[serde(rename = "rome")]
    Rome,
    #[serde(rename = "r-rome")]
    RRome,
    #[serde(rename = "emmet")]
    Emmet,
}

impl EditorKind {
    pub const ALL: [EditorKind; 3] = [EditorKind::Rome, EditorKind::RRome, EditorKind::Emmet];

    pub fn name(self) -> &'static str {
        match self {
            EditorKind::Rome => "rome",
            EditorKind::RRome => "r-rome",
            EditorKind::Emmet => "emmet",
        }
    }
}

impl fmt::Display for EditorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rome" => Ok(EditorKind::Rome),
            "r-rome" | "rrome" => Ok(EditorKind::RRome),
            "emmet" => Ok(EditorKind::Emmet),
            _ => Err(Error::invalid(format!("unknown editor `{s}` (rome|r-rome|emmet)"))),
        }
    }
}

/// Gradient search for the value vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Coefficient of `‖δ‖²`.
    pub weight_decay: f64,
    /// Coefficient of `KL(p_orig ‖ p_edited)` on the bare-subject prompt.
    pub kl_coef: f64,
    /// Stop once the target NLL drops below this.
    pub stop_nll: f64,
}

impl Default for ValueOptions {
    fn default() -> Self {
        Self {
            steps: 25,
            learning_rate: 0.5,
            weight_decay: 1e-3,
            kl_coef: 0.0625,
            stop_nll: 0.05,
        }
    }
}

/// Which key-site activations feed the preservation covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceSite {
    #[default]
    AllPositions,
    /// Only positions holding an entity token.
    SubjectTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditorSpec {
    pub kind: EditorKind,
    pub layer: usize,
    #[serde(default)]
    pub value: ValueOptions,
    pub covariance_reg: f64,
    #[serde(default)]
    pub covariance_site: CovarianceSite,
    /// Random prefixes averaged into every key (R-ROME; EMMET optional).
    pub context_prefixes: usize,
    #[serde(default)]
    pub prefix_seed: u64,
}

impl EditorSpec {
    pub fn new(kind: EditorKind, layer: usize) -> Self {
        Self {
            kind,
            layer,
            value: ValueOptions::default(),
            covariance_reg: 1e-2,
            covariance_site: CovarianceSite::default(),
            context_prefixes: if kind == EditorKind::RRome { 8 } else { 0 },
            prefix_seed: 0,
        }
    }

    pub fn at_layer(&self, layer: usize) -> Self {
        Self { layer, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.value.steps == 0 {
            return Err(Error::Validation("value optimisation needs at least one step".into()));
        }
        if !(self.covariance_reg > 0.0 && self.covariance_reg.is_finite()) {
            return Err(Error::Validation(format!("covariance_reg must be > 0, got {}", self.covariance_reg)));
        }
        let v = &self.value;
        if !(v.learning_rate > 0.0 && v.weight_decay >= 0.0 && v.kl_coef >= 0.0 && v.stop_nll >= 0.0) {
            return Err(Error::Validation("value options must be non-negative with a positive step size".into()));
        }
        match self.kind {
            EditorKind::Rome if self.context_prefixes != 0 => {
                Err(Error::Validation("rome uses bare keys; set context_prefixes = 0 or use r-rome".into()))
            }
            EditorKind::RRome if self.context_prefixes == 0 => {
                Err(Error::Validation("r-rome needs context_prefixes >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Post-GELU activation feeding `W_out` at the last subject token.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyVector {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub n_contexts_averaged: usize,
}

/// `C = (1/N) Σ kkᵀ + λI`, with its factorisation.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub layer: usize,
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub n_samples: usize,
    /// Ridge actually applied (after any escalation).
    pub lambda: f64,
    chol: Cholesky,
}

impl CovarianceEstimate {
    /// Builds the estimate from an uncentred second moment `Σ kkᵀ` over `n`
    /// samples, escalating λ ×10 (at most three times) until it factors.
    pub fn from_moment(layer: usize, moment: &[f64], dim: usize, n: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("ridge must be > 0, got {lambda}")));
        }
        if moment.len() != dim * dim {
            return Err(Error::invalid("moment matrix has the wrong size"));
        }
        let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let mut lam = lambda;
        for attempt in 0..=RIDGE_RETRIES {
            let mut c: Vec<f64> = moment.iter().map(|v| v * scale).collect();
            // exact symmetry regardless of accumulation order
            for i in 0..dim {
                for j in 0..i {
                    let s = 0.5 * (c[i * dim + j] + c[j * dim + i]);
                    c[i * dim + j] = s;
                    c[j * dim + i] = s;
                }
                c[i * dim + i] += lam;
            }
            match Cholesky::factor(&c, dim, 1e-14) {
                Ok(chol) => {
                    return Ok(Self {
                        layer,
                        dim,
                        matrix: c,
                        n_samples: n,
                        lambda: lam,
                        chol,
                    })
                }
                Err(_) if attempt < RIDGE_RETRIES => lam *= 10.0,
                Err(_) => {}
            }
        }
        Err(Error::Numeric(format!(
            "layer {layer}: covariance not positive definite even with ridge {lam}; raise covariance_reg"
        )))
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.chol.solve(b)
    }
}

/// Token sequences whose key-site activations are collected.
fn covariance_rows(model: &ToyModel, seq: &[TokenId], site: CovarianceSite, entities: &[TokenId]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let (trace, _) = model.capture_activations(seq)?;
    let positions: Vec<usize> = match site {
        CovarianceSite::AllPositions => (0..seq.len()).collect(),
        CovarianceSite::SubjectTokens => (0..seq.len()).filter(|&p| entities.contains(&seq[p])).collect(),
    };
    let m = model.config.d_mlp;
    let rows = trace
        .key
        .iter()
        .map(|layer| {
            let mut a = Vec::with_capacity(positions.len() * m);
            for &p in &positions {
                a.extend_from_slice(&layer[p]);
            }
            a
        })
        .collect();
    Ok((rows, positions))
}

/// Preservation statistics for every layer from one forward pass per sequence.
/// `entities` is consulted only for [`CovarianceSite::SubjectTokens`].
pub fn estimate_covariances(
    model: &ToyModel,
    sequences: &[Vec<TokenId>],
    entities: &[TokenId],
    lambda: f64,
    site: CovarianceSite,
    exec: Exec,
) -> Result<Vec<CovarianceEstimate>> {
    let (nl, m) = (model.n_layers(), model.config.d_mlp);
    let block = m * m;
    // slot layout: nl moment blocks then one count per layer
    let len = nl * block + 1;
    let failed = std::sync::Mutex::new(None);
    let sums = par::sum_vectors(exec, sequences, len, 8, |seq, acc| match covariance_rows(model, seq, site, entities) {
        Ok((rows, positions)) => {
            for (l, a) in rows.iter().enumerate() {
                matmul_at_b_acc(a, a, &mut acc[l * block..(l + 1) * block], positions.len(), m, m);
            }
            acc[nl * block] += positions.len() as f64;
        }
        Err(e) => {
            failed.lock().unwrap().get_or_insert(e);
        }
    });
    if let Some(e) = failed.into_inner().unwrap() {
        return Err(e);
    }
    let n = sums[nl * block] as usize;
    (0..nl)
        .map(|l| CovarianceEstimate::from_moment(l, &sums[l * block..(l + 1) * block], m, n, lambda))
        .collect()
}

/// Single-layer form of [`estimate_covariances`] over every training
/// sentence of a world.
pub fn estimate_covariance(
    model: &ToyModel,
    world: &crate::corpus::FactWorld,
    layer: usize,
    lambda: f64,
) -> Result<CovarianceEstimate> {
    model.check_layer(layer)?;
    let mut all = estimate_covariances(
        model,
        &world.training_sequences(),
        &world.entities,
        lambda,
        CovarianceSite::AllPositions,
        Exec::default(),
    )?;
    Ok(all.swap_remove(layer))
}

/// Random prefixes of ordinary vocabulary tokens, lengths `1..=3`.
pub fn context_prefixes(vocab_size: usize, n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let lo = SPECIALS.len() as TokenId;
    if n == 0 || vocab_size <= SPECIALS.len() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=MAX_PREFIX_LEN);
            (0..len).map(|_| rng.random_range(lo..vocab_size as TokenId)).collect()
        })
        .collect()
}

/// Inserts `prefix` right after the leading BOS of `prompt`.
pub fn prefixed(prompt: &[TokenId], prefix: &[TokenId]) -> Vec<TokenId> {
    let mut s = Vec::with_capacity(prompt.len() + prefix.len());
    let body = match prompt.first() {
        Some(&BOS) => {
            s.push(BOS);
            &prompt[1..]
        }
        _ => prompt,
    };
    s.extend_from_slice(prefix);
    s.extend_from_slice(body);
    s
}

/// Key at `subject_pos` of `prompt`, averaged over the bare prompt and
/// `n_prefixes` prefixed copies of it.
pub fn compute_key(
    model: &ToyModel,
    prompt: &[TokenId],
    subject_pos: usize,
    layer: usize,
    n_prefixes: usize,
    seed: u64,
) -> Result<KeyVector> {
    model.check_layer(layer)?;
    if subject_pos >= prompt.len() {
        return Err(Error::invalid(format!("subject position {subject_pos} outside a {}-token query", prompt.len())));
    }
    let shift = usize::from(prompt.first() == Some(&BOS));
    if subject_pos < shift {
        return Err(Error::invalid("subject position points at BOS"));
    }
    let prefixes = context_prefixes(model.config.vocab_size, n_prefixes, seed);
    if let Some(p) = prefixes.iter().find(|p| prompt.len() + p.len() > model.config.context_len) {
        return Err(Error::invalid(format!("no room for a {}-token prefix in the context", p.len())));
    }
    let mut sum = model.key_at(prompt, layer, subject_pos)?;
    for p in &prefixes {
        let k = model.key_at(&prefixed(prompt, p), layer, subject_pos + p.len())?;
        for (s, v) in sum.iter_mut().zip(k) {
            *s += v;
        }
    }
    let n = prefixes.len() + 1;
    for s in sum.iter_mut() {
        *s /= n as f64;
    }
    Ok(KeyVector {
        layer,
        vector: sum,
        n_contexts_averaged: n,
    })
}

/// Key of an edit at `layer` under `spec`'s averaging discipline.
pub fn edit_key(model: &ToyModel, edit: &EditQuery, layer: usize, spec: &EditorSpec) -> Result<KeyVector> {
    let pos = last_subject(edit)?;
    let n = if spec.kind == EditorKind::Rome { 0 } else { spec.context_prefixes };
    compute_key(model, &edit.prompt(), pos, layer, n, spec.prefix_seed)
}

fn last_subject(edit: &EditQuery) -> Result<usize> {
    edit.subject_positions()
        .last()
        .copied()
        .ok_or_else(|| Error::invalid(format!("{}: subject does not occur in the query", edit.id)))
}

/// Result of the value search.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTarget {
    pub layer: usize,
    pub position: usize,
    /// MLP output (bias included) at the site in the unedited model.
    pub original: Vec<f64>,
    /// Optimised replacement for that output.
    pub optimized: Vec<f64>,
    pub steps_run: usize,
    pub final_nll: f64,
}

impl ValueTarget {
    pub fn delta(&self) -> Vec<f64> {
        self.optimized.iter().zip(&self.original).map(|(a, b)| a - b).collect()
    }

    /// Hooks that substitute the optimised output at the site.
    pub fn patch(&self) -> Hooks {
        Hooks {
            mlp: vec![MlpPatch {
                layer: self.layer,
                position: self.position,
                output: self.optimized.clone(),
            }],
            ..Hooks::default()
        }
    }
}

fn mlp_output_at(model: &ToyModel, tokens: &[TokenId], layer: usize, pos: usize) -> Result<Vec<f64>> {
    let (trace, _) = model.capture_activations(tokens)?;
    Ok(trace.mlp_out[layer][pos].clone())
}

/// Loss and δ-gradient of the value objective at `delta`.
struct ValueObjective<'a> {
    model: &'a ToyModel,
    layer: usize,
    seq: Vec<TokenId>,
    pos: usize,
    targets: std::ops::Range<usize>,
    base: Vec<f64>,
    anchor: Vec<TokenId>,
    anchor_base: Vec<f64>,
    anchor_p0: Vec<f64>,
    opts: ValueOptions,
}

impl ValueObjective<'_> {
    fn patched(&self, base: &[f64], delta: &[f64], pos: usize) -> Hooks {
        Hooks {
            mlp: vec![MlpPatch {
                layer: self.layer,
                position: pos,
                output: base.iter().zip(delta).map(|(a, b)| a + b).collect(),
            }],
            ..Hooks::default()
        }
    }

    /// (target NLL, total loss, gradient)
    fn eval(&self, delta: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
        let m = self.model;
        let (d, v) = (m.config.d_model, m.config.vocab_size);
        let cache = m.forward_hooked(&self.seq, &self.patched(&self.base, delta, self.pos))?;
        let (nll, dlogits) = m.target_nll(&cache, self.targets.clone());
        let dres = m.residual_gradient(&cache, &dlogits, self.layer + 1);
        let mut grad = dres[self.pos * d..(self.pos + 1) * d].to_vec();
        let mut loss = nll;

        if self.opts.kl_coef > 0.0 {
            let ap = self.anchor.len() - 1;
            let cache = m.forward_hooked(&self.anchor, &self.patched(&self.anchor_base, delta, ap))?;
            let lsm = crate::model::log_softmax(cache.logits_at(ap, v));
            let mut dl = vec![0.0; self.anchor.len() * v];
            let mut kl = 0.0;
            for (j, (&p0, &lp)) in self.anchor_p0.iter().zip(&lsm).enumerate() {
                if p0 > 0.0 {
                    kl += p0 * (p0.ln() - lp);
                }
                dl[ap * v + j] = self.opts.kl_coef * (lp.exp() - p0);
            }
            loss += self.opts.kl_coef * kl;
            let dres = m.residual_gradient(&cache, &dl, self.layer + 1);
            for (g, x) in grad.iter_mut().zip(&dres[ap * d..(ap + 1) * d]) {
                *g += x;
            }
        }
        let wd = self.opts.weight_decay;
        loss += wd * dot(delta, delta);
        for (g, x) in grad.iter_mut().zip(delta) {
            *g += 2.0 * wd * x;
        }
        Ok((nll, loss, grad))
    }
}

/// Optimises the MLP output at the last subject token of `BOS query` so the
/// model continues with `new_knowledge`. Deterministic (no sampling).
pub fn compute_value(model: &ToyModel, edit: &EditQuery, layer: usize, opts: &ValueOptions) -> Result<ValueTarget> {
    model.check_layer(layer)?;
    if opts.steps == 0 {
        return Err(Error::invalid("value optimisation needs at least one step"));
    }
    if edit.new_knowledge.is_empty() {
        return Err(Error::invalid(format!("{}: empty new knowledge", edit.id)));
    }
    let pos = last_subject(edit)?;
    let prompt = edit.prompt();
    let seq = edit.new_sequence();
    let anchor = vec![BOS, edit.subject];
    let obj = ValueObjective {
        model,
        layer,
        base: mlp_output_at(model, &prompt, layer, pos)?,
        targets: prompt.len()..seq.len(),
        seq,
        pos,
        anchor_base: mlp_output_at(model, &anchor, layer, 1)?,
        anchor_p0: model.next_token_probs(&anchor, &Hooks::none())?,
        anchor,
        opts: *opts,
    };

    let d = model.config.d_model;
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut delta = vec![0.0; d];
    let (mut mom, mut vel) = (vec![0.0; d], vec![0.0; d]);
    let mut steps_run = 0;
    let mut nll;
    loop {
        let (n, loss, grad) = obj.eval(&delta)?;
        nll = n;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("{}: value optimisation diverged at step {steps_run}", edit.id)));
        }
        if nll < opts.stop_nll || steps_run == opts.steps {
            break;
        }
        steps_run += 1;
        let (c1, c2) = (1.0 - b1.powi(steps_run as i32), 1.0 - b2.powi(steps_run as i32));
        for j in 0..d {
            mom[j] = b1 * mom[j] + (1.0 - b1) * grad[j];
            vel[j] = b2 * vel[j] + (1.0 - b2) * grad[j] * grad[j];
            delta[j] -= opts.learning_rate * (mom[j] / c1) / ((vel[j] / c2).sqrt() + eps);
        }
    }
    Ok(ValueTarget {
        layer,
        position: pos,
        optimized: obj.base.iter().zip(&delta).map(|(a, b)| a + b).collect(),
        original: obj.base,
        steps_run,
        final_nll: nll,
    })
}

/// `W_out += u rᵀ / (kᵀu)` with `u = C⁻¹k`, `r = v − W_outᵀk`. After the
/// update `W_outᵀk = v` (up to rounding).
pub fn rank_one_update(w_out: &mut [f64], d_model: usize, cov: &CovarianceEstimate, key: &[f64], value: &[f64]) -> Result<()> {
    let m = cov.dim;
    check_shapes(w_out, m, d_model, key, value)?;
    let u = cov.solve(key);
    let denom = dot(key, &u);
    if !(denom > DEGENERATE_KEY) {
        return Err(Error::DegenerateKey(denom));
    }
    let r = residual(w_out, d_model, key, value);
    for i in 0..m {
        let a = u[i] / denom;
        let row = &mut w_out[i * d_model..(i + 1) * d_model];
        for (w, rj) in row.iter_mut().zip(&r) {
            *w += a * rj;
        }
    }
    Ok(())
}

/// Minimiser of `‖Δ C^{1/2}‖²` subject to `(W_out + Δ)ᵀ K = V`:
/// `Δ = U G⁻¹ Rᵀ` with `U = C⁻¹K`, `G = KᵀU`, `R = V − W_outᵀK`.
pub fn batch_update(
    w_out: &mut [f64],
    d_model: usize,
    cov: &CovarianceEstimate,
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
) -> Result<()> {
    let (m, b) = (cov.dim, keys.len());
    if b == 0 || values.len() != b {
        return Err(Error::invalid("batch needs matching, non-empty keys and values"));
    }
    for (k, v) in keys.iter().zip(values) {
        check_shapes(w_out, m, d_model, k, v)?;
    }
    let u: Vec<Vec<f64>> = keys.iter().map(|k| cov.solve(k)).collect();
    let mut g = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            g[i * b + j] = dot(&keys[i], &u[j]);
        }
    }
    // KᵀC⁻¹K is symmetric in exact arithmetic
    for i in 0..b {
        for j in 0..i {
            let s = 0.5 * (g[i * b + j] + g[j * b + i]);
            g[i * b + j] = s;
            g[j * b + i] = s;
        }
    }
    if b == 1 && !(g[0] > DEGENERATE_KEY) {
        return Err(Error::DegenerateKey(g[0]));
    }
    let gch = Cholesky::factor(&g, b, GRAM_TOL)
        .map_err(|_| Error::DegenerateBatch(format!("keys of a {b}-edit batch are linearly dependent")))?;
    let r: Vec<Vec<f64>> = keys.iter().zip(values).map(|(k, v)| residual(w_out, d_model, k, v)).collect();
    let mut urow = vec![0.0; b];
    for i in 0..m {
        for c in 0..b {
            urow[c] = u[c][i];
        }
        let a = if b == 1 { vec![urow[0] / g[0]] } else { gch.solve(&urow) };
        let row = &mut w_out[i * d_model..(i + 1) * d_model];
        for (c, rc) in r.iter().enumerate() {
            for (w, x) in row.iter_mut().zip(rc) {
                *w += a[c] * x;
            }
        }
    }
    Ok(())
}

fn check_shapes(w_out: &[f64], m: usize, d: usize, key: &[f64], value: &[f64]) -> Result<()> {
    if w_out.len() != m * d || key.len() != m || value.len() != d {
        return Err(Error::invalid(format!(
            "shape mismatch: W_out {} vs {m}×{d}, key {}, value {}",
            w_out.len(),
            key.len(),
            value.len()
        )));
    }
    Ok(())
}

/// `v − W_outᵀk`
fn residual(w_out: &[f64], d: usize, key: &[f64], value: &[f64]) -> Vec<f64> {
    let mut r = value.to_vec();
    for (i, &ki) in key.iter().enumerate() {
        for (rj, w) in r.iter_mut().zip(&w_out[i * d..(i + 1) * d]) {
            *rj -= ki * w;
        }
    }
    r
}

/// An edited copy plus the constraints it was built from.
#[derive(Debug, Clone)]
pub struct EditOutput {
    pub model: ToyModel,
    pub keys: Vec<KeyVector>,
    /// Targets for `W_outᵀk` (bias excluded), one per key.
    pub values: Vec<Vec<f64>>,
    pub targets: Vec<ValueTarget>,
}

/// Key, pre-bias target and value search for one edit.
fn key_and_value(model: &ToyModel, edit: &EditQuery, spec: &EditorSpec) -> Result<(KeyVector, Vec<f64>, ValueTarget)> {
    let key = edit_key(model, edit, spec.layer, spec)?;
    let target = compute_value(model, edit, spec.layer, &spec.value)?;
    // The same key is used for the target as for the update, so the layer
    // adds exactly δ on (averaged) key k*.
    let mut v = model.apply_w_out(spec.layer, &key.vector);
    for (x, dx) in v.iter_mut().zip(target.delta()) {
        *x += dx;
    }
    Ok((key, v, target))
}

fn check_cov(model: &ToyModel, spec: &EditorSpec, cov: &CovarianceEstimate) -> Result<()> {
    spec.validate()?;
    model.check_layer(spec.layer)?;
    if cov.layer != spec.layer || cov.dim != model.config.d_mlp {
        return Err(Error::invalid(format!(
            "covariance is for layer {} (dim {}), edit targets layer {}",
            cov.layer, cov.dim, spec.layer
        )));
    }
    Ok(())
}

/// ROME / R-ROME rank-one edit; returns an edited copy.
pub fn rome_edit(model: &ToyModel, edit: &EditQuery, spec: &EditorSpec, cov: &CovarianceEstimate) -> Result<EditOutput> {
    check_cov(model, spec, cov)?;
    if spec.kind == EditorKind::Emmet {
        return Err(Error::invalid("rome_edit called with an emmet spec"));
    }
    let (key, value, target) = key_and_value(model, edit, spec)?;
    let mut out = model.clone();
    let d = model.config.d_model;
    rank_one_update(out.w_out_mut(spec.layer), d, cov, &key.vector, &value)?;
    Ok(EditOutput {
        model: out,
        keys: vec![key],
        values: vec![value],
        targets: vec![target],
    })
}

/// EMMET batched edit under equality constraints.
pub fn emmet_edit(model: &ToyModel, edits: &[EditQuery], spec: &EditorSpec, cov: &CovarianceEstimate) -> Result<EditOutput> {
    check_cov(model, spec, cov)?;
    if edits.is_empty() {
        return Err(Error::invalid("emmet needs at least one edit"));
    }
    let mut keys = Vec::with_capacity(edits.len());
    let mut values = Vec::with_capacity(edits.len());
    let mut targets = Vec::with_capacity(edits.len());
    for e in edits {
        let (k, v, t) = key_and_value(model, e, spec)?;
        keys.push(k);
        values.push(v);
        targets.push(t);
    }
    let mut out = model.clone();
    let d = model.config.d_model;
    let kv: Vec<Vec<f64>> = keys.iter().map(|k| k.vector.clone()).collect();
    batch_update(out.w_out_mut(spec.layer), d, cov, &kv, &values)?;
    Ok(EditOutput {
        model: out,
        keys,
        values,
        targets,
    })
}

/// Dispatches on `spec.kind`. ROME-family editors take exactly one edit.
pub fn apply_edit(model: &ToyModel, edits: &[EditQuery], spec: &EditorSpec, cov: &CovarianceEstimate) -> Result<EditOutput> {
    match spec.kind {
        EditorKind::Emmet => emmet_edit(model, edits, spec, cov),
        _ => match edits {
            [e] => rome_edit(model, e, spec, cov),
            _ => Err(Error::invalid(format!("{} edits one fact at a time, got {}", spec.kind, edits.len()))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ToyModel {
        let c = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 12,
            context_len: 16,
            vocab_size: 20,
        };
        ToyModel::init(c, 3).unwrap()
    }

    fn cov_of(keys: &[Vec<f64>], m: usize, lambda: f64) -> CovarianceEstimate {
        let mut mom = vec![0.0; m * m];
        for k in keys {
            for i in 0..m {
                for j in 0..m {
                    mom[i * m + j] += k[i] * k[j];
                }
            }
        }
        CovarianceEstimate::from_moment(0, &mom, m, keys.len(), lambda).unwrap()
    }

    #[test]
    fn covariance_definitions() {
        let c = CovarianceEstimate::from_moment(1, &[0.0; 9], 3, 0, 0.5).unwrap();
        assert_eq!(c.matrix, vec![0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5]);
        let k = vec![1.0, -2.0, 0.5];
        let c = cov_of(&[k.clone()], 3, 0.1);
        for i in 0..3 {
            for j in 0..3 {
                let want = k[i] * k[j] + if i == j { 0.1 } else { 0.0 };
                assert_eq!(c.matrix[i * 3 + j], want);
            }
        }
        assert!(CovarianceEstimate::from_moment(0, &[0.0; 4], 2, 0, 0.0).is_err());
    }

    #[test]
    fn ridge_escalates_on_indefinite_moment() {
        // -0.05 on the diagonal: λ = 0.01 fails, 0.1 works
        let mom = vec![-0.05, 0.0, 0.0, 1.0];
        let c = CovarianceEstimate::from_moment(0, &mom, 2, 1, 0.01).unwrap();
        assert!((c.lambda - 0.1).abs() < 1e-15);
        assert!(CovarianceEstimate::from_moment(0, &[-1e6, 0.0, 0.0, 1.0], 2, 1, 0.01).is_err());
    }

    #[test]
    fn rank_one_identity_when_value_already_stored() {
        let m = small();
        let k: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.3).collect();
        let c = cov_of(&[k.clone()], 12, 0.1);
        let v = m.apply_w_out(0, &k);
        let mut w = m.w_out(0).to_vec();
        rank_one_update(&mut w, 8, &c, &k, &v).unwrap();
        for (a, b) in w.iter().zip(m.w_out(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_key_is_degenerate() {
        let m = small();
        let c = cov_of(&[], 12, 0.1);
        let mut w = m.w_out(0).to_vec();
        let err = rank_one_update(&mut w, 8, &c, &[0.0; 12], &[1.0; 8]).unwrap_err();
        assert!(matches!(err, Error::DegenerateKey(_)));
    }

    #[test]
    fn dependent_batch_keys_are_rejected() {
        let m = small();
        let k: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let k2: Vec<f64> = k.iter().map(|x| 2.0 * x).collect();
        let c = cov_of(&[k.clone()], 12, 0.1);
        let mut w = m.w_out(0).to_vec();
        let err = batch_update(&mut w, 8, &c, &[k, k2], &[vec![1.0; 8], vec![0.0; 8]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
    }

    #[test]
    fn prefixes_are_deterministic_and_ordinary() {
        let a = context_prefixes(20, 8, 9);
        assert_eq!(a, context_prefixes(20, 8, 9));
        assert_eq!(a.len(), 8);
        for p in &a {
            assert!((1..=3).contains(&p.len()));
            assert!(p.iter().all(|&t| (3..20).contains(&t)));
        }
        assert_eq!(prefixed(&[BOS, 7, 8], &[4, 5]), vec![BOS, 4, 5, 7, 8]);
    }

    #[test]
    fn bare_key_is_direct_capture() {
        let m = small();
        let prompt = [BOS, 5, 6, 7];
        let k = compute_key(&m, &prompt, 2, 1, 0, 0).unwrap();
        assert_eq!(k.vector, m.key_at(&prompt, 1, 2).unwrap());
        assert_eq!(k.n_contexts_averaged, 1);
        assert!(compute_key(&m, &prompt, 4, 1, 0, 0).is_err());
        assert!(compute_key(&m, &prompt, 0, 1, 0, 0).is_err());
    }

    #[test]
    fn value_objective_gradient_matches_finite_differences() {
        let m = small();
        let edit = EditQuery {
            id: "x".into(),
            subject: 9,
            query: vec![4, 9, 6],
            old_knowledge: vec![11],
            new_knowledge: vec![12, 13],
            rephrases: vec![],
            locality: vec![],
            portability: vec![],
        };
        for layer in 0..2 {
            let prompt = edit.prompt();
            let seq = edit.new_sequence();
            let anchor = vec![BOS, edit.subject];
            let obj = ValueObjective {
                model: &m,
                layer,
                base: mlp_output_at(&m, &prompt, layer, 2).unwrap(),
                targets: prompt.len()..seq.len(),
                seq,
                pos: 2,
                anchor_base: mlp_output_at(&m, &anchor, layer, 1).unwrap(),
                anchor_p0: m.next_token_probs(&anchor, &Hooks::none()).unwrap(),
                anchor,
                opts: ValueOptions::default(),
            };
            let delta: Vec<f64> = (0..8).map(|i| 0.3 * (i as f64 - 3.5)).collect();
            let (_, _, g) = obj.eval(&delta).unwrap();
            let h = 1e-5;
            for j in 0..8 {
                let mut up = delta.clone();
                up[j] += h;
                let mut dn = delta.clone();
                dn[j] -= h;
                let fd = (obj.eval(&up).unwrap().1 - obj.eval(&dn).unwrap().1) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-6 * fd.abs().max(1e-3), "layer {layer} coord {j}: fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(EditorSpec::new(EditorKind::RRome, 0).validate().is_ok());
        let mut s = EditorSpec::new(EditorKind::Rome, 0);
        s.context_prefixes = 2;
        assert!(s.validate().is_err());
        let mut s = EditorSpec::new(EditorKind::Emmet, 0);
        s.value.steps = 0;
        assert!(s.validate().is_err());
        s.value.steps = 1;
        s.covariance_reg = 0.0;
        assert!(s.validate().is_err());
        assert_eq!("r-rome".parse::<EditorKind>().unwrap(), EditorKind::RRome);
        assert!("memit".parse::<EditorKind>().is_err());
    }
}
