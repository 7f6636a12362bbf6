//! Layer scoring: Layer Gradient Analysis (LGA) and causal mediation
//! analysis (CMA), both producing a [`LayerScoreTable`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::EditQuery;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{EmbedNoise, Hooks, LayerGradient, MlpPatch, ResidualPatch, ToyModel};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lga,
    Cma,
    BruteForce,
}

/// Per-layer scores with an exclusion mask and the selected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreTable {
    pub method: Method,
    pub scores: Vec<f64>,
    pub excluded: Vec<bool>,
    pub selected_layer: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl LayerScoreTable {
    pub fn new(method: Method, scores: Vec<f64>, excluded: Vec<bool>) -> Result<Self> {
        if scores.is_empty() || scores.len() != excluded.len() {
            return Err(Error::invalid("score table needs one mask entry per layer"));
        }
        let selected_layer = select_layer(&scores, &excluded)
            .ok_or_else(|| Error::invalid("every layer is excluded"))?;
        Ok(Self {
            method,
            scores,
            excluded,
            selected_layer,
            diagnostics: Vec::new(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if select_layer(&t.scores, &t.excluded) != Some(t.selected_layer) {
            return Err(Error::Validation("selected layer is not the masked argmax".into()));
        }
        Ok(t)
    }
}

/// Argmax over non-excluded entries; ties go to the lowest index.
pub fn select_layer(scores: &[f64], excluded: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&s, &x)) in scores.iter().zip(excluded).enumerate() {
        if x {
            continue;
        }
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Inner product of two restricted gradients.
pub fn phi_from_gradients(a: &LayerGradient, b: &LayerGradient) -> f64 {
    dot(&a.flat, &b.flat)
}

/// `φ_L(z, v) = ∇_{θ_L} ℓ(z) · ∇_{θ_L} ℓ(v)` for the MLP block of `layer`.
pub fn phi_layer(model: &ToyModel, z: &[u32], v: &[u32], layer: usize) -> Result<f64> {
    let gz = model.layer_gradient(z, layer)?;
    let gv = model.layer_gradient(v, layer)?;
    Ok(phi_from_gradients(&gz, &gv))
}

/// Per-layer φ between one query's old- and new-knowledge sequences, from
/// two reverse passes.
pub fn lga_contribution(model: &ToyModel, edit: &EditQuery) -> Result<Vec<f64>> {
    let old = model.all_layer_gradients(&edit.old_sequence())?;
    let new = model.all_layer_gradients(&edit.new_sequence())?;
    Ok(old.iter().zip(&new).map(|(a, b)| phi_from_gradients(a, b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgaOptions {
    pub tukey_k: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for LgaOptions {
    fn default() -> Self {
        Self {
            tukey_k: 1.5,
            exec: Exec::default(),
        }
    }
}

/// LGA: `scores[L] = Σ_i φ_L(Q_i ∪ K_i, Q_i ∪ K'_i)` over the proxy set, with
/// Tukey-fence outliers excluded from the argmax.
pub fn lga_scores(model: &ToyModel, proxy: &[EditQuery], opts: &LgaOptions) -> Result<LayerScoreTable> {
    if proxy.is_empty() {
        return Err(Error::invalid("LGA needs a non-empty proxy set"));
    }
    let per_query = par::map(opts.exec, proxy, |e| lga_contribution(model, e));
    let mut scores = vec![0.0; model.n_layers()];
    for contrib in per_query {
        for (s, c) in scores.iter_mut().zip(contrib?) {
            *s += c;
        }
    }
    let fences = tukey_outliers(&scores, opts.tukey_k);
    let mut table = LayerScoreTable::new(Method::Lga, scores, fences.flags)?;
    table.diagnostics.extend(fences.note);
    Ok(table)
}

/// Tukey fences over a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TukeyFences {
    pub q1: f64,
    pub q3: f64,
    pub lower: f64,
    pub upper: f64,
    pub flags: Vec<bool>,
    pub note: Option<String>,
}

/// Linear-interpolation quantile of an ascending sample at position `q·(n−1)`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Flags values outside `[Q1 − k·IQR, Q3 + k·IQR]`.
///
/// Fewer than four values, or a mask that would flag everything, yields no
/// flags and an explanatory note.
pub fn tukey_outliers(values: &[f64], k: f64) -> TukeyFences {
    let n = values.len();
    if n < 4 {
        return TukeyFences {
            q1: f64::NAN,
            q3: f64::NAN,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            flags: vec![false; n],
            note: Some(format!("tukey: {n} values is too few for fences; nothing excluded")),
        };
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lower = q1 - k * iqr;
    let upper = q3 + k * iqr;
    let mut flags: Vec<bool> = values.iter().map(|&v| v < lower || v > upper).collect();
    let mut note = None;
    if flags.iter().all(|&f| f) {
        flags.fill(false);
        note = Some("tukey: every value flagged; exclusion disabled".to_string());
    }
    TukeyFences {
        q1,
        q3,
        lower,
        upper,
        flags,
        note,
    }
}

/// Where CMA restores clean activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmaSite {
    /// MLP output of the layer at the subject positions.
    #[default]
    MlpOutput,
    /// Residual stream entering the layer at the subject positions.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmaOptions {
    pub noise_seeds: usize,
    /// Noise std as a multiple of the subject-embedding std.
    pub noise_multiplier: f64,
    pub seed: u64,
    pub site: CmaSite,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for CmaOptions {
    fn default() -> Self {
        Self {
            noise_seeds: 10,
            noise_multiplier: 3.0,
            seed: 0,
            site: CmaSite::MlpOutput,
            exec: Exec::default(),
        }
    }
}

/// Clean, corrupted and per-layer restored probabilities of the old answer.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaTrace {
    pub p_clean: f64,
    /// One entry per noise seed.
    pub p_corrupt: Vec<f64>,
    /// `[seed][layer]`.
    pub p_restore: Vec<Vec<f64>>,
}

impl CmaTrace {
    /// Average indirect effect per layer.
    pub fn indirect_effects(&self) -> Vec<f64> {
        let n_layers = self.p_restore.first().map_or(0, Vec::len);
        let n = self.p_corrupt.len() as f64;
        (0..n_layers)
            .map(|l| {
                self.p_restore
                    .iter()
                    .zip(&self.p_corrupt)
                    .map(|(r, c)| r[l] - c)
                    .sum::<f64>()
                    / n
            })
            .collect()
    }
}

/// Population std of the token embeddings of every proxy subject.
pub fn subject_embedding_std(model: &ToyModel, proxy: &[EditQuery]) -> f64 {
    let d = model.config.d_model;
    let vals: Vec<f64> = proxy
        .iter()
        .flat_map(|e| model.slice(model.layout.tok_emb + e.subject as usize * d, d).iter().copied())
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

fn noise_for(opts: &CmaOptions, sample: usize, draw: usize, positions: &[usize], d: usize, sigma: f64) -> Vec<EmbedNoise> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(((sample as u64) << 20) | draw as u64);
    positions
        .iter()
        .map(|&p| EmbedNoise {
            position: p,
            noise: (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sigma * z
                })
                .collect(),
        })
        .collect()
}

fn restore_hooks(
    clean: &crate::model::ForwardCache,
    site: CmaSite,
    layers: &[usize],
    positions: &[usize],
    d: usize,
    noise: &[EmbedNoise],
) -> Hooks {
    let mut hooks = Hooks {
        embed_noise: noise.to_vec(),
        ..Hooks::default()
    };
    for &l in layers {
        for &p in positions {
            match site {
                CmaSite::MlpOutput => hooks.mlp.push(MlpPatch {
                    layer: l,
                    position: p,
                    output: clean.layers[l].mlp_out[p * d..(p + 1) * d].to_vec(),
                }),
                CmaSite::Residual => hooks.residual.push(ResidualPatch {
                    layer: l,
                    position: p,
                    state: clean.layers[l].x_in[p * d..(p + 1) * d].to_vec(),
                }),
            }
        }
    }
    hooks
}

fn old_answer_prob(model: &ToyModel, prompt: &[u32], target: u32, hooks: &Hooks) -> Result<f64> {
    Ok(model.next_token_probs(prompt, hooks)?[target as usize])
}

/// Runs clean / corrupted / restored passes for one query.
/// `sample` selects the noise stream. Returns `None` when the query has no
/// subject span.
pub fn cma_trace(
    model: &ToyModel,
    edit: &EditQuery,
    sigma: f64,
    sample: usize,
    opts: &CmaOptions,
) -> Result<Option<CmaTrace>> {
    let positions = edit.subject_positions();
    if positions.is_empty() || edit.old_knowledge.is_empty() {
        return Ok(None);
    }
    let d = model.config.d_model;
    let prompt = edit.prompt();
    let target = edit.old_knowledge[0];
    let clean = model.forward(&prompt)?;
    let p_clean = old_answer_prob(model, &prompt, target, &Hooks::none())?;
    let mut p_corrupt = Vec::with_capacity(opts.noise_seeds);
    let mut p_restore = Vec::with_capacity(opts.noise_seeds);
    for draw in 0..opts.noise_seeds {
        let noise = noise_for(opts, sample, draw, &positions, d, sigma);
        let corrupted = Hooks {
            embed_noise: noise.clone(),
            ..Hooks::default()
        };
        p_corrupt.push(old_answer_prob(model, &prompt, target, &corrupted)?);
        let mut row = Vec::with_capacity(model.n_layers());
        for l in 0..model.n_layers() {
            let hooks = restore_hooks(&clean, opts.site, &[l], &positions, d, &noise);
            row.push(old_answer_prob(model, &prompt, target, &hooks)?);
        }
        p_restore.push(row);
    }
    Ok(Some(CmaTrace {
        p_clean,
        p_corrupt,
        p_restore,
    }))
}

/// Probability of the old answer in a corrupted run where every layer is
/// restored at once at `site` (first noise draw of `sample`).
pub fn restore_all_probability(
    model: &ToyModel,
    edit: &EditQuery,
    sigma: f64,
    sample: usize,
    opts: &CmaOptions,
) -> Result<f64> {
    let positions = edit.subject_positions();
    let d = model.config.d_model;
    let prompt = edit.prompt();
    let clean = model.forward(&prompt)?;
    let noise = noise_for(opts, sample, 0, &positions, d, sigma);
    let layers: Vec<usize> = (0..model.n_layers()).collect();
    let hooks = restore_hooks(&clean, opts.site, &layers, &positions, d, &noise);
    old_answer_prob(model, &prompt, edit.old_knowledge[0], &hooks)
}

/// CMA: average indirect effect of restoring each layer, averaged over the
/// proxy set. Queries without a subject span are skipped with a diagnostic.
pub fn cma_scores(model: &ToyModel, proxy: &[EditQuery], opts: &CmaOptions) -> Result<LayerScoreTable> {
    if proxy.is_empty() {
        return Err(Error::invalid("CMA needs a non-empty proxy set"));
    }
    if opts.noise_seeds == 0 {
        return Err(Error::invalid("CMA needs at least one noise seed"));
    }
    let sigma = opts.noise_multiplier * subject_embedding_std(model, proxy);
    let indexed: Vec<(usize, &EditQuery)> = proxy.iter().enumerate().collect();
    let traces = par::map(opts.exec, &indexed, |(i, e)| cma_trace(model, e, sigma, *i, opts));
    let mut scores = vec![0.0; model.n_layers()];
    let mut used = 0usize;
    let mut diagnostics = Vec::new();
    for ((_, e), t) in indexed.iter().zip(traces) {
        match t? {
            Some(trace) => {
                used += 1;
                for (s, v) in scores.iter_mut().zip(trace.indirect_effects()) {
                    *s += v;
                }
            }
            None => diagnostics.push(format!("cma: {} has no subject span; skipped", e.id)),
        }
    }
    if used == 0 {
        return Err(Error::invalid("CMA skipped every proxy query"));
    }
    for s in scores.iter_mut() {
        *s /= used as f64;
    }
    let excluded = vec![false; scores.len()];
    let mut table = LayerScoreTable::new(Method::Cma, scores, excluded)?;
    table.diagnostics = diagnostics;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tukey_examples() {
        let f = tukey_outliers(&[10.0, 11.0, 12.0, 13.0, 100.0], 1.5);
        assert_eq!((f.q1, f.q3, f.lower, f.upper), (11.0, 13.0, 8.0, 16.0));
        assert_eq!(f.flags, vec![false, false, false, false, true]);
        let f = tukey_outliers(&[-100.0, 10.0, 11.0, 12.0, 13.0], 1.5);
        assert_eq!(f.flags, vec![true, false, false, false, false]);
        let f = tukey_outliers(&[5.0; 4], 1.5);
        assert!(f.flags.iter().all(|&x| !x));
        let f = tukey_outliers(&[1.0, 50.0, 2.0], 1.5);
        assert!(f.flags.iter().all(|&x| !x));
        assert!(f.note.is_some());
    }

    #[test]
    fn selection_respects_mask_and_ties() {
        assert_eq!(select_layer(&[1.0, 3.0, 3.0, 9.0], &[false, false, false, true]), Some(1));
        assert_eq!(select_layer(&[1.0, 2.0], &[true, true]), None);
        assert!(LayerScoreTable::new(Method::Lga, vec![1.0], vec![true]).is_err());
    }

    #[test]
    fn phi_of_hand_vectors() {
        let a = LayerGradient { layer: 0, flat: vec![1.0, 2.0] };
        let b = LayerGradient { layer: 0, flat: vec![3.0, -1.0] };
        assert_eq!(phi_from_gradients(&a, &b), 1.0);
    }

    #[test]
    fn table_json_round_trip() {
        let t = LayerScoreTable::new(Method::Cma, vec![0.1, -0.2, 0.4], vec![false; 3]).unwrap();
        assert_eq!(t.selected_layer, 2);
        assert_eq!(LayerScoreTable::from_json(&t.to_json()).unwrap(), t);
    }
}
