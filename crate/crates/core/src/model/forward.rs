use super::{gelu, ToyModel, LN_EPS};
use crate::corpus::{TokenId, EOS};
use crate::error::{Error, Result};
use crate::linalg::{affine, dot};

/// Additive noise on the input embedding at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNoise {
    pub position: usize,
    pub noise: Vec<f64>,
}

/// Replaces the MLP output (after `b_out`) of `layer` at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPatch {
    pub layer: usize,
    pub position: usize,
    pub output: Vec<f64>,
}

/// Replaces the residual stream entering `layer` at `position`;
/// `layer == n_layers` addresses the stream entering the final norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPatch {
    pub layer: usize,
    pub position: usize,
    pub state: Vec<f64>,
}

/// Interventions applied during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    pub embed_noise: Vec<EmbedNoise>,
    pub mlp: Vec<MlpPatch>,
    pub residual: Vec<ResidualPatch>,
}

impl Hooks {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.embed_noise.is_empty() && self.mlp.is_empty() && self.residual.is_empty()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub ln1: LnCache,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// n_heads × T × T, zero above the diagonal.
    pub att: Vec<f64>,
    pub a_cat: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub ln2: LnCache,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub mlp_out: Vec<f64>,
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<TokenId>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) lnf: LnCache,
    /// T × vocab logits.
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Logits at position `t`.
    pub fn logits_at(&self, t: usize, vocab: usize) -> &[f64] {
        &self.logits[t * vocab..(t + 1) * vocab]
    }
}

/// Per-layer, per-position activations. Each field is indexed
/// `[layer][position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// Residual stream entering the block.
    pub residual_in: Vec<Vec<Vec<f64>>>,
    /// Residual stream after attention, i.e. what the MLP's norm reads.
    pub residual_mid: Vec<Vec<Vec<f64>>>,
    /// Normalized MLP input (d_model).
    pub mlp_in: Vec<Vec<Vec<f64>>>,
    /// Post-GELU activation feeding `W_out` (d_mlp): the key site.
    pub key: Vec<Vec<Vec<f64>>>,
    /// MLP output including `b_out` (d_model).
    pub mlp_out: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> LnCache {
    let t = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t];
    let mut y = vec![0.0; x.len()];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = g[j] * xh + b[j];
        }
    }
    LnCache { xhat, rstd, y }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ToyModel {
    /// Forward pass with interventions, keeping every intermediate.
    pub fn forward_hooked(&self, tokens: &[TokenId], hooks: &Hooks) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let (d, m, nh, dh, v) = (c.d_model, c.d_mlp, c.n_heads, c.head_dim(), c.vocab_size);
        let t_len = tokens.len();
        let lay = &self.layout;

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let te = self.slice(lay.tok_emb + tok as usize * d, d);
            let pe = self.slice(lay.pos_emb + t * d, d);
            for j in 0..d {
                x[t * d + j] = te[j] + pe[j];
            }
        }
        for n in &hooks.embed_noise {
            check_site(n.position, t_len, n.noise.len(), d)?;
            for j in 0..d {
                x[n.position * d + j] += n.noise[j];
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(c.n_layers);
        for (li, o) in lay.layers.iter().enumerate() {
            apply_residual_patches(&mut x, hooks, li, t_len, d)?;
            let x_in = x.clone();
            let ln1 = layer_norm(&x, self.slice(o.ln1_g, d), self.slice(o.ln1_b, d), d);
            let q = affine(&ln1.y, self.slice(o.w_q, d * d), self.slice(o.b_q, d), t_len, d, d);
            let k = affine(&ln1.y, self.slice(o.w_k, d * d), self.slice(o.b_k, d), t_len, d, d);
            let vv = affine(&ln1.y, self.slice(o.w_v, d * d), self.slice(o.b_v, d), t_len, d, d);

            let mut att = vec![0.0; nh * t_len * t_len];
            let mut a_cat = vec![0.0; t_len * d];
            for h in 0..nh {
                let hs = h * dh;
                for i in 0..t_len {
                    let qi = &q[i * d + hs..i * d + hs + dh];
                    let row = &mut att[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = dot(qi, &k[j * d + hs..j * d + hs + dh]) * scale;
                    }
                    softmax_in_place(row);
                    let out = &mut a_cat[i * d + hs..i * d + hs + dh];
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &vv[j * d + hs..j * d + hs + dh];
                        for (o_, &vj_) in out.iter_mut().zip(vj) {
                            *o_ += a * vj_;
                        }
                    }
                }
            }
            let attn_out = affine(&a_cat, self.slice(o.w_o, d * d), self.slice(o.b_o, d), t_len, d, d);
            let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let ln2 = layer_norm(&x_mid, self.slice(o.ln2_g, d), self.slice(o.ln2_b, d), d);
            let pre = affine(&ln2.y, self.slice(o.w_in, d * m), self.slice(o.b_in, m), t_len, d, m);
            let act: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
            let mut mlp_out = affine(&act, self.slice(o.w_out, m * d), self.slice(o.b_out, d), t_len, m, d);
            for p in hooks.mlp.iter().filter(|p| p.layer == li) {
                check_site(p.position, t_len, p.output.len(), d)?;
                mlp_out[p.position * d..(p.position + 1) * d].copy_from_slice(&p.output);
            }
            x = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
            layers.push(LayerCache {
                x_in,
                ln1,
                q,
                k,
                v: vv,
                att,
                a_cat,
                x_mid,
                ln2,
                pre,
                act,
                mlp_out,
            });
        }
        apply_residual_patches(&mut x, hooks, c.n_layers, t_len, d)?;
        if let Some(p) = hooks.mlp.iter().find(|p| p.layer >= c.n_layers) {
            return Err(Error::invalid(format!("mlp patch layer {} out of range", p.layer)));
        }

        let lnf = layer_norm(&x, self.slice(lay.lnf_g, d), self.slice(lay.lnf_b, d), d);
        let mut logits = vec![0.0; t_len * v];
        crate::linalg::matmul_acc(&lnf.y, self.slice(lay.head, d * v), &mut logits, t_len, d, v);
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            logits,
        })
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardCache> {
        self.forward_hooked(tokens, &Hooks::none())
    }

    /// Next-token distribution after the last token.
    pub fn next_token_probs(&self, tokens: &[TokenId], hooks: &Hooks) -> Result<Vec<f64>> {
        let cache = self.forward_hooked(tokens, hooks)?;
        let v = self.config.vocab_size;
        let mut row = cache.logits_at(tokens.len() - 1, v).to_vec();
        softmax_in_place(&mut row);
        Ok(row)
    }

    /// Mean next-token negative log-likelihood over every position of `tokens`.
    pub fn loss_full(&self, tokens: &[TokenId]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::invalid("loss needs at least two tokens"));
        }
        let cache = self.forward(tokens)?;
        Ok(self.target_nll(&cache, 1..tokens.len()).0)
    }

    /// Mean NLL of `tokens[j]` given the prefix, over `j ∈ targets`, and the
    /// matching gradient with respect to the logits.
    pub(crate) fn target_nll(
        &self,
        cache: &ForwardCache,
        targets: std::ops::Range<usize>,
    ) -> (f64, Vec<f64>) {
        let v = self.config.vocab_size;
        let t_len = cache.len();
        let mut dlogits = vec![0.0; t_len * v];
        let n = targets.len() as f64;
        let mut loss = 0.0;
        for j in targets {
            let pos = j - 1;
            let row = cache.logits_at(pos, v);
            let lsm = log_softmax(row);
            let tgt = cache.tokens[j] as usize;
            loss -= lsm[tgt];
            let g = &mut dlogits[pos * v..(pos + 1) * v];
            for (gi, l) in g.iter_mut().zip(&lsm) {
                *gi = l.exp() / n;
            }
            g[tgt] -= 1.0 / n;
        }
        (loss / n, dlogits)
    }

    /// Greedy argmax decoding. Ties go to the lowest token id; generation stops
    /// after emitting EOS (which is included), after `max_new` tokens, or at
    /// the context limit.
    pub fn greedy_decode(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.greedy_decode_hooked(prompt, max_new, &Hooks::none())
    }

    pub fn greedy_decode_hooked(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        hooks: &Hooks,
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let v = self.config.vocab_size;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.config.context_len {
            let cache = self.forward_hooked(&seq, hooks)?;
            let next = argmax(cache.logits_at(seq.len() - 1, v)) as TokenId;
            out.push(next);
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Forward pass that records activations at every (layer, position).
    pub fn capture_activations(&self, tokens: &[TokenId]) -> Result<(ActivationTrace, Vec<f64>)> {
        let cache = self.forward(tokens)?;
        let (d, m) = (self.config.d_model, self.config.d_mlp);
        let rows = |v: &[f64], w: usize| v.chunks(w).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let trace = ActivationTrace {
            residual_in: cache.layers.iter().map(|l| rows(&l.x_in, d)).collect(),
            residual_mid: cache.layers.iter().map(|l| rows(&l.x_mid, d)).collect(),
            mlp_in: cache.layers.iter().map(|l| rows(&l.ln2.y, d)).collect(),
            key: cache.layers.iter().map(|l| rows(&l.act, m)).collect(),
            mlp_out: cache.layers.iter().map(|l| rows(&l.mlp_out, d)).collect(),
        };
        Ok((trace, cache.logits))
    }

    /// Key-site activation (post-GELU, d_mlp) of `layer` at `position`.
    pub fn key_at(&self, tokens: &[TokenId], layer: usize, position: usize) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        if position >= tokens.len() {
            return Err(Error::invalid(format!("position {position} outside sequence")));
        }
        let cache = self.forward(tokens)?;
        let m = self.config.d_mlp;
        Ok(cache.layers[layer].act[position * m..(position + 1) * m].to_vec())
    }
}

fn check_site(position: usize, t_len: usize, len: usize, d: usize) -> Result<()> {
    if position >= t_len {
        return Err(Error::invalid(format!("hook position {position} outside sequence of {t_len}")));
    }
    if len != d {
        return Err(Error::invalid(format!("hook vector has {len} entries, expected {d}")));
    }
    Ok(())
}

fn apply_residual_patches(x: &mut [f64], hooks: &Hooks, layer: usize, t_len: usize, d: usize) -> Result<()> {
    for p in hooks.residual.iter().filter(|p| p.layer == layer) {
        check_site(p.position, t_len, p.state.len(), d)?;
        x[p.position * d..(p.position + 1) * d].copy_from_slice(&p.state);
    }
    Ok(())
}
