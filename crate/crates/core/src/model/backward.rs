use super::forward::{ForwardCache, LnCache};
use super::{gelu_grad, LayerGradient, ToyModel};
use crate::corpus::TokenId;
use crate::error::Result;
use crate::linalg::{matmul_a_bt, matmul_at_b_acc};

/// Which parameter gradients a reverse pass accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Every parameter.
    Full,
    /// MLP blocks of every layer.
    Mlp,
    /// MLP block of one layer; the pass stops below it.
    MlpLayer(usize),
    /// No parameters: only the residual-stream gradient is propagated.
    Residual,
}

impl GradScope {
    fn mlp(self, layer: usize) -> bool {
        match self {
            GradScope::Full | GradScope::Mlp => true,
            GradScope::MlpLayer(l) => l == layer,
            GradScope::Residual => false,
        }
    }

    fn dense(self) -> bool {
        self == GradScope::Full
    }
}

/// Layer-norm reverse pass; accumulates gain/bias gradients when given.
fn ln_backward(dy: &[f64], c: &LnCache, g: &[f64], d: usize, dgb: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
    let t = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    if let Some((dg, db)) = dgb {
        for r in 0..t {
            for j in 0..d {
                dg[j] += dy[r * d + j] * c.xhat[r * d + j];
                db[j] += dy[r * d + j];
            }
        }
    }
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dxhat[j] = dy[r * d + j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * c.xhat[r * d + j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = c.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - c.xhat[r * d + j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_row_sums(db: &mut [f64], dy: &[f64], n: usize) {
    for row in dy.chunks(n) {
        for (b, v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }
}

/// Splits two disjoint ranges of `grad` into mutable slices.
fn two_mut(grad: &mut [f64], a: usize, b: usize, n: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + n <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + n], &mut hi[..n])
}

impl ToyModel {
    /// Reverse pass from `dlogits` down through layers `n_layers-1 ..= stop_layer`.
    ///
    /// Parameter gradients selected by `scope` are accumulated into `grad`
    /// (indexed by the model layout; may be empty for [`GradScope::Residual`]).
    /// Returns the gradient of the residual stream entering `stop_layer`
    /// (T × d_model). Embedding gradients are written only for
    /// [`GradScope::Full`] with `stop_layer == 0`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        scope: GradScope,
        stop_layer: usize,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let c = &self.config;
        let (d, m, nh, dh, v) = (c.d_model, c.d_mlp, c.n_heads, c.head_dim(), c.vocab_size);
        let t_len = cache.len();
        let lay = &self.layout;
        let dense = scope.dense();

        // Output head and final norm.
        let head = self.slice(lay.head, d * v);
        if dense {
            matmul_at_b_acc(&cache.lnf.y, dlogits, &mut grad[lay.head..lay.head + d * v], t_len, d, v);
        }
        let dy = matmul_a_bt(dlogits, head, t_len, v, d);
        let mut dx = if dense {
            let (dg, db) = two_mut(grad, lay.lnf_g, lay.lnf_b, d);
            ln_backward(&dy, &cache.lnf, self.slice(lay.lnf_g, d), d, Some((dg, db)))
        } else {
            ln_backward(&dy, &cache.lnf, self.slice(lay.lnf_g, d), d, None)
        };

        let scale = 1.0 / (dh as f64).sqrt();
        for li in (stop_layer..c.n_layers).rev() {
            let o = lay.layers[li];
            let lc = &cache.layers[li];

            // MLP: x_next = x_mid + gelu(ln2(x_mid) W_in + b_in) W_out + b_out
            let dmlp = &dx;
            if scope.mlp(li) {
                matmul_at_b_acc(&lc.act, dmlp, &mut grad[o.w_out..o.w_out + m * d], t_len, m, d);
                add_row_sums(&mut grad[o.b_out..o.b_out + d], dmlp, d);
            }
            let mut dpre = matmul_a_bt(dmlp, self.slice(o.w_out, m * d), t_len, d, m);
            for (g, &p) in dpre.iter_mut().zip(&lc.pre) {
                *g *= gelu_grad(p);
            }
            if scope.mlp(li) {
                matmul_at_b_acc(&lc.ln2.y, &dpre, &mut grad[o.w_in..o.w_in + d * m], t_len, d, m);
                add_row_sums(&mut grad[o.b_in..o.b_in + m], &dpre, m);
            }
            let dh2 = matmul_a_bt(&dpre, self.slice(o.w_in, d * m), t_len, m, d);
            let dln2 = if dense {
                let (dg, db) = two_mut(grad, o.ln2_g, o.ln2_b, d);
                ln_backward(&dh2, &lc.ln2, self.slice(o.ln2_g, d), d, Some((dg, db)))
            } else {
                ln_backward(&dh2, &lc.ln2, self.slice(o.ln2_g, d), d, None)
            };
            let dx_mid: Vec<f64> = dx.iter().zip(&dln2).map(|(a, b)| a + b).collect();

            // Attention: x_mid = x_in + attn(ln1(x_in)) W_o + b_o
            if dense {
                matmul_at_b_acc(&lc.a_cat, &dx_mid, &mut grad[o.w_o..o.w_o + d * d], t_len, d, d);
                add_row_sums(&mut grad[o.b_o..o.b_o + d], &dx_mid, d);
            }
            let da = matmul_a_bt(&dx_mid, self.slice(o.w_o, d * d), t_len, d, d);
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut datt = vec![0.0; t_len];
            for h in 0..nh {
                let hs = h * dh;
                for i in 0..t_len {
                    let att = &lc.att[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                    let dai = &da[i * d + hs..i * d + hs + dh];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let vj = &lc.v[j * d + hs..j * d + hs + dh];
                        datt[j] = crate::linalg::dot(dai, vj);
                        weighted += att[j] * datt[j];
                        let dvj = &mut dv[j * d + hs..j * d + hs + dh];
                        for (g, &a) in dvj.iter_mut().zip(dai) {
                            *g += att[j] * a;
                        }
                    }
                    for j in 0..=i {
                        let ds = att[j] * (datt[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for e in 0..dh {
                            dq[i * d + hs + e] += ds * lc.k[j * d + hs + e];
                            dk[j * d + hs + e] += ds * lc.q[i * d + hs + e];
                        }
                    }
                }
            }
            if dense {
                for (w, b, g) in [(o.w_q, o.b_q, &dq), (o.w_k, o.b_k, &dk), (o.w_v, o.b_v, &dv)] {
                    matmul_at_b_acc(&lc.ln1.y, g, &mut grad[w..w + d * d], t_len, d, d);
                    add_row_sums(&mut grad[b..b + d], g, d);
                }
            }
            let mut dh1 = matmul_a_bt(&dq, self.slice(o.w_q, d * d), t_len, d, d);
            for (w, g) in [(o.w_k, &dk), (o.w_v, &dv)] {
                let part = matmul_a_bt(g, self.slice(w, d * d), t_len, d, d);
                for (a, b) in dh1.iter_mut().zip(part) {
                    *a += b;
                }
            }
            let dln1 = if dense {
                let (dg, db) = two_mut(grad, o.ln1_g, o.ln1_b, d);
                ln_backward(&dh1, &lc.ln1, self.slice(o.ln1_g, d), d, Some((dg, db)))
            } else {
                ln_backward(&dh1, &lc.ln1, self.slice(o.ln1_g, d), d, None)
            };
            dx = dx_mid.iter().zip(&dln1).map(|(a, b)| a + b).collect();
        }

        if dense && stop_layer == 0 {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let te = lay.tok_emb + tok as usize * d;
                let pe = lay.pos_emb + t * d;
                for j in 0..d {
                    grad[te + j] += dx[t * d + j];
                    grad[pe + j] += dx[t * d + j];
                }
            }
        }
        dx
    }

    /// Full-sequence loss and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, tokens: &[TokenId]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.layout.total];
        let loss = self.accumulate_gradient(tokens, &mut grad)?;
        Ok((loss, grad))
    }

    /// Adds the full-sequence loss gradient into `grad`; returns the loss.
    pub fn accumulate_gradient(&self, tokens: &[TokenId], grad: &mut [f64]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(crate::Error::invalid("loss needs at least two tokens"));
        }
        let cache = self.forward(tokens)?;
        let (loss, dlogits) = self.target_nll(&cache, 1..tokens.len());
        self.backward(&cache, &dlogits, GradScope::Full, 0, grad);
        Ok(loss)
    }

    /// Gradient of [`ToyModel::loss_full`] restricted to one layer's MLP
    /// parameters. The reverse pass stops at that layer.
    pub fn layer_gradient(&self, tokens: &[TokenId], layer: usize) -> Result<LayerGradient> {
        self.check_layer(layer)?;
        if tokens.len() < 2 {
            return Err(crate::Error::invalid("loss needs at least two tokens"));
        }
        let cache = self.forward(tokens)?;
        let (_, dlogits) = self.target_nll(&cache, 1..tokens.len());
        let mut grad = vec![0.0; self.layout.total];
        self.backward(&cache, &dlogits, GradScope::MlpLayer(layer), layer, &mut grad);
        let r = self.layout.layers[layer].mlp();
        Ok(LayerGradient {
            layer,
            flat: grad[r].to_vec(),
        })
    }

    /// Every layer's restricted gradient from a single reverse pass.
    pub fn all_layer_gradients(&self, tokens: &[TokenId]) -> Result<Vec<LayerGradient>> {
        if tokens.len() < 2 {
            return Err(crate::Error::invalid("loss needs at least two tokens"));
        }
        let cache = self.forward(tokens)?;
        let (_, dlogits) = self.target_nll(&cache, 1..tokens.len());
        let mut grad = vec![0.0; self.layout.total];
        self.backward(&cache, &dlogits, GradScope::Mlp, 0, &mut grad);
        Ok(self
            .layout
            .layers
            .iter()
            .enumerate()
            .map(|(layer, o)| LayerGradient {
                layer,
                flat: grad[o.mlp()].to_vec(),
            })
            .collect())
    }

    /// Gradient of the residual stream entering `layer` (T × d_model) given
    /// logit gradients; `layer == n_layers` stops right after the final norm.
    pub fn residual_gradient(&self, cache: &ForwardCache, dlogits: &[f64], layer: usize) -> Vec<f64> {
        self.backward(cache, dlogits, GradScope::Residual, layer, &mut [])
    }
}

#[cfg(test)]
mod tests {
    use crate::model::{ModelConfig, ToyModel};

    fn tiny() -> ToyModel {
        let c = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_mlp: 12,
            context_len: 10,
            vocab_size: 15,
        };
        let mut m = ToyModel::init(c, 5).unwrap();
        // Larger weights make every term of the gradient matter.
        for p in m.params.iter_mut() {
            *p *= 10.0;
        }
        m
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let m = tiny();
        let toks = [0, 4, 9, 3, 12, 1];
        let (_, g) = m.loss_and_gradient(&toks).unwrap();
        // five-point stencil: truncation O(h^4), so h can stay large enough
        // that cancellation does not swamp near-zero coordinates
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in (0..m.params.len()).step_by(7) {
            let at = |d: f64| {
                let mut p = m.clone();
                p.params[i] += d;
                p.loss_full(&toks).unwrap()
            };
            let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn restricted_gradients_are_slices_of_full() {
        let m = tiny();
        let toks = [0, 4, 9, 3, 12];
        let (_, full) = m.loss_and_gradient(&toks).unwrap();
        let all = m.all_layer_gradients(&toks).unwrap();
        for (l, lg) in all.iter().enumerate() {
            let r = m.layout.layers[l].mlp();
            assert_eq!(lg.flat.len(), m.config.mlp_param_count());
            let single = m.layer_gradient(&toks, l).unwrap();
            assert_eq!(single.flat, lg.flat);
            for (a, b) in lg.flat.iter().zip(&full[r]) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12));
            }
        }
        assert!(m.layer_gradient(&toks, 3).is_err());
    }

    #[test]
    fn unused_positional_rows_get_zero_gradient() {
        let m = tiny();
        let toks = [0, 4, 9];
        let (_, g) = m.loss_and_gradient(&toks).unwrap();
        let d = m.config.d_model;
        let start = m.layout.pos_emb + toks.len() * d;
        let end = m.layout.pos_emb + m.config.context_len * d;
        assert!(g[start..end].iter().all(|&x| x == 0.0));
    }
}
