//! Transformer building blocks on top of [`Graph`].

use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Mat, Var};
use super::params::{ParamId, Params};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(p: &mut Params, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = p.normal(format!("{name}.weight"), d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng);
        let bias = p.zeros(format!("{name}.bias"), 1, d_out);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Var {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(p: &mut Params, name: &str, dim: usize) -> Self {
        let gain = p.filled(format!("{name}.gain"), 1, dim, 1.0);
        let bias = p.zeros(format!("{name}.bias"), 1, dim);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Var {
        let n = g.normalize(x, LN_EPS);
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// softmax(q·kᵀ·scale + mask)·v for one head. Returns the output and the
/// attention probabilities.
pub fn scaled_masked_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    scale: f64,
) -> (Var, Var) {
    let scores = g.matmul_bt(q, k);
    let scores = g.scale(scores, scale);
    let scores = match mask {
        Some(m) => g.add(scores, m),
        None => scores,
    };
    let probs = g.softmax(scores);
    (g.matmul(probs, v), probs)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
    pub scale: f64,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(p: &mut Params, name: &str, d_model: usize, heads: usize, scale: f64, rng: &mut R) -> Self {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "d_model must be divisible by heads");
        Self {
            wq: Linear::new(p, &format!("{name}.w_q"), d_model, d_model, rng),
            wk: Linear::new(p, &format!("{name}.w_k"), d_model, d_model, rng),
            wv: Linear::new(p, &format!("{name}.w_v"), d_model, d_model, rng),
            wo: Linear::new(p, &format!("{name}.w_o"), d_model, d_model, rng),
            heads,
            d_model,
            scale,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var, mask: Option<Var>) -> (Var, Vec<Var>) {
        let rows = g.value(x).nrows();
        let (out, probs) = self.forward_blocked(g, p, x, rows, mask);
        (out, probs.into_iter().map(|mut b| b.remove(0)).collect())
    }

    /// Attention restricted to consecutive blocks of `block` rows, with
    /// `mask` (`block × block`) added inside every block. Equivalent to a
    /// block-diagonal mask over all rows without materializing it.
    /// Returns probabilities per head, then per block.
    pub fn forward_blocked(
        &self,
        g: &mut Graph,
        p: &Params,
        x: Var,
        block: usize,
        mask: Option<Var>,
    ) -> (Var, Vec<Vec<Var>>) {
        let rows = g.value(x).nrows();
        assert!(block > 0 && rows.is_multiple_of(block), "rows must be a multiple of the block length");
        let q = self.wq.forward(g, p, x);
        let k = self.wk.forward(g, p, x);
        let v = self.wv.forward(g, p, x);
        let dh = self.d_model / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let mut block_outs = Vec::with_capacity(rows / block);
            let mut block_probs = Vec::with_capacity(rows / block);
            for start in (0..rows).step_by(block) {
                let (qb, kb, vb) = if block == rows {
                    (qh, kh, vh)
                } else {
                    (g.slice_rows(qh, start, block), g.slice_rows(kh, start, block), g.slice_rows(vh, start, block))
                };
                let (o, pr) = scaled_masked_attention(g, qb, kb, vb, mask, self.scale);
                block_outs.push(o);
                block_probs.push(pr);
            }
            outs.push(if block_outs.len() == 1 { block_outs[0] } else { g.concat_rows(&block_outs) });
            probs.push(block_probs);
        }
        let merged = if self.heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.wo.forward(g, p, merged), probs)
    }
}

/// Pre-norm transformer layer: x + MHA(LN(x)), then x + FFN(LN(x)).
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        p: &mut Params,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(p, &format!("{name}.ln_attn"), d_model),
            attn: MultiHeadAttention::new(p, &format!("{name}.attn"), d_model, heads, scale, rng),
            ln_ff: LayerNorm::new(p, &format!("{name}.ln_ff"), d_model),
            ff_in: Linear::new(p, &format!("{name}.ff_in"), d_model, d_ff, rng),
            ff_out: Linear::new(p, &format!("{name}.ff_out"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var, mask: Option<Var>) -> (Var, Vec<Var>) {
        let rows = g.value(x).nrows();
        let (y, probs) = self.forward_blocked(g, p, x, rows, mask);
        (y, probs.into_iter().map(|mut b| b.remove(0)).collect())
    }

    /// See [`MultiHeadAttention::forward_blocked`].
    pub fn forward_blocked(&self, g: &mut Graph, p: &Params, x: Var, block: usize, mask: Option<Var>) -> (Var, Vec<Vec<Var>>) {
        let h = self.ln_attn.forward(g, p, x);
        let (a, probs) = self.attn.forward_blocked(g, p, h, block, mask);
        let x = g.add(x, a);
        let h = self.ln_ff.forward(g, p, x);
        let h = self.ff_in.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.ff_out.forward(g, p, h);
        (g.add(x, h), probs)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub ln_final: LayerNorm,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        p: &mut Params,
        name: &str,
        layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| TransformerLayer::new(p, &format!("{name}.layer{i}"), d_model, heads, d_ff, scale, rng))
            .collect();
        Self {
            layers,
            ln_final: LayerNorm::new(p, &format!("{name}.ln_final"), d_model),
        }
    }

    /// Runs every layer; `mask` is an additive {0, -inf} matrix over rows.
    /// Returns the output and per-layer, per-head attention probabilities.
    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var, mask: Option<&Mat>) -> (Var, Vec<Vec<Var>>) {
        let rows = g.value(x).nrows();
        let (y, probs) = self.forward_blocked(g, p, x, rows, mask);
        let probs = probs
            .into_iter()
            .map(|layer| layer.into_iter().map(|mut b| b.remove(0)).collect())
            .collect();
        (y, probs)
    }

    /// Every layer attends within consecutive blocks of `block` rows; `mask`
    /// is `block × block`. Probabilities are indexed by layer, head, block.
    pub fn forward_blocked(
        &self,
        g: &mut Graph,
        p: &Params,
        x: Var,
        block: usize,
        mask: Option<&Mat>,
    ) -> (Var, Vec<Vec<Vec<Var>>>) {
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut x = x;
        let mut all = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, probs) = layer.forward_blocked(g, p, x, block, mask);
            x = y;
            all.push(probs);
        }
        (self.ln_final.forward(g, p, x), all)
    }
}

/// Standard sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::new();
        let stack = TransformerStack::new(&mut p, "t", 2, 8, 2, 16, 0.5, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 * 0.01));
        let (y, probs) = stack.forward(&mut g, &p, x, None);
        assert_eq!(g.value(y).dim(), (5, 8));
        assert_eq!(probs.len(), 2);
        assert_eq!(probs[0].len(), 2);
        for pr in &probs[1] {
            for row in g.value(*pr).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positions_table() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[2, 3]] - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
