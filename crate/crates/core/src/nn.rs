//! Layers shared by the generator, the discriminator and the downstream
//! classifier: dense layers, layer norm, and the post-norm transformer
//! encoder layer (multi-head self-attention, add & norm, position-wise
//! feed-forward, add & norm).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Init, ParamId, ParamStore, Real, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive attention bias for masked keys.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum InitScheme {
    /// N(0, std²) for every weight matrix and embedding table.
    Small(f64),
    Xavier,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Small(0.02)
    }
}

impl InitScheme {
    pub fn weight(self) -> Init {
        match self {
            InitScheme::Small(std) => Init::Normal(std),
            InitScheme::Xavier => Init::Xavier,
        }
    }

    pub fn embedding(self) -> Init {
        match self {
            InitScheme::Small(std) => Init::Normal(std),
            InitScheme::Xavier => Init::Normal(0.1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), fan_in, fan_out, init.weight(), rng);
        let bias = bias.then(|| store.init(format!("{name}.bias"), 1, fan_out, Init::Zeros, rng));
        Linear { weight, bias }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        LayerNorm {
            gamma: store.init(format!("{name}.gamma"), 1, dim, Init::Ones, rng),
            beta: store.init(format!("{name}.beta"), 1, dim, Init::Zeros, rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, F::of(LAYER_NORM_EPS))
    }
}

/// Shape of one transformer encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub attn_hidden: usize,
    pub ffn_hidden: usize,
}

impl EncoderShape {
    pub fn validate(&self, what: &str) -> Result<(), String> {
        if self.model_dim == 0 || self.heads == 0 || self.attn_hidden == 0 || self.ffn_hidden == 0 {
            return Err(format!("{what}: all encoder dimensions must be ≥ 1"));
        }
        if !self.attn_hidden.is_multiple_of(self.heads) {
            return Err(format!(
                "{what}: attn_hidden {} not divisible by {} heads",
                self.attn_hidden, self.heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm1: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: LayerNorm,
    heads: usize,
    head_dim: usize,
}

impl EncoderLayer {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        shape: &EncoderShape,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let d = shape.model_dim;
        let h = shape.attn_hidden;
        EncoderLayer {
            query: Linear::new(store, &format!("{name}.attn.query"), d, h, true, init, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), d, h, true, init, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), d, h, true, init, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), h, d, true, init, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), d, shape.ffn_hidden, true, init, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), shape.ffn_hidden, d, true, init, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng),
            heads: shape.heads,
            head_dim: h / shape.heads,
        }
    }

    /// `x` is `(batch·len)×d`. `key_bias` is the additive
    /// `(batch·heads·len)×len` attention mask, if any.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        batch: usize,
        len: usize,
        key_bias: Option<Var>,
    ) -> Var {
        let q = self.query.forward(g, store, x);
        let k = self.key.forward(g, store, x);
        let v = self.value.forward(g, store, x);
        let q = g.split_heads(q, batch, len, self.heads);
        let k = g.split_heads(k, batch, len, self.heads);
        let v = g.split_heads(v, batch, len, self.heads);
        let groups = batch * self.heads;
        let scores = g.batched_matmul(q, k, groups, true);
        let scores = g.scale(scores, F::one() / F::of(self.head_dim as f64).sqrt());
        let scores = match key_bias {
            Some(bias) => g.add(scores, bias),
            None => scores,
        };
        let attn = g.softmax_rows(scores);
        let ctx = g.batched_matmul(attn, v, groups, false);
        let ctx = g.merge_heads(ctx, batch, len, self.heads);
        let attended = self.out.forward(g, store, ctx);
        let res1 = g.add(x, attended);
        let x1 = self.norm1.forward(g, store, res1);

        let hidden = self.ffn_in.forward(g, store, x1);
        let hidden = g.gelu(hidden);
        let ff = self.ffn_out.forward(g, store, hidden);
        let res2 = g.add(x1, ff);
        self.norm2.forward(g, store, res2)
    }
}

/// A stack of encoder layers sharing one mask.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    shape: EncoderShape,
}

impl Encoder {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        shape: EncoderShape,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let layers = (0..shape.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), &shape, init, rng))
            .collect();
        Encoder { layers, shape }
    }

    pub fn shape(&self) -> &EncoderShape {
        &self.shape
    }

    /// Runs the stack over `(batch·len)×d` input. `valid` marks non-padding
    /// positions; padded keys receive no attention.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        batch: usize,
        len: usize,
        valid: Option<&[bool]>,
    ) -> Var {
        let key_bias = valid.map(|v| g.leaf(key_padding_bias(v, batch, len, self.shape.heads)));
        self.layers
            .iter()
            .fold(x, |h, layer| layer.forward(g, store, h, batch, len, key_bias))
    }
}

/// `(batch·heads·len)×len` additive mask: 0 for valid keys, −1e9 for padding.
pub fn key_padding_bias<F: Real>(valid: &[bool], batch: usize, len: usize, heads: usize) -> Array2<F> {
    assert_eq!(valid.len(), batch * len);
    let mut bias = Array2::zeros((batch * heads * len, len));
    for b in 0..batch {
        for h in 0..heads {
            for q in 0..len {
                let row = (b * heads + h) * len + q;
                for k in 0..len {
                    if !valid[b * len + k] {
                        bias[[row, k]] = F::of(MASKED);
                    }
                }
            }
        }
    }
    bias
}

/// Sinusoidal position encodings, `len×dim`.
pub fn sinusoidal_positions<F: Real>(len: usize, dim: usize) -> Array2<F> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Position encodings tiled over a batch: `(batch·len)×dim`.
pub fn batched_positions<F: Real>(batch: usize, len: usize, dim: usize) -> Array2<F> {
    let pe = sinusoidal_positions::<F>(len, dim);
    let mut out = Array2::zeros((batch * len, dim));
    for b in 0..batch {
        out.slice_mut(ndarray::s![b * len..(b + 1) * len, ..]).assign(&pe);
    }
    out
}

/// `batch×(batch·len)` averaging matrix over the valid rows of each group.
pub fn mean_pool_matrix<F: Real>(valid: Option<&[bool]>, batch: usize, len: usize) -> Array2<F> {
    let mut pool = Array2::zeros((batch, batch * len));
    for b in 0..batch {
        let rows: Vec<usize> = (b * len..(b + 1) * len)
            .filter(|&r| valid.is_none_or(|v| v[r]))
            .collect();
        let w = F::one() / F::of(rows.len().max(1) as f64);
        for r in rows {
            pool[[b, r]] = w;
        }
    }
    pool
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn shape() -> EncoderShape {
        EncoderShape {
            model_dim: 8,
            layers: 2,
            heads: 2,
            attn_hidden: 8,
            ffn_hidden: 16,
        }
    }

    #[test]
    fn masked_positions_do_not_affect_valid_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "enc", shape(), InitScheme::Xavier, &mut rng);
        let valid = [true, true, true, false, false];
        let base = Array2::from_shape_fn((5, 8), |(r, c)| ((r * 8 + c) as f64 * 0.37).sin());
        let mut perturbed = base.clone();
        for c in 0..8 {
            perturbed[[3, c]] = 5.0;
            perturbed[[4, c]] = -2.0;
        }
        let run = |x: Array2<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let out = enc.forward(&mut g, &store, xv, 1, 5, Some(&valid));
            g.value(out).clone()
        };
        let a = run(base);
        let b = run(perturbed);
        for r in 0..3 {
            for c in 0..8 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positions_are_bounded_and_distinct() {
        let pe = sinusoidal_positions::<f64>(10, 16);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert_ne!(pe.row(1), pe.row(2));
    }

    #[test]
    fn mean_pool_weights_sum_to_one_per_group() {
        let valid = [true, false, true, true, true, false];
        let p = mean_pool_matrix::<f64>(Some(&valid), 2, 3);
        assert_eq!(p.row(0).sum(), 1.0);
        assert_eq!(p[[0, 1]], 0.0);
        assert!((p.row(1).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn encoder_shape_validation() {
        let mut s = shape();
        assert!(s.validate("enc").is_ok());
        s.attn_hidden = 7;
        assert!(s.validate("enc").is_err());
    }
}
