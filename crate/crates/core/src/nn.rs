//! Layers shared by the local and global stages.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), input, output, rng);
        let bias = store.add_zeros(format!("{name}.bias"), 1, output);
        Self { weight, bias }
    }

    /// Zero weights and bias: the layer starts as the constant zero map.
    pub fn zeros<S: Scalar>(store: &mut ParamStore<S>, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add_zeros(format!("{name}.weight"), input, output);
        let bias = store.add_zeros(format!("{name}.bias"), 1, output);
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add(y, b)
    }

    /// `x W` without the bias term.
    pub fn forward_no_bias<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        g.matmul(x, w)
    }

    pub fn input_dim<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store.get(self.weight).rows()
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = g.gelu(h);
        self.out.forward(g, store, h)
    }
}

/// Layer normalization over columns with a learnable gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, S::one())),
            shift: store.add_zeros(format!("{name}.shift"), 1, dim),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let y = g.layer_norm(x, S::from_f64_lossy(Self::EPS));
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul(y, gain);
        g.add(y, shift)
    }
}

/// Extra additive logits for attention, one matrix per head.
pub enum AttentionBias<'a, S> {
    None,
    /// Constant per-head bias (same shape as the logits).
    Fixed(&'a [Matrix<S>]),
    /// Graph node added to every head's logits.
    Node(Var),
}

/// Result of one multi-head attention call.
pub struct AttentionOutput {
    /// `n_queries x dim`, after the output projection when present.
    pub output: Var,
    /// Row-stochastic attention matrix of each head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention.
///
/// `output` is optional: intra-modal pooling uses the concatenated head values
/// directly.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        with_output: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: with_output.then(|| Linear::new(store, &format!("{name}.o"), dim, dim, rng)),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Attends `queries` over `keys`, reading `values` (rows aligned with keys).
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        queries: Var,
        keys: Var,
        values: Var,
        bias: AttentionBias<'_, S>,
    ) -> AttentionOutput {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, keys);
        let v = self.value.forward(g, store, values);
        let (heads_out, weights) = attend_heads(g, q, k, v, self.heads, bias);
        let output = match &self.output {
            Some(o) => o.forward(g, store, heads_out),
            None => heads_out,
        };
        AttentionOutput { output, weights }
    }
}

/// Splits already-projected `q`, `k`, `v` into heads and applies softmax
/// attention per head. Returns the concatenated head outputs and each head's
/// attention matrix.
pub fn attend_heads<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: AttentionBias<'_, S>,
) -> (Var, Vec<Var>) {
    let dim = g.shape(q).1;
    let dh = dim / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let logits = g.matmul_t(qh, false, kh, true);
        let mut logits = g.scale(logits, scale);
        match &bias {
            AttentionBias::None => {}
            AttentionBias::Fixed(per_head) => {
                let b = g.input(per_head[h].clone());
                logits = g.add(logits, b);
            }
            AttentionBias::Node(b) => {
                logits = g.add(logits, *b);
            }
        }
        let a = g.softmax(logits);
        outs.push(g.matmul(a, vh));
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (out, weights)
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn sinusoidal_table<S: Scalar>(len: usize, dim: usize) -> Matrix<S> {
    Matrix::from_fn(len, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        S::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Per-head distance penalty `-slope_h * |i - j|` with slopes `2^-h`.
///
/// `query_pos` and `key_pos` are positions in the same unit (clip steps).
pub fn distance_bias<S: Scalar>(heads: usize, query_pos: &[f64], key_pos: &[f64]) -> Vec<Matrix<S>> {
    (0..heads)
        .map(|h| {
            let slope = 0.5f64.powi(h as i32);
            Matrix::from_fn(query_pos.len(), key_pos.len(), |i, j| {
                S::from_f64_lossy(-slope * (query_pos[i] - key_pos[j]).abs())
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 4, true, &mut rng);
        let mut g = Graph::new();
        let q = g.input(Matrix::from_fn(3, 8, |r, c| (r + 2 * c) as f64 * 0.1));
        let kv = g.input(Matrix::from_fn(5, 8, |r, c| ((r * c) as f64).sin()));
        let out = mha.forward(&mut g, &store, q, kv, kv, AttentionBias::None);
        assert_eq!(g.shape(out.output), (3, 8));
        for w in out.weights {
            let m = g.value(w);
            for r in 0..m.rows() {
                let s: f64 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(m.row(r).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn distance_bias_is_symmetric_about_center() {
        let pos: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let b = distance_bias::<f64>(2, &[2.0], &pos);
        assert_eq!(b[0].row(0), &[-2.0, -1.0, 0.0, -1.0, -2.0]);
        assert_eq!(b[1].row(0), &[-1.0, -0.5, 0.0, -0.5, -1.0]);
    }
}
