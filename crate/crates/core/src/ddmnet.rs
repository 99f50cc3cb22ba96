//! Local boundary model: dense difference maps, the progressive attention
//! cascade, and the per-frame confidence head.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::datamodel::{AnnotatedVideo, BoundaryPrediction, PipelineConfig};
use crate::error::{Error, Result};
use crate::featbank::FeatureBank;
use crate::nn::{
    attend_heads, distance_bias, sinusoidal_table, AttentionBias, AttentionOutput, Linear, Mlp,
    MultiHeadAttention,
};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Probability clamp used by every log-likelihood in the crate.
pub const PROB_EPS: f64 = 1e-7;

/// `M[c, i, j] = f[i, c] - f[j, c]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDifferenceMap<S> {
    channels: usize,
    len: usize,
    values: Vec<S>,
}

impl<S: Scalar> DenseDifferenceMap<S> {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> S {
        self.values[(c * self.len + i) * self.len + j]
    }

    /// Difference vectors `M[:, i, j]` for all `j`, as a `T x C` matrix.
    pub fn row(&self, i: usize) -> Matrix<S> {
        Matrix::from_fn(self.len, self.channels, |j, c| self.get(c, i, j))
    }
}

/// Signed pairwise differences of a `T x C` sequence.
pub fn compute_ddm<S: Scalar>(seq: &Matrix<S>) -> Result<DenseDifferenceMap<S>> {
    if seq.rows() == 0 {
        return Err(Error::Shape("difference map needs at least one step".into()));
    }
    if !seq.is_finite() {
        return Err(Error::Invalid("difference map input is not finite".into()));
    }
    let (t, c) = seq.shape();
    let mut values = Vec::with_capacity(c * t * t);
    for ch in 0..c {
        for i in 0..t {
            for j in 0..t {
                values.push(seq[(i, ch)] - seq[(j, ch)]);
            }
        }
    }
    Ok(DenseDifferenceMap {
        channels: c,
        len: t,
        values,
    })
}

/// Attention of each appearance row over the difference vectors of its
/// difference-map row.
#[derive(Debug, Clone)]
pub struct MapAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MapAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Builds keys and values from the explicit map, one row at a time. Row
    /// `i` of the map, `f_i - f_j` over `j`, is formed inside the graph so
    /// gradients reach the features.
    pub fn forward_reference<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        features: Var,
        appearance: Var,
        bias: Option<&[Matrix<S>]>,
    ) -> Result<AttentionOutput> {
        let (t, d) = g.shape(appearance);
        if g.shape(features) != (t, d) {
            return Err(Error::Shape(format!(
                "appearance {t}x{d} does not match features {:?}",
                g.shape(features)
            )));
        }
        let q = self.query.forward(g, store, appearance);
        let mut rows = Vec::with_capacity(t);
        let mut weights = Vec::with_capacity(t * self.heads);
        for i in 0..t {
            let fi = g.gather_rows(features, &vec![i; t]);
            let diffs = g.sub(fi, features);
            let k = self.key.forward(g, store, diffs);
            let v = self.value.forward(g, store, diffs);
            let qi = g.slice_rows(q, i, 1);
            let row_bias: Option<Vec<Matrix<S>>> = bias.map(|b| {
                b.iter()
                    .map(|m| Matrix::row_vector(m.row(i)))
                    .collect()
            });
            let bias = match &row_bias {
                Some(b) => AttentionBias::Fixed(b),
                None => AttentionBias::None,
            };
            let (out, w) = attend_heads(g, qi, k, v, self.heads, bias);
            rows.push(out);
            weights.extend(w);
        }
        let out = g.concat_rows(&rows);
        Ok(AttentionOutput {
            output: self.output.forward(g, store, out),
            weights,
        })
    }

    /// Same result computed from the sequence itself.
    ///
    /// With `G = F Wk` and `H = F Wv`, key `(i, j)` is `G_i - G_j + b_k`; the
    /// terms constant in `j` cancel in the softmax, so the logits reduce to
    /// `-q_i . G_j`, and the attended value is `H_i + b_v - sum_j a_ij H_j`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        features: Var,
        appearance: Var,
        bias: Option<&[Matrix<S>]>,
    ) -> AttentionOutput {
        let q = self.query.forward(g, store, appearance);
        let q = g.scale(q, -S::one());
        let keys = self.key.forward_no_bias(g, store, features);
        let vals = self.value.forward_no_bias(g, store, features);
        let bias = match bias {
            Some(b) => AttentionBias::Fixed(b),
            None => AttentionBias::None,
        };
        let (mixed, weights) = attend_heads(g, q, keys, vals, self.heads, bias);
        let out = g.sub(vals, mixed);
        let bv = g.param(store, self.value.bias);
        let out = g.add(out, bv);
        AttentionOutput {
            output: self.output.forward(g, store, out),
            weights,
        }
    }
}

/// `omega` learnable queries attending over one token stream.
#[derive(Debug, Clone)]
pub struct IntraModal {
    pub queries: ParamId,
    pub attn: MultiHeadAttention,
}

impl IntraModal {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        omega: usize,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            queries: store.add_normal(format!("{name}.queries"), omega, dim, 0.5, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, false, rng),
        }
    }
}

pub fn intra_modal_attention<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    module: &IntraModal,
    tokens: Var,
    bias: Option<&[Matrix<S>]>,
) -> AttentionOutput {
    let q = g.param(store, module.queries);
    let bias = match bias {
        Some(b) => AttentionBias::Fixed(b),
        None => AttentionBias::None,
    };
    module.attn.forward(g, store, q, tokens, tokens, bias)
}

/// Co-attention between the two streams.
#[derive(Debug, Clone)]
pub struct CrossModal {
    pub appearance: MultiHeadAttention,
    pub motion: MultiHeadAttention,
    pub fuse: Linear,
}

impl CrossModal {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            appearance: MultiHeadAttention::new(store, &format!("{name}.app"), dim, heads, true, rng),
            motion: MultiHeadAttention::new(store, &format!("{name}.mot"), dim, heads, true, rng),
            fuse: Linear::new(store, &format!("{name}.fuse"), 2 * dim, dim, rng),
        }
    }
}

/// Returns the fused `1 x D` vector and every attention matrix used.
pub fn cross_modal_attention<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    module: &CrossModal,
    appearance: Var,
    motion: Var,
) -> (Var, Vec<Var>) {
    let a = module
        .appearance
        .forward(g, store, appearance, motion, motion, AttentionBias::None);
    let m = module
        .motion
        .forward(g, store, motion, appearance, appearance, AttentionBias::None);
    let a2 = g.add(appearance, a.output);
    let m2 = g.add(motion, m.output);
    let pooled_a = g.mean_rows(a2);
    let pooled_m = g.mean_rows(m2);
    let cat = g.concat_cols(&[pooled_a, pooled_m]);
    let fused = module.fuse.forward(g, store, cat);
    let mut weights = a.weights;
    weights.extend(m.weights);
    (fused, weights)
}

/// Two-layer head squashed to a probability; returns `(logit, probability)`.
pub fn confidence_head<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    head: &Mlp,
    fused: Var,
) -> (Var, Var) {
    let logit = head.forward(g, store, fused);
    (logit, g.sigmoid(logit))
}

/// Subtracts each column's mean over the clip. Differences are unchanged; the
/// absolute per-video latent, which only helps memorization, is removed.
pub fn center_rows<S: Scalar>(m: &Matrix<S>) -> Matrix<S> {
    let n = S::from(m.rows().max(1)).unwrap();
    let means: Vec<S> = (0..m.cols())
        .map(|c| (0..m.rows()).fold(S::zero(), |acc, r| acc + m[(r, c)]) / n)
        .collect();
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)] - means[c])
}

/// 1 iff some boundary lies within `radius` seconds of `frame_time`.
pub fn label_frame(frame_time: f64, gt: &AnnotatedVideo, radius: f64) -> u8 {
    u8::from(gt.boundaries.iter().any(|b| (frame_time - b).abs() <= radius))
}

/// Binary cross-entropy with the probability clamped to `[eps, 1 - eps]`.
pub fn local_loss(p: f64, label: u8) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Graph version of [`local_loss`] scaled by `weight`.
pub fn local_loss_node<S: Scalar>(g: &mut Graph<S>, p: Var, label: u8, weight: S) -> Var {
    let eps = S::from_f64_lossy(PROB_EPS);
    let p = g.clamp(p, eps, S::one() - eps);
    let target = if label == 1 { p } else { g.affine(p, -S::one(), S::one()) };
    let ll = g.log(target);
    g.scale(ll, -weight)
}

/// Per-frame confidences of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConfidenceTrack {
    pub id: String,
    pub times: Vec<f64>,
    pub confidences: Vec<f64>,
}

/// Local maxima of the track with confidence at least `tau`. A plateau
/// counts once, at its first index; track ends compare with their one
/// neighbour.
pub fn extract_boundaries(track: &BoundaryConfidenceTrack, tau: f64) -> Result<Vec<BoundaryPrediction>> {
    let c = &track.confidences;
    if c.is_empty() {
        return Err(Error::Invalid(format!("empty confidence track for {:?}", track.id)));
    }
    if c.len() != track.times.len() {
        return Err(Error::Shape("track times and confidences differ in length".into()));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < c.len() {
        let mut j = i;
        while j + 1 < c.len() && c[j + 1] == c[i] {
            j += 1;
        }
        let left_ok = i == 0 || c[i - 1] < c[i];
        let right_ok = j + 1 == c.len() || c[j + 1] < c[i];
        if left_ok && right_ok && c[i] >= tau {
            out.push(BoundaryPrediction {
                time: track.times[i],
                confidence: c[i],
            });
        }
        i = j + 1;
    }
    Ok(out)
}

/// Shape of a local model.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModelConfig {
    /// Channel count of every spatial level.
    pub channels: Vec<usize>,
    pub n: usize,
    pub dim: usize,
    pub heads: usize,
    pub omega: usize,
    /// Clip half-width; the clip has `2w + 1` steps.
    pub w: usize,
    /// Frame stride inside a clip.
    pub s: usize,
}

impl LocalModelConfig {
    pub fn from_pipeline(cfg: &PipelineConfig, channels: Vec<usize>) -> Self {
        Self {
            channels,
            n: cfg.n,
            dim: cfg.feature_dim,
            heads: cfg.heads,
            omega: cfg.omega,
            w: cfg.w,
            s: cfg.s,
        }
    }

    pub fn clip_len(&self) -> usize {
        2 * self.w + 1
    }
}

/// Forward results for one clip.
pub struct LocalOutput {
    /// `1 x 1` confidence of the clip center.
    pub prob: Var,
    pub logit: Var,
    /// `1 x D` clip representation.
    pub fused: Var,
    /// Every attention matrix of the cascade.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct LocalModel {
    pub config: LocalModelConfig,
    pub bank: FeatureBank,
    /// Learnable `1 x D` gain on the fixed sinusoidal table, initialized to 0.
    pub pe_gain: ParamId,
    pub map: MapAttention,
    pub intra_appearance: IntraModal,
    pub intra_motion: IntraModal,
    pub cross: CrossModal,
    pub head: Mlp,
    pe: Matrix<f64>,
    map_bias: Vec<Matrix<f64>>,
    intra_bias: Vec<Matrix<f64>>,
}

impl LocalModel {
    pub fn new<S: Scalar>(config: LocalModelConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Self {
        let (d, h) = (config.dim, config.heads);
        let t = config.clip_len();
        let bank = FeatureBank::new(store, "local.bank", &config.channels, config.n, d, rng);
        let pe_gain = store.add_zeros("local.pe_gain", 1, d);
        let map = MapAttention::new(store, "local.map", d, h, rng);
        let intra_appearance = IntraModal::new(store, "local.intra_app", config.omega, d, h, rng);
        let intra_motion = IntraModal::new(store, "local.intra_mot", config.omega, d, h, rng);
        let cross = CrossModal::new(store, "local.cross", d, h, rng);
        let head = Mlp {
            hidden: Linear::new(store, "local.head.hidden", d, d, rng),
            out: Linear::new(store, "local.head.out", d, 1, rng),
        };
        let pos: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let center = vec![config.w as f64; config.omega];
        Self {
            pe: sinusoidal_table(t, d),
            map_bias: distance_bias(h, &pos, &pos),
            intra_bias: distance_bias(h, &center, &pos),
            config,
            bank,
            pe_gain,
            map,
            intra_appearance,
            intra_motion,
            cross,
            head,
        }
    }

    /// Appearance tokens `A = F + PE`, fused bank `F`, and the gated table.
    fn tokens<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        clip: &[Matrix<S>],
    ) -> Result<(Var, Var, Var)> {
        if clip.first().map(Matrix::rows) != Some(self.config.clip_len()) {
            return Err(Error::Shape(format!(
                "clip must have {} steps",
                self.config.clip_len()
            )));
        }
        let centered: Vec<Matrix<S>> = clip.iter().map(center_rows).collect();
        let seqs = self.bank.build(g, store, &centered)?;
        let f = self.bank.fuse(g, store, &seqs);
        let table = g.input(self.pe.convert());
        let gain = g.param(store, self.pe_gain);
        let pe = g.mul(table, gain);
        let a = g.add(f, pe);
        Ok((a, f, pe))
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        clip: &[Matrix<S>],
    ) -> Result<LocalOutput> {
        let (a, f, pe) = self.tokens(g, store, clip)?;
        let map_bias: Vec<Matrix<S>> = self.map_bias.iter().map(Matrix::convert).collect();
        let motion = self.map.forward(g, store, f, a, Some(&map_bias));
        self.finish(g, store, a, pe, motion)
    }

    /// Forward pass that builds the explicit difference map.
    pub fn forward_reference<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        clip: &[Matrix<S>],
    ) -> Result<LocalOutput> {
        let (a, f, pe) = self.tokens(g, store, clip)?;
        let map_bias: Vec<Matrix<S>> = self.map_bias.iter().map(Matrix::convert).collect();
        let motion = self.map.forward_reference(g, store, f, a, Some(&map_bias))?;
        self.finish(g, store, a, pe, motion)
    }

    fn finish<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        a: Var,
        pe: Var,
        motion: AttentionOutput,
    ) -> Result<LocalOutput> {
        let m = g.add(motion.output, pe);
        let intra_bias: Vec<Matrix<S>> = self.intra_bias.iter().map(Matrix::convert).collect();
        let at = intra_modal_attention(g, store, &self.intra_appearance, a, Some(&intra_bias));
        let mt = intra_modal_attention(g, store, &self.intra_motion, m, Some(&intra_bias));
        let (fused, cross_w) = cross_modal_attention(g, store, &self.cross, at.output, mt.output);
        let (logit, prob) = confidence_head(g, store, &self.head, fused);
        let mut attention = motion.weights;
        attention.extend(at.weights);
        attention.extend(mt.weights);
        attention.extend(cross_w);
        Ok(LocalOutput {
            prob,
            logit,
            fused,
            attention,
        })
    }
}
