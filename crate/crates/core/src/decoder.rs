//! Global boundary decoder: learnable boundary queries decoded against a
//! window of boundary-attentive clip representations, trained with a
//! Hungarian-matched set loss.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::datamodel::{BoundaryPrediction, PipelineConfig};
use crate::ddmnet::PROB_EPS;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, AttentionBias, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Scales row `i` of `features` by `confidences[i]`.
pub fn boundary_attentive<S: Scalar>(features: &Matrix<S>, confidences: &[S]) -> Result<Matrix<S>> {
    if features.rows() != confidences.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} confidences",
            features.rows(),
            confidences.len()
        )));
    }
    if let Some(c) = confidences.iter().find(|c| !(**c >= S::zero() && **c <= S::one())) {
        return Err(Error::Invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut out = features.clone();
    for (r, &c) in confidences.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|x| *x *= c);
    }
    Ok(out)
}

/// One-to-one `(row, column)` pairs, sorted by row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &Matrix<f64>) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
    }
}

/// Minimum-cost assignment of size `min(N, M)`.
///
/// Shortest augmenting paths with row/column potentials, `O(n^2 m)` for
/// `n <= m`; a tall matrix is solved through its transpose.
pub fn hungarian(cost: &Matrix<f64>) -> Result<Assignment> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Ok(Assignment::default());
    }
    if !cost.is_finite() {
        return Err(Error::Invalid("assignment costs must be finite".into()));
    }
    if n > m {
        let mut t = hungarian(&cost.transpose())?;
        t.pairs = t.pairs.into_iter().map(|(c, r)| (r, c)).collect();
        t.pairs.sort_unstable();
        return Ok(t);
    }
    // 1-based: column 0 is the virtual source; row 0 means "unassigned".
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| row_of[j] != 0)
        .map(|j| (row_of[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_queries: usize,
    pub window_len: usize,
}

impl DecoderConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            dim: cfg.feature_dim,
            heads: cfg.heads,
            layers: cfg.decoder_layers,
            num_queries: cfg.num_queries,
            window_len: cfg.window_len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: Mlp,
    pub norms: [LayerNorm; 3],
}

/// Set-loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub loc: f64,
    pub cls: f64,
}

impl LossWeights {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            loc: cfg.lambda_loc,
            cls: cfg.lambda_cls,
        }
    }
}

/// Graph outputs of one decoded window.
pub struct DecoderOutput {
    /// `Q x 1` normalized locations.
    pub loc: Var,
    /// `Q x 1` boundary probabilities.
    pub prob: Var,
    pub attention: Vec<Var>,
    /// Output of each layer's cross-attention sublayer, before the residual.
    pub cross_outputs: Vec<Var>,
}

/// Per-query values of a decoded window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub locations: Vec<f64>,
    pub confidences: Vec<f64>,
}

impl WindowPrediction {
    pub fn from_output<S: Scalar>(g: &Graph<S>, out: &DecoderOutput) -> Self {
        let col = |v: Var| g.value(v).as_slice().iter().map(|x| x.as_f64()).collect();
        Self {
            locations: col(out.loc),
            confidences: col(out.prob),
        }
    }
}

/// Whether keys carry positional information. Without it the decoder sees
/// the window as an unordered set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    On,
    Off,
}

/// Queries attend with a Gaussian prior around a learnable reference point
/// per query; each location is read off the attention-weighted mean position
/// of the last layer, refined by a small head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub queries: ParamId,
    /// `Q x 1` logits of the reference positions.
    pub reference: ParamId,
    /// `1 x 1` log width of the position prior.
    pub log_sigma: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub cls: Mlp,
    pub loc: Mlp,
    pe: Matrix<f64>,
    pos: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Decoder {
    pub fn new<S: Scalar>(config: DecoderConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Self {
        let (d, h, q) = (config.dim, config.heads, config.num_queries);
        let queries = store.add_normal("dec.queries", q, d, 1.0, rng);
        let reference = store.add(
            "dec.reference",
            Matrix::from_fn(q, 1, |i, _| S::from_f64_lossy(logit((i as f64 + 0.5) / q as f64))),
        );
        let log_sigma = store.add("dec.log_sigma", Matrix::scalar(S::from_f64_lossy(0.1f64.ln())));
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("dec.layer{l}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, h, true, rng),
                    cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, h, true, rng),
                    ffn: Mlp {
                        hidden: Linear::new(store, &format!("{name}.ffn.hidden"), d, 2 * d, rng),
                        out: Linear::new(store, &format!("{name}.ffn.out"), 2 * d, d, rng),
                    },
                    norms: [0, 1, 2].map(|k| LayerNorm::new(store, &format!("{name}.norm{k}"), d)),
                }
            })
            .collect();
        let cls = Mlp {
            hidden: Linear::new(store, "dec.cls.hidden", d, d, rng),
            out: Linear::new(store, "dec.cls.out", d, 1, rng),
        };
        let loc = Mlp {
            hidden: Linear::new(store, "dec.loc.hidden", d, d, rng),
            out: Linear::zeros(store, "dec.loc.out", d, 1),
        };
        let n = config.window_len;
        Self {
            pe: sinusoidal_table(n, d),
            pos: (0..n).map(|t| (t as f64 + 0.5) / n as f64).collect(),
            config,
            queries,
            reference,
            log_sigma,
            layers,
            cls,
            loc,
        }
    }

    /// Decodes one padded `window_len x D` window of boundary-attentive features.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        memory: &Matrix<S>,
        positional: Positional,
    ) -> Result<DecoderOutput> {
        let (n, d) = (self.config.window_len, self.config.dim);
        if memory.shape() != (n, d) {
            return Err(Error::Shape(format!(
                "decoder window must be {n}x{d}, got {:?}",
                memory.shape()
            )));
        }
        let mem = g.input(memory.clone());
        let (keys, prior) = match positional {
            Positional::On => {
                let pe = g.input(self.pe.convert());
                let keys = g.add(mem, pe);
                // -(pos_t - ref_q)^2 / (2 sigma^2), shared by all heads.
                let pos = g.input(Matrix::row_vector(&self.pos).convert());
                let r = g.param(store, self.reference);
                let r = g.sigmoid(r);
                let diff = g.sub(pos, r);
                let sq = g.mul(diff, diff);
                let ls = g.param(store, self.log_sigma);
                let inv_var = g.affine(ls, S::from_f64_lossy(-2.0), S::zero());
                let inv_var = g.exp(inv_var);
                let prior = g.mul(sq, inv_var);
                (keys, Some(g.scale(prior, S::from_f64_lossy(-0.5))))
            }
            Positional::Off => (mem, None),
        };
        let mut t = g.param(store, self.queries);
        let mut attention = Vec::new();
        let mut cross_outputs = Vec::with_capacity(self.layers.len());
        let mut last_cross = Vec::new();
        for layer in &self.layers {
            let sa = layer.self_attn.forward(g, store, t, t, t, AttentionBias::None);
            let x = g.add(t, sa.output);
            t = layer.norms[0].forward(g, store, x);
            let bias = prior.map_or(AttentionBias::None, AttentionBias::Node);
            let ca = layer.cross_attn.forward(g, store, t, keys, mem, bias);
            cross_outputs.push(ca.output);
            let x = g.add(t, ca.output);
            t = layer.norms[1].forward(g, store, x);
            let ff = layer.ffn.forward(g, store, t);
            let x = g.add(t, ff);
            t = layer.norms[2].forward(g, store, x);
            attention.extend(sa.weights);
            last_cross = ca.weights.clone();
            attention.extend(ca.weights);
        }
        // Expected position under the head-averaged last cross-attention.
        let mut avg = last_cross[0];
        for &w in &last_cross[1..] {
            avg = g.add(avg, w);
        }
        let avg = g.scale(avg, S::one() / S::from_usize(last_cross.len()).unwrap());
        let pos_col = g.input(Matrix::column_vector(&self.pos).convert());
        let rho = g.matmul(avg, pos_col);
        let eps = S::from_f64_lossy(PROB_EPS);
        let rho = g.clamp(rho, eps, S::one() - eps);
        let log_rho = g.log(rho);
        let one_minus = g.affine(rho, -S::one(), S::one());
        let log_one_minus = g.log(one_minus);
        let base = g.sub(log_rho, log_one_minus);
        let refine = self.loc.forward(g, store, t);
        let loc_logit = g.add(base, refine);
        let loc = g.sigmoid(loc_logit);
        let cls = self.cls.forward(g, store, t);
        let prob = g.sigmoid(cls);
        Ok(DecoderOutput {
            loc,
            prob,
            attention,
            cross_outputs,
        })
    }

    /// Convenience wrapper returning plain values.
    pub fn decode_window<S: Scalar>(&self, store: &ParamStore<S>, memory: &Matrix<S>) -> Result<WindowPrediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, memory, Positional::On)?;
        Ok(WindowPrediction::from_output(&g, &out))
    }
}

/// Matching cost `lambda_loc |loc_q - gt_g| + lambda_cls (1 - p_q)`.
pub fn match_cost(pred: &WindowPrediction, gts: &[f64], w: LossWeights) -> Matrix<f64> {
    Matrix::from_fn(pred.locations.len(), gts.len(), |q, j| {
        w.loc * (pred.locations[q] - gts[j]).abs() + w.cls * (1.0 - pred.confidences[q])
    })
}

fn check_gts(gts: &[f64]) -> Result<()> {
    if let Some(g) = gts.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::Invalid(format!("ground-truth location {g} outside [0, 1]")));
    }
    Ok(())
}

/// Set loss under a given assignment of queries to ground truths.
pub fn set_loss_with_assignment<S: Scalar>(
    g: &mut Graph<S>,
    out: &DecoderOutput,
    gts: &[f64],
    assignment: &Assignment,
    w: LossWeights,
) -> Var {
    let q = g.shape(out.prob).0;
    let eps = S::from_f64_lossy(PROB_EPS);
    let p = g.clamp(out.prob, eps, S::one() - eps);
    let lc = S::from_f64_lossy(w.cls);
    let mut matched = vec![false; q];
    let mut terms = Vec::new();
    if !assignment.pairs.is_empty() {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let targets: Vec<S> = assignment
            .pairs
            .iter()
            .map(|p| S::from_f64_lossy(gts[p.1]))
            .collect();
        rows.iter().for_each(|&r| matched[r] = true);
        let loc = g.gather_rows(out.loc, &rows);
        let target = g.input(Matrix::column_vector(&targets));
        let diff = g.sub(loc, target);
        let l1 = g.abs(diff);
        let l1 = g.sum(l1);
        terms.push(g.scale(l1, S::from_f64_lossy(w.loc)));
        let pm = g.gather_rows(p, &rows);
        let lp = g.log(pm);
        let lp = g.sum(lp);
        terms.push(g.scale(lp, -lc));
    }
    let rest: Vec<usize> = (0..q).filter(|&r| !matched[r]).collect();
    if !rest.is_empty() {
        let pu = g.gather_rows(p, &rest);
        let neg = g.affine(pu, -S::one(), S::one());
        let ln = g.log(neg);
        let ln = g.sum(ln);
        terms.push(g.scale(ln, -lc));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    g.scale(total, S::one() / S::from_usize(q).unwrap())
}

/// Hungarian-matched set loss; returns the loss node and the matching used.
pub fn set_prediction_loss<S: Scalar>(
    g: &mut Graph<S>,
    out: &DecoderOutput,
    gts: &[f64],
    w: LossWeights,
) -> Result<(Var, Assignment)> {
    check_gts(gts)?;
    let pred = WindowPrediction::from_output(g, out);
    let assignment = hungarian(&match_cost(&pred, gts, w))?;
    let loss = set_loss_with_assignment(g, out, gts, &assignment, w);
    Ok((loss, assignment))
}

/// Set loss of plain per-query values.
pub fn set_prediction_loss_value(pred: &WindowPrediction, gts: &[f64], w: LossWeights) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let out = DecoderOutput {
        loc: g.input(Matrix::column_vector(&pred.locations)),
        prob: g.input(Matrix::column_vector(&pred.confidences)),
        attention: Vec::new(),
        cross_outputs: Vec::new(),
    };
    let (loss, _) = set_prediction_loss(&mut g, &out, gts, w)?;
    Ok(g.item(loss))
}

/// Queries with `p_bc > theta`, mapped to absolute time and sorted.
pub fn emit_predictions(
    pred: &WindowPrediction,
    window_origin: f64,
    window_span: f64,
    theta: f64,
) -> Vec<BoundaryPrediction> {
    let mut out: Vec<BoundaryPrediction> = pred
        .locations
        .iter()
        .zip(&pred.confidences)
        .filter(|(_, &p)| p > theta)
        .map(|(&loc, &p)| BoundaryPrediction {
            time: window_origin + loc * window_span,
            confidence: p,
        })
        .collect();
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    out
}
