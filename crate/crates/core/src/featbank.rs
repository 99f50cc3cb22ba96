//! Multi-level feature bank: spatially pooled pyramid levels, each expanded
//! into temporal variants with different receptive fields.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synthgen::LevelFeatures;
use crate::tensor::Matrix;

/// Channel means of one `h x w x c` map.
pub fn spatial_pool<S: Scalar>(map: &[S], h: usize, w: usize, c: usize) -> Result<Vec<S>> {
    if h == 0 || w == 0 || c == 0 || map.len() != h * w * c {
        return Err(Error::Shape(format!(
            "cannot pool {} values as {h}x{w}x{c}",
            map.len()
        )));
    }
    let mut out = vec![S::zero(); c];
    for px in map.chunks_exact(c) {
        for (o, &x) in out.iter_mut().zip(px) {
            *o += x;
        }
    }
    let n = S::from_usize(h * w).unwrap();
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Pools every frame of every level: one `frames x c_l` matrix per level.
pub fn pool_levels<S: Scalar>(levels: &[LevelFeatures]) -> Result<Vec<Matrix<S>>> {
    levels
        .iter()
        .map(|level| {
            let s = level.shape;
            let mut data = Vec::with_capacity(level.frames() * s.c);
            for f in 0..level.frames() {
                // Accumulate in f64 so the pooled value does not depend on S.
                let map: Vec<f64> = level.frame(f).iter().map(|&x| f64::from(x)).collect();
                data.extend(spatial_pool(&map, s.h, s.w, s.c)?.into_iter().map(S::from_f64_lossy));
            }
            Ok(Matrix::from_vec(level.frames(), s.c, data))
        })
        .collect()
}

/// Depthwise temporal convolution followed by a projection to the bank width.
#[derive(Debug, Clone)]
pub struct TemporalVariant {
    pub kernel: usize,
    /// `kernel x channels`; row `u` is the tap applied to offset `u - kernel / 2`.
    pub taps: ParamId,
    pub bias: ParamId,
    pub proj: Linear,
}

impl TemporalVariant {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        kernel: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel sizes must be odd");
        let noise = Uniform::new_inclusive(-0.01, 0.01).expect("valid range");
        let avg = 1.0 / kernel as f64;
        let taps = Matrix::from_fn(kernel, channels, |_, _| {
            S::from_f64_lossy(avg + noise.sample(rng))
        });
        Self {
            kernel,
            taps: store.add(format!("{name}.taps"), taps),
            bias: store.add_zeros(format!("{name}.bias"), 1, channels),
            proj: Linear::new(store, &format!("{name}.proj"), channels, dim, rng),
        }
    }

    /// Same-length convolution with edge-replicate padding, `T x C -> T x C`.
    pub fn convolve<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let t = g.shape(x).0;
        let r = self.kernel / 2;
        let taps = g.param(store, self.taps);
        let mut acc = None;
        for u in 0..self.kernel {
            let shifted = if self.kernel == 1 {
                x
            } else {
                let idx: Vec<usize> = (0..t)
                    .map(|i| (i + u).saturating_sub(r).min(t - 1))
                    .collect();
                g.gather_rows(x, &idx)
            };
            let tap = g.slice_rows(taps, u, 1);
            let term = g.mul(shifted, tap);
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        let b = g.param(store, self.bias);
        g.add(acc.expect("kernel >= 1"), b)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let y = self.convolve(g, store, x);
        self.proj.forward(g, store, y)
    }
}

/// All `m x n` temporal variants plus the level-fusion weights.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    /// Indexed `spatial * n + temporal`.
    pub variants: Vec<TemporalVariant>,
    pub spatial_levels: usize,
    pub temporal_levels: usize,
    /// `1 x L` logits of the softmax level weights.
    pub level_logits: ParamId,
    pub dim: usize,
}

impl FeatureBank {
    /// `channels[l]` is the width of spatial level `l`; kernels are `1, 3, 5, ...`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: &[usize],
        n: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut variants = Vec::with_capacity(channels.len() * n);
        for (l, &c) in channels.iter().enumerate() {
            for k in 0..n {
                variants.push(TemporalVariant::new(
                    store,
                    &format!("{name}.s{l}t{k}"),
                    c,
                    2 * k + 1,
                    dim,
                    rng,
                ));
            }
        }
        let level_logits = store.add_zeros(format!("{name}.level_logits"), 1, variants.len());
        Self {
            variants,
            spatial_levels: channels.len(),
            temporal_levels: n,
            level_logits,
            dim,
        }
    }

    pub fn levels(&self) -> usize {
        self.variants.len()
    }

    pub fn max_kernel(&self) -> usize {
        2 * self.temporal_levels - 1
    }

    /// The `L` projected sequences for one clip; `clip[l]` is `T x c_l`.
    pub fn build<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        clip: &[Matrix<S>],
    ) -> Result<Vec<Var>> {
        if clip.len() != self.spatial_levels {
            return Err(Error::Shape(format!(
                "clip has {} spatial levels, bank expects {}",
                clip.len(),
                self.spatial_levels
            )));
        }
        let t = clip[0].rows();
        if clip.iter().any(|c| c.rows() != t) {
            return Err(Error::Shape("clip levels differ in length".into()));
        }
        if t < self.max_kernel() {
            return Err(Error::Shape(format!(
                "clip length {t} is shorter than kernel {}",
                self.max_kernel()
            )));
        }
        let mut out = Vec::with_capacity(self.levels());
        for (l, level) in clip.iter().enumerate() {
            let expected = store.get(self.variants[l * self.temporal_levels].taps).cols();
            if level.cols() != expected {
                return Err(Error::Shape(format!(
                    "level {l} has {} channels, expected {expected}",
                    level.cols()
                )));
            }
            let x = g.input(level.clone());
            for k in 0..self.temporal_levels {
                out.push(self.variants[l * self.temporal_levels + k].forward(g, store, x));
            }
        }
        Ok(out)
    }

    /// `1 x L` softmax over the levels.
    pub fn level_weights<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>) -> Var {
        let logits = g.param(store, self.level_logits);
        g.softmax(logits)
    }

    /// Softmax-weighted sum of the bank sequences.
    pub fn fuse<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, seqs: &[Var]) -> Var {
        let weights = self.level_weights(g, store);
        let mut acc = None;
        for (j, &s) in seqs.iter().enumerate() {
            let wj = g.slice_cols(weights, j, 1);
            let term = g.mul(s, wj);
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        acc.expect("bank has at least one level")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pools_channel_means() {
        assert_eq!(spatial_pool(&[1.0, 3.0, 5.0, 7.0], 2, 2, 1).unwrap(), vec![4.0]);
        assert_eq!(spatial_pool(&[2.5, -1.0], 1, 1, 2).unwrap(), vec![2.5, -1.0]);
        assert_eq!(spatial_pool(&[3.0f64; 12], 2, 2, 3).unwrap(), vec![3.0; 3]);
        assert!(spatial_pool::<f64>(&[], 0, 2, 1).is_err());
    }

    #[test]
    fn bank_has_m_times_n_levels_of_full_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let bank = FeatureBank::new(&mut store, "bank", &[8, 16, 32], 3, 64, &mut rng);
        let clip: Vec<Matrix<f64>> = [8, 16, 32]
            .iter()
            .map(|&c| Matrix::from_fn(33, c, |r, k| ((r * 7 + k) as f64).sin()))
            .collect();
        let mut g = Graph::new();
        let seqs = bank.build(&mut g, &store, &clip).unwrap();
        assert_eq!(seqs.len(), 9);
        for s in seqs {
            assert_eq!(g.shape(s), (33, 64));
            assert!(g.value(s).is_finite());
        }
    }

    #[test]
    fn short_clip_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let bank = FeatureBank::new(&mut store, "b", &[2], 3, 4, &mut rng);
        let mut g = Graph::new();
        assert!(bank.build(&mut g, &store, &[Matrix::zeros(4, 2)]).is_err());
    }

    #[test]
    fn constant_input_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let v = TemporalVariant::new(&mut store, "v", 3, 5, 4, &mut rng);
        // Taps summing to one per channel.
        *store.get_mut(v.taps) = Matrix::from_fn(5, 3, |u, c| [0.1, 0.3, 0.2, 0.25, 0.15][u] + 0.0 * c as f64);
        let mut g = Graph::new();
        let x = g.input(Matrix::from_fn(7, 3, |_, c| c as f64 - 1.5));
        let y = v.convolve(&mut g, &store, x);
        let y = g.value(y);
        for r in 0..7 {
            for c in 0..3 {
                assert!((y[(r, c)] - (c as f64 - 1.5)).abs() < 1e-12);
            }
        }
    }
}
