//! Deterministic synthetic videos: pyramids of pseudo-backbone feature maps
//! with annotated segment boundaries.
//!
//! Each video is a sequence of segments. A segment carries one latent vector
//! per pyramid level that drifts linearly at the segment's rate along a fixed
//! per-video direction. At every junction the latent changes in one of three
//! ways, see [`ChangeKind`]. Feature maps add a fixed zero-mean spatial
//! texture and independent Gaussian noise per element.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::datamodel::AnnotatedVideo;
use crate::error::{Error, Result};

/// Spatial size and channel count of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl LevelShape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const DEFAULT_PYRAMID: [LevelShape; 3] = [
    LevelShape::new(16, 16, 8),
    LevelShape::new(8, 8, 16),
    LevelShape::new(4, 4, 32),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    /// Shifts the level-0 latent by a random vector.
    LowLevel,
    /// Resamples the top-level latent.
    HighLevel,
    /// Switches the drift rate between the slow and fast bands.
    Speed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoSpec {
    pub id: String,
    pub segment_count: usize,
    /// Duration is drawn uniformly from this range (seconds).
    pub duration_range: (f64, f64),
    pub fps: f64,
    /// Drift rate of the first segment, units per second.
    pub drift_rate: f64,
    pub noise_sigma: f64,
    /// One entry per junction: `segment_count - 1` kinds.
    pub change_kinds: Vec<ChangeKind>,
    /// Minimum latent jump for low- and high-level changes.
    pub min_jump: f64,
    pub pyramid: Vec<LevelShape>,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Invalid(format!("duration range {lo}..{hi} is empty")));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Invalid(format!("fps {} must be positive", self.fps)));
        }
        if self.segment_count < 1 {
            return Err(Error::Invalid("segment_count must be at least 1".into()));
        }
        if self.segment_count as f64 > lo {
            return Err(Error::Invalid(format!(
                "{} segments of at least 1 s do not fit in {lo} s",
                self.segment_count
            )));
        }
        if self.change_kinds.len() + 1 != self.segment_count {
            return Err(Error::Invalid(format!(
                "{} change kinds for {} segments",
                self.change_kinds.len(),
                self.segment_count
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.drift_rate >= 0.0) || !(self.min_jump >= 0.0) {
            return Err(Error::Invalid("noise, drift and jump must be non-negative".into()));
        }
        if self.pyramid.is_empty() || self.pyramid.iter().any(LevelShape::is_empty) {
            return Err(Error::Invalid("pyramid levels must be non-empty".into()));
        }
        Ok(())
    }
}

/// Latent state at the start of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLatent {
    pub start: f64,
    pub appearance: Vec<Vec<f64>>,
    pub drift_rate: f64,
}

/// Feature maps of one pyramid level, `frames x h x w x c`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures {
    pub shape: LevelShape,
    pub data: Vec<f32>,
}

impl LevelFeatures {
    pub fn frames(&self) -> usize {
        self.data.len() / self.shape.len()
    }

    /// The `h x w x c` map of one frame.
    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.shape.len();
        &self.data[f * n..(f + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub annotation: AnnotatedVideo,
    pub levels: Vec<LevelFeatures>,
    pub segments: Vec<SegmentLatent>,
    pub change_kinds: Vec<ChangeKind>,
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn generate(spec: &SyntheticVideoSpec) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.duration_range;
    let duration = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let segs = spec.segment_count;

    // Segment lengths: 1 s each plus a Dirichlet(1, ..., 1) share of the rest.
    let shares: Vec<f64> = (0..segs).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = shares.iter().sum();
    let spare = duration - segs as f64;
    let mut boundaries = Vec::with_capacity(segs - 1);
    let mut acc = 0.0;
    for s in &shares[..segs - 1] {
        acc += 1.0 + spare * s / total;
        boundaries.push(acc);
    }

    let levels = spec.pyramid.len();
    let top = levels - 1;
    let dirs: Vec<Vec<f64>> = spec.pyramid.iter().map(|l| unit_vec(&mut rng, l.c)).collect();
    let mut base: Vec<Vec<f64>> = spec.pyramid.iter().map(|l| normal_vec(&mut rng, l.c)).collect();
    let mut rate = spec.drift_rate;
    let mut start = 0.0;
    let mut segments = Vec::with_capacity(segs);
    for i in 0..segs {
        segments.push(SegmentLatent {
            start,
            appearance: base.clone(),
            drift_rate: rate,
        });
        if i + 1 == segs {
            break;
        }
        let end = boundaries[i];
        let mut cur: Vec<Vec<f64>> = base
            .iter()
            .zip(&dirs)
            .map(|(b, d)| b.iter().zip(d).map(|(x, u)| x + rate * (end - start) * u).collect())
            .collect();
        match spec.change_kinds[i] {
            ChangeKind::LowLevel => {
                let u = unit_vec(&mut rng, spec.pyramid[0].c);
                let mag = rng.random_range(spec.min_jump..=2.0 * spec.min_jump);
                for (x, d) in cur[0].iter_mut().zip(&u) {
                    *x += mag * d;
                }
            }
            ChangeKind::HighLevel => loop {
                let v = normal_vec(&mut rng, spec.pyramid[top].c);
                if dist(&v, &cur[top]) >= spec.min_jump {
                    cur[top] = v;
                    break;
                }
            },
            ChangeKind::Speed => {
                rate = if rate < 0.5 {
                    rng.random_range(1.0..2.0)
                } else {
                    rng.random_range(0.0..0.2)
                };
            }
        }
        base = cur;
        start = end;
    }

    let textures: Vec<Vec<f64>> = spec
        .pyramid
        .iter()
        .map(|l| {
            let mut t = normal_vec(&mut rng, l.len());
            let hw = (l.h * l.w) as f64;
            for c in 0..l.c {
                let mean = t.iter().skip(c).step_by(l.c).sum::<f64>() / hw;
                t.iter_mut().skip(c).step_by(l.c).for_each(|x| *x -= mean);
            }
            t
        })
        .collect();

    let frames = (duration * spec.fps).round() as usize;
    let mut out: Vec<LevelFeatures> = spec
        .pyramid
        .iter()
        .map(|&shape| LevelFeatures {
            shape,
            data: Vec::with_capacity(frames * shape.len()),
        })
        .collect();
    for f in 0..frames {
        let t = f as f64 / spec.fps;
        let seg = &segments[boundaries.partition_point(|&b| b <= t)];
        for (l, level) in out.iter_mut().enumerate() {
            let shape = level.shape;
            let drift = seg.drift_rate * (t - seg.start);
            let latent: Vec<f64> = seg.appearance[l]
                .iter()
                .zip(&dirs[l])
                .map(|(a, d)| a + drift * d)
                .collect();
            for (k, tex) in textures[l].iter().enumerate() {
                let noise = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                level.data.push((latent[k % shape.c] + tex + noise) as f32);
            }
        }
    }

    Ok(SyntheticVideo {
        annotation: AnnotatedVideo {
            id: spec.id.clone(),
            duration,
            frame_rate: spec.fps,
            boundaries,
        },
        levels: out,
        segments,
        change_kinds: spec.change_kinds.clone(),
    })
}

/// Distribution from which per-video specs are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub fps: f64,
    pub duration_range: (f64, f64),
    pub max_segments: usize,
    /// Relative weights of low-level, high-level and speed changes.
    pub kind_weights: [f64; 3],
    pub max_drift: f64,
    pub noise_sigma: f64,
    pub min_jump: f64,
    pub pyramid: Vec<LevelShape>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            fps: 30.0,
            duration_range: (8.0, 12.0),
            max_segments: 5,
            kind_weights: [0.45, 0.45, 0.1],
            max_drift: 0.1,
            noise_sigma: 1.0,
            min_jump: 2.0,
            pyramid: DEFAULT_PYRAMID.to_vec(),
        }
    }
}

impl DatasetSpec {
    /// Draws one video spec; all randomness comes from `seed`.
    pub fn sample(&self, id: String, seed: u64) -> SyntheticVideoSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_fit = (self.duration_range.0.floor() as usize).max(1);
        let segment_count = rng.random_range(1..=self.max_segments.max(1)).min(max_fit);
        let total: f64 = self.kind_weights.iter().sum();
        let change_kinds = (0..segment_count - 1)
            .map(|_| {
                let mut u = rng.random_range(0.0..total);
                for (w, kind) in self.kind_weights.iter().zip([
                    ChangeKind::LowLevel,
                    ChangeKind::HighLevel,
                    ChangeKind::Speed,
                ]) {
                    if u < *w {
                        return kind;
                    }
                    u -= w;
                }
                ChangeKind::Speed
            })
            .collect();
        SyntheticVideoSpec {
            id,
            segment_count,
            duration_range: self.duration_range,
            fps: self.fps,
            drift_rate: rng.random_range(0.0..=self.max_drift),
            noise_sigma: self.noise_sigma,
            change_kinds,
            min_jump: self.min_jump,
            pyramid: self.pyramid.clone(),
            seed: rng.random(),
        }
    }

    /// Specs for `count` videos with ids `{prefix}{index:05}`.
    pub fn sample_many(&self, count: usize, seed: u64, prefix: &str) -> Vec<SyntheticVideoSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| self.sample(format!("{prefix}{i:05}"), rng.random()))
            .collect()
    }
}

pub fn generate_dataset(
    count: usize,
    dist: &DatasetSpec,
    seed: u64,
    prefix: &str,
) -> Result<Vec<SyntheticVideo>> {
    if count < 1 {
        return Err(Error::Invalid("count must be at least 1".into()));
    }
    dist.sample_many(count, seed, prefix)
        .par_iter()
        .map(generate)
        .collect()
}

pub fn video_container(video: &SyntheticVideo) -> Container {
    let mut c = Container::new();
    c.set_meta("id", &video.annotation.id);
    c.set_meta("fps", video.annotation.frame_rate);
    c.set_meta("duration", video.annotation.duration);
    for (l, level) in video.levels.iter().enumerate() {
        let s = level.shape;
        c.push(
            &format!("level{l}"),
            Tensor::new(vec![level.frames(), s.h, s.w, s.c], level.data.clone()),
        );
    }
    c
}

pub fn read_video_levels(path: &Path) -> Result<Vec<LevelFeatures>> {
    let c = Container::read(path)?;
    let bad = |reason: String| Error::Container {
        path: path.to_path_buf(),
        reason,
    };
    let mut out = Vec::new();
    for (name, t) in &c.tensors {
        if name != &format!("level{}", out.len()) || t.shape.len() != 4 {
            return Err(bad(format!("unexpected tensor {name} {:?}", t.shape)));
        }
        out.push(LevelFeatures {
            shape: LevelShape::new(t.shape[1], t.shape[2], t.shape[3]),
            data: t.data.clone(),
        });
    }
    if out.is_empty() {
        return Err(bad("no feature levels".into()));
    }
    Ok(out)
}

/// Generates `count` videos, writes one container per video into `dir`, and
/// returns their annotations in id order. Videos are never all held in memory.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    dist: &DatasetSpec,
    seed: u64,
    prefix: &str,
) -> Result<Vec<AnnotatedVideo>> {
    if count < 1 {
        return Err(Error::Invalid("count must be at least 1".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dist.sample_many(count, seed, prefix)
        .par_iter()
        .map(|spec| {
            let video = generate(spec)?;
            video_container(&video).write(&dir.join(format!("{}.tensor", spec.id)))?;
            Ok(video.annotation)
        })
        .collect()
}
