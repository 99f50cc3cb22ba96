//! End-to-end orchestration: sampling, clips, windows, both training loops,
//! featurization, inference, and the run manifest.
//!
//! Everything lives under one work directory:
//!
//! ```text
//! data/{train,test}/annotations.json   data/{split}/<id>.tensor
//! ckpt/local.tensor                    ckpt/decoder.tensor
//! handoff/train/<id>.tensor
//! predictions.json  report.json  manifest.json
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::container::{Container, Tensor};
use crate::datamodel::{
    load_annotations, write_annotations, write_atomic, write_predictions, write_report,
    AnnotatedVideo, BoundaryPrediction, EvalReport, PipelineConfig, PredictionMap,
};
use crate::ddmnet::{label_frame, local_loss_node, LocalModel, LocalModelConfig};
use crate::decoder::{
    boundary_attentive, emit_predictions, set_prediction_loss, Decoder, DecoderConfig,
    LossWeights, Positional, WindowPrediction,
};
use crate::error::{Error, Result};
use crate::evaluator::evaluate_maps;
use crate::featbank::pool_levels;
use crate::optim::Adam;
use crate::params::{GradBuffer, ParamStore};
use crate::scalar::Scalar;
use crate::synthgen::{read_video_levels, write_dataset, DatasetSpec};
use crate::tensor::Matrix;

/// One frame out of every `stride`, at the center of each cell.
pub fn sample_frames(frame_count: usize, stride: usize) -> Result<Vec<usize>> {
    if frame_count == 0 {
        return Err(Error::Invalid("video has no frames".into()));
    }
    if stride == 0 {
        return Err(Error::Invalid("stride must be at least 1".into()));
    }
    Ok((stride / 2..frame_count).step_by(stride).collect())
}

/// `center + k s` for `k = -w..=w`, clamped to the video.
pub fn extract_clip(center: usize, w: usize, s: usize, frame_count: usize) -> Vec<usize> {
    let last = frame_count.saturating_sub(1) as isize;
    (-(w as isize)..=w as isize)
        .map(|k| (center as isize + k * s as isize).clamp(0, last) as usize)
        .collect()
}

/// Consecutive non-overlapping windows as `(start, effective_len)`.
pub fn make_windows(seq_len: usize, window_len: usize) -> Vec<(usize, usize)> {
    window_starts(seq_len, window_len, window_len)
}

/// Windows starting every `stride` steps until the sequence is covered.
pub fn window_starts(seq_len: usize, window_len: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        out.push((start, window_len.min(seq_len - start)));
        if start + window_len >= seq_len {
            break;
        }
        start += stride;
    }
    out
}

/// Training windows: one every `stride` steps while the start is inside the
/// sequence, so late starts see padded tails like inference does.
pub fn training_window_starts(seq_len: usize, stride: usize) -> Vec<usize> {
    (0..seq_len).step_by(stride.max(1)).collect()
}

/// Rows `start..start + window_len`, padding past the end with the last row.
pub fn pad_window<S: Scalar>(seq: &Matrix<S>, start: usize, window_len: usize) -> Matrix<S> {
    let last = seq.rows() - 1;
    let idx: Vec<usize> = (start..start + window_len).map(|i| i.min(last)).collect();
    seq.rows_subset(&idx)
}

/// Keeps the more confident of any two predictions closer than `radius`.
pub fn dedupe(mut preds: Vec<BoundaryPrediction>, radius: f64) -> Vec<BoundaryPrediction> {
    preds.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut out: Vec<BoundaryPrediction> = Vec::with_capacity(preds.len());
    for p in preds {
        match out.last_mut() {
            Some(last) if p.time - last.time < radius => {
                if p.confidence > last.confidence {
                    *last = p;
                }
            }
            _ => out.push(p),
        }
    }
    out
}

/// Paths inside a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split)
    }

    pub fn annotations(&self, split: &str) -> PathBuf {
        self.split_dir(split).join("annotations.json")
    }

    pub fn local_checkpoint(&self) -> PathBuf {
        self.root.join("ckpt").join("local.tensor")
    }

    pub fn decoder_checkpoint(&self) -> PathBuf {
        self.root.join("ckpt").join("decoder.tensor")
    }

    pub fn handoff_dir(&self, split: &str) -> PathBuf {
        self.root.join("handoff").join(split)
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// `path` relative to the root, as recorded in the manifest.
    pub fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).unwrap_or(path).to_path_buf()
    }
}

/// A video with its pyramid pooled to `frames x c_l` per level.
#[derive(Debug, Clone)]
pub struct PooledVideo<S> {
    pub annotation: AnnotatedVideo,
    pub levels: Vec<Matrix<S>>,
}

impl<S: Scalar> PooledVideo<S> {
    pub fn frame_count(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(Matrix::cols).collect()
    }

    /// The `T x c_l` clip of every level around `center`.
    pub fn clip(&self, center: usize, w: usize, s: usize) -> Vec<Matrix<S>> {
        let idx = extract_clip(center, w, s, self.frame_count());
        self.levels.iter().map(|l| l.rows_subset(&idx)).collect()
    }
}

/// Loads and pools every video of a split, in annotation order.
pub fn load_split<S: Scalar>(work: &Workdir, split: &str) -> Result<Vec<PooledVideo<S>>> {
    let ann_path = work.annotations(split);
    if !ann_path.exists() {
        return Err(Error::StageOrder(format!(
            "no dataset at {}; run `gen` first",
            ann_path.display()
        )));
    }
    let annotations = load_annotations(&ann_path)?;
    if annotations.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty")));
    }
    let mut ids = BTreeSet::new();
    if let Some(a) = annotations.iter().find(|a| !ids.insert(a.id.as_str())) {
        return Err(Error::Invalid(format!("duplicate video id {:?}", a.id)));
    }
    let dir = work.split_dir(split);
    annotations
        .into_par_iter()
        .map(|annotation| {
            let levels = read_video_levels(&dir.join(format!("{}.tensor", annotation.id)))?;
            let levels = pool_levels(&levels)?;
            if levels[0].rows() != annotation.frame_count() {
                return Err(Error::Malformed {
                    id: annotation.id.clone(),
                    field: "fps",
                    reason: format!(
                        "feature file has {} frames, annotation implies {}",
                        levels[0].rows(),
                        annotation.frame_count()
                    ),
                });
            }
            Ok(PooledVideo { annotation, levels })
        })
        .collect()
}

fn store_to_container<S: Scalar>(store: &ParamStore<S>, c: &mut Container) {
    for (_, name, value) in store.iter() {
        let data = value.as_slice().iter().map(|x| x.as_f64() as f32).collect();
        c.push(name, Tensor::new(vec![value.rows(), value.cols()], data));
    }
}

fn load_store_values<S: Scalar>(store: &mut ParamStore<S>, c: &Container, path: &Path) -> Result<()> {
    let bad = |reason: String| Error::Container {
        path: path.to_path_buf(),
        reason,
    };
    if c.tensors.len() != store.len() {
        return Err(bad(format!(
            "{} tensors, model has {} parameters",
            c.tensors.len(),
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_owned();
        let t = c.get(&name).ok_or_else(|| bad(format!("missing parameter {name}")))?;
        let target = store.get_mut(id);
        if t.shape != [target.rows(), target.cols()] {
            return Err(bad(format!("parameter {name} has shape {:?}", t.shape)));
        }
        for (dst, &src) in target.as_mut_slice().iter_mut().zip(&t.data) {
            *dst = S::from_f64_lossy(f64::from(src));
        }
    }
    Ok(())
}

fn meta_parse<T: std::str::FromStr>(c: &Container, key: &str, path: &Path) -> Result<T> {
    c.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Container {
            path: path.to_path_buf(),
            reason: format!("missing or invalid meta `{key}`"),
        })
}

/// Local model plus its parameters.
#[derive(Debug, Clone)]
pub struct LocalCheckpoint<S> {
    pub model: LocalModel,
    pub store: ParamStore<S>,
}

impl<S: Scalar> LocalCheckpoint<S> {
    pub fn init(config: LocalModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = LocalModel::new(config, &mut store, &mut rng);
        Self { model, store }
    }

    pub fn to_container(&self) -> Container {
        let cfg = &self.model.config;
        let mut c = Container::new();
        c.set_meta("kind", "local");
        let channels: Vec<String> = cfg.channels.iter().map(usize::to_string).collect();
        c.set_meta("channels", channels.join(","));
        for (k, v) in [("n", cfg.n), ("dim", cfg.dim), ("heads", cfg.heads), ("omega", cfg.omega), ("w", cfg.w), ("s", cfg.s)] {
            c.set_meta(k, v);
        }
        store_to_container(&self.store, &mut c);
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::StageOrder(format!(
                "local checkpoint {} missing; run `train-local` first",
                path.display()
            )));
        }
        let c = Container::read(path)?;
        if c.meta("kind") != Some("local") {
            return Err(Error::Container {
                path: path.to_path_buf(),
                reason: "not a local-stage checkpoint".into(),
            });
        }
        let channels = c
            .meta("channels")
            .unwrap_or_default()
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| Error::Container {
                path: path.to_path_buf(),
                reason: "bad channel list".into(),
            })?;
        let config = LocalModelConfig {
            channels,
            n: meta_parse(&c, "n", path)?,
            dim: meta_parse(&c, "dim", path)?,
            heads: meta_parse(&c, "heads", path)?,
            omega: meta_parse(&c, "omega", path)?,
            w: meta_parse(&c, "w", path)?,
            s: meta_parse(&c, "s", path)?,
        };
        let mut ck = Self::init(config, 0);
        load_store_values(&mut ck.store, &c, path)?;
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderCheckpoint<S> {
    pub model: Decoder,
    pub store: ParamStore<S>,
}

impl<S: Scalar> DecoderCheckpoint<S> {
    pub fn init(config: DecoderConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Decoder::new(config, &mut store, &mut rng);
        Self { model, store }
    }

    pub fn to_container(&self) -> Container {
        let cfg = &self.model.config;
        let mut c = Container::new();
        c.set_meta("kind", "decoder");
        for (k, v) in [
            ("dim", cfg.dim),
            ("heads", cfg.heads),
            ("layers", cfg.layers),
            ("num_queries", cfg.num_queries),
            ("window_len", cfg.window_len),
        ] {
            c.set_meta(k, v);
        }
        store_to_container(&self.store, &mut c);
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::StageOrder(format!(
                "decoder checkpoint {} missing; run `train-decoder` first",
                path.display()
            )));
        }
        let c = Container::read(path)?;
        if c.meta("kind") != Some("decoder") {
            return Err(Error::Container {
                path: path.to_path_buf(),
                reason: "not a decoder checkpoint".into(),
            });
        }
        let config = DecoderConfig {
            dim: meta_parse(&c, "dim", path)?,
            heads: meta_parse(&c, "heads", path)?,
            layers: meta_parse(&c, "layers", path)?,
            num_queries: meta_parse(&c, "num_queries", path)?,
            window_len: meta_parse(&c, "window_len", path)?,
        };
        let mut ck = Self::init(config, 0);
        load_store_values(&mut ck.store, &c, path)?;
        Ok(ck)
    }
}

/// Stage-1 output for one video: one row per sampled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Handoff {
    pub id: String,
    pub fps: f64,
    pub duration: f64,
    pub frame_count: usize,
    pub stride: usize,
    /// `N x D` clip representations.
    pub fused: Matrix<f32>,
    pub confidence: Vec<f32>,
}

impl Handoff {
    pub fn interval(&self) -> f64 {
        self.stride as f64 / self.fps
    }

    pub fn times(&self) -> Vec<f64> {
        sample_frames(self.frame_count, self.stride)
            .map(|idx| idx.iter().map(|&f| f as f64 / self.fps).collect())
            .unwrap_or_default()
    }

    /// Confidence-scaled representations fed to the decoder.
    pub fn memory(&self) -> Result<Matrix<f32>> {
        boundary_attentive(&self.fused, &self.confidence)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("id", &self.id);
        c.set_meta("fps", self.fps);
        c.set_meta("duration", self.duration);
        c.set_meta("frame_count", self.frame_count);
        c.set_meta("stride", self.stride);
        c.push(
            "fused",
            Tensor::new(vec![self.fused.rows(), self.fused.cols()], self.fused.as_slice().to_vec()),
        );
        c.push("confidence", Tensor::new(vec![self.confidence.len()], self.confidence.clone()));
        c
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let bad = |reason: &str| Error::Container {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let fused = c.get("fused").ok_or_else(|| bad("missing fused"))?;
        let confidence = c.get("confidence").ok_or_else(|| bad("missing confidence"))?;
        if fused.shape.len() != 2 || fused.shape[0] != confidence.data.len() {
            return Err(bad("fused/confidence shapes disagree"));
        }
        Ok(Self {
            id: c.meta("id").ok_or_else(|| bad("missing id"))?.to_owned(),
            fps: meta_parse(&c, "fps", path)?,
            duration: meta_parse(&c, "duration", path)?,
            frame_count: meta_parse(&c, "frame_count", path)?,
            stride: meta_parse(&c, "stride", path)?,
            fused: Matrix::from_vec(fused.shape[0], fused.shape[1], fused.data.clone()),
            confidence: confidence.data.clone(),
        })
    }
}

/// One training example of the local stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalSample {
    pub video: usize,
    pub frame: usize,
    pub label: u8,
}

pub fn local_samples<S: Scalar>(videos: &[PooledVideo<S>], cfg: &PipelineConfig) -> Result<Vec<LocalSample>> {
    let mut out = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        let radius = cfg.positive_radius(v.annotation.frame_rate);
        for f in sample_frames(v.frame_count(), cfg.eval_stride)? {
            let t = f as f64 / v.annotation.frame_rate;
            out.push(LocalSample {
                video: vi,
                frame: f,
                label: label_frame(t, &v.annotation, radius),
            });
        }
    }
    Ok(out)
}

/// Mean class-balanced loss of a batch and its parameter gradient.
///
/// Positive terms are weighted by `negatives / positives` within the batch.
pub fn local_batch<S: Scalar>(
    model: &LocalModel,
    store: &ParamStore<S>,
    videos: &[PooledVideo<S>],
    batch: &[LocalSample],
) -> Result<(f64, GradBuffer<S>)> {
    let pos = batch.iter().filter(|s| s.label == 1).count();
    let neg = batch.len() - pos;
    let pos_weight = if pos == 0 { 1.0 } else { neg as f64 / pos as f64 };
    let inv_n = S::one() / S::from_usize(batch.len()).unwrap();
    let cfg = &model.config;
    let parts = batch
        .par_iter()
        .map(|s| {
            let clip = videos[s.video].clip(s.frame, cfg.w, cfg.s);
            let mut g = Graph::new();
            let out = model.forward(&mut g, store, &clip)?;
            let w = if s.label == 1 { pos_weight } else { 1.0 };
            let loss = local_loss_node(&mut g, out.prob, s.label, S::from_f64_lossy(w));
            let grads = g.backward(loss);
            let mut buf = GradBuffer::zeros_like(store);
            g.accumulate_param_grads(&grads, inv_n, &mut buf);
            Ok((g.item(loss).as_f64(), buf))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_parts(store, parts, batch.len()))
}

fn sum_parts<S: Scalar>(
    store: &ParamStore<S>,
    parts: Vec<(f64, GradBuffer<S>)>,
    n: usize,
) -> (f64, GradBuffer<S>) {
    let mut total = GradBuffer::zeros_like(store);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.merge(g);
    }
    (loss / n as f64, total)
}

/// One epoch's mini-batches: a fresh permutation of `0..items` cut into
/// chunks of `batch`; only the last chunk may be shorter.
pub fn epoch_batches(items: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Shuffled mini-batch training; returns the mean loss of each epoch.
fn train_loop<S: Scalar>(
    stage: &str,
    store: &mut ParamStore<S>,
    opt: &mut Adam<S>,
    items: usize,
    batch: usize,
    epochs: usize,
    schedule: crate::datamodel::LrSchedule,
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut(&ParamStore<S>, &[usize]) -> Result<(f64, GradBuffer<S>)>,
) -> Result<Vec<f64>> {
    let base_lr = opt.lr;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        opt.lr = base_lr * schedule.factor(epoch, epochs);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in epoch_batches(items, batch, rng) {
            let (loss, grads) = step(store, &chunk)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    step: opt.steps() as usize,
                    loss,
                });
            }
            opt.step(store, &grads);
            log::debug!("{stage} step {} loss {loss:.6}", opt.steps());
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::info!("{stage} epoch {}/{epochs} loss {mean:.5}", epoch + 1);
        history.push(mean);
    }
    opt.lr = base_lr;
    Ok(history)
}

pub fn train_local(videos: &[PooledVideo<f32>], cfg: &PipelineConfig) -> Result<LocalCheckpoint<f32>> {
    cfg.validate().map_err(Error::InvalidConfig)?;
    let channels = videos
        .first()
        .ok_or_else(|| Error::Invalid("no training videos".into()))?
        .channels();
    if channels.len() != cfg.m {
        return Err(Error::Invalid(format!(
            "videos have {} pyramid levels, config expects m = {}",
            channels.len(),
            cfg.m
        )));
    }
    let mut ck = LocalCheckpoint::init(LocalModelConfig::from_pipeline(cfg, channels), cfg.seed);
    let samples = local_samples(videos, cfg)?;
    let positives = samples.iter().filter(|s| s.label == 1).count();
    log::info!(
        "train-local: {} clips ({positives} positive), {} parameters",
        samples.len(),
        ck.store.num_scalars()
    );
    let mut opt = Adam::new(&ck.store, cfg.lr_local);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let model = ck.model.clone();
    train_loop(
        "train-local",
        &mut ck.store,
        &mut opt,
        samples.len(),
        cfg.batch_local,
        cfg.epochs_local,
        cfg.lr_schedule,
        &mut rng,
        |store, idx| {
            let batch: Vec<LocalSample> = idx.iter().map(|&i| samples[i]).collect();
            local_batch(&model, store, videos, &batch)
        },
    )?;
    Ok(ck)
}

/// Runs the local model over every sampled frame of one video.
pub fn featurize_video<S: Scalar>(
    ck: &LocalCheckpoint<S>,
    video: &PooledVideo<S>,
    cfg: &PipelineConfig,
) -> Result<Handoff> {
    let frames = sample_frames(video.frame_count(), cfg.eval_stride)?;
    let d = ck.model.config.dim;
    let rows = frames
        .par_iter()
        .map(|&f| {
            let clip = video.clip(f, ck.model.config.w, ck.model.config.s);
            let mut g = Graph::new();
            let out = ck.model.forward(&mut g, &ck.store, &clip)?;
            let fused: Vec<f32> = g.value(out.fused).as_slice().iter().map(|x| x.as_f64() as f32).collect();
            Ok((fused, g.item(out.prob).as_f64() as f32))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fused = Vec::with_capacity(rows.len() * d);
    let mut confidence = Vec::with_capacity(rows.len());
    for (f, c) in rows {
        fused.extend(f);
        confidence.push(c);
    }
    Ok(Handoff {
        id: video.annotation.id.clone(),
        fps: video.annotation.frame_rate,
        duration: video.annotation.duration,
        frame_count: video.frame_count(),
        stride: cfg.eval_stride,
        fused: Matrix::from_vec(frames.len(), d, fused),
        confidence,
    })
}

pub fn featurize(
    videos: &[PooledVideo<f32>],
    ck: &LocalCheckpoint<f32>,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<Vec<Handoff>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let handoffs = videos
        .iter()
        .map(|v| featurize_video(ck, v, cfg))
        .collect::<Result<Vec<_>>>()?;
    handoffs
        .par_iter()
        .map(|h| h.to_container().write(&out_dir.join(format!("{}.tensor", h.id))))
        .collect::<Result<()>>()?;
    Ok(handoffs)
}

/// Reads the handoff file of every annotated video.
pub fn load_handoffs(dir: &Path, annotations: &[AnnotatedVideo]) -> Result<Vec<Handoff>> {
    annotations
        .par_iter()
        .map(|a| {
            let path = dir.join(format!("{}.tensor", a.id));
            if !path.exists() {
                return Err(Error::StageOrder(format!(
                    "handoff {} missing; run `featurize` first",
                    path.display()
                )));
            }
            let h = Handoff::read(&path)?;
            if h.id != a.id {
                return Err(Error::Invalid(format!("handoff {} holds video {:?}", path.display(), h.id)));
            }
            Ok(h)
        })
        .collect()
}

/// One decoder training window.
#[derive(Debug, Clone)]
pub struct DecoderSample {
    pub memory: Matrix<f32>,
    /// Boundaries inside the window, normalized to `[0, 1)`.
    pub targets: Vec<f64>,
}

/// Normalized position of `time` in a window starting at `origin`.
pub fn normalize_in_window(time: f64, origin: f64, span: f64) -> f64 {
    (time - origin) / span
}

pub fn decoder_samples(
    handoffs: &[Handoff],
    annotations: &[AnnotatedVideo],
    cfg: &PipelineConfig,
) -> Result<Vec<DecoderSample>> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (h, a) in handoffs.iter().zip(annotations) {
        let memory = h.memory()?;
        let interval = h.interval();
        let span = cfg.window_len as f64 * interval;
        for start in training_window_starts(memory.rows(), cfg.train_window_stride) {
            let origin = start as f64 * interval;
            let targets: Vec<f64> = a
                .boundaries
                .iter()
                .filter(|&&b| b >= origin && b < origin + span)
                .map(|&b| normalize_in_window(b, origin, span))
                .collect();
            if targets.len() > cfg.num_queries {
                skipped += 1;
                continue;
            }
            out.push(DecoderSample {
                memory: pad_window(&memory, start, cfg.window_len),
                targets,
            });
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} windows with more boundaries than queries");
    }
    Ok(out)
}

pub fn decoder_batch<S: Scalar>(
    model: &Decoder,
    store: &ParamStore<S>,
    batch: &[&DecoderSample],
    weights: LossWeights,
) -> Result<(f64, GradBuffer<S>)> {
    let inv_n = S::one() / S::from_usize(batch.len()).unwrap();
    let parts = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, store, &s.memory.convert(), Positional::On)?;
            let (loss, _) = set_prediction_loss(&mut g, &out, &s.targets, weights)?;
            let grads = g.backward(loss);
            let mut buf = GradBuffer::zeros_like(store);
            g.accumulate_param_grads(&grads, inv_n, &mut buf);
            Ok((g.item(loss).as_f64(), buf))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_parts(store, parts, batch.len()))
}

pub fn train_decoder(
    handoffs: &[Handoff],
    annotations: &[AnnotatedVideo],
    cfg: &PipelineConfig,
) -> Result<DecoderCheckpoint<f32>> {
    cfg.validate().map_err(Error::InvalidConfig)?;
    let samples = decoder_samples(handoffs, annotations, cfg)?;
    if samples.is_empty() {
        return Err(Error::Invalid("no decoder training windows".into()));
    }
    let mut ck = DecoderCheckpoint::init(DecoderConfig::from_pipeline(cfg), cfg.seed.wrapping_add(2));
    log::info!(
        "train-decoder: {} windows, {} parameters",
        samples.len(),
        ck.store.num_scalars()
    );
    let mut opt = Adam::adamw(&ck.store, cfg.lr_decoder, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let model = ck.model.clone();
    let weights = LossWeights::from_pipeline(cfg);
    train_loop(
        "train-decoder",
        &mut ck.store,
        &mut opt,
        samples.len(),
        cfg.batch_decoder,
        cfg.epochs_decoder,
        cfg.lr_schedule,
        &mut rng,
        |store, idx| {
            let batch: Vec<&DecoderSample> = idx.iter().map(|&i| &samples[i]).collect();
            decoder_batch(&model, store, &batch, weights)
        },
    )?;
    Ok(ck)
}

/// Decodes every window of one video's handoff and merges the results.
pub fn decode_video<S: Scalar>(
    ck: &DecoderCheckpoint<S>,
    handoff: &Handoff,
    cfg: &PipelineConfig,
) -> Result<Vec<BoundaryPrediction>> {
    let memory = handoff.memory()?;
    let interval = handoff.interval();
    let span = cfg.window_len as f64 * interval;
    let mut raw = Vec::new();
    for (start, _) in window_starts(memory.rows(), cfg.window_len, cfg.window_stride) {
        let window = pad_window(&memory, start, cfg.window_len).convert();
        let mut g = Graph::new();
        let out = ck.model.forward(&mut g, &ck.store, &window, Positional::On)?;
        let pred = WindowPrediction::from_output(&g, &out);
        raw.extend(emit_predictions(&pred, start as f64 * interval, span, cfg.theta));
    }
    for p in &mut raw {
        p.time = p.time.clamp(0.0, handoff.duration);
    }
    Ok(dedupe(raw, interval))
}

pub fn infer(
    videos: &[PooledVideo<f32>],
    local: &LocalCheckpoint<f32>,
    decoder: &DecoderCheckpoint<f32>,
    cfg: &PipelineConfig,
) -> Result<PredictionMap> {
    if videos.is_empty() {
        return Err(Error::Invalid("nothing to infer: empty split".into()));
    }
    let decoded = videos
        .iter()
        .map(|v| {
            let h = featurize_video(local, v, cfg)?;
            Ok((v.annotation.id.clone(), decode_video(decoder, &h, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(decoded.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
}

/// What a run did, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub datasets: Vec<PathBuf>,
    pub local_checkpoint: Option<CheckpointRecord>,
    pub decoder_checkpoint: Option<CheckpointRecord>,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

pub const STAGE_ORDER: [&str; 4] = ["train-local", "featurize", "train-decoder", "decode"];

impl RunManifest {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            seed: config.seed,
            config,
            datasets: Vec::new(),
            local_checkpoint: None,
            decoder_checkpoint: None,
            stages: Vec::new(),
        }
    }

    pub fn load_or_new(path: &Path, config: &PipelineConfig) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new(config.clone()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Records a finished stage; rerunning a stage drops everything after it.
    pub fn record(&mut self, stage: &str, seconds: f64) {
        let rank = STAGE_ORDER.iter().position(|s| *s == stage);
        if let Some(r) = rank {
            self.stages.retain(|s| {
                STAGE_ORDER
                    .iter()
                    .position(|x| *x == s.stage)
                    .is_some_and(|k| k < r)
            });
        }
        self.stages.push(StageRecord {
            stage: stage.to_owned(),
            seconds,
        });
    }

    /// Whether all four stages were recorded in order.
    pub fn is_complete(&self) -> bool {
        self.stages.iter().map(|s| s.stage.as_str()).eq(STAGE_ORDER)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Generates the training and held-out splits.
pub fn generate_splits(
    work: &Workdir,
    train: usize,
    test: usize,
    dist: &DatasetSpec,
    seed: u64,
) -> Result<()> {
    for (split, count, split_seed) in [("train", train, seed), ("test", test, seed ^ 0x5EED_7E57)] {
        if count == 0 {
            continue;
        }
        let mut ann = write_dataset(&work.split_dir(split), count, dist, split_seed, &format!("{split}_"))?;
        ann.sort_by(|a, b| a.id.cmp(&b.id));
        write_annotations(&ann, &work.annotations(split))?;
        log::info!("gen: wrote {count} {split} videos");
    }
    Ok(())
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t0 = Instant::now();
    let out = f()?;
    Ok((out, t0.elapsed().as_secs_f64()))
}

fn checkpoint_record(work: &Workdir, c: &Container, path: &Path) -> CheckpointRecord {
    CheckpointRecord {
        path: work.relative(path),
        sha256: c.content_hash(),
    }
}

pub fn run_train_local(work: &Workdir, cfg: &PipelineConfig) -> Result<LocalCheckpoint<f32>> {
    let videos = load_split::<f32>(work, "train")?;
    let (ck, secs) = timed(|| train_local(&videos, cfg))?;
    let c = ck.to_container();
    c.write(&work.local_checkpoint())?;
    let mut m = RunManifest::load_or_new(&work.manifest(), cfg)?;
    m.config = cfg.clone();
    m.seed = cfg.seed;
    m.datasets = vec![work.relative(&work.annotations("train"))];
    m.local_checkpoint = Some(checkpoint_record(work, &c, &work.local_checkpoint()));
    m.decoder_checkpoint = None;
    m.record("train-local", secs);
    m.write(&work.manifest())?;
    Ok(ck)
}

pub fn run_featurize(work: &Workdir, cfg: &PipelineConfig) -> Result<()> {
    let ck = LocalCheckpoint::<f32>::load(&work.local_checkpoint())?;
    let videos = load_split::<f32>(work, "train")?;
    let (_, secs) = timed(|| featurize(&videos, &ck, cfg, &work.handoff_dir("train")))?;
    let mut m = RunManifest::load_or_new(&work.manifest(), cfg)?;
    m.record("featurize", secs);
    m.write(&work.manifest())
}

pub fn run_train_decoder(work: &Workdir, cfg: &PipelineConfig) -> Result<DecoderCheckpoint<f32>> {
    let ann_path = work.annotations("train");
    if !ann_path.exists() {
        return Err(Error::StageOrder("no training annotations; run `gen` first".into()));
    }
    let annotations = load_annotations(&ann_path)?;
    let handoffs = load_handoffs(&work.handoff_dir("train"), &annotations)?;
    let (ck, secs) = timed(|| train_decoder(&handoffs, &annotations, cfg))?;
    let c = ck.to_container();
    c.write(&work.decoder_checkpoint())?;
    let mut m = RunManifest::load_or_new(&work.manifest(), cfg)?;
    m.decoder_checkpoint = Some(checkpoint_record(work, &c, &work.decoder_checkpoint()));
    m.record("train-decoder", secs);
    m.write(&work.manifest())?;
    Ok(ck)
}

pub fn run_infer(work: &Workdir, cfg: &PipelineConfig, split: &str, out: &Path) -> Result<PredictionMap> {
    let local = LocalCheckpoint::<f32>::load(&work.local_checkpoint())?;
    let decoder = DecoderCheckpoint::<f32>::load(&work.decoder_checkpoint())?;
    let videos = load_split::<f32>(work, split)?;
    let (preds, secs) = timed(|| infer(&videos, &local, &decoder, cfg))?;
    write_predictions(&preds, out)?;
    let mut m = RunManifest::load_or_new(&work.manifest(), cfg)?;
    m.record("decode", secs);
    m.write(&work.manifest())?;
    Ok(preds)
}

/// All four stages on the `train` split, then scoring on `test`.
pub fn run_all(work: &Workdir, cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate().map_err(Error::InvalidConfig)?;
    run_train_local(work, cfg)?;
    run_featurize(work, cfg)?;
    run_train_decoder(work, cfg)?;
    let preds = run_infer(work, cfg, "test", &work.predictions())?;
    let annotations = load_annotations(&work.annotations("test"))?;
    let report = evaluate_maps(&preds, &annotations, &cfg.rel_dis_thresholds)?;
    write_report(&report, &work.report())?;
    Ok(report)
}
