use gebd_core::datamodel::{load_predictions, AnnotatedVideo, PipelineConfig, Preset};
use gebd_core::ddmnet::LocalModelConfig;
use gebd_core::decoder::{DecoderConfig, LossWeights};
use gebd_core::featbank::pool_levels;
use gebd_core::optim::Adam;
use gebd_core::pipeline::*;
use gebd_core::synthgen::{generate, DatasetSpec};
use gebd_core::tensor::Matrix;
use gebd_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> PipelineConfig {
    PipelineConfig {
        w: 4,
        feature_dim: 8,
        heads: 2,
        decoder_layers: 1,
        num_queries: 4,
        window_len: 20,
        window_stride: 20,
        train_window_stride: 10,
        epochs_local: 1,
        epochs_decoder: 2,
        batch_local: 8,
        batch_decoder: 4,
        theta: 0.3,
        seed: 11,
        ..PipelineConfig::preset(Preset::Desk)
    }
}

fn tiny_data() -> DatasetSpec {
    DatasetSpec {
        duration_range: (3.0, 4.0),
        max_segments: 3,
        ..DatasetSpec::default()
    }
}

fn pooled(seed: u64) -> PooledVideo<f64> {
    let spec = tiny_data().sample("v".into(), seed);
    let v = generate(&spec).unwrap();
    PooledVideo {
        annotation: v.annotation,
        levels: pool_levels(&v.levels).unwrap(),
    }
}

proptest! {
    #[test]
    fn windows_partition_the_sequence(len in 1usize..1000, window in 1usize..150) {
        let ws = make_windows(len, window);
        let mut next = 0;
        for &(start, eff) in &ws {
            prop_assert_eq!(start, next);
            prop_assert!(eff >= 1 && eff <= window);
            next += eff;
        }
        prop_assert_eq!(next, len);
        prop_assert!(ws[..ws.len() - 1].iter().all(|w| w.1 == window));
    }

    #[test]
    fn padding_repeats_the_last_row(len in 1usize..60, window in 1usize..80) {
        let seq = Matrix::from_fn(len, 3, |i, j| (i * 3 + j) as f64);
        for (start, eff) in make_windows(len, window) {
            let w = pad_window(&seq, start, window);
            prop_assert_eq!(w.rows(), window);
            for r in 0..window {
                let src = if r < eff { start + r } else { len - 1 };
                prop_assert_eq!(w.row(r), seq.row(src));
            }
        }
    }
}

#[test]
fn window_examples() {
    assert_eq!(make_windows(250, 100), vec![(0, 100), (100, 100), (200, 50)]);
    assert_eq!(make_windows(37, 100), vec![(0, 37)]);
    assert_eq!(make_windows(100, 100), vec![(0, 100)]);
    let seq = Matrix::from_fn(37, 2, |i, j| (i + j) as f64);
    let w = pad_window(&seq, 0, 100);
    assert!((37..100).all(|r| w.row(r) == seq.row(36)));
}

#[test]
fn batches_honor_the_configured_sizes() {
    let cfg = PipelineConfig::default();
    for (items, batch) in [(100, cfg.batch_local), (100, cfg.batch_decoder), (16, 16), (5, 32)] {
        let bs = epoch_batches(items, batch, &mut ChaCha8Rng::seed_from_u64(0));
        let (last, full) = bs.split_last().unwrap();
        assert!(full.iter().all(|b| b.len() == batch));
        assert!(!last.is_empty() && last.len() <= batch);
        let mut all: Vec<usize> = bs.concat();
        all.sort_unstable();
        assert_eq!(all, (0..items).collect::<Vec<_>>());
    }
    assert_eq!((cfg.batch_local, cfg.batch_decoder), (16, 32));
}

#[test]
fn one_local_step_descends_on_a_fixed_batch() {
    let videos = vec![pooled(1), pooled(2)];
    let cfg = tiny_config();
    let mut ck = LocalCheckpoint::<f64>::init(LocalModelConfig::from_pipeline(&cfg, videos[0].channels()), 3);
    let samples = local_samples(&videos, &cfg).unwrap();
    let mut batch: Vec<LocalSample> = samples.iter().filter(|s| s.label == 1).take(4).copied().collect();
    assert!(!batch.is_empty());
    batch.extend(samples.iter().filter(|s| s.label == 0).take(16 - batch.len()));
    assert_eq!(batch.len(), 16);
    let (before, grads) = local_batch(&ck.model, &ck.store, &videos, &batch).unwrap();
    let mut opt = Adam::new(&ck.store, 1e-6);
    opt.step(&mut ck.store, &grads);
    let (after, _) = local_batch(&ck.model, &ck.store, &videos, &batch).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn one_decoder_step_descends_on_a_fixed_batch() {
    let cfg = tiny_config();
    let mut ck = DecoderCheckpoint::<f64>::init(DecoderConfig::from_pipeline(&cfg), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<DecoderSample> = (0..4)
        .map(|k| {
            use rand::Rng;
            DecoderSample {
                memory: Matrix::from_fn(20, 8, |_, _| rng.random_range(-1.0f32..1.0)),
                targets: (0..k).map(|j| 0.2 * j as f64 + 0.1).collect(),
            }
        })
        .collect();
    let batch: Vec<&DecoderSample> = samples.iter().collect();
    let w = LossWeights::from_pipeline(&cfg);
    let (before, grads) = decoder_batch(&ck.model, &ck.store, &batch, w).unwrap();
    let mut opt = Adam::adamw(&ck.store, 1e-6, cfg.weight_decay);
    opt.step(&mut ck.store, &grads);
    let (after, _) = decoder_batch(&ck.model, &ck.store, &batch, w).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn window_normalization_is_affine() {
    assert!((normalize_in_window(17.5, 10.0, 30.0) - 0.25).abs() < 1e-12);
    assert_eq!(normalize_in_window(10.0, 10.0, 30.0), 0.0);
}

#[test]
fn nine_frames_at_stride_three_give_three_confidences() {
    let cfg = PipelineConfig { eval_stride: 3, ..tiny_config() };
    let mut v = pooled(6);
    for l in &mut v.levels {
        *l = l.rows_subset(&(0..9).collect::<Vec<_>>());
    }
    v.annotation = AnnotatedVideo {
        duration: 9.0 / v.annotation.frame_rate,
        boundaries: vec![],
        ..v.annotation
    };
    let ck = LocalCheckpoint::<f64>::init(LocalModelConfig::from_pipeline(&cfg, v.channels()), 7);
    let h = featurize_video(&ck, &v, &cfg).unwrap();
    assert_eq!(h.confidence.len(), 3);
    assert_eq!(h.fused.shape(), (3, 8));
    assert!(h.confidence.iter().all(|c| (0.0..=1.0).contains(c)));
    assert_eq!(h.times().len(), 3);
}

#[test]
fn short_video_predictions_stay_inside_and_theta_one_is_silent() {
    let mut cfg = PipelineConfig {
        theta: 0.0,
        ..tiny_config()
    };
    let v = pooled(8);
    let local = LocalCheckpoint::<f64>::init(LocalModelConfig::from_pipeline(&cfg, v.channels()), 9);
    let h = featurize_video(&local, &v, &cfg).unwrap();
    let mut long = cfg.clone();
    long.window_len = 400;
    long.window_stride = 400;
    let decoder = DecoderCheckpoint::<f64>::init(DecoderConfig::from_pipeline(&long), 10);
    let preds = decode_video(&decoder, &h, &long).unwrap();
    assert!(!preds.is_empty());
    assert!(preds.iter().all(|p| (0.0..=h.duration).contains(&p.time)));
    assert!(preds.windows(2).all(|w| w[1].time - w[0].time >= h.interval()));
    cfg.theta = 1.0;
    let decoder = DecoderCheckpoint::<f64>::init(DecoderConfig::from_pipeline(&cfg), 10);
    assert!(decode_video(&decoder, &h, &cfg).unwrap().is_empty());
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let work = Workdir::new(dir.path());
    let cfg = tiny_config();
    let stage_order = |r: gebd_core::Result<()>| matches!(r, Err(Error::StageOrder(_)));
    assert!(stage_order(run_train_local(&work, &cfg).map(drop)));
    generate_splits(&work, 3, 2, &tiny_data(), 1).unwrap();
    assert!(stage_order(run_featurize(&work, &cfg)));
    assert!(stage_order(run_train_decoder(&work, &cfg).map(drop)));
    assert!(stage_order(run_infer(&work, &cfg, "test", &work.predictions()).map(drop)));
    run_train_local(&work, &cfg).unwrap();
    assert!(stage_order(run_train_decoder(&work, &cfg).map(drop)));
    assert!(stage_order(run_infer(&work, &cfg, "test", &work.predictions()).map(drop)));
}

#[test]
fn full_run_is_deterministic_and_recorded_in_order() {
    let cfg = tiny_config();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let work = Workdir::new(dir.path());
        generate_splits(&work, 4, 2, &tiny_data(), cfg.seed).unwrap();
        run_all(&work, &cfg).unwrap();
        let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
        let handoff = work.handoff_dir("train").join("train_00000.tensor");
        let first = read(handoff.clone());
        run_featurize(&work, &cfg).unwrap();
        assert_eq!(read(handoff), first, "featurize is not reproducible");
        let manifest = RunManifest::load_or_new(&work.manifest(), &cfg).unwrap();
        let preds = load_predictions(&work.predictions()).unwrap();
        assert_eq!(preds.len(), 2);
        (
            read(work.predictions()),
            read(work.report()),
            read(work.local_checkpoint()),
            read(work.decoder_checkpoint()),
            manifest,
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
    // Re-featurizing dropped the later stages from the manifest.
    assert_eq!(a.4.stages.len(), 2);
    assert_eq!(a.4.local_checkpoint, b.4.local_checkpoint);
    assert_eq!(
        a.4.local_checkpoint.unwrap().path,
        std::path::Path::new("ckpt/local.tensor")
    );
}
