use gebd_core::synthgen::*;
use proptest::prelude::*;

fn frame_gap(level: &LevelFeatures, a: usize, b: usize) -> f64 {
    level
        .frame(a)
        .iter()
        .zip(level.frame(b))
        .map(|(x, y)| f64::from(x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Noise-free high-level changes dominate the largest within-segment step.
    #[test]
    fn separability_floor(segments in 2usize..6, drift in 0.0f64..2.0, seed: u64) {
        let spec = SyntheticVideoSpec {
            id: "v".into(),
            segment_count: segments,
            duration_range: (8.0, 12.0),
            fps: 30.0,
            drift_rate: drift,
            noise_sigma: 0.0,
            change_kinds: vec![ChangeKind::HighLevel; segments - 1],
            min_jump: DatasetSpec::default().min_jump,
            pyramid: DEFAULT_PYRAMID.to_vec(),
            seed,
        };
        let v = generate(&spec).unwrap();
        let top = v.levels.last().unwrap();
        let fps = v.annotation.frame_rate;
        // Index of the first frame at or after each boundary.
        let cuts: Vec<usize> = v.annotation.boundaries.iter()
            .map(|b| (0..top.frames()).find(|&f| f as f64 / fps >= *b).unwrap())
            .collect();
        prop_assert_eq!(cuts.len(), segments - 1);
        let mut within: f64 = 0.0;
        for f in 1..top.frames() {
            if !cuts.contains(&f) {
                within = within.max(frame_gap(top, f - 1, f));
            }
        }
        for &c in &cuts {
            let across = frame_gap(top, c - 1, c);
            prop_assert!(across >= 10.0 * within, "across {across}, within {within}");
        }
    }

    #[test]
    fn same_spec_same_bytes(seed: u64) {
        let spec = DatasetSpec::default().sample("x".into(), seed);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        let bytes = |v: &SyntheticVideo| video_container(v).to_bytes().unwrap();
        prop_assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn sampled_specs_are_valid(seed: u64) {
        let spec = DatasetSpec::default().sample("x".into(), seed);
        prop_assert!(spec.validate().is_ok());
        let v = generate(&spec).unwrap();
        prop_assert!(v.annotation.validate().is_ok());
        prop_assert_eq!(v.annotation.boundaries.len(), spec.segment_count - 1);
        // Segments last at least a second.
        let mut edges = vec![0.0];
        edges.extend(&v.annotation.boundaries);
        edges.push(v.annotation.duration);
        prop_assert!(edges.windows(2).all(|p| p[1] - p[0] >= 1.0 - 1e-9));
    }
}

#[test]
fn fixed_seed_reproduces_the_whole_dataset() {
    let dist = DatasetSpec::default();
    let ids = |vs: &[SyntheticVideo]| -> Vec<(String, Vec<f64>)> {
        vs.iter()
            .map(|v| (v.annotation.id.clone(), v.annotation.boundaries.clone()))
            .collect()
    };
    let specs_a = dist.sample_many(200, 9, "t_");
    let specs_b = dist.sample_many(200, 9, "t_");
    assert_eq!(specs_a, specs_b);
    let a = generate_dataset(12, &dist, 9, "t_").unwrap();
    let b = generate_dataset(12, &dist, 9, "t_").unwrap();
    assert_eq!(ids(&a), ids(&b));
    let c = generate_dataset(3, &dist, 9, "t_").unwrap();
    assert_eq!(c.len(), 3);
    let mut distinct: Vec<_> = c.iter().map(|v| &v.annotation.id).collect();
    distinct.dedup();
    assert_eq!(distinct.len(), 3);
}

#[test]
fn single_segment_distribution_has_no_boundaries() {
    let dist = DatasetSpec {
        max_segments: 1,
        ..DatasetSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ann = write_dataset(dir.path(), 5, &dist, 3, "s_").unwrap();
    assert!(ann.iter().all(|a| a.boundaries.is_empty()));
    let levels = read_video_levels(&dir.path().join("s_00000.tensor")).unwrap();
    assert_eq!(levels.len(), DEFAULT_PYRAMID.len());
    assert_eq!(levels[0].frames(), ann[0].frame_count());
}
