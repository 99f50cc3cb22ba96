//! F1 at relative-distance thresholds.

use std::path::Path;

use rayon::prelude::*;

use crate::datamodel::{
    load_annotations, load_predictions, AnnotatedVideo, EvalReport, PredictionMap, ThresholdRow,
    VideoReport,
};
use crate::decoder::hungarian;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `|pred - gt| / duration`.
pub fn rel_dis(pred_time: f64, gt_time: f64, duration: f64) -> Result<f64> {
    if !(duration > 0.0) {
        return Err(Error::Invalid(format!("duration {duration} must be positive")));
    }
    Ok((pred_time - gt_time).abs() / duration)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub threshold: f64,
    /// `(prediction index, ground-truth index, rel_dis)`.
    pub matched: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.matched.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_preds.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_gts.len()
    }
}

/// Maximum-cardinality one-to-one matching among pairs within `threshold`;
/// among maximum matchings, the one with the smallest total distance.
pub fn match_video(preds: &[f64], gts: &[f64], duration: f64, threshold: f64) -> Result<MatchResult> {
    let dist = Matrix::from_fn(preds.len(), gts.len(), |i, j| {
        (preds[i] - gts[j]).abs() / duration
    });
    rel_dis(0.0, 0.0, duration)?;
    // Any admissible matching costs less than one inadmissible pair.
    let admissible_sum: f64 = dist.as_slice().iter().filter(|&&d| d <= threshold).sum();
    let big = 1.0 + 2.0 * admissible_sum;
    let cost = dist.map(|d| if d <= threshold { d } else { big });
    let assignment = hungarian(&cost)?;
    let matched: Vec<(usize, usize, f64)> = assignment
        .pairs
        .into_iter()
        .filter(|&(i, j)| dist[(i, j)] <= threshold)
        .map(|(i, j)| (i, j, dist[(i, j)]))
        .collect();
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    for &(i, j, _) in &matched {
        pred_used[i] = true;
        gt_used[j] = true;
    }
    Ok(MatchResult {
        threshold,
        matched,
        unmatched_preds: (0..preds.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&j| !gt_used[j]).collect(),
    })
}

/// Harmonic mean with `0 / 0 = 0`.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// `(precision, recall, f1)` from counts.
pub fn score(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, f1_from_pr(p, r))
}

fn row(threshold: f64, tp: usize, fp: usize, fn_: usize) -> ThresholdRow {
    let (precision, recall, f1) = score(tp, fp, fn_);
    ThresholdRow {
        threshold,
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    }
}

/// Scores in-memory predictions; videos without predictions count as empty.
pub fn evaluate_maps(
    preds: &PredictionMap,
    annotations: &[AnnotatedVideo],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if let Some(id) = preds
        .keys()
        .find(|id| !annotations.iter().any(|a| &a.id == *id))
    {
        return Err(Error::UnknownVideo(id.clone()));
    }
    let per_video: Vec<VideoReport> = annotations
        .par_iter()
        .map(|video| {
            let mut times: Vec<f64> = preds
                .get(&video.id)
                .map(|list| list.iter().map(|p| p.time).collect())
                .unwrap_or_default();
            for t in &mut times {
                if !(0.0..=video.duration).contains(t) {
                    log::warn!(
                        "video {}: prediction {t} clamped to [0, {}]",
                        video.id,
                        video.duration
                    );
                    *t = t.clamp(0.0, video.duration);
                }
            }
            times.sort_by(f64::total_cmp);
            let rows = thresholds
                .iter()
                .map(|&th| {
                    let m = match_video(&times, &video.boundaries, video.duration, th)?;
                    debug_assert!(m.matched.iter().all(|x| x.2 <= th));
                    Ok(row(th, m.tp(), m.fp(), m.fn_()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VideoReport {
                id: video.id.clone(),
                rows,
            })
        })
        .collect::<Result<_>>()?;

    let n = per_video.len().max(1) as f64;
    let mut rows = Vec::with_capacity(thresholds.len());
    let mut macro_rows = Vec::with_capacity(thresholds.len());
    for (k, &th) in thresholds.iter().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for v in &per_video {
            let x = &v.rows[k];
            tp += x.tp;
            fp += x.fp;
            fn_ += x.fn_;
            p += x.precision;
            r += x.recall;
            f += x.f1;
        }
        rows.push(row(th, tp, fp, fn_));
        macro_rows.push(ThresholdRow {
            threshold: th,
            tp,
            fp,
            fn_,
            precision: p / n,
            recall: r / n,
            f1: f / n,
        });
    }
    Ok(EvalReport {
        rows,
        macro_rows,
        per_video,
    })
}

pub fn evaluate(preds: &Path, annotations: &Path, thresholds: &[f64]) -> Result<EvalReport> {
    let preds = load_predictions(preds)?;
    let annotations = load_annotations(annotations)?;
    evaluate_maps(&preds, &annotations, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::BoundaryPrediction;

    #[test]
    fn rel_dis_examples() {
        assert!((rel_dis(5.0, 5.2, 10.0).unwrap() - 0.02).abs() < 1e-12);
        assert_eq!(rel_dis(3.0, 3.0, 10.0).unwrap(), 0.0);
        assert_eq!(rel_dis(0.0, 10.0, 10.0).unwrap(), 1.0);
        assert!(rel_dis(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn match_examples() {
        let m = match_video(&[0.10, 0.50], &[0.12, 0.90], 1.0, 0.05).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (1, 1, 1));
        assert_eq!((m.matched[0].0, m.matched[0].1), (0, 0));
        let m = match_video(&[0.49, 0.51], &[0.50], 1.0, 0.05).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (1, 1, 0));
        let m = match_video(&[1.0, 2.0], &[1.0, 2.0], 10.0, 0.0).unwrap();
        assert_eq!(m.tp(), 2);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(0, 0, 0), (0.0, 0.0, 0.0));
        assert_eq!(score(2, 0, 0), (1.0, 1.0, 1.0));
        assert!((f1_from_pr(0.624, 0.626) - 0.625).abs() < 5e-4);
    }

    fn video(id: &str, boundaries: Vec<f64>) -> AnnotatedVideo {
        AnnotatedVideo {
            id: id.into(),
            duration: 10.0,
            frame_rate: 30.0,
            boundaries,
        }
    }

    fn preds(entries: &[(&str, &[f64])]) -> PredictionMap {
        entries
            .iter()
            .map(|(id, ts)| {
                (
                    (*id).to_owned(),
                    ts.iter()
                        .map(|&time| BoundaryPrediction { time, confidence: 0.9 })
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn micro_average_pools_counts() {
        let ann = vec![video("a", vec![2.0, 6.0]), video("b", vec![4.0])];
        let p = preds(&[("a", &[2.0]), ("b", &[4.0, 8.0])]);
        let r = evaluate_maps(&p, &ann, &[0.05]).unwrap();
        let row = r.rows[0];
        assert_eq!((row.tp, row.fp, row.fn_), (2, 1, 1));
        assert!((row.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_video.len(), 2);
    }

    #[test]
    fn unknown_and_empty_videos() {
        let ann = vec![video("a", vec![2.0])];
        assert!(matches!(
            evaluate_maps(&preds(&[("zz", &[])]), &ann, &[0.05]),
            Err(Error::UnknownVideo(_))
        ));
        let r = evaluate_maps(&PredictionMap::new(), &ann, &[0.05, 0.1]).unwrap();
        assert!(r.rows.iter().all(|x| x.f1 == 0.0 && x.fn_ == 1));
        let r = evaluate_maps(&preds(&[("a", &[2.0])]), &ann, &[0.05, 0.5]).unwrap();
        assert!(r.rows.iter().all(|x| x.f1 == 1.0));
    }

    #[test]
    fn out_of_range_prediction_is_clamped() {
        let ann = vec![video("a", vec![9.9])];
        let r = evaluate_maps(&preds(&[("a", &[10.4])]), &ann, &[0.05]).unwrap();
        assert_eq!(r.rows[0].tp, 1);
    }
}
