//! Segmental evaluation: framewise accuracy, segmental edit score and
//! segmental F1 at IoU thresholds, with per-video and corpus aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Segment, SegmentAnnotation};

/// The conventional report thresholds.
pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction has {pred} frames but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
}

/// Percentage of frames labeled correctly.
pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let correct = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / gt.len() as f64)
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut current = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        current[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ca != cb);
            current[j + 1] = substitute.min(prev[j + 1] + 1).min(current[j] + 1);
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()]
}

fn class_sequence(segments: &[Segment], background: Option<usize>) -> Vec<usize> {
    segments
        .iter()
        .map(|s| s.class_id)
        .filter(|&c| Some(c) != background)
        .collect()
}

/// Segmental edit score: `100·(1 − lev/max(|pred|,|gt|))` over the segment
/// class sequences, 100 when both are empty.
pub fn edit_score(pred: &[Segment], gt: &[Segment], background: Option<usize>) -> f64 {
    let p = class_sequence(pred, background);
    let g = class_sequence(gt, background);
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / longest as f64)
}

fn interval_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Detection counts at one threshold, summable across videos.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn add(&mut self, other: F1Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2·prec·rec/(prec+rec)` as a percent, zero when undefined.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let precision = self.tp as f64 / (self.tp + self.fp) as f64;
        let recall = self.tp as f64 / (self.tp + self.fn_) as f64;
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// Greedy segmental matching at threshold `tau`: each predicted segment, in
/// order, claims the unmatched same-class ground-truth segment of highest
/// IoU (ties to the earliest); it is a true positive iff that IoU ≥ tau.
pub fn f1_counts_at(
    pred: &[Segment],
    gt: &[Segment],
    tau: f64,
    background: Option<usize>,
) -> F1Counts {
    let pred: Vec<&Segment> = pred.iter().filter(|s| Some(s.class_id) != background).collect();
    let gt: Vec<&Segment> = gt.iter().filter(|s| Some(s.class_id) != background).collect();
    let mut matched = vec![false; gt.len()];
    let mut counts = F1Counts::default();
    for p in &pred {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if matched[j] || g.class_id != p.class_id {
                continue;
            }
            let iou = interval_iou(p, g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= tau => {
                matched[j] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = matched.iter().filter(|&&m| !m).count();
    counts
}

/// F1 percentage at one threshold for a single video.
pub fn f1_at(pred: &[Segment], gt: &[Segment], tau: f64, background: Option<usize>) -> f64 {
    f1_counts_at(pred, gt, tau, background).f1()
}

/// Metrics of one prediction/ground-truth pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoReport {
    pub video_id: String,
    pub num_frames: usize,
    pub correct_frames: usize,
    pub acc: f64,
    pub edit: f64,
    pub f1: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, F1Counts>,
}

/// Corpus-level report: accuracy over all frames, edit averaged per video,
/// F1 from summed detection counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub edit: f64,
    pub f1: BTreeMap<String, f64>,
    pub num_videos: usize,
    pub per_video: Vec<VideoReport>,
}

fn threshold_key(tau: f64) -> String {
    format!("{:.2}", tau)
}

/// Evaluate one video against its ground truth.
pub fn evaluate_video(
    video_id: &str,
    pred: &[usize],
    gt: &[usize],
    background: Option<usize>,
) -> Result<VideoReport, MetricsError> {
    let acc = accuracy(pred, gt)?;
    let pred_segments: SegmentAnnotation = crate::data::labels_to_segments(pred);
    let gt_segments: SegmentAnnotation = crate::data::labels_to_segments(gt);
    let edit = edit_score(&pred_segments, &gt_segments, background);
    let mut f1 = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for tau in F1_THRESHOLDS {
        let c = f1_counts_at(&pred_segments, &gt_segments, tau, background);
        f1.insert(threshold_key(tau), c.f1());
        counts.insert(threshold_key(tau), c);
    }
    let correct = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(VideoReport {
        video_id: video_id.to_string(),
        num_frames: gt.len(),
        correct_frames: correct,
        acc,
        edit,
        f1,
        counts,
    })
}

/// Aggregate per-video reports into the corpus report.
pub fn aggregate(per_video: Vec<VideoReport>) -> EvalReport {
    let num_videos = per_video.len();
    let total_frames: usize = per_video.iter().map(|v| v.num_frames).sum();
    let correct_frames: usize = per_video.iter().map(|v| v.correct_frames).sum();
    let acc = if total_frames == 0 {
        0.0
    } else {
        100.0 * correct_frames as f64 / total_frames as f64
    };
    let edit = if num_videos == 0 {
        0.0
    } else {
        per_video.iter().map(|v| v.edit).sum::<f64>() / num_videos as f64
    };
    let mut f1 = BTreeMap::new();
    for tau in F1_THRESHOLDS {
        let key = threshold_key(tau);
        let mut totals = F1Counts::default();
        for v in &per_video {
            totals.add(v.counts[&key]);
        }
        f1.insert(key, totals.f1());
    }
    EvalReport {
        acc,
        edit,
        f1,
        num_videos,
        per_video,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::labels_to_segments;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(class_id: usize, start: usize, end: usize) -> Segment {
        Segment { class_id, start, end }
    }

    #[test]
    fn accuracy_hand_cases() {
        assert_abs_diff_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_abs_diff_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_abs_diff_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 75.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn edit_score_hand_cases() {
        let ab = vec![seg(0, 0, 5), seg(1, 5, 9)];
        let abc = vec![seg(0, 0, 3), seg(1, 3, 6), seg(2, 6, 9)];
        assert_abs_diff_eq!(edit_score(&ab, &ab, None), 100.0);
        assert_abs_diff_eq!(edit_score(&ab, &abc, None), 100.0 * (1.0 - 1.0 / 3.0), epsilon = 1e-9);
        assert_abs_diff_eq!(edit_score(&[], &abc, None), 0.0);
    }

    // full-matrix DP oracle, written independently of the two-row version
    fn levenshtein_oracle(a: &[usize], b: &[usize]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            dp[i][0] = i;
        }
        for j in 0..=b.len() {
            dp[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
            }
        }
        dp[a.len()][b.len()]
    }

    proptest! {
        #[test]
        fn edit_matches_dp_oracle_and_is_symmetric(
            a in proptest::collection::vec(0usize..4, 0..25),
            b in proptest::collection::vec(0usize..4, 0..25),
        ) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein_oracle(&a, &b));
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }
    }

    #[test]
    fn f1_hand_cases() {
        // gt [(A,0,10),(B,10,20)], pred [(A,0,10)] → prec 1, rec 0.5 → 66.67
        let gt = vec![seg(0, 0, 10), seg(1, 10, 20)];
        let pred = vec![seg(0, 0, 10)];
        for tau in F1_THRESHOLDS {
            assert_abs_diff_eq!(f1_at(&pred, &gt, tau, None), 200.0 / 3.0, epsilon = 1e-9);
        }
        // exact equality → 100 everywhere
        for tau in F1_THRESHOLDS {
            assert_abs_diff_eq!(f1_at(&gt, &gt, tau, None), 100.0);
        }
        // IoU 0.4: TP at τ=0.25, FP at τ=0.5
        let gt = vec![seg(0, 0, 10)];
        let pred = vec![seg(0, 0, 4)];
        let at_025 = f1_counts_at(&pred, &gt, 0.25, None);
        assert_eq!((at_025.tp, at_025.fp, at_025.fn_), (1, 0, 0));
        let at_050 = f1_counts_at(&pred, &gt, 0.50, None);
        assert_eq!((at_050.tp, at_050.fp, at_050.fn_), (0, 1, 1));
        // ties at the threshold count as detections
        let pred = vec![seg(0, 0, 5)];
        let at_tie = f1_counts_at(&pred, &gt, 0.5, None);
        assert_eq!(at_tie.tp, 1);
    }

    // independent oracle: frame-set IoU via explicit enumeration, same greedy
    // discipline as the spec states it
    fn f1_counts_bruteforce(pred: &[Segment], gt: &[Segment], tau: f64) -> F1Counts {
        let frames = |s: &Segment| -> std::collections::HashSet<usize> { (s.start..s.end).collect() };
        let mut matched = vec![false; gt.len()];
        let mut counts = F1Counts::default();
        for p in pred {
            let pf = frames(p);
            let mut best_j = None;
            let mut best_iou = -1.0;
            for (j, g) in gt.iter().enumerate() {
                if matched[j] || g.class_id != p.class_id {
                    continue;
                }
                let gf = frames(g);
                let inter = pf.intersection(&gf).count() as f64;
                let union = pf.union(&gf).count() as f64;
                let iou = if union == 0.0 { 0.0 } else { inter / union };
                if iou > best_iou {
                    best_iou = iou;
                    best_j = Some(j);
                }
            }
            match best_j {
                Some(j) if best_iou >= tau => {
                    matched[j] = true;
                    counts.tp += 1;
                }
                _ => counts.fp += 1,
            }
        }
        counts.fn_ = matched.iter().filter(|&&m| !m).count();
        counts
    }

    fn random_labels(rng: &mut ChaCha8Rng, t: usize, classes: usize) -> Vec<usize> {
        let mut labels = Vec::with_capacity(t);
        let mut current = rng.gen_range(0..classes);
        while labels.len() < t {
            let run = rng.gen_range(1..8).min(t - labels.len());
            labels.extend(std::iter::repeat(current).take(run));
            current = rng.gen_range(0..classes);
        }
        labels
    }

    #[test]
    fn f1_matches_bruteforce_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..100 {
            let t = rng.gen_range(5..60);
            let pred = labels_to_segments(&random_labels(&mut rng, t, 4));
            let gt = labels_to_segments(&random_labels(&mut rng, t, 4));
            for tau in F1_THRESHOLDS {
                let fast = f1_counts_at(&pred, &gt, tau, None);
                let brute = f1_counts_bruteforce(&pred, &gt, tau);
                assert_eq!(fast, brute, "tau={tau}");
            }
        }
    }

    proptest! {
        #[test]
        fn f1_is_monotone_non_increasing_in_tau(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.gen_range(5..50);
            let pred = labels_to_segments(&random_labels(&mut rng, t, 3));
            let gt = labels_to_segments(&random_labels(&mut rng, t, 3));
            let scores: Vec<f64> = [0.1, 0.25, 0.5, 0.75, 0.9]
                .iter()
                .map(|&tau| f1_at(&pred, &gt, tau, None))
                .collect();
            for w in scores.windows(2) {
                prop_assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }

    #[test]
    fn perfect_prediction_scores_100_everywhere() {
        let labels = vec![0, 0, 1, 1, 1, 2, 0, 0];
        let report = evaluate_video("v", &labels, &labels, None).unwrap();
        assert_abs_diff_eq!(report.acc, 100.0);
        assert_abs_diff_eq!(report.edit, 100.0);
        for v in report.f1.values() {
            assert_abs_diff_eq!(*v, 100.0);
        }
    }

    #[test]
    fn background_class_is_excluded_from_edit_and_f1() {
        // class 9 is background: identical up to background noise
        let gt = vec![seg(9, 0, 3), seg(0, 3, 8), seg(9, 8, 10)];
        let pred = vec![seg(0, 3, 8), seg(9, 8, 10)];
        assert_abs_diff_eq!(edit_score(&pred, &gt, Some(9)), 100.0);
        assert_abs_diff_eq!(f1_at(&pred, &gt, 0.5, Some(9)), 100.0);
        // without the exclusion the missing background segment costs
        assert!(edit_score(&pred, &gt, None) < 100.0);
    }

    #[test]
    fn corpus_aggregation_weights_frames_and_sums_counts() {
        let a = evaluate_video("a", &[0, 0, 0, 0], &[0, 0, 0, 1], None).unwrap(); // 75%
        let b = evaluate_video("b", &[1, 1], &[1, 1], None).unwrap(); // 100%
        let report = aggregate(vec![a, b]);
        // frame-weighted accuracy: 5 of 6 frames
        assert_abs_diff_eq!(report.acc, 100.0 * 5.0 / 6.0, epsilon = 1e-9);
        // edit averages per video
        let edit_a = report.per_video[0].edit;
        let edit_b = report.per_video[1].edit;
        assert_abs_diff_eq!(report.edit, (edit_a + edit_b) / 2.0, epsilon = 1e-9);
        // corpus counts are the sums
        for tau in F1_THRESHOLDS {
            let key = format!("{:.2}", tau);
            let summed = report.per_video.iter().fold(F1Counts::default(), |mut acc, v| {
                acc.add(v.counts[&key]);
                acc
            });
            assert_abs_diff_eq!(report.f1[&key], summed.f1(), epsilon = 1e-12);
        }
    }

    #[test]
    fn report_json_round_trips() {
        let a = evaluate_video("a", &[0, 1, 1], &[0, 0, 1], None).unwrap();
        let report = aggregate(vec![a]);
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        let json2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(json, json2);
    }
}
