use serde::{Deserialize, Serialize};

use crate::detection::{compute_iou, Detection, GroundTruthBox};
use crate::error::{Error, Result};

/// `0.50, 0.55, …, 0.95`.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApMetrics {
    /// Mean over the IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Class-averaged AP at each of `IOU_THRESHOLDS`.
    pub per_threshold: Vec<f64>,
    /// Classes that have ground truth and enter the mean.
    pub evaluated_classes: Vec<usize>,
}

/// 101-point interpolated AP of a ranked list of match flags against
/// `num_gt` ground truths.
pub fn average_precision(matches: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || matches.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(matches.len());
    let mut precision = Vec::with_capacity(matches.len());
    for (i, &m) in matches.iter().enumerate() {
        tp += usize::from(m);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < target - 1e-12 {
            k += 1;
        }
        if k == recall.len() {
            break;
        }
        sum += precision[k];
    }
    sum / RECALL_POINTS as f64
}

/// Greedy matching of one class at one IoU threshold; returns ranked match flags.
fn match_class(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], class: usize, thr: f64) -> Vec<bool> {
    let mut ranked: Vec<(usize, &Detection)> =
        dets.iter().enumerate().flat_map(|(i, d)| d.iter().filter(|d| d.class == class).map(move |d| (i, d))).collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|&(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if g.class != class || used[img][j] {
                    continue;
                }
                let iou = compute_iou(&d.bbox, &g.bbox);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Class-averaged AP over images; classes without ground truth are left out.
pub fn evaluate_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], num_classes: usize) -> Result<ApMetrics> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if let Some(d) = dets.iter().flatten().find(|d| d.class >= num_classes || !(0.0..=1.0).contains(&d.score)) {
        return Err(Error::InvalidArgument(format!("invalid detection {d:?}")));
    }
    let mut counts = vec![0usize; num_classes];
    for g in gts.iter().flatten() {
        if g.class >= num_classes {
            return Err(Error::InvalidArgument(format!("ground truth class {} out of range", g.class)));
        }
        counts[g.class] += 1;
    }
    let classes: Vec<usize> = (0..num_classes).filter(|&c| counts[c] > 0).collect();
    let per_threshold: Vec<f64> = IOU_THRESHOLDS
        .iter()
        .map(|&thr| {
            if classes.is_empty() {
                return 0.0;
            }
            let s: f64 = classes.iter().map(|&c| average_precision(&match_class(dets, gts, c, thr), counts[c])).sum();
            s / classes.len() as f64
        })
        .collect();
    Ok(ApMetrics {
        ap: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        per_threshold,
        evaluated_classes: classes,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn det(b: [f64; 4], score: f64, class: usize) -> Detection {
        Detection { bbox: b, score, class }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![GroundTruthBox::new([0.0, 0.0, 10.0, 10.0], 0), GroundTruthBox::new([20.0, 20.0, 40.0, 30.0], 1)]];
        let perfect = vec![gts[0].iter().map(|g| det(g.bbox, 1.0, g.class)).collect()];
        let m = evaluate_ap(&perfect, &gts, 3).unwrap();
        assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
        assert_eq!(m.evaluated_classes, vec![0, 1]);
        let m = evaluate_ap(&[vec![]], &gts, 3).unwrap();
        assert_eq!(m.ap, 0.0);
    }

    #[test]
    fn duplicate_detection_pr_curve() {
        // Ranked: TP, duplicate (FP), TP. Precision envelope is 1 up to
        // recall 0.5 (51 points) and 2/3 after (50 points).
        let a = [0.0, 0.0, 10.0, 10.0];
        let b = [50.0, 50.0, 70.0, 60.0];
        let gts = vec![vec![GroundTruthBox::new(a, 0), GroundTruthBox::new(b, 0)]];
        let dets = vec![vec![det(a, 0.9, 0), det([0.5, 0.0, 10.0, 10.0], 0.8, 0), det(b, 0.7, 0)]];
        let m = evaluate_ap(&dets, &gts, 1).unwrap();
        let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((m.ap50 - want).abs() < 1e-12, "{}", m.ap50);
    }

    #[test]
    fn strict_threshold_rejects_loose_box() {
        let gts = vec![vec![GroundTruthBox::new([0.0, 0.0, 10.0, 10.0], 0)]];
        // IoU 0.6 exactly.
        let dets = vec![vec![det([0.0, 0.0, 10.0, 6.0], 0.5, 0)]];
        let m = evaluate_ap(&dets, &gts, 1).unwrap();
        assert_eq!(m.per_threshold[..3], [1.0, 1.0, 1.0]);
        assert_eq!(m.per_threshold[3], 0.0);
    }

    #[test]
    fn input_validation() {
        assert!(evaluate_ap(&[vec![]], &[], 1).is_err());
        assert!(evaluate_ap(&[vec![det([0.0, 0.0, 1.0, 1.0], 1.5, 0)]], &[vec![]], 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn top_true_positive_never_lowers_ap(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_img = rng.random_range(1..4);
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for _ in 0..n_img {
                let g: Vec<GroundTruthBox> = (0..rng.random_range(0..4)).map(|_| {
                    let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
                    GroundTruthBox::new([x, y, x + rng.random_range(2.0..30.0), y + rng.random_range(2.0..30.0)], rng.random_range(0..2))
                }).collect();
                let d: Vec<Detection> = (0..rng.random_range(0..6)).map(|_| {
                    let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
                    det([x, y, x + rng.random_range(2.0..30.0), y + rng.random_range(2.0..30.0)], rng.random_range(0.0..0.99), rng.random_range(0..2))
                }).collect();
                gts.push(g);
                dets.push(d);
            }
            let Some((img, g)) = gts.iter().enumerate().find_map(|(i, g)| g.first().map(|g| (i, *g))) else {
                return Ok(());
            };
            let before = evaluate_ap(&dets, &gts, 2).unwrap();
            dets[img].push(det(g.bbox, 1.0, g.class));
            let after = evaluate_ap(&dets, &gts, 2).unwrap();
            proptest::prop_assert!(after.ap >= before.ap - 1e-12);
            proptest::prop_assert!(after.ap50 >= before.ap50 - 1e-12);
        }
    }
}
