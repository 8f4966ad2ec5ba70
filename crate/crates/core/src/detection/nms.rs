use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `(x1, y1, x2, y2)` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    pub class: usize,
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; zero when the union is empty.
pub fn compute_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Indices of the detections kept by class-wise greedy suppression, in
/// visiting order: descending score, ties broken by smaller index.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && dets[j].class == dets[i].class && compute_iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Repeatedly takes the best remaining box and drops everything of its
    /// class that overlaps it.
    fn brute_force(dets: &[Detection], thr: f64) -> Vec<usize> {
        let mut alive: Vec<usize> = (0..dets.len()).collect();
        let mut keep = Vec::new();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                    best = i;
                }
            }
            keep.push(best);
            alive.retain(|&j| j != best && !(dets[j].class == dets[best].class && compute_iou(&dets[j].bbox, &dets[best].bbox) > thr));
        }
        keep
    }

    pub(crate) fn random_dets(rng: &mut impl Rng, n: usize) -> Vec<Detection> {
        (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                let (w, h) = (rng.random_range(1.0..40.0), rng.random_range(1.0..40.0));
                // Coarse scores so ties occur.
                let score = (rng.random_range(0..20) as f64) / 20.0;
                Detection { bbox: [x, y, x + w, y + h], score, class: rng.random_range(0..3) }
            })
            .collect()
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(compute_iou(&a, &a), 1.0);
        assert!((compute_iou(&a, &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(compute_iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
        assert_eq!(compute_iou(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn matches_brute_force_on_200_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dets = random_dets(&mut rng, 200);
        assert_eq!(nms_indices(&dets, 0.6), brute_force(&dets, 0.6));
    }

    #[test]
    fn different_classes_never_suppress() {
        let d = |c| Detection { bbox: [0.0, 0.0, 10.0, 10.0], score: 0.9, class: c };
        assert_eq!(nms(&[d(0), d(1)], 0.6).len(), 2);
        assert_eq!(nms(&[d(0), d(0)], 0.6).len(), 1);
        assert_eq!(nms_indices(&[d(0), d(0)], 0.6), vec![0]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(64))]
        #[test]
        fn equals_brute_force(seed in 0u64..10_000, n in 0usize..120, thr in 0.1f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets = random_dets(&mut rng, n);
            proptest::prop_assert_eq!(nms_indices(&dets, thr), brute_force(&dets, thr));
        }
    }
}
