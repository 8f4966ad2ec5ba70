use serde::{Deserialize, Serialize};

use crate::detection::{location_center, nms, Detection};
use crate::error::{Error, Result};
use crate::heads::Predictions;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_threshold: 0.05, pre_nms_top_k: 1000, nms_threshold: 0.6, max_detections: 100 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::Config("score and nms thresholds must lie in [0, 1]".into()));
        }
        if self.pre_nms_top_k == 0 || self.max_detections == 0 {
            return Err(Error::Config("pre_nms_top_k and max_detections must be positive".into()));
        }
        Ok(())
    }
}

/// Box around `(cx, cy)` from pixel distances `(l, t, r, b)`.
pub fn distances_to_box(cx: f64, cy: f64, d: [f64; 4]) -> [f64; 4] {
    [cx - d[0], cy - d[1], cx + d[2], cy + d[3]]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Candidate detections of batch element `image`: thresholded on the fused
/// score and limited to the `pre_nms_top_k` best per level, boxes clipped to
/// the image.
pub fn decode_boxes(
    preds: &Predictions,
    image: usize,
    image_h: usize,
    image_w: usize,
    score_threshold: f64,
    pre_nms_top_k: usize,
) -> Vec<Detection> {
    let (ih, iw) = (image_h as f64, image_w as f64);
    let mut out = Vec::new();
    for lp in &preds.levels {
        let s = lp.cls_logits.shape();
        let mut cand: Vec<(f64, usize, usize, usize)> = Vec::new();
        for y in 0..s.h {
            for x in 0..s.w {
                let ctr = sigmoid(lp.centerness.at(image, 0, y, x));
                for c in 0..s.c {
                    let score = (sigmoid(lp.cls_logits.at(image, c, y, x)) * ctr).sqrt();
                    if score > score_threshold {
                        cand.push((score, y, x, c));
                    }
                }
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0));
        cand.truncate(pre_nms_top_k);
        let stride = lp.stride as f64;
        for (score, y, x, c) in cand {
            let (cx, cy) = location_center(x, y, lp.stride);
            let d = std::array::from_fn(|j| lp.box_reg.at(image, j, y, x) * stride);
            let b = distances_to_box(cx, cy, d);
            let bbox = [b[0].clamp(0.0, iw), b[1].clamp(0.0, ih), b[2].clamp(0.0, iw), b[3].clamp(0.0, ih)];
            out.push(Detection { bbox, score, class: c });
        }
    }
    out
}

/// Decoding, class-wise suppression and the final per-image cap.
pub fn postprocess(preds: &Predictions, image: usize, image_h: usize, image_w: usize, cfg: &DecodeConfig) -> Vec<Detection> {
    let cands = decode_boxes(preds, image, image_h, image_w, cfg.score_threshold, cfg.pre_nms_top_k);
    let mut kept = nms(&cands, cfg.nms_threshold);
    kept.truncate(cfg.max_detections);
    kept
}
