use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{stride_of, LEVELS};

/// Image side the regression ranges below are stated for.
pub const REFERENCE_SIZE: f64 = 1024.0;

/// Upper bounds of the per-level max-distance ranges at `REFERENCE_SIZE`.
const RANGE_BOUNDS: [f64; 4] = [64.0, 128.0, 256.0, 512.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    /// `(x1, y1, x2, y2)` in pixels.
    pub bbox: [f64; 4],
    pub class: usize,
}

impl GroundTruthBox {
    pub fn new(bbox: [f64; 4], class: usize) -> Self {
        GroundTruthBox { bbox, class }
    }

    pub fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) || x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidArgument(format!("degenerate box {:?}", self.bbox)));
        }
        if self.class >= num_classes {
            return Err(Error::InvalidArgument(format!("class {} out of range for {num_classes} classes", self.class)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGeometry {
    pub level: u32,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Exclusive lower and inclusive upper bound on the max distance, pixels.
    pub range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidGeometry {
    pub image_h: usize,
    pub image_w: usize,
    pub num_classes: usize,
    pub levels: Vec<LevelGeometry>,
}

/// Max-distance ranges for `P3..P7`, scaled from the reference size by
/// `image_dim / REFERENCE_SIZE`.
pub fn regression_ranges(image_dim: usize) -> [(f64, f64); 5] {
    let f = image_dim as f64 / REFERENCE_SIZE;
    let mut out = [(0.0, f64::INFINITY); 5];
    let mut lo = 0.0;
    for (i, hi) in RANGE_BOUNDS.iter().enumerate() {
        out[i] = (lo, hi * f);
        lo = hi * f;
    }
    out[4] = (lo, f64::INFINITY);
    out
}

impl PyramidGeometry {
    /// Every level `P3..P7` of an `h × w` image; ranges scale with the longer side.
    pub fn for_image(image_h: usize, image_w: usize, num_classes: usize) -> Self {
        let ranges = regression_ranges(image_h.max(image_w));
        let levels = LEVELS
            .iter()
            .zip(ranges)
            .map(|(&level, range)| {
                let s = stride_of(level);
                LevelGeometry { level, stride: s, h: image_h.div_ceil(s), w: image_w.div_ceil(s), range }
            })
            .collect();
        PyramidGeometry { image_h, image_w, num_classes, levels }
    }

    pub fn num_locations(&self) -> usize {
        self.levels.iter().map(|l| l.h * l.w).sum()
    }
}

/// Image coordinates of feature location `(x, y)` at `stride`.
pub fn location_center(x: usize, y: usize, stride: usize) -> (f64, f64) {
    let half = (stride / 2) as f64;
    ((x * stride) as f64 + half, (y * stride) as f64 + half)
}

/// Centerness of distances `(l, t, r, b)`.
pub fn centerness(d: [f64; 4]) -> f64 {
    let [l, t, r, b] = d;
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub level: u32,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Target class per location (row-major), `None` for negatives.
    pub labels: Vec<Option<usize>>,
    /// Distances in stride units; all zero for negatives.
    pub distances: Vec<[f64; 4]>,
    /// Zero for negatives.
    pub centerness: Vec<f64>,
    /// Index of the assigned ground truth.
    pub gt_index: Vec<Option<usize>>,
}

impl LevelTargets {
    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentTargets {
    pub num_classes: usize,
    pub levels: Vec<LevelTargets>,
}

impl AssignmentTargets {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_positives).sum()
    }

    pub fn centerness_sum(&self) -> f64 {
        self.levels.iter().flat_map(|l| &l.centerness).sum()
    }
}

/// Assigns each location to at most one ground truth.
///
/// A location is positive for a box when its center lies strictly inside the
/// box and its largest distance to a side falls within the level range; among
/// several candidates the smallest box wins (lowest index on equal areas).
pub fn assign_targets(gts: &[GroundTruthBox], geometry: &PyramidGeometry) -> Result<AssignmentTargets> {
    for g in gts {
        g.validate(geometry.num_classes)?;
    }
    let levels = geometry
        .levels
        .iter()
        .map(|lg| {
            let n = lg.h * lg.w;
            let mut t = LevelTargets {
                level: lg.level,
                stride: lg.stride,
                h: lg.h,
                w: lg.w,
                labels: vec![None; n],
                distances: vec![[0.0; 4]; n],
                centerness: vec![0.0; n],
                gt_index: vec![None; n],
            };
            let s = lg.stride as f64;
            for y in 0..lg.h {
                for x in 0..lg.w {
                    let (px, py) = location_center(x, y, lg.stride);
                    let mut best: Option<(f64, usize, [f64; 4])> = None;
                    for (gi, g) in gts.iter().enumerate() {
                        let [x1, y1, x2, y2] = g.bbox;
                        let d = [px - x1, py - y1, x2 - px, y2 - py];
                        if d.iter().any(|&v| v <= 0.0) {
                            continue;
                        }
                        let m = d.iter().cloned().fold(f64::MIN, f64::max);
                        if m <= lg.range.0 || m > lg.range.1 {
                            continue;
                        }
                        if best.is_none_or(|(a, _, _)| g.area() < a) {
                            best = Some((g.area(), gi, d));
                        }
                    }
                    if let Some((_, gi, d)) = best {
                        let i = y * lg.w + x;
                        t.labels[i] = Some(gts[gi].class);
                        t.distances[i] = d.map(|v| v / s);
                        t.centerness[i] = centerness(d);
                        t.gt_index[i] = Some(gi);
                    }
                }
            }
            t
        })
        .collect();
    Ok(AssignmentTargets { num_classes: geometry.num_classes, levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> PyramidGeometry {
        PyramidGeometry::for_image(128, 128, 4)
    }

    #[test]
    fn ranges_scale_with_image() {
        let r = regression_ranges(128);
        assert_eq!(r[0], (0.0, 8.0));
        assert_eq!(r[3], (32.0, 64.0));
        assert_eq!(r[4].0, 64.0);
        assert!(r[4].1.is_infinite());
        assert_eq!(regression_ranges(1024)[1], (64.0, 128.0));
    }

    #[test]
    fn empty_gts_give_all_negative() {
        let t = assign_targets(&[], &geom()).unwrap();
        assert_eq!(t.num_positives(), 0);
        assert_eq!(t.levels.len(), 5);
        assert!(t.levels.iter().all(|l| l.distances.iter().all(|d| *d == [0.0; 4])));
    }

    #[test]
    fn positives_only_where_range_holds() {
        let g = geom();
        // (0,0,96,96): the P6 location at (32,32) has max distance 64, in (32,64].
        let t = assign_targets(&[GroundTruthBox::new([0.0, 0.0, 96.0, 96.0], 1)], &g).unwrap();
        for lt in &t.levels {
            let expected = usize::from(lt.level == 6);
            assert_eq!(lt.num_positives(), expected, "P{}", lt.level);
        }
        // A box over the whole image: every positive obeys its level range.
        let whole = GroundTruthBox::new([0.0, 0.0, 128.0, 128.0], 0);
        let t = assign_targets(&[whole], &g).unwrap();
        for (lt, lg) in t.levels.iter().zip(&g.levels) {
            for (i, lab) in lt.labels.iter().enumerate() {
                let (px, py) = location_center(i % lt.w, i / lt.w, lt.stride);
                let m = [px, py, 128.0 - px, 128.0 - py].into_iter().fold(0.0, f64::max);
                assert_eq!(lab.is_some(), m > lg.range.0 && m <= lg.range.1);
            }
        }
    }

    #[test]
    fn box_center_has_unit_centerness() {
        // P3 location (2,2) sits at pixel (20,20).
        let t = assign_targets(&[GroundTruthBox::new([14.0, 14.0, 26.0, 26.0], 2)], &geom()).unwrap();
        let i = 2 * 16 + 2;
        assert_eq!(t.levels[0].labels[i], Some(2));
        assert_eq!(t.levels[0].centerness[i], 1.0);
        assert_eq!(t.levels[0].distances[i], [0.75; 4]);
    }

    #[test]
    fn nested_boxes_go_to_smaller() {
        let g = geom();
        let big = GroundTruthBox::new([12.0, 12.0, 27.0, 27.0], 0);
        let small = GroundTruthBox::new([14.0, 14.0, 26.0, 26.0], 3);
        let gts = [big, small];
        let t = assign_targets(&gts, &g).unwrap();
        // Brute-force oracle: enumerate every location, every box.
        let mut shared = 0;
        for (lt, lg) in t.levels.iter().zip(&g.levels) {
            for y in 0..lg.h {
                for x in 0..lg.w {
                    let (px, py) = location_center(x, y, lg.stride);
                    let ok: Vec<usize> = (0..gts.len())
                        .filter(|&k| {
                            let [x1, y1, x2, y2] = gts[k].bbox;
                            let d = [px - x1, py - y1, x2 - px, y2 - py];
                            let m = d.iter().cloned().fold(f64::MIN, f64::max);
                            d.iter().all(|&v| v > 0.0) && m > lg.range.0 && m <= lg.range.1
                        })
                        .collect();
                    let want = ok.iter().copied().min_by(|&a, &b| gts[a].area().total_cmp(&gts[b].area()));
                    assert_eq!(lt.gt_index[y * lg.w + x], want);
                    if ok.len() == 2 {
                        shared += 1;
                        assert_eq!(want, Some(1));
                    }
                }
            }
        }
        assert!(shared > 0, "example must contain a location shared by both boxes");
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(assign_targets(&[GroundTruthBox::new([5.0, 0.0, 5.0, 3.0], 0)], &geom()).is_err());
        assert!(assign_targets(&[GroundTruthBox::new([0.0, 0.0, 5.0, 3.0], 4)], &geom()).is_err());
    }
}
