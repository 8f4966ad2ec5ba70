//! Procedural detection scenes.
//!
//! Every object is a filled shape inside its box plus a coloured ring just
//! outside it. The shape and fill colour name the class, and so does the ring.
//! A configurable fraction of objects instead gets one neutral foreground
//! shared by all classes, so only the ring (context outside the box) tells
//! the class apart.
//!
//! Placement decides where boxes may sit relative to the feature grid; under
//! the toy-scaled size ranges a uniformly placed box often covers no location
//! whose distances fall in its level's range and so never becomes a positive.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{assign_targets, regression_ranges, GroundTruthBox, PyramidGeometry, Sample};
use crate::error::{Error, Result};
use crate::pyramid::{stride_of, INPUT_ALIGNMENT, LEVELS};
use crate::tensor::{Shape, Tensor4};

const FOREGROUND: [[f64; 3]; 8] = [
    [0.9, -0.6, -0.6],
    [-0.6, 0.9, -0.6],
    [-0.6, -0.6, 0.9],
    [0.9, 0.9, -0.6],
    [0.9, -0.6, 0.9],
    [-0.6, 0.9, 0.9],
    [0.9, 0.3, -0.6],
    [0.3, -0.6, 0.9],
];

const RING: [[f64; 3]; 8] = [
    [-0.9, 0.6, 0.6],
    [0.6, -0.9, 0.6],
    [0.6, 0.6, -0.9],
    [-0.9, -0.9, 0.6],
    [-0.9, 0.6, -0.9],
    [0.6, -0.9, -0.9],
    [-0.9, -0.3, 0.6],
    [-0.3, 0.6, -0.9],
];

const NEUTRAL: [f64; 3] = [0.8, 0.8, 0.8];

/// Most classes the palettes can tell apart.
pub const MAX_CLASSES: usize = FOREGROUND.len();

const PLACEMENT_RETRIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub fn for_class(class: usize) -> Self {
        [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle][class % 3]
    }

    /// Whether pixel center `(px, py)` falls inside the shape inscribed in `b`.
    fn contains(self, b: [f64; 4], px: f64, py: f64) -> bool {
        let [x1, y1, x2, y2] = b;
        if px < x1 || px >= x2 || py < y1 || py >= y2 {
            return false;
        }
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
                let (rx, ry) = ((x2 - x1) / 2.0, (y2 - y1) / 2.0);
                ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0
            }
            ShapeKind::Triangle => {
                // Apex at the top middle, base along the bottom edge.
                let t = (py - y1) / (y2 - y1);
                let half = t * (x2 - x1) / 2.0;
                let cx = (x1 + x2) / 2.0;
                (px - cx).abs() <= half
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub num_classes: usize,
    /// Share of objects whose foreground is the neutral shape.
    pub context_fraction: f64,
    pub max_objects: usize,
    /// Object side range in pixels, drawn log-uniformly.
    pub min_size: f64,
    pub max_size: f64,
    pub placement: Placement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Any whole-pixel position on the canvas.
    Uniform,
    /// Uniform, redrawn until the box owns at least one positive location.
    Assignable,
    /// Centered on a location of the level the box size is assigned to.
    Grid,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 128,
            train_images: 500,
            val_images: 100,
            num_classes: 4,
            context_fraction: 0.3,
            max_objects: 3,
            min_size: 12.0,
            max_size: 80.0,
            placement: Placement::Grid,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(INPUT_ALIGNMENT) {
            return Err(Error::Config(format!("image_size must be a positive multiple of {INPUT_ALIGNMENT}")));
        }
        if self.train_images == 0 || self.val_images == 0 || self.max_objects == 0 {
            return Err(Error::Config("image counts and max_objects must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!("num_classes must lie in 1..={MAX_CLASSES}")));
        }
        if !(0.0..=1.0).contains(&self.context_fraction) {
            return Err(Error::Config("context_fraction must lie in [0, 1]".into()));
        }
        if !(self.min_size >= 4.0 && self.max_size >= self.min_size && self.max_size <= 0.75 * self.image_size as f64) {
            return Err(Error::Config("object sizes need 4 <= min_size <= max_size <= 0.75 * image_size".into()));
        }
        Ok(())
    }

    fn ring_width(side: f64) -> f64 {
        (0.2 * side).clamp(3.0, 8.0).round()
    }

    /// Stride of the level whose range holds the center distance of a `w × h` box.
    fn assigned_stride(&self, w: f64, h: f64) -> usize {
        let m = w.max(h) / 2.0;
        let ranges = regression_ranges(self.image_size);
        let i = ranges.iter().position(|&(lo, hi)| m > lo && m <= hi).unwrap_or(LEVELS.len() - 1);
        stride_of(LEVELS[i])
    }

    /// Top-left corner for a `w × h` box under the placement rule; `None`
    /// asks the caller to redraw.
    fn corner(&self, w: f64, h: f64, rng: &mut impl Rng) -> Option<(f64, f64)> {
        let size = self.image_size as f64;
        if self.placement != Placement::Grid {
            let x = rng.random_range(0..=(size - w) as usize) as f64;
            let y = rng.random_range(0..=(size - h) as usize) as f64;
            let owns_positive = || {
                let g = PyramidGeometry::for_image(self.image_size, self.image_size, 1);
                assign_targets(&[GroundTruthBox::new([x, y, x + w, y + h], 0)], &g).is_ok_and(|t| t.num_positives() > 0)
            };
            return (self.placement == Placement::Uniform || owns_positive()).then_some((x, y));
        }
        let s = self.assigned_stride(w, h) as f64;
        let pick = |extent: f64, rng: &mut dyn rand::RngCore| {
            // Centers s·i + s/2 that keep the box on the canvas.
            let lo = ((extent / 2.0 - s / 2.0) / s).ceil().max(0.0) as usize;
            let hi = ((size - extent / 2.0 - s / 2.0) / s).floor();
            (hi >= lo as f64).then(|| rng.random_range(lo..=hi as usize) as f64 * s + s / 2.0 - extent / 2.0)
        };
        Some((pick(w, rng)?, pick(h, rng)?))
    }
}

/// One drawn object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub gt: GroundTruthBox,
    pub shape: ShapeKind,
    /// Foreground is the neutral shape; only the ring names the class.
    pub context_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor4,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn sample(&self) -> Sample {
        Sample { image: self.image.clone(), boxes: self.objects.iter().map(|o| o.gt).collect() }
    }
}

fn background(size: usize, rng: &mut impl Rng) -> Tensor4 {
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.02..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.15),
                rng.random_range(0..3),
            )
        })
        .collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let mut img = Tensor4::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let mut v = base[c];
        for &(freq, dir, phase, amp, ch) in &waves {
            if ch == c {
                v += amp * (freq * (x as f64 * dir.cos() + y as f64 * dir.sin()) + phase).sin();
            }
        }
        v
    });
    for v in img.data_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    img
}

fn paint(img: &mut Tensor4, region: [f64; 4], colour: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
    let s = img.shape();
    let y0 = region[1].floor().max(0.0) as usize;
    let y1 = (region[3].ceil() as usize).min(s.h);
    let x0 = region[0].floor().max(0.0) as usize;
    let x1 = (region[2].ceil() as usize).min(s.w);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if inside(px, py) {
                for (c, &v) in colour.iter().enumerate() {
                    let i = img.index(0, c, y, x);
                    img.data_mut()[i] = v;
                }
            }
        }
    }
}

fn expanded(b: [f64; 4], r: f64) -> [f64; 4] {
    [b[0] - r, b[1] - r, b[2] + r, b[3] + r]
}

fn overlaps(a: [f64; 4], b: [f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// Draws scenes one after another; class labels rotate across the whole
/// sequence so every class appears equally often (up to one object).
pub struct SceneGenerator {
    cfg: DataConfig,
    rng: ChaCha8Rng,
    next_class: usize,
    skipped: usize,
}

impl SceneGenerator {
    pub fn new(cfg: &DataConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(SceneGenerator { cfg: cfg.clone(), rng: ChaCha8Rng::seed_from_u64(seed), next_class: 0, skipped: 0 })
    }

    /// Objects dropped because no free spot was found.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn scene(&mut self) -> Scene {
        let size = self.cfg.image_size;
        let rng = &mut self.rng;
        let mut image = background(size, rng);
        let count = rng.random_range(1..=self.cfg.max_objects);
        let mut placed: Vec<(SceneObject, [f64; 4])> = Vec::new();
        let (lo, hi) = (self.cfg.min_size.ln(), self.cfg.max_size.ln());
        for _ in 0..count {
            let mut spot = None;
            for _ in 0..PLACEMENT_RETRIES {
                let side = rng.random_range(lo..=hi).exp();
                let aspect: f64 = rng.random_range(0.75..1.33);
                // Even sides keep grid-centered corners on whole pixels.
                let w = (2.0 * (side * aspect.sqrt() / 2.0).round()).clamp(4.0, size as f64);
                let h = (2.0 * (side / aspect.sqrt() / 2.0).round()).clamp(4.0, size as f64);
                let Some((x, y)) = self.cfg.corner(w, h, rng) else { continue };
                let b = [x, y, x + w, y + h];
                let outer = expanded(b, DataConfig::ring_width(w.min(h)));
                if placed.iter().all(|(_, o)| !overlaps(*o, outer)) {
                    spot = Some((b, outer));
                    break;
                }
            }
            let Some((bbox, outer)) = spot else {
                self.skipped += 1;
                log::debug!("no free spot for an object after {PLACEMENT_RETRIES} tries; skipped");
                continue;
            };
            let class = self.next_class;
            self.next_class = (self.next_class + 1) % self.cfg.num_classes;
            let context_only = rng.random_bool(self.cfg.context_fraction);
            let shape = if context_only { ShapeKind::Ellipse } else { ShapeKind::for_class(class) };
            placed.push((SceneObject { gt: GroundTruthBox::new(bbox, class), shape, context_only }, outer));
        }
        for (obj, outer) in &placed {
            let b = obj.gt.bbox;
            paint(&mut image, *outer, RING[obj.gt.class], |px, py| !ShapeKind::Rectangle.contains(b, px, py));
            // The box interior keeps the background except for the shape.
            let fill = if obj.context_only { NEUTRAL } else { FOREGROUND[obj.gt.class] };
            paint(&mut image, b, fill, |px, py| obj.shape.contains(b, px, py));
        }
        Scene { image, objects: placed.into_iter().map(|(o, _)| o).collect() }
    }
}

/// `count` scenes from `seed`.
pub fn generate_scenes(cfg: &DataConfig, seed: u64, count: usize) -> Result<Vec<Scene>> {
    let mut g = SceneGenerator::new(cfg, seed)?;
    Ok((0..count).map(|_| g.scene()).collect())
}

/// Train and validation samples; the validation split continues the same
/// generator so the two never share a scene.
pub fn generate_splits(cfg: &DataConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut g = SceneGenerator::new(cfg, seed)?;
    let train = (0..cfg.train_images).map(|_| g.scene().sample()).collect();
    let val = (0..cfg.val_images).map(|_| g.scene().sample()).collect();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig { train_images: 40, val_images: 10, ..DataConfig::default() }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_scenes(&small(), 7, 5).unwrap(), generate_scenes(&small(), 7, 5).unwrap());
        assert_ne!(generate_scenes(&small(), 7, 1).unwrap(), generate_scenes(&small(), 8, 1).unwrap());
    }

    #[test]
    fn boxes_inside_canvas_and_non_empty() {
        for s in generate_scenes(&small(), 1, 50).unwrap() {
            assert!(!s.objects.is_empty());
            for o in &s.objects {
                o.gt.validate(4).unwrap();
                assert!(o.gt.bbox.iter().all(|&v| (0.0..=128.0).contains(&v)));
            }
        }
    }

    #[test]
    fn classes_are_balanced() {
        let cfg = DataConfig { train_images: 500, ..DataConfig::default() };
        let scenes = generate_scenes(&cfg, 3, 500).unwrap();
        let mut counts = [0usize; 4];
        for o in scenes.iter().flat_map(|s| &s.objects) {
            counts[o.gt.class] += 1;
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let expected = total as f64 / 4.0;
            assert!((0.9 * expected..=1.1 * expected).contains(&(c as f64)), "{counts:?}");
        }
    }

    #[test]
    fn context_fraction_controls_neutral_objects() {
        let cfg = DataConfig { context_fraction: 0.0, ..small() };
        let scenes = generate_scenes(&cfg, 4, 100).unwrap();
        assert!(scenes.iter().flat_map(|s| &s.objects).all(|o| !o.context_only && o.shape == ShapeKind::for_class(o.gt.class)));
        let cfg = DataConfig { context_fraction: 0.3, ..small() };
        let objs: Vec<_> = generate_scenes(&cfg, 4, 300).unwrap().into_iter().flat_map(|s| s.objects).collect();
        let frac = objs.iter().filter(|o| o.context_only).count() as f64 / objs.len() as f64;
        assert!((0.22..0.38).contains(&frac), "{frac}");
    }

    #[test]
    fn sizes_reach_several_levels() {
        let objs: Vec<_> = generate_scenes(&small(), 5, 200).unwrap().into_iter().flat_map(|s| s.objects).collect();
        let sides: Vec<f64> = objs.iter().map(|o| (o.gt.bbox[2] - o.gt.bbox[0]).max(o.gt.bbox[3] - o.gt.bbox[1])).collect();
        assert!(sides.iter().any(|&s| s <= 16.0));
        assert!(sides.iter().any(|&s| (24.0..=48.0).contains(&s)));
        assert!(sides.iter().any(|&s| s >= 64.0));
    }

    #[test]
    fn placement_controls_positive_coverage() {
        let g = PyramidGeometry::for_image(128, 128, 4);
        for (placement, want_all) in [(Placement::Assignable, true), (Placement::Grid, true), (Placement::Uniform, false)] {
            let cfg = DataConfig { placement, ..small() };
            let mut all = true;
            for s in generate_scenes(&cfg, 6, 100).unwrap() {
                let smp = s.sample();
                let t = assign_targets(&smp.boxes, &g).unwrap();
                for gi in 0..smp.boxes.len() {
                    all &= t.levels.iter().any(|l| l.gt_index.contains(&Some(gi)));
                }
            }
            assert_eq!(all, want_all, "{placement:?}");
        }
    }

    #[test]
    fn shape_masks() {
        let b = [0.0, 0.0, 10.0, 10.0];
        assert!(ShapeKind::Ellipse.contains(b, 5.0, 5.0));
        assert!(!ShapeKind::Ellipse.contains(b, 0.5, 0.5));
        assert!(ShapeKind::Triangle.contains(b, 5.0, 9.5));
        assert!(!ShapeKind::Triangle.contains(b, 0.5, 0.5));
        assert!(ShapeKind::Rectangle.contains(b, 0.5, 0.5));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(DataConfig { image_size: 100, ..DataConfig::default() }.validate().is_err());
        assert!(DataConfig { num_classes: 9, ..DataConfig::default() }.validate().is_err());
        assert!(DataConfig { max_size: 120.0, ..DataConfig::default() }.validate().is_err());
    }
}
