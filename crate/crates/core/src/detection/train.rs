use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{
    assign_targets, evaluate_ap, postprocess, total_loss, ApMetrics, AssignmentTargets, DecodeConfig, Detection,
    GroundTruthBox, LossConfig, PyramidGeometry,
};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, H, W)`.
    pub image: Tensor4,
    pub boxes: Vec<GroundTruthBox>,
}

impl Sample {
    /// Mirror image about the vertical axis.
    pub fn flipped(&self) -> Sample {
        let s = self.image.shape();
        let image = Tensor4::from_fn(s, |n, c, y, x| self.image.at(n, c, y, s.w - 1 - x));
        let w = s.w as f64;
        let boxes = self
            .boxes
            .iter()
            .map(|b| GroundTruthBox::new([w - b.bbox[2], b.bbox[1], w - b.bbox[0], b.bbox[3]], b.class))
            .collect();
        Sample { image, boxes }
    }
}

/// Samples with their assignment targets (plain and mirrored) computed once
/// up front.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    samples: Vec<Sample>,
    targets: Vec<AssignmentTargets>,
    flipped_targets: Vec<AssignmentTargets>,
    image_h: usize,
    image_w: usize,
}

impl TrainingSet {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let s = first.image.shape();
        let (image_h, image_w) = (s.h, s.w);
        let geometry = PyramidGeometry::for_image(image_h, image_w, num_classes);
        let mut targets = Vec::with_capacity(samples.len());
        let mut flipped_targets = Vec::with_capacity(samples.len());
        for (i, smp) in samples.iter().enumerate() {
            let sh = smp.image.shape();
            if sh.n != 1 || sh.c != 3 || sh.h != image_h || sh.w != image_w {
                return Err(Error::shape("dataset", format!("sample {i} has shape {sh}, expected (1, 3, {image_h}, {image_w})")));
            }
            targets.push(assign_targets(&smp.boxes, &geometry)?);
            flipped_targets.push(assign_targets(&smp.flipped().boxes, &geometry)?);
        }
        Ok(TrainingSet { samples, targets, flipped_targets, image_h, image_w })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }

    /// `(sample index, mirrored)` pairs to a batch tensor and its targets.
    fn batch(&self, items: &[(usize, bool)]) -> Result<(Tensor4, Arc<[AssignmentTargets]>)> {
        let mut images = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(items.len());
        for &(i, flip) in items {
            if flip {
                images.push(self.samples[i].flipped().image);
                targets.push(self.flipped_targets[i].clone());
            } else {
                images.push(self.samples[i].image.clone());
                targets.push(self.targets[i].clone());
            }
        }
        Ok((Tensor4::stack_batch(&images)?, targets.into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps after which the learning rate drops tenfold.
    pub milestones: Vec<usize>,
    /// Linear ramp from `warmup_factor * lr` over this many steps.
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Mirror each training sample with probability 1/2.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_steps(2000)
    }
}

impl TrainConfig {
    /// Default schedule for a budget: decay at 2/3 and 8/9 of it.
    pub fn with_steps(steps: usize) -> Self {
        TrainConfig {
            steps,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![steps * 2 / 3, steps * 8 / 9],
            warmup_steps: (steps / 20).min(500),
            warmup_factor: 1.0 / 3.0,
            grad_clip: 35.0,
            hflip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("need lr >= 0, momentum in [0, 1), weight_decay >= 0".into()));
        }
        if self.milestones.iter().any(|&m| m == 0 || m > self.steps) || !self.milestones.is_sorted() {
            return Err(Error::Config(format!("milestones {:?} must be ascending within 1..={}", self.milestones, self.steps)));
        }
        if !(0.0..=1.0).contains(&self.warmup_factor) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("warmup_factor must lie in [0, 1] and grad_clip be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate for 0-based `step`.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let decays = cfg.milestones.iter().filter(|&&m| step >= m).count() as i32;
    let mut lr = cfg.lr * 0.1f64.powi(decays);
    if step < cfg.warmup_steps {
        let a = step as f64 / cfg.warmup_steps as f64;
        lr *= cfg.warmup_factor * (1.0 - a) + a;
    }
    lr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_loc: f64,
    pub loss_ctr: f64,
    pub total: f64,
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor4>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor4>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor4::zeros(g.shape()));
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + gv + weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

fn losses(
    detector: &Detector,
    params: &ParamStore,
    images: Tensor4,
    targets: &Arc<[AssignmentTargets]>,
    loss: &LossConfig,
    with_grads: bool,
) -> Result<([f64; 4], Option<BTreeMap<String, Tensor4>>)> {
    let mut tape = Tape::new();
    let p = params.bind_with(&mut tape, |_| with_grads);
    let x = tape.constant(images);
    let out = detector.forward(&mut tape, &p, x)?;
    let terms = total_loss(&mut tape, &out, targets, loss)?;
    let vals = [terms.cls, terms.iou, terms.ctr, terms.total].map(|v| tape.value(v).data()[0]);
    if !with_grads {
        return Ok((vals, None));
    }
    if !vals[3].is_finite() {
        return Ok((vals, None));
    }
    tape.backward(terms.total)?;
    Ok((vals, Some(p.gradients(&tape))))
}

/// `[cls, iou, centerness, total]` losses on the given samples, no update.
pub fn loss_for_batch(detector: &Detector, params: &ParamStore, set: &TrainingSet, idx: &[usize], loss: &LossConfig) -> Result<[f64; 4]> {
    let items: Vec<(usize, bool)> = idx.iter().map(|&i| (i, false)).collect();
    let (images, targets) = set.batch(&items)?;
    Ok(losses(detector, params, images, &targets, loss, false)?.0)
}

/// One forward/backward/update on `(sample, mirrored)` pairs; `step` is 0-based.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    detector: &Detector,
    params: &mut ParamStore,
    sgd: &mut Sgd,
    set: &TrainingSet,
    items: &[(usize, bool)],
    step: usize,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<LogRow> {
    let (images, targets) = set.batch(items)?;
    let (v, grads) = losses(detector, params, images, &targets, loss, true)?;
    let lr = learning_rate(cfg, step);
    let row = LogRow { step: step + 1, lr, loss_cls: v[0], loss_loc: v[1], loss_ctr: v[2], total: v[3] };
    let Some(mut grads) = grads else {
        return Err(Error::Divergence { step: step + 1, detail: format!("loss is {} (cls {}, iou {}, ctr {})", v[3], v[0], v[1], v[2]) });
    };
    let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    log::trace!("step {} gradient norm {norm:.3}", step + 1);
    if !norm.is_finite() {
        return Err(Error::Divergence { step: step + 1, detail: format!("gradient norm is {norm}") });
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let f = cfg.grad_clip / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= f);
        }
    }
    sgd.step(params, &grads, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(row)
}

/// Runs the full schedule. Batches come from seeded per-epoch shuffles;
/// `on_step` sees every row as soon as it exists, so a divergence still
/// leaves the earlier rows with the caller.
pub fn train(
    detector: &Detector,
    params: &mut ParamStore,
    set: &TrainingSet,
    cfg: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    loss.validate()?;
    if set.len() < cfg.batch_size {
        return Err(Error::Config(format!("batch size {} exceeds dataset size {}", cfg.batch_size, set.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut sgd = Sgd::new();
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order = (0..set.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let items: Vec<(usize, bool)> =
            order[cursor..cursor + cfg.batch_size].iter().map(|&i| (i, cfg.hflip && rng.random_bool(0.5))).collect();
        cursor += cfg.batch_size;
        let row = train_step(detector, params, &mut sgd, set, &items, step, cfg, loss)?;
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Detections for every sample, in order.
pub fn detect_all(detector: &Detector, params: &ParamStore, samples: &[Sample], decode: &DecodeConfig, batch: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<Tensor4> = chunk.iter().map(|s| s.image.clone()).collect();
        let x = Tensor4::stack_batch(&images)?;
        let s = x.shape();
        let preds = detector.predict(params, &x)?;
        for i in 0..chunk.len() {
            out.push(postprocess(&preds, i, s.h, s.w, decode));
        }
    }
    Ok(out)
}

pub fn evaluate(detector: &Detector, params: &ParamStore, samples: &[Sample], decode: &DecodeConfig) -> Result<ApMetrics> {
    let dets = detect_all(detector, params, samples, decode, 8)?;
    let gts: Vec<Vec<GroundTruthBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    evaluate_ap(&dets, &gts, detector.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{HeadVariant, TowerSpec};
    use crate::model::ModelConfig;
    use crate::pyramid::BackboneConfig;

    fn tiny_detector() -> Detector {
        let head = HeadVariant {
            cls_tower: TowerSpec { depth: 1, width: 16 },
            loc_tower: TowerSpec { depth: 1, width: 8 },
            ..HeadVariant::tscode(2, 8)
        };
        Detector::new(&ModelConfig {
            backbone: BackboneConfig { widths: [8, 8, 16, 16], fpn_width: 8, blocks_per_stage: 1 },
            head,
        })
        .unwrap()
    }

    fn tiny_set(n: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let image = Tensor4::randn(crate::Shape::new(1, 3, 128, 128), 1.0, &mut rng);
                let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
                let w = rng.random_range(10.0..60.0);
                Sample { image, boxes: vec![GroundTruthBox::new([x, y, x + w, y + w], rng.random_range(0..2))] }
            })
            .collect();
        TrainingSet::new(samples, 2).unwrap()
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let cfg = TrainConfig { warmup_steps: 10, ..TrainConfig::with_steps(90) };
        assert_eq!(cfg.milestones, vec![60, 80]);
        assert!((learning_rate(&cfg, 0) - 0.01 / 3.0).abs() < 1e-15);
        assert_eq!(learning_rate(&cfg, 10), 0.01);
        assert!((learning_rate(&cfg, 60) - 0.001).abs() < 1e-15);
        assert!((learning_rate(&cfg, 89) - 0.0001).abs() < 1e-15);
        assert!(TrainConfig { milestones: vec![100], ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn flip_mirrors_boxes_and_pixels() {
        let set = tiny_set(1, 11);
        let s = &set.samples()[0];
        let f = s.flipped();
        let back = f.flipped();
        assert_eq!(back.image, s.image);
        for (x, y) in back.boxes.iter().zip(&s.boxes) {
            assert_eq!(x.class, y.class);
            assert!(x.bbox.iter().zip(&y.bbox).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert_eq!(f.image.at(0, 1, 5, 0), s.image.at(0, 1, 5, 127));
        let (a, b) = (s.boxes[0].bbox, f.boxes[0].bbox);
        assert_eq!([b[0], b[2]], [128.0 - a[2], 128.0 - a[0]]);
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let det = tiny_detector();
        let mut params = det.init_params(1);
        let before = params.clone();
        let set = tiny_set(4, 2);
        let cfg = TrainConfig { lr: 0.0, batch_size: 2, ..TrainConfig::with_steps(2) };
        train(&det, &mut params, &set, &cfg, &LossConfig::default(), 3, |_| {}).unwrap();
        for (name, t) in before.iter() {
            assert_eq!(params.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn small_step_reduces_sample_loss() {
        let det = tiny_detector();
        let mut params = det.init_params(4);
        let set = tiny_set(1, 5);
        let loss = LossConfig::default();
        let before = loss_for_batch(&det, &params, &set, &[0], &loss).unwrap()[3];
        let cfg = TrainConfig { lr: 1e-3, momentum: 0.0, weight_decay: 0.0, warmup_steps: 0, grad_clip: 0.0, ..TrainConfig::with_steps(1) };
        train_step(&det, &mut params, &mut Sgd::new(), &set, &[(0, false)], 0, &cfg, &loss).unwrap();
        let after = loss_for_batch(&det, &params, &set, &[0], &loss).unwrap()[3];
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn training_is_deterministic() {
        let det = tiny_detector();
        let set = tiny_set(4, 6);
        let cfg = TrainConfig { batch_size: 2, ..TrainConfig::with_steps(3) };
        let run = || {
            let mut params = det.init_params(7);
            train(&det, &mut params, &set, &cfg, &LossConfig::default(), 8, |_| {}).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let det = tiny_detector();
        let mut params = det.init_params(9);
        let w = params.get("head.reg_out.bias").unwrap().shape();
        params.insert("head.reg_out.bias", Tensor4::full(w, 1e6));
        let set = tiny_set(2, 10);
        let cfg = TrainConfig { batch_size: 2, ..TrainConfig::with_steps(2) };
        let err = train(&det, &mut params, &set, &cfg, &LossConfig::default(), 1, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
    }
}
