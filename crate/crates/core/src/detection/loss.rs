//! Classification, box and centerness losses as tape functions with analytic
//! gradients. Every function takes one input per pyramid level; the batch
//! axis indexes the target list.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::detection::AssignmentTargets;
use crate::error::{Error, Result};
use crate::heads::HeadOutputs;
use crate::tensor::{Function, Shape, Tape, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight of the localization terms.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.25, gamma: 2.0, lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.gamma >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "loss needs alpha in [0,1] and non-negative gamma and lambda, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub iou: Var,
    pub ctr: Var,
    /// `cls + lambda * (iou + ctr)`.
    pub total: Var,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(name: &'static str, inputs: &[&Tensor4], targets: &[AssignmentTargets], channels: usize) -> Result<()> {
    let first = targets.first().ok_or_else(|| Error::InvalidArgument(format!("{name}: empty target batch")))?;
    if inputs.len() != first.levels.len() {
        return Err(Error::shape(name, format!("{} level inputs for {} target levels", inputs.len(), first.levels.len())));
    }
    for (x, lt) in inputs.iter().zip(&first.levels) {
        let want = Shape::new(targets.len(), channels, lt.h, lt.w);
        if x.shape() != want {
            return Err(Error::shape(name, format!("P{} input {} but targets need {want}", lt.level, x.shape())));
        }
    }
    if targets.iter().any(|t| t.levels.iter().zip(&first.levels).any(|(a, b)| (a.h, a.w) != (b.h, b.w))) {
        return Err(Error::shape(name, "targets disagree on level geometry"));
    }
    Ok(())
}

struct Focal {
    targets: Arc<[AssignmentTargets]>,
    alpha: f64,
    gamma: f64,
}

impl Focal {
    fn norm(&self) -> f64 {
        self.targets.iter().map(AssignmentTargets::num_positives).sum::<usize>().max(1) as f64
    }

    /// Calls `f(level, flat index into that level's tensor, is_target)` for every element.
    fn each(&self, inputs: &[&Tensor4], mut f: impl FnMut(usize, usize, bool)) {
        for (k, x) in inputs.iter().enumerate() {
            let s = x.shape();
            for (n, t) in self.targets.iter().enumerate() {
                let labels = &t.levels[k].labels;
                for c in 0..s.c {
                    for (loc, lab) in labels.iter().enumerate() {
                        f(k, (n * s.c + c) * s.plane() + loc, *lab == Some(c));
                    }
                }
            }
        }
    }
}

impl Function for Focal {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn forward(&self, inputs: &[&Tensor4]) -> Result<Tensor4> {
        check_inputs("focal_loss", inputs, &self.targets, self.targets[0].num_classes)?;
        let (a, g) = (self.alpha, self.gamma);
        let mut total = 0.0;
        self.each(inputs, |k, i, pos| {
            let x = inputs[k].data()[i];
            let p = sigmoid(x);
            total += if pos { a * (1.0 - p).powf(g) * softplus(-x) } else { (1.0 - a) * p.powf(g) * softplus(x) };
        });
        Ok(Tensor4::scalar(total / self.norm()))
    }

    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad_output: &Tensor4) -> Vec<Option<Tensor4>> {
        let (a, g) = (self.alpha, self.gamma);
        let scale = grad_output.data()[0] / self.norm();
        let mut grads: Vec<Tensor4> = inputs.iter().map(|x| Tensor4::zeros(x.shape())).collect();
        self.each(inputs, |k, i, pos| {
            let x = inputs[k].data()[i];
            let p = sigmoid(x);
            let d = if pos {
                // log p = -softplus(-x)
                a * (1.0 - p).powf(g) * (-g * p * softplus(-x) - (1.0 - p))
            } else {
                (1.0 - a) * p.powf(g) * (p + g * (1.0 - p) * softplus(x))
            };
            grads[k].data_mut()[i] = d * scale;
        });
        grads.into_iter().map(Some).collect()
    }
}

/// IoU of two boxes given as distances from the same point.
fn iou_terms(p: [f64; 4], t: [f64; 4]) -> (f64, f64, f64, f64) {
    let wi = p[0].min(t[0]) + p[2].min(t[2]);
    let hi = p[1].min(t[1]) + p[3].min(t[3]);
    let inter = wi * hi;
    let union = (p[0] + p[2]) * (p[1] + p[3]) + (t[0] + t[2]) * (t[1] + t[3]) - inter;
    (inter, union, wi, hi)
}

struct IouLoss {
    targets: Arc<[AssignmentTargets]>,
}

impl IouLoss {
    /// Visits every positive: `(level, batch, location, target distances, weight)`.
    fn each(&self, mut f: impl FnMut(usize, usize, usize, [f64; 4], f64)) {
        for (n, t) in self.targets.iter().enumerate() {
            for (k, lt) in t.levels.iter().enumerate() {
                for (loc, lab) in lt.labels.iter().enumerate() {
                    if lab.is_some() {
                        f(k, n, loc, lt.distances[loc], lt.centerness[loc]);
                    }
                }
            }
        }
    }

    fn norm(&self) -> f64 {
        self.targets.iter().map(AssignmentTargets::centerness_sum).sum()
    }
}

fn pred_at(x: &Tensor4, n: usize, loc: usize) -> [f64; 4] {
    let plane = x.shape().plane();
    std::array::from_fn(|j| x.data()[(n * 4 + j) * plane + loc])
}

impl Function for IouLoss {
    fn name(&self) -> &'static str {
        "iou_loss"
    }

    fn forward(&self, inputs: &[&Tensor4]) -> Result<Tensor4> {
        check_inputs("iou_loss", inputs, &self.targets, 4)?;
        let norm = self.norm();
        if norm <= 0.0 {
            return Ok(Tensor4::scalar(0.0));
        }
        let mut total = 0.0;
        self.each(|k, n, loc, t, w| {
            let (i, u, _, _) = iou_terms(pred_at(inputs[k], n, loc), t);
            total += w * (u.ln() - i.ln());
        });
        Ok(Tensor4::scalar(total / norm))
    }

    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad_output: &Tensor4) -> Vec<Option<Tensor4>> {
        let mut grads: Vec<Tensor4> = inputs.iter().map(|x| Tensor4::zeros(x.shape())).collect();
        let norm = self.norm();
        if norm > 0.0 {
            let g = grad_output.data()[0] / norm;
            self.each(|k, n, loc, t, w| {
                let p = pred_at(inputs[k], n, loc);
                let (i, u, wi, hi) = iou_terms(p, t);
                let plane = inputs[k].shape().plane();
                for j in 0..4 {
                    // Horizontal sides scale with the box height and the
                    // intersection height, vertical sides with the widths.
                    let (area_side, inter_side) = if j % 2 == 0 { (p[1] + p[3], hi) } else { (p[0] + p[2], wi) };
                    let di = if p[j] < t[j] { inter_side } else { 0.0 };
                    let du = area_side - di;
                    grads[k].data_mut()[(n * 4 + j) * plane + loc] += g * w * (du / u - di / i);
                }
            });
        }
        grads.into_iter().map(Some).collect()
    }
}

struct CenternessLoss {
    targets: Arc<[AssignmentTargets]>,
}

impl CenternessLoss {
    fn norm(&self) -> usize {
        self.targets.iter().map(AssignmentTargets::num_positives).sum()
    }

    fn each(&self, inputs: &[&Tensor4], mut f: impl FnMut(usize, usize, f64)) {
        for (n, t) in self.targets.iter().enumerate() {
            for (k, lt) in t.levels.iter().enumerate() {
                let plane = inputs[k].shape().plane();
                for (loc, lab) in lt.labels.iter().enumerate() {
                    if lab.is_some() {
                        f(k, n * plane + loc, lt.centerness[loc]);
                    }
                }
            }
        }
    }
}

impl Function for CenternessLoss {
    fn name(&self) -> &'static str {
        "centerness_loss"
    }

    fn forward(&self, inputs: &[&Tensor4]) -> Result<Tensor4> {
        check_inputs("centerness_loss", inputs, &self.targets, 1)?;
        let npos = self.norm();
        if npos == 0 {
            return Ok(Tensor4::scalar(0.0));
        }
        let mut total = 0.0;
        self.each(inputs, |k, i, c| {
            let x = inputs[k].data()[i];
            total += softplus(x) - c * x;
        });
        Ok(Tensor4::scalar(total / npos as f64))
    }

    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad_output: &Tensor4) -> Vec<Option<Tensor4>> {
        let mut grads: Vec<Tensor4> = inputs.iter().map(|x| Tensor4::zeros(x.shape())).collect();
        let npos = self.norm();
        if npos > 0 {
            let g = grad_output.data()[0] / npos as f64;
            self.each(inputs, |k, i, c| {
                grads[k].data_mut()[i] = g * (sigmoid(inputs[k].data()[i]) - c);
            });
        }
        grads.into_iter().map(Some).collect()
    }
}

/// Sigmoid focal loss over every location and class, divided by the number
/// of positives (at least one).
pub fn focal_loss(tape: &mut Tape, cls: &[Var], targets: &Arc<[AssignmentTargets]>, alpha: f64, gamma: f64) -> Result<Var> {
    tape.custom(Box::new(Focal { targets: targets.clone(), alpha, gamma }), cls)
}

/// `-log IoU` over positives, weighted by the centerness target and divided by
/// its sum. Zero without positives.
pub fn iou_loss(tape: &mut Tape, reg: &[Var], targets: &Arc<[AssignmentTargets]>) -> Result<Var> {
    tape.custom(Box::new(IouLoss { targets: targets.clone() }), reg)
}

/// Mean binary cross-entropy of centerness logits over positives.
pub fn centerness_loss(tape: &mut Tape, ctr: &[Var], targets: &Arc<[AssignmentTargets]>) -> Result<Var> {
    tape.custom(Box::new(CenternessLoss { targets: targets.clone() }), ctr)
}

pub fn total_loss(
    tape: &mut Tape,
    outputs: &HeadOutputs,
    targets: &Arc<[AssignmentTargets]>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let cls = focal_loss(tape, &outputs.cls_vars(), targets, cfg.alpha, cfg.gamma)?;
    let iou = iou_loss(tape, &outputs.reg_vars(), targets)?;
    let ctr = centerness_loss(tape, &outputs.ctr_vars(), targets)?;
    let loc = tape.add(iou, ctr)?;
    let weighted = tape.scale(loc, cfg.lambda);
    let total = tape.add(cls, weighted)?;
    Ok(LossTerms { cls, iou, ctr, total })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::detection::{assign_targets, GroundTruthBox, PyramidGeometry};
    use crate::tensor::{grad_check, GradCheckConfig};

    fn targets(n: usize, seed: u64) -> Arc<[AssignmentTargets]> {
        let g = PyramidGeometry::for_image(128, 128, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let gts: Vec<_> = (0..3)
                    .map(|_| {
                        let (w, h) = (rng.random_range(8.0..90.0), rng.random_range(8.0..90.0));
                        let (x, y) = (rng.random_range(0.0..128.0 - w), rng.random_range(0.0..128.0 - h));
                        GroundTruthBox::new([x, y, x + w, y + h], rng.random_range(0..3))
                    })
                    .collect();
                assign_targets(&gts, &g).unwrap()
            })
            .collect()
    }

    fn level_tensors(t: &Arc<[AssignmentTargets]>, c: usize, seed: u64, f: impl Fn(f64) -> f64) -> Vec<Tensor4> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t[0].levels
            .iter()
            .map(|l| Tensor4::randn(Shape::new(t.len(), c, l.h, l.w), 1.5, &mut rng).map(&f))
            .collect()
    }

    #[test]
    fn focal_matches_naive_sum() {
        let t = targets(2, 1);
        let xs = level_tensors(&t, 3, 2, |v| v);
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let l = focal_loss(&mut tape, &vars, &t, 0.25, 2.0).unwrap();
        let mut naive = 0.0;
        let mut npos = 0;
        for (n, tn) in t.iter().enumerate() {
            for (k, lt) in tn.levels.iter().enumerate() {
                for y in 0..lt.h {
                    for x in 0..lt.w {
                        let lab = lt.labels[y * lt.w + x];
                        npos += usize::from(lab.is_some());
                        for c in 0..3 {
                            let p = 1.0 / (1.0 + (-xs[k].at(n, c, y, x)).exp());
                            naive += if lab == Some(c) {
                                -0.25 * (1.0 - p).powi(2) * p.ln()
                            } else {
                                -0.75 * p.powi(2) * (1.0 - p).ln()
                            };
                        }
                    }
                }
            }
        }
        let want = naive / npos.max(1) as f64;
        let got = tape.value(l).item().unwrap();
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn confident_positive_has_negligible_focal_term() {
        let g = PyramidGeometry::for_image(128, 128, 2);
        let t: Arc<[AssignmentTargets]> =
            vec![assign_targets(&[GroundTruthBox::new([14.0, 14.0, 26.0, 26.0], 1)], &g).unwrap()].into();
        let mut tape = Tape::new();
        let vars: Vec<Var> = t[0]
            .levels
            .iter()
            .map(|lt| {
                let x = Tensor4::from_fn(Shape::new(1, 2, lt.h, lt.w), |_, c, y, x| {
                    if lt.labels[y * lt.w + x] == Some(c) {
                        20.0
                    } else {
                        -20.0
                    }
                });
                tape.constant(x)
            })
            .collect();
        let l = focal_loss(&mut tape, &vars, &t, 0.25, 2.0).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-15);
    }

    #[test]
    fn exact_boxes_have_zero_iou_loss() {
        let t = targets(2, 3);
        let mut tape = Tape::new();
        let vars: Vec<Var> = t[0]
            .levels
            .iter()
            .enumerate()
            .map(|(k, lt)| {
                let x = Tensor4::from_fn(Shape::new(2, 4, lt.h, lt.w), |n, j, y, x| {
                    let lv = &t[n].levels[k];
                    let i = y * lt.w + x;
                    if lv.labels[i].is_some() {
                        lv.distances[i][j]
                    } else {
                        1.0
                    }
                });
                tape.constant(x)
            })
            .collect();
        let l = iou_loss(&mut tape, &vars, &t).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn no_positives_means_zero_regression_losses() {
        let g = PyramidGeometry::for_image(128, 128, 2);
        let t: Arc<[AssignmentTargets]> = vec![assign_targets(&[], &g).unwrap()].into();
        let mut tape = Tape::new();
        let reg: Vec<Var> = t[0].levels.iter().map(|l| tape.constant(Tensor4::full(Shape::new(1, 4, l.h, l.w), 2.0))).collect();
        let ctr: Vec<Var> = t[0].levels.iter().map(|l| tape.constant(Tensor4::zeros(Shape::new(1, 1, l.h, l.w)))).collect();
        let a = iou_loss(&mut tape, &reg, &t).unwrap();
        let b = centerness_loss(&mut tape, &ctr, &t).unwrap();
        assert_eq!(tape.value(a).item().unwrap(), 0.0);
        assert_eq!(tape.value(b).item().unwrap(), 0.0);
    }

    #[test]
    fn loss_shapes_are_checked() {
        let t = targets(2, 4);
        let mut tape = Tape::new();
        let bad: Vec<Var> = t[0].levels.iter().map(|l| tape.constant(Tensor4::zeros(Shape::new(1, 3, l.h, l.w)))).collect();
        assert!(focal_loss(&mut tape, &bad, &t, 0.25, 2.0).is_err());
        assert!(focal_loss(&mut tape, &bad[..2], &t, 0.25, 2.0).is_err());
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let t = targets(2, 5);
        let cls = level_tensors(&t, 3, 6, |v| v);
        let reg = level_tensors(&t, 4, 7, |v| (0.5 * v).exp() * 2.0);
        let ctr = level_tensors(&t, 1, 8, |v| v);
        let cfg = GradCheckConfig::default();
        let r = grad_check(
            |tape, v| focal_loss(tape, v, &t, 0.25, 2.0),
            &cls,
            &cfg,
        )
        .unwrap();
        assert!(r.passed(), "focal {}", r.max_rel_error());
        let r = grad_check(|tape, v| iou_loss(tape, v, &t), &reg, &cfg).unwrap();
        assert!(r.passed(), "iou {}", r.max_rel_error());
        let r = grad_check(|tape, v| centerness_loss(tape, v, &t), &ctr, &cfg).unwrap();
        assert!(r.passed(), "ctr {}", r.max_rel_error());
    }
}
