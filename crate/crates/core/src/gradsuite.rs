//! Finite-difference checks for every differentiable operation, the losses
//! and the full head, on seeded random instances.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detection::{assign_targets, centerness_loss, focal_loss, iou_loss, AssignmentTargets, GroundTruthBox, PyramidGeometry};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadVariant, TowerSpec};
use crate::nn::{Bound, ParamStore};
use crate::pyramid::{stride_of, FeaturePyramid, LEVELS};
use crate::tensor::{grad_check, ConvParams, GradCheckConfig, Shape, Tape, Tensor4, Var};

pub const OPS: [&str; 19] = [
    "conv2d",
    "upsample2x",
    "concat_channels",
    "slice_channels",
    "crop",
    "add",
    "relu",
    "group_norm",
    "reduce_mean",
    "reduce_sum",
    "scale",
    "mul_scalar",
    "exp",
    "max_pool",
    "avg_pool",
    "rearrange_quadrants",
    "focal_loss",
    "iou_loss",
    "centerness_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Scalar readout with a distinct weight per element.
fn readout(tape: &mut Tape, y: Var) -> Var {
    let s = tape.scale(y, 0.5);
    let e = tape.exp(s);
    tape.reduce_sum(e)
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Values kept at least `gap` away from zero.
fn away_from_zero(shape: Shape, gap: f64, rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.random_range(gap..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values on a grid so no pooling window holds a near tie.
fn spaced(shape: Shape, rng: &mut impl Rng) -> Tensor4 {
    let mut ranks: Vec<usize> = (0..shape.numel()).collect();
    ranks.shuffle(rng);
    let mut i = 0;
    Tensor4::from_fn(shape, |_, _, _, _| {
        i += 1;
        ranks[i - 1] as f64 * 0.01 - 1.0
    })
}

fn random_targets(n: usize, classes: usize, side: usize, rng: &mut impl Rng) -> Result<Arc<[AssignmentTargets]>> {
    let g = PyramidGeometry::for_image(side, side, classes);
    let s = side as f64;
    (0..n)
        .map(|_| {
            let gts: Vec<GroundTruthBox> = (0..3)
                .map(|_| {
                    let (w, h) = (rng.random_range(0.06 * s..0.7 * s), rng.random_range(0.06 * s..0.7 * s));
                    let (x, y) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
                    GroundTruthBox::new([x, y, x + w, y + h], rng.random_range(0..classes))
                })
                .collect();
            assign_targets(&gts, &g)
        })
        .collect()
}

fn level_shapes(t: &[AssignmentTargets], c: usize) -> Vec<Shape> {
    t[0].levels.iter().map(|l| Shape::new(t.len(), c, l.h, l.w)).collect()
}

type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance of `op`: the graph and its leaf values.
fn instance(op: &str, rng: &mut ChaCha8Rng) -> Result<(Graph, Vec<Tensor4>)> {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=4);
    let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let x = Tensor4::randn(Shape::new(n, c, h, w), 1.0, rng);
    let out: (Graph, Vec<Tensor4>) = match op {
        "conv2d" => {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=k / 2);
            let co = rng.random_range(1..=4);
            let (h, w) = (rng.random_range(k..k + 4), rng.random_range(k..k + 4));
            let x = Tensor4::randn(Shape::new(n, c, h, w), 1.0, rng);
            let wt = Tensor4::randn(Shape::new(co, c, k, k), 0.5, rng);
            let mut leaves = vec![x, wt];
            let bias = rng.random_bool(0.5);
            if bias {
                leaves.push(Tensor4::randn(Shape::new(1, co, 1, 1), 0.5, rng));
            }
            (
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let p = ConvParams { weight: v[1], bias: bias.then(|| v[2]), stride, padding };
                    let y = t.conv2d(v[0], p)?;
                    Ok(readout(t, y))
                }),
                leaves,
            )
        }
        "upsample2x" => (Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.upsample2x(v[0]);
            Ok(readout(t, y))
        }), vec![x]),
        "concat_channels" => {
            let b = Tensor4::randn(Shape::new(n, rng.random_range(1..=3), h, w), 1.0, rng);
            (Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.concat_channels(v[0], v[1])?;
                Ok(readout(t, y))
            }), vec![x, b])
        }
        "slice_channels" => {
            let c = rng.random_range(2..=5);
            let start = rng.random_range(0..c);
            let len = rng.random_range(1..=c - start);
            let x = Tensor4::randn(Shape::new(n, c, h, w), 1.0, rng);
            (Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.slice_channels(v[0], start, len)?;
                Ok(readout(t, y))
            }), vec![x])
        }
        "crop" => {
            let (ch, cw) = (rng.random_range(1..h), rng.random_range(1..=w));
            (Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.crop(v[0], ch, cw)?;
                Ok(readout(t, y))
            }), vec![x])
        }
        "add" => {
            let b = Tensor4::randn(x.shape(), 1.0, rng);
            (Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                Ok(readout(t, y))
            }), vec![x, b])
        }
        "relu" => (Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.relu(v[0]);
            Ok(readout(t, y))
        }), vec![away_from_zero(x.shape(), 0.01, rng)]),
        "group_norm" => {
            let groups = rng.random_range(1..=3);
            let c = groups * rng.random_range(1..=3);
            let x = Tensor4::randn(Shape::new(n, c, h, w), 1.0, rng);
            let gamma = uniform(Shape::new(1, c, 1, 1), 0.5, 1.5, rng);
            let beta = Tensor4::randn(Shape::new(1, c, 1, 1), 0.5, rng);
            (Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.group_norm(v[0], groups, v[1], v[2])?;
                Ok(readout(t, y))
            }), vec![x, gamma, beta])
        }
        "reduce_mean" => (Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.reduce_mean(v[0]);
            Ok(readout(t, y))
        }), vec![x]),
        "reduce_sum" => (Box::new(|t: &mut Tape, v: &[Var]| {
            let s = t.scale(v[0], 0.2);
            let y = t.reduce_sum(s);
            Ok(readout(t, y))
        }), vec![x]),
        "scale" => {
            let f = rng.random_range(-2.0..2.0);
            (Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.scale(v[0], f);
                Ok(readout(t, y))
            }), vec![x])
        }
        "mul_scalar" => {
            let s = Tensor4::scalar(rng.random_range(-1.5..1.5));
            (Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.mul_scalar(v[0], v[1])?;
                Ok(readout(t, y))
            }), vec![x, s])
        }
        "exp" => (Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.exp(v[0]);
            Ok(t.reduce_sum(y))
        }), vec![x]),
        "max_pool" | "avg_pool" => {
            let k = rng.random_range(2..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=k / 2);
            let (h, w) = (rng.random_range(k..k + 4), rng.random_range(k..k + 4));
            let shape = Shape::new(n, c, h, w);
            let max = op == "max_pool";
            let x = if max { spaced(shape, rng) } else { Tensor4::randn(shape, 1.0, rng) };
            (Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = if max { t.max_pool(v[0], k, stride, padding)? } else { t.avg_pool(v[0], k, stride, padding)? };
                Ok(readout(t, y))
            }), vec![x])
        }
        "rearrange_quadrants" => {
            let classes = rng.random_range(1..=3);
            let x = Tensor4::randn(Shape::new(n, 4 * classes, h, w), 1.0, rng);
            (Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.rearrange_quadrants(v[0], classes)?;
                Ok(readout(t, y))
            }), vec![x])
        }
        "focal_loss" | "iou_loss" | "centerness_loss" => {
            let classes = rng.random_range(1..=3);
            let targets = random_targets(n, classes, 128, rng)?;
            let (channels, leaves): (usize, Vec<Tensor4>) = match op {
                "focal_loss" => {
                    let s = level_shapes(&targets, classes);
                    (classes, s.into_iter().map(|s| Tensor4::randn(s, 1.5, rng)).collect())
                }
                // Positive distances, in stride units, that rarely coincide
                // with a target side.
                "iou_loss" => (4, level_shapes(&targets, 4).into_iter().map(|s| uniform(s, 0.2, 6.0, rng)).collect()),
                _ => (1, level_shapes(&targets, 1).into_iter().map(|s| Tensor4::randn(s, 1.5, rng)).collect()),
            };
            debug_assert!(leaves.iter().all(|l| l.shape().c == channels));
            let op = op.to_string();
            (Box::new(move |t: &mut Tape, v: &[Var]| match op.as_str() {
                "focal_loss" => focal_loss(t, v, &targets, 0.25, 2.0),
                "iou_loss" => iou_loss(t, v, &targets),
                _ => centerness_loss(t, v, &targets),
            }), leaves)
        }
        other => return Err(Error::InvalidArgument(format!("no gradient check for op `{other}`"))),
    };
    Ok(out)
}

/// Checks `instances` random instances of `op`, derived from `seed`.
pub fn check_op(op: &str, instances: usize, seed: u64, cfg: &GradCheckConfig) -> Result<OpCheck> {
    let salt = OPS.iter().position(|&o| o == op).unwrap_or(OPS.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (salt << 32));
    let mut worst = 0.0f64;
    let mut passed = true;
    for _ in 0..instances {
        let (f, leaves) = instance(op, &mut rng)?;
        let report = grad_check(f, &leaves, cfg)?;
        worst = worst.max(report.max_rel_error());
        passed &= report.passed();
    }
    Ok(OpCheck { op: op.to_string(), instances, max_rel_error: worst, passed })
}

/// Every entry of [`OPS`].
pub fn check_all_ops(instances: usize, seed: u64, cfg: &GradCheckConfig) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|op| check_op(op, instances, seed, cfg)).collect()
}

/// The head on `P3..P6` of a random pyramid for a `side × side` image, with
/// the pyramid maps and every head parameter as leaves.
pub fn check_head(variant: &HeadVariant, width: usize, side: usize, seed: u64, cfg: &GradCheckConfig) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Head::with_levels(variant, width, &LEVELS[..4])?;
    let mut store = ParamStore::new();
    head.init(&mut store, &mut rng);
    // Larger weights than the detection init so every path carries signal.
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut leaves: Vec<Tensor4> = Vec::new();
    for name in &names {
        let t = store.get(name)?;
        leaves.push(if name.ends_with(".gamma") || name.contains("scale") {
            uniform(t.shape(), 0.5, 1.5, &mut rng)
        } else {
            Tensor4::randn(t.shape(), 0.3, &mut rng)
        });
    }
    let mut maps = vec![Tensor4::randn(Shape::new(1, width, side / 4, side / 4), 1.0, &mut rng)];
    for &l in &LEVELS {
        let s = side.div_ceil(stride_of(l));
        maps.push(Tensor4::randn(Shape::new(1, width, s, s), 1.0, &mut rng));
    }
    let np = names.len();
    leaves.extend(maps);
    let f = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let bound: Bound = names.iter().cloned().zip(v[..np].iter().copied()).collect();
        let pyr = FeaturePyramid::new(v[np], v[np + 1..].to_vec())?;
        let out = head.forward(t, &bound, &pyr)?;
        let mut total: Option<Var> = None;
        for l in &out.levels {
            for y in [l.cls_logits, l.box_reg, l.centerness] {
                let s = t.scale(y, 0.1);
                let r = readout(t, s);
                total = Some(match total {
                    Some(a) => t.add(a, r)?,
                    None => r,
                });
            }
        }
        total.ok_or_else(|| Error::InvalidArgument("head produced no outputs".into()))
    };
    let report = grad_check(f, &leaves, cfg)?;
    Ok(OpCheck { op: format!("head[{}]", variant.label()), instances: 1, max_rel_error: report.max_rel_error(), passed: report.passed() })
}

/// The small TSCODE head the suite checks.
pub fn toy_tscode_head(classes: usize, width: usize) -> HeadVariant {
    HeadVariant { cls_tower: TowerSpec::new(1, width), loc_tower: TowerSpec::new(1, width), ..HeadVariant::tscode(classes, width) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_builds_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for op in OPS {
            let (f, leaves) = instance(op, &mut rng).unwrap();
            let mut tape = Tape::new();
            let vars: Vec<Var> = leaves.into_iter().map(|l| tape.leaf(l, true)).collect();
            let y = f(&mut tape, &vars).unwrap();
            assert!(tape.value(y).item().unwrap().is_finite(), "{op}");
        }
        assert!(instance("nope", &mut rng).is_err());
    }

    #[test]
    fn ops_pass_on_a_few_instances() {
        for c in check_all_ops(2, 5, &GradCheckConfig::default()).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
