//! Dense prediction heads.
//!
//! Three variants share the output convention (per-level class logits,
//! positive box distances, centerness logits):
//!
//! * `Coupled`: one tower on `P_l` feeds all three outputs.
//! * `Decoupled`: separate classification and localization towers, both on `P_l`.
//! * `Tscode`: classification reads a half-resolution encoding built from
//!   `P_l` and `P_{l+1}` and predicts each 2×2 neighbourhood from one
//!   location; localization reads a fusion of `P_{l−1}`, `P_l` and `P_{l+1}`.

mod dpe;
mod sce;
mod variant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ConvBlock, Init, ParamStore};
use crate::pyramid::{stride_of, FeaturePyramid, LEVELS};
use crate::tensor::{Shape, Tape, Tensor4, Var};

pub use dpe::dpe_forward;
pub use sce::{sce_forward, Downsample};
pub use variant::{DpeLevels, HeadKind, HeadVariant, SceDownsample, TowerSpec};

/// Prior probability that sets the initial classification bias.
pub const PRIOR_PROB: f64 = 0.01;

pub fn prior_bias() -> f64 {
    -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln()
}

#[derive(Clone, Copy, Debug)]
pub struct LevelOutputs {
    pub level: u32,
    pub stride: usize,
    /// `(n, N, H_l, W_l)` logits.
    pub cls_logits: Var,
    /// `(n, 4, H_l, W_l)` distances `(left, top, right, bottom)` in units of
    /// the level stride.
    pub box_reg: Var,
    /// `(n, 1, H_l, W_l)` logits.
    pub centerness: Var,
}

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutputs>,
}

impl HeadOutputs {
    pub fn cls_vars(&self) -> Vec<Var> {
        self.levels.iter().map(|l| l.cls_logits).collect()
    }

    pub fn reg_vars(&self) -> Vec<Var> {
        self.levels.iter().map(|l| l.box_reg).collect()
    }

    pub fn ctr_vars(&self) -> Vec<Var> {
        self.levels.iter().map(|l| l.centerness).collect()
    }

    /// Copies the output values off the tape.
    pub fn snapshot(&self, tape: &Tape) -> Predictions {
        Predictions {
            levels: self
                .levels
                .iter()
                .map(|l| LevelPredictions {
                    level: l.level,
                    stride: l.stride,
                    cls_logits: tape.value(l.cls_logits).clone(),
                    box_reg: tape.value(l.box_reg).clone(),
                    centerness: tape.value(l.centerness).clone(),
                })
                .collect(),
        }
    }
}

/// Head outputs detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPredictions {
    pub level: u32,
    pub stride: usize,
    pub cls_logits: Tensor4,
    pub box_reg: Tensor4,
    pub centerness: Tensor4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub levels: Vec<LevelPredictions>,
}

#[derive(Clone, Debug)]
pub struct Head {
    variant: HeadVariant,
    fpn_width: usize,
    levels: Vec<u32>,
    cls_tower: Vec<ConvBlock>,
    loc_tower: Vec<ConvBlock>,
    cls_out: Conv,
    reg_out: Conv,
    ctr_out: Conv,
    sce_down: Option<Downsample>,
    dpe_dconv: Option<Conv>,
}

fn tower(name: &str, c_in: usize, spec: TowerSpec) -> Vec<ConvBlock> {
    (0..spec.depth)
        .map(|i| ConvBlock::new(&format!("{name}.{i}"), if i == 0 { c_in } else { spec.width }, spec.width, 3, 1))
        .collect()
}

fn run_tower(blocks: &[ConvBlock], tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, p, x)?;
    }
    Ok(x)
}

impl Head {
    /// A head on every pyramid level `P3..P7`.
    pub fn new(variant: &HeadVariant, fpn_width: usize) -> Result<Self> {
        Self::with_levels(variant, fpn_width, &LEVELS)
    }

    pub fn with_levels(variant: &HeadVariant, fpn_width: usize, levels: &[u32]) -> Result<Self> {
        variant.validate()?;
        if fpn_width == 0 {
            return Err(Error::Config("fpn width must be positive".into()));
        }
        if levels.is_empty() || levels.iter().any(|l| !LEVELS.contains(l)) {
            return Err(Error::Config(format!("head levels {levels:?} must be a non-empty subset of 3..=7")));
        }
        let n = variant.num_classes;
        let w = fpn_width;
        let (cls_tower, loc_tower, cls_out_in, loc_out_in) = match variant.kind {
            HeadKind::Coupled => {
                let t = tower("head.tower", w, variant.cls_tower);
                (t, Vec::new(), variant.cls_tower.width, variant.cls_tower.width)
            }
            HeadKind::Decoupled => (
                tower("head.cls_tower", w, variant.cls_tower),
                tower("head.loc_tower", w, variant.loc_tower),
                variant.cls_tower.width,
                variant.loc_tower.width,
            ),
            HeadKind::Tscode => {
                let cls_in = if variant.sce { 2 * w } else { w };
                (
                    tower("head.cls_tower", cls_in, variant.cls_tower),
                    tower("head.loc_tower", w, variant.loc_tower),
                    variant.cls_tower.width,
                    variant.loc_tower.width,
                )
            }
        };
        let cls_channels = if variant.uses_sce() { 4 * n } else { n };
        let sce_down = variant.uses_sce().then(|| Downsample::new(variant.sce_downsample, "head.sce.dconv", w));
        let dpe_dconv = (variant.kind == HeadKind::Tscode && variant.dpe_levels.finer)
            .then(|| Conv::new("head.dpe.dconv", w, w, 3, 2));
        Ok(Head {
            variant: variant.clone(),
            fpn_width,
            levels: levels.to_vec(),
            cls_tower,
            loc_tower,
            cls_out: Conv::new("head.cls_out", cls_out_in, cls_channels, 3, 1),
            reg_out: Conv::new("head.reg_out", loc_out_in, 4, 3, 1),
            ctr_out: Conv::new("head.ctr_out", loc_out_in, 1, 3, 1),
            sce_down,
            dpe_dconv,
        })
    }

    pub fn variant(&self) -> &HeadVariant {
        &self.variant
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    fn scale_name(level: u32) -> String {
        format!("head.scale{level}")
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.cls_tower
            .iter()
            .chain(&self.loc_tower)
            .map(|b| &b.conv)
            .chain([&self.cls_out, &self.reg_out, &self.ctr_out])
            .chain(self.sce_down.as_ref().and_then(Downsample::conv))
            .chain(&self.dpe_dconv)
    }

    /// `(parameter prefix, scalar count)` for every layer.
    pub fn layer_params(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self.convs().map(|c| (c.name.clone(), c.param_count())).collect();
        out.extend(self.cls_tower.iter().chain(&self.loc_tower).map(|b| (b.norm.name.clone(), 2 * b.norm.channels)));
        out.extend(self.levels.iter().map(|&l| (Self::scale_name(l), 1)));
        out
    }

    /// Learnable scalar count, computed from the layer list.
    pub fn param_count(&self) -> usize {
        let convs: usize = self.convs().map(Conv::param_count).sum();
        let norms: usize = self.cls_tower.iter().chain(&self.loc_tower).map(|b| 2 * b.norm.channels).sum();
        convs + norms + self.levels.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let head_init = Init::Normal(0.01);
        for b in self.cls_tower.iter().chain(&self.loc_tower) {
            b.init(store, head_init, rng);
        }
        self.cls_out.init(store, head_init, prior_bias(), rng);
        self.reg_out.init(store, head_init, 0.0, rng);
        self.ctr_out.init(store, head_init, 0.0, rng);
        if let Some(c) = self.sce_down.as_ref().and_then(Downsample::conv) {
            c.init(store, Init::FanIn(1.0), 0.0, rng);
        }
        if let Some(c) = &self.dpe_dconv {
            c.init(store, Init::FanIn(1.0), 0.0, rng);
        }
        for &l in &self.levels {
            store.insert(Self::scale_name(l), Tensor4::scalar(1.0));
        }
    }

    fn cls_branch(&self, tape: &mut Tape, p: &Bound, pyr: &FeaturePyramid, level: u32, p_l: Var) -> Result<Var> {
        let Some(down) = &self.sce_down else {
            let t = run_tower(&self.cls_tower, tape, p, p_l)?;
            return self.cls_out.forward(tape, p, t);
        };
        let p_next = match pyr.level(level + 1) {
            Some(v) => v,
            // No coarser map above the top level: pool the top map instead.
            None => tape.max_pool(p_l, 3, 2, 1)?,
        };
        let g = sce_forward(tape, p, p_l, p_next, down)?;
        let t = run_tower(&self.cls_tower, tape, p, g)?;
        let coarse = self.cls_out.forward(tape, p, t)?;
        let fine = tape.rearrange_quadrants(coarse, self.variant.num_classes)?;
        let s = tape.shape(p_l);
        tape.crop(fine, s.h, s.w)
    }

    fn loc_input(&self, tape: &mut Tape, p: &Bound, pyr: &FeaturePyramid, level: u32, p_l: Var) -> Result<Var> {
        if self.variant.kind != HeadKind::Tscode {
            return Ok(p_l);
        }
        dpe_forward(
            tape,
            p,
            pyr.finer(level),
            p_l,
            pyr.level(level + 1),
            pyr.level(level + 2),
            self.dpe_dconv.as_ref(),
            self.variant.dpe_levels,
        )
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, pyr: &FeaturePyramid) -> Result<HeadOutputs> {
        let mut levels = Vec::with_capacity(self.levels.len());
        for &level in &self.levels {
            let p_l = pyr.level(level).ok_or_else(|| Error::InvalidArgument(format!("pyramid lacks P{level}")))?;
            let (cls_logits, loc_feat) = if self.variant.kind == HeadKind::Coupled {
                let t = run_tower(&self.cls_tower, tape, p, p_l)?;
                (self.cls_out.forward(tape, p, t)?, t)
            } else {
                let cls = self.cls_branch(tape, p, pyr, level, p_l)?;
                let g = self.loc_input(tape, p, pyr, level, p_l)?;
                (cls, run_tower(&self.loc_tower, tape, p, g)?)
            };
            let raw = self.reg_out.forward(tape, p, loc_feat)?;
            let scaled = tape.mul_scalar(raw, p.get(&Self::scale_name(level))?)?;
            let box_reg = tape.exp(scaled);
            let centerness = self.ctr_out.forward(tape, p, loc_feat)?;
            levels.push(LevelOutputs { level, stride: stride_of(level), cls_logits, box_reg, centerness });
        }
        Ok(HeadOutputs { levels })
    }

    pub fn fpn_width(&self) -> usize {
        self.fpn_width
    }
}

/// Shape every level's class map must have for an input of `h × w`.
pub fn expected_cls_shape(n: usize, classes: usize, h: usize, w: usize, level: u32) -> Shape {
    let s = stride_of(level);
    Shape::new(n, classes, h.div_ceil(s), w.div_ceil(s))
}
