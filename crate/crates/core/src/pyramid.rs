//! Backbone and feature pyramid producing `{C2, P3..P7}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ConvBlock, Init, ParamStore};
use crate::tensor::{Tape, Var};

pub const MIN_LEVEL: u32 = 3;
pub const MAX_LEVEL: u32 = 7;
pub const LEVELS: [u32; 5] = [3, 4, 5, 6, 7];

/// Inputs must be divisible by the coarsest stride.
pub const INPUT_ALIGNMENT: usize = 128;

pub fn stride_of(level: u32) -> usize {
    1 << level
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel widths of C2, C3, C4, C5.
    pub widths: [usize; 4],
    pub fpn_width: usize,
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: [32, 64, 128, 256], fpn_width: 64, blocks_per_stage: 2 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.fpn_width == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config(format!("backbone widths and block counts must be positive: {self:?}")));
        }
        Ok(())
    }

    /// C2 is projected to the pyramid width only when the widths differ.
    pub fn projects_c2(&self) -> bool {
        self.widths[0] != self.fpn_width
    }
}

/// The stage-2 input comes from a stride-2 stem of this width.
pub fn stem_width(cfg: &BackboneConfig) -> usize {
    (cfg.widths[0] / 2).max(8)
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBlock,
    blocks: Vec<ConvBlock>,
}

/// Stride-2 stem followed by four stages, each `[conv3×3 s2 → gn → relu]`
/// plus `blocks_per_stage − 1` residual `x + gn(conv3×3(x))` blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: ConvBlock,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBlock::new("backbone.stem", 3, stem_width(cfg), 3, 2);
        let mut c_in = stem_width(cfg);
        let stages = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let name = format!("backbone.stage{}", i + 2);
                let down = ConvBlock::new(&format!("{name}.down"), c_in, w, 3, 2);
                let blocks =
                    (1..cfg.blocks_per_stage).map(|b| ConvBlock::new(&format!("{name}.block{b}"), w, w, 3, 1)).collect();
                c_in = w;
                Stage { down, blocks }
            })
            .collect();
        Ok(Backbone { cfg: cfg.clone(), stem, stages })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let he = Init::FanIn(2f64.sqrt());
        self.stem.init(store, he, rng);
        for stage in &self.stages {
            stage.down.init(store, he, rng);
            for b in &stage.blocks {
                b.init(store, he, rng);
            }
        }
    }

    /// Returns `[C2, C3, C4, C5]` at strides 4, 8, 16, 32.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let s = tape.shape(image);
        if s.c != 3 {
            return Err(Error::shape("backbone", format!("expected a 3-channel image, got {s}")));
        }
        if !s.h.is_multiple_of(INPUT_ALIGNMENT) || !s.w.is_multiple_of(INPUT_ALIGNMENT) {
            return Err(Error::shape("backbone", format!("image {}x{} is not a multiple of {INPUT_ALIGNMENT}", s.h, s.w)));
        }
        let mut x = self.stem.forward(tape, p, image)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward(tape, p, x)?;
            for b in &stage.blocks {
                let y = b.forward_linear(tape, p, x)?;
                let sum = tape.add(x, y)?;
                x = tape.relu(sum);
            }
            feats.push(x);
        }
        Ok(feats)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }
}

/// `C2` (projected to the pyramid width) and `P3..P7`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub c2: Var,
    levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn new(c2: Var, levels: Vec<Var>) -> Result<Self> {
        if levels.len() != LEVELS.len() {
            return Err(Error::InvalidArgument(format!("expected {} pyramid levels, got {}", LEVELS.len(), levels.len())));
        }
        Ok(FeaturePyramid { c2, levels })
    }

    /// `P_level` for `level ∈ 3..=7`.
    pub fn level(&self, level: u32) -> Option<Var> {
        level.checked_sub(MIN_LEVEL).and_then(|i| self.levels.get(i as usize)).copied()
    }

    /// `P_{level−1}`, with `C2` standing in below `P3`.
    pub fn finer(&self, level: u32) -> Option<Var> {
        if level == MIN_LEVEL {
            Some(self.c2)
        } else {
            self.level(level - 1)
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, Var)> + '_ {
        LEVELS.iter().copied().zip(self.levels.iter().copied())
    }
}

/// Top-down pyramid: 1×1 laterals on C3..C5, nearest upsampling, 3×3
/// smoothing, stride-2 convs for P6 and P7.
#[derive(Clone, Debug)]
pub struct Fpn {
    laterals: Vec<Conv>,
    outputs: Vec<Conv>,
    p6: Conv,
    p7: Conv,
    c2_proj: Option<Conv>,
}

impl Fpn {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.fpn_width;
        let laterals = (3..=5).map(|l| Conv::new(format!("fpn.lateral{l}"), cfg.widths[l - 2], w, 1, 1)).collect();
        let outputs = (3..=5).map(|l| Conv::new(format!("fpn.output{l}"), w, w, 3, 1)).collect();
        Ok(Fpn {
            laterals,
            outputs,
            p6: Conv::new("fpn.p6", w, w, 3, 2),
            p7: Conv::new("fpn.p7", w, w, 3, 2),
            c2_proj: cfg.projects_c2().then(|| Conv::new("fpn.c2_proj", cfg.widths[0], w, 1, 1)),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let init = Init::FanIn(1.0);
        for c in self.laterals.iter().chain(&self.outputs).chain([&self.p6, &self.p7]).chain(&self.c2_proj) {
            c.init(store, init, 0.0, rng);
        }
    }

    /// `stages` is `[C2, C3, C4, C5]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, stages: &[Var]) -> Result<FeaturePyramid> {
        if stages.len() != 4 {
            return Err(Error::InvalidArgument(format!("fpn needs C2..C5, got {} stages", stages.len())));
        }
        let lat: Vec<Var> =
            self.laterals.iter().zip(&stages[1..]).map(|(c, &x)| c.forward(tape, p, x)).collect::<Result<_>>()?;
        let mut merged = vec![lat[2]; 3];
        for i in (0..2).rev() {
            let up = tape.upsample2x(merged[i + 1]);
            merged[i] = tape.add(lat[i], up)?;
        }
        let mut levels: Vec<Var> =
            self.outputs.iter().zip(&merged).map(|(c, &x)| c.forward(tape, p, x)).collect::<Result<_>>()?;
        let p6 = self.p6.forward(tape, p, levels[2])?;
        let p6_act = tape.relu(p6);
        let p7 = self.p7.forward(tape, p, p6_act)?;
        levels.extend([p6, p7]);
        let c2 = match &self.c2_proj {
            Some(c) => c.forward(tape, p, stages[0])?,
            None => stages[0],
        };
        FeaturePyramid::new(c2, levels)
    }
}
