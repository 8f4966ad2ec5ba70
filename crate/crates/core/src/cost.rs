//! Analytic multiply-accumulate and parameter accounting.
//!
//! Topologies are plain layer lists written out from the architecture
//! description, independently of the executable layers. Only convolutions
//! cost MACs; pooling, resampling, additions, concatenation, rearrangement and
//! normalization are free. Layers that share weights carry the same name and
//! their parameters are counted once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadVariant, SceDownsample};
use crate::pyramid::{stride_of, BackboneConfig, LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Pool,
    Upsample,
    Add,
    Concat,
    Rearrange,
    /// Affine normalization: `2 · c_out` parameters, no MACs.
    Norm,
    /// Learnable scalar multiplier: one parameter, no MACs.
    Scale,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerSpec {
    /// Parameter identity; equal names share weights.
    pub name: String,
    /// Reporting group.
    pub module: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub bias: bool,
}

impl LayerSpec {
    /// `k × k` conv with `k / 2` padding and a bias.
    pub fn conv(module: &str, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, in_hw: (usize, usize)) -> Self {
        LayerSpec {
            name: name.into(),
            module: module.into(),
            kind: LayerKind::Conv,
            c_in,
            c_out,
            kernel,
            stride,
            padding: kernel / 2,
            in_h: in_hw.0,
            in_w: in_hw.1,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    fn free(module: &str, name: &str, kind: LayerKind, c: usize, in_hw: (usize, usize)) -> Self {
        LayerSpec {
            name: name.into(),
            module: module.into(),
            kind,
            c_in: c,
            c_out: c,
            kernel: 1,
            stride: 1,
            padding: 0,
            in_h: in_hw.0,
            in_w: in_hw.1,
            bias: false,
        }
    }

    pub fn pool(module: &str, name: &str, c: usize, kernel: usize, stride: usize, in_hw: (usize, usize)) -> Self {
        LayerSpec { kernel, stride, padding: kernel / 2, ..Self::free(module, name, LayerKind::Pool, c, in_hw) }
    }

    pub fn upsample(module: &str, name: &str, c: usize, in_hw: (usize, usize)) -> Self {
        Self::free(module, name, LayerKind::Upsample, c, in_hw)
    }

    pub fn add(module: &str, name: &str, c: usize, in_hw: (usize, usize)) -> Self {
        Self::free(module, name, LayerKind::Add, c, in_hw)
    }

    /// `c_in` is the summed input width.
    pub fn concat(module: &str, name: &str, c: usize, in_hw: (usize, usize)) -> Self {
        Self::free(module, name, LayerKind::Concat, c, in_hw)
    }

    /// `4N` channels at `in_hw` to `N` channels at twice the resolution.
    pub fn rearrange(module: &str, name: &str, classes: usize, in_hw: (usize, usize)) -> Self {
        LayerSpec { c_in: 4 * classes, c_out: classes, ..Self::free(module, name, LayerKind::Rearrange, classes, in_hw) }
    }

    pub fn norm(module: &str, name: &str, c: usize, in_hw: (usize, usize)) -> Self {
        Self::free(module, name, LayerKind::Norm, c, in_hw)
    }

    pub fn scale(module: &str, name: &str) -> Self {
        Self::free(module, name, LayerKind::Scale, 1, (1, 1))
    }

    /// Output spatial size.
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        if self.in_h == 0 || self.in_w == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::InvalidArgument(format!("layer {} has an empty dimension", self.name)));
        }
        match self.kind {
            LayerKind::Conv | LayerKind::Pool => {
                if self.kernel == 0 || self.stride == 0 {
                    return Err(Error::InvalidArgument(format!("layer {}: kernel and stride must be positive", self.name)));
                }
                let dim = |d: usize| -> Result<usize> {
                    let padded = d + 2 * self.padding;
                    if padded < self.kernel {
                        return Err(Error::InvalidArgument(format!(
                            "layer {}: kernel {} exceeds padded input {padded}",
                            self.name, self.kernel
                        )));
                    }
                    Ok((padded - self.kernel) / self.stride + 1)
                };
                Ok((dim(self.in_h)?, dim(self.in_w)?))
            }
            LayerKind::Upsample | LayerKind::Rearrange => Ok((2 * self.in_h, 2 * self.in_w)),
            _ => Ok((self.in_h, self.in_w)),
        }
    }
}

/// `(macs, params)` of one layer for a single image.
pub fn conv_cost(spec: &LayerSpec) -> Result<(u64, u64)> {
    let (ho, wo) = spec.output_hw()?;
    Ok(match spec.kind {
        LayerKind::Conv => {
            let per_out = (spec.c_in * spec.kernel * spec.kernel) as u64;
            let weights = spec.c_out as u64 * per_out;
            (weights * (ho * wo) as u64, weights + if spec.bias { spec.c_out as u64 } else { 0 })
        }
        LayerKind::Norm => (0, 2 * spec.c_out as u64),
        LayerKind::Scale => (0, 1),
        _ => (0, 0),
    })
}

/// How MACs become reported FLOPs, and for which input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Convention {
    pub input_h: usize,
    pub input_w: usize,
    pub flops_per_mac: u64,
}

impl Convention {
    /// `flops_per_mac = 1`.
    pub fn new(input_h: usize, input_w: usize) -> Self {
        Convention { input_h, input_w, flops_per_mac: 1 }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} input, {} FLOP per MAC", self.input_w, self.input_h, self.flops_per_mac)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub module: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub convention: Convention,
    pub modules: Vec<ModuleCost>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl CostReport {
    /// MACs per application; parameters once per distinct layer name.
    pub fn from_layers(layers: &[LayerSpec], convention: Convention) -> Result<Self> {
        let mut groups: BTreeMap<&str, ModuleCost> = BTreeMap::new();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for l in layers {
            let (macs, params) = conv_cost(l)?;
            let m = groups
                .entry(&l.module)
                .or_insert_with(|| ModuleCost { module: l.module.clone(), macs: 0, params: 0 });
            m.macs += macs;
            if seen.insert(&l.name) {
                m.params += params;
            }
        }
        let modules: Vec<ModuleCost> = groups.into_values().collect();
        Ok(CostReport {
            convention,
            total_macs: modules.iter().map(|m| m.macs).sum(),
            total_params: modules.iter().map(|m| m.params).sum(),
            modules,
        })
    }

    pub fn gflops(&self) -> f64 {
        (self.total_macs * self.convention.flops_per_mac) as f64 / 1e9
    }

    pub fn module(&self, name: &str) -> Option<&ModuleCost> {
        self.modules.iter().find(|m| m.module == name)
    }

    /// Sum over modules whose name starts with `prefix`.
    pub fn macs_with_prefix(&self, prefix: &str) -> u64 {
        self.modules.iter().filter(|m| m.module.starts_with(prefix)).map(|m| m.macs).sum()
    }

    pub fn params_with_prefix(&self, prefix: &str) -> u64 {
        self.modules.iter().filter(|m| m.module.starts_with(prefix)).map(|m| m.params).sum()
    }

    /// `module,macs,params` rows with a trailing total.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,macs,params\n");
        for m in &self.modules {
            s.push_str(&format!("{},{},{}\n", m.module, m.macs, m.params));
        }
        s.push_str(&format!("total,{},{}\n", self.total_macs, self.total_params));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>12} {:>12}\n", "module", "GFLOPs", "params(M)");
        let f = self.convention.flops_per_mac as f64 / 1e9;
        for m in &self.modules {
            s.push_str(&format!("{:<16} {:>12.3} {:>12.3}\n", m.module, m.macs as f64 * f, m.params as f64 / 1e6));
        }
        s.push_str(&format!("{:<16} {:>12.3} {:>12.3}\n", "total", self.gflops(), self.total_params as f64 / 1e6));
        s.push_str(&format!("({})\n", self.convention));
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleDelta {
    pub module: String,
    pub base_macs: u64,
    pub other_macs: u64,
    pub delta_macs: i128,
    /// `delta / base`; `None` when the base is zero.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostDelta {
    pub convention: Convention,
    pub modules: Vec<ModuleDelta>,
    pub total: ModuleDelta,
}

impl CostDelta {
    pub fn delta_gflops(&self) -> f64 {
        self.total.delta_macs as f64 * self.convention.flops_per_mac as f64 / 1e9
    }
}

fn delta(module: &str, base: u64, other: u64) -> ModuleDelta {
    let d = other as i128 - base as i128;
    ModuleDelta {
        module: module.into(),
        base_macs: base,
        other_macs: other,
        delta_macs: d,
        relative: (base > 0).then(|| d as f64 / base as f64),
    }
}

/// `other − base`, per module (union of both) and in total.
pub fn compare_heads(base: &CostReport, other: &CostReport) -> Result<CostDelta> {
    if base.convention != other.convention {
        return Err(Error::InvalidArgument(format!(
            "cost reports use different conventions: {} vs {}",
            base.convention, other.convention
        )));
    }
    let names: BTreeSet<&str> = base.modules.iter().chain(&other.modules).map(|m| m.module.as_str()).collect();
    let macs = |r: &CostReport, n: &str| r.module(n).map_or(0, |m| m.macs);
    Ok(CostDelta {
        convention: base.convention,
        modules: names.into_iter().map(|n| delta(n, macs(base, n), macs(other, n))).collect(),
        total: delta("total", base.total_macs, other.total_macs),
    })
}

/// Spatial sizes of C2 and `P3..P7` for an input, rounding up at every halving.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidDims {
    pub c2: (usize, usize),
    pub levels: Vec<(u32, usize, usize)>,
}

impl PyramidDims {
    pub fn for_input(h: usize, w: usize) -> Self {
        PyramidDims {
            c2: (h.div_ceil(4), w.div_ceil(4)),
            levels: LEVELS.iter().map(|&l| (l, h.div_ceil(stride_of(l)), w.div_ceil(stride_of(l)))).collect(),
        }
    }

    pub fn level(&self, l: u32) -> Option<(usize, usize)> {
        self.levels.iter().find(|x| x.0 == l).map(|x| (x.1, x.2))
    }

    /// One level finer, with C2 below P3.
    pub fn finer(&self, l: u32) -> Option<(usize, usize)> {
        if l == LEVELS[0] {
            Some(self.c2)
        } else {
            self.level(l - 1)
        }
    }
}

fn half(hw: (usize, usize)) -> (usize, usize) {
    (hw.0.div_ceil(2), hw.1.div_ceil(2))
}

/// `depth` conv + norm pairs of `width` channels starting from `c_in`.
fn tower(out: &mut Vec<LayerSpec>, module: &str, prefix: &str, c_in: usize, depth: usize, width: usize, hw: (usize, usize)) {
    for i in 0..depth {
        let c = if i == 0 { c_in } else { width };
        out.push(LayerSpec::conv(module, &format!("{prefix}.{i}.conv"), c, width, 3, 1, hw));
        out.push(LayerSpec::norm(module, &format!("{prefix}.{i}.gn"), width, hw));
    }
}

/// Head layers on the given levels. Weights are shared across levels.
pub fn head_topology(variant: &HeadVariant, fpn_width: usize, dims: &PyramidDims, levels: &[u32]) -> Result<Vec<LayerSpec>> {
    variant.validate()?;
    let w = fpn_width;
    let n = variant.num_classes;
    let (ct, lt) = (variant.cls_tower, variant.loc_tower);
    let sce = variant.kind == HeadKind::Tscode && variant.sce;
    let mut out = Vec::new();
    for &l in levels {
        let hw = dims.level(l).ok_or_else(|| Error::InvalidArgument(format!("no dims for P{l}")))?;
        match variant.kind {
            HeadKind::Coupled => {
                tower(&mut out, "head.tower", "head.tower", w, ct.depth, ct.width, hw);
                out.push(LayerSpec::conv("head.cls", "head.cls_out", ct.width, n, 3, 1, hw));
                out.push(LayerSpec::conv("head.loc", "head.reg_out", ct.width, 4, 3, 1, hw));
                out.push(LayerSpec::conv("head.loc", "head.ctr_out", ct.width, 1, 3, 1, hw));
            }
            HeadKind::Decoupled | HeadKind::Tscode => {
                if sce {
                    let hh = half(hw);
                    let k = variant.sce_downsample.kernel();
                    out.push(match variant.sce_downsample {
                        SceDownsample::AvgPool3x3 | SceDownsample::MaxPool3x3 => LayerSpec::pool("head.sce", "head.sce.pool", w, 3, 2, hw),
                        _ => LayerSpec::conv("head.sce", "head.sce.dconv", w, w, k, 2, hw),
                    });
                    if dims.level(l + 1).is_none() {
                        // The top level pools itself for its coarser partner.
                        out.push(LayerSpec::pool("head.sce", "head.sce.top_pool", w, 3, 2, hw));
                    }
                    out.push(LayerSpec::concat("head.sce", "head.sce.concat", 2 * w, hh));
                    tower(&mut out, "head.cls", "head.cls_tower", 2 * w, ct.depth, ct.width, hh);
                    out.push(LayerSpec::conv("head.cls", "head.cls_out", ct.width, 4 * n, 3, 1, hh));
                    out.push(LayerSpec::rearrange("head.cls", "head.cls.rearrange", n, hh));
                } else {
                    tower(&mut out, "head.cls", "head.cls_tower", w, ct.depth, ct.width, hw);
                    out.push(LayerSpec::conv("head.cls", "head.cls_out", ct.width, n, 3, 1, hw));
                }
                if variant.kind == HeadKind::Tscode {
                    let d = variant.dpe_levels;
                    if d.coarser && dims.level(l + 1).is_some() {
                        out.push(LayerSpec::upsample("head.dpe", "head.dpe.up_next", w, dims.level(l + 1).unwrap()));
                    }
                    if d.coarser2 && dims.level(l + 2).is_some() {
                        let c2 = dims.level(l + 2).unwrap();
                        out.push(LayerSpec::upsample("head.dpe", "head.dpe.up_next2", w, c2));
                        out.push(LayerSpec::upsample("head.dpe", "head.dpe.up_next2", w, (2 * c2.0, 2 * c2.1)));
                    }
                    if d.finer {
                        let fine = dims.finer(l).ok_or_else(|| Error::InvalidArgument(format!("no finer level for P{l}")))?;
                        if d.same {
                            out.push(LayerSpec::upsample("head.dpe", "head.dpe.up_same", w, hw));
                            out.push(LayerSpec::add("head.dpe", "head.dpe.fuse", w, fine));
                        }
                        out.push(LayerSpec::conv("head.dpe", "head.dpe.dconv", w, w, 3, 2, fine));
                    }
                    out.push(LayerSpec::add("head.dpe", "head.dpe.sum", w, hw));
                }
                tower(&mut out, "head.loc", "head.loc_tower", w, lt.depth, lt.width, hw);
                out.push(LayerSpec::conv("head.loc", "head.reg_out", lt.width, 4, 3, 1, hw));
                out.push(LayerSpec::conv("head.loc", "head.ctr_out", lt.width, 1, 3, 1, hw));
            }
        }
        out.push(LayerSpec::scale("head.loc", &format!("head.scale{l}")));
    }
    Ok(out)
}

/// The trainable residual backbone (stem, four stages) as layers.
pub fn toy_backbone_topology(cfg: &BackboneConfig, h: usize, w: usize) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let m = "backbone";
    let stem = (cfg.widths[0] / 2).max(8);
    let mut out = vec![
        LayerSpec::conv(m, "backbone.stem.conv", 3, stem, 3, 2, (h, w)),
        LayerSpec::norm(m, "backbone.stem.gn", stem, (h.div_ceil(2), w.div_ceil(2))),
    ];
    let mut c = stem;
    let mut hw = (h.div_ceil(2), w.div_ceil(2));
    for (i, &width) in cfg.widths.iter().enumerate() {
        let name = format!("backbone.stage{}", i + 2);
        out.push(LayerSpec::conv(m, &format!("{name}.down.conv"), c, width, 3, 2, hw));
        hw = half(hw);
        out.push(LayerSpec::norm(m, &format!("{name}.down.gn"), width, hw));
        for b in 1..cfg.blocks_per_stage {
            out.push(LayerSpec::conv(m, &format!("{name}.block{b}.conv"), width, width, 3, 1, hw));
            out.push(LayerSpec::norm(m, &format!("{name}.block{b}.gn"), width, hw));
            out.push(LayerSpec::add(m, &format!("{name}.block{b}.add"), width, hw));
        }
        c = width;
    }
    Ok(out)
}

/// ResNet-50 (bottleneck blocks 3-4-6-3, stride on the 3×3 conv, bias-free
/// convolutions; batch-norm affine parameters are left out).
pub fn resnet50_topology(h: usize, w: usize) -> Vec<LayerSpec> {
    let m = "backbone";
    let mut out = vec![LayerSpec::conv(m, "backbone.conv1", 3, 64, 7, 2, (h, w)).without_bias()];
    let mut hw = (h.div_ceil(2), w.div_ceil(2));
    out.push(LayerSpec::pool(m, "backbone.maxpool", 64, 3, 2, hw));
    hw = half(hw);
    let mut c_in = 64;
    for (stage, (blocks, mid)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
        let c_out = 4 * mid;
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let name = format!("backbone.layer{}.{b}", stage + 1);
            out.push(LayerSpec::conv(m, &format!("{name}.conv1"), c_in, mid, 1, 1, hw).without_bias());
            out.push(LayerSpec::conv(m, &format!("{name}.conv2"), mid, mid, 3, stride, hw).without_bias());
            let ohw = if stride == 2 { half(hw) } else { hw };
            out.push(LayerSpec::conv(m, &format!("{name}.conv3"), mid, c_out, 1, 1, ohw).without_bias());
            if b == 0 {
                out.push(
                    LayerSpec::conv(m, &format!("{name}.downsample"), c_in, c_out, 1, stride, hw).without_bias(),
                );
            }
            out.push(LayerSpec::add(m, &format!("{name}.add"), c_out, ohw));
            hw = ohw;
            c_in = c_out;
        }
    }
    out
}

/// Top-down pyramid over C3..C5 with extra stride-2 levels from P5, plus a
/// 1×1 projection of C2 when its width differs from the pyramid width.
pub fn fpn_topology(stage_widths: [usize; 4], fpn_width: usize, dims: &PyramidDims) -> Result<Vec<LayerSpec>> {
    let m = "fpn";
    let w = fpn_width;
    let lvl = |l: u32| dims.level(l).ok_or_else(|| Error::InvalidArgument(format!("no dims for P{l}")));
    let mut out = Vec::new();
    for l in 3..=5u32 {
        out.push(LayerSpec::conv(m, &format!("fpn.lateral{l}"), stage_widths[l as usize - 2], w, 1, 1, lvl(l)?));
    }
    for l in [4u32, 3] {
        out.push(LayerSpec::upsample(m, "fpn.topdown", w, lvl(l + 1)?));
        out.push(LayerSpec::add(m, "fpn.merge", w, lvl(l)?));
    }
    for l in 3..=5u32 {
        out.push(LayerSpec::conv(m, &format!("fpn.output{l}"), w, w, 3, 1, lvl(l)?));
    }
    out.push(LayerSpec::conv(m, "fpn.p6", w, w, 3, 2, lvl(5)?));
    out.push(LayerSpec::conv(m, "fpn.p7", w, w, 3, 2, lvl(6)?));
    if stage_widths[0] != w {
        out.push(LayerSpec::conv(m, "fpn.c2_proj", stage_widths[0], w, 1, 1, dims.c2));
    }
    Ok(out)
}

/// Which backbone the common term models.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackboneTopology {
    ResNet50,
    Toy(BackboneConfig),
}

/// Whole-detector layer list for an `h × w` input.
pub fn detector_topology(backbone: &BackboneTopology, fpn_width: usize, head: &HeadVariant, h: usize, w: usize) -> Result<Vec<LayerSpec>> {
    let dims = PyramidDims::for_input(h, w);
    let (mut layers, widths) = match backbone {
        BackboneTopology::ResNet50 => (resnet50_topology(h, w), [256, 512, 1024, 2048]),
        BackboneTopology::Toy(cfg) => (toy_backbone_topology(cfg, h, w)?, cfg.widths),
    };
    layers.extend(fpn_topology(widths, fpn_width, &dims)?);
    layers.extend(head_topology(head, fpn_width, &dims, &LEVELS)?);
    Ok(layers)
}

/// Input size the full-scale comparisons are stated at.
pub const FULL_SCALE_INPUT: (usize, usize) = (800, 1280);
pub const FULL_SCALE_WIDTH: usize = 256;
pub const FULL_SCALE_CLASSES: usize = 80;

/// Named full-scale head presets: `decoupled`, `coupled`, `tscode`,
/// `sce-only`, `dpe-only`.
pub fn full_scale_variant(name: &str) -> Result<HeadVariant> {
    let (n, w) = (FULL_SCALE_CLASSES, FULL_SCALE_WIDTH);
    Ok(match name {
        "decoupled" => HeadVariant::decoupled(n, w),
        "coupled" => HeadVariant::coupled(n, w),
        "tscode" => HeadVariant::tscode(n, w),
        "sce-only" => HeadVariant::sce_only(n, w),
        "dpe-only" => HeadVariant::dpe_only(n, w),
        other => return Err(Error::InvalidArgument(format!("unknown head preset `{other}`"))),
    })
}

/// ResNet-50 + pyramid + head at 1280×800, width 256, 80 classes.
pub fn full_scale_report(head: &HeadVariant) -> Result<CostReport> {
    let (h, w) = FULL_SCALE_INPUT;
    let layers = detector_topology(&BackboneTopology::ResNet50, FULL_SCALE_WIDTH, head, h, w)?;
    CostReport::from_layers(&layers, Convention::new(h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_cost_examples() {
        let big = LayerSpec::conv("m", "a", 256, 256, 3, 1, (160, 100));
        assert_eq!(conv_cost(&big).unwrap().0, 9_437_184_000);
        let small = LayerSpec::conv("m", "b", 256, 80, 1, 1, (1, 1));
        assert_eq!(conv_cost(&small).unwrap(), (20_480, 20_560));
        assert_eq!(conv_cost(&LayerSpec::upsample("m", "u", 256, (10, 10))).unwrap(), (0, 0));
        assert_eq!(conv_cost(&LayerSpec::norm("m", "n", 256, (10, 10))).unwrap(), (0, 512));
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(conv_cost(&LayerSpec::conv("m", "a", 4, 4, 3, 1, (0, 5))).is_err());
        assert!(conv_cost(&LayerSpec::conv("m", "a", 4, 4, 7, 1, (2, 2)).with_padding(0)).is_err());
        assert!(conv_cost(&LayerSpec::conv("m", "a", 4, 4, 3, 0, (5, 5))).is_err());
    }

    #[test]
    fn pyramid_dims_round_up() {
        let d = PyramidDims::for_input(800, 1280);
        assert_eq!(d.level(3), Some((100, 160)));
        assert_eq!(d.level(6), Some((13, 20)));
        assert_eq!(d.level(7), Some((7, 10)));
        assert_eq!(d.c2, (200, 320));
    }

    #[test]
    fn stride_two_convs_match_rounded_dims() {
        let d = PyramidDims::for_input(800, 1280);
        for l in 4..=7 {
            let c = LayerSpec::conv("m", "x", 1, 1, 3, 2, d.level(l - 1).unwrap());
            assert_eq!(c.output_hw().unwrap(), d.level(l).unwrap());
        }
    }

    #[test]
    fn params_counted_once_macs_per_level() {
        let d = PyramidDims::for_input(128, 128);
        let v = HeadVariant::decoupled(3, 16);
        let r = CostReport::from_layers(&head_topology(&v, 16, &d, &LEVELS).unwrap(), Convention::new(128, 128)).unwrap();
        let one = CostReport::from_layers(&head_topology(&v, 16, &d, &[3]).unwrap(), Convention::new(128, 128)).unwrap();
        assert_eq!(r.total_params, one.total_params + 4);
        assert!(r.total_macs > one.total_macs);
    }

    #[test]
    fn totals_are_sums() {
        let r = full_scale_report(&full_scale_variant("tscode").unwrap()).unwrap();
        assert_eq!(r.total_macs, r.modules.iter().map(|m| m.macs).sum::<u64>());
        assert_eq!(r.total_params, r.modules.iter().map(|m| m.params).sum::<u64>());
        assert!(r.to_csv().starts_with("module,macs,params\n"));
        assert!(r.to_csv().contains("head.sce,"));
    }

    #[test]
    fn convention_mismatch_rejected() {
        let d = PyramidDims::for_input(128, 128);
        let l = head_topology(&HeadVariant::decoupled(3, 8), 8, &d, &LEVELS).unwrap();
        let a = CostReport::from_layers(&l, Convention::new(128, 128)).unwrap();
        let b = CostReport::from_layers(&l, Convention::new(256, 128)).unwrap();
        assert!(compare_heads(&a, &b).is_err());
        let same = compare_heads(&a, &a).unwrap();
        assert_eq!(same.total.delta_macs, 0);
    }

    #[test]
    fn baseline_head_per_location_cost() {
        // Two 4-conv towers plus the three outputs, per location.
        let per_loc = 8 * 256 * 256 * 9 + 256 * (80 + 4 + 1) * 9;
        assert_eq!(per_loc, 4_914_432);
        let locations: u64 = PyramidDims::for_input(800, 1280).levels.iter().map(|&(_, h, w)| (h * w) as u64).sum();
        assert_eq!(locations, 21_330);
        let d = PyramidDims::for_input(800, 1280);
        let r = CostReport::from_layers(
            &head_topology(&full_scale_variant("decoupled").unwrap(), 256, &d, &LEVELS).unwrap(),
            Convention::new(800, 1280),
        )
        .unwrap();
        assert_eq!(r.total_macs, per_loc as u64 * locations);
    }

    #[test]
    fn resnet50_shape() {
        let r = CostReport::from_layers(&resnet50_topology(224, 224), Convention::new(224, 224)).unwrap();
        // Conv weights of the classification-free trunk.
        assert_eq!(r.total_params, 23_454_912);
        assert!((r.total_macs as f64 / 1e9 - 4.09).abs() < 0.05, "{}", r.total_macs);
    }
}
