use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Coupled,
    Decoupled,
    Tscode,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Coupled => "coupled",
            HeadKind::Decoupled => "decoupled",
            HeadKind::Tscode => "tscode",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerSpec {
    pub depth: usize,
    pub width: usize,
}

impl TowerSpec {
    pub const fn new(depth: usize, width: usize) -> Self {
        TowerSpec { depth, width }
    }
}

/// How the classification encoding halves `P_l` (always stride 2).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceDownsample {
    #[default]
    Conv3x3,
    Conv5x5,
    Conv7x7,
    AvgPool3x3,
    MaxPool3x3,
}

impl SceDownsample {
    pub fn kernel(self) -> usize {
        match self {
            SceDownsample::Conv5x5 => 5,
            SceDownsample::Conv7x7 => 7,
            _ => 3,
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, SceDownsample::Conv3x3 | SceDownsample::Conv5x5 | SceDownsample::Conv7x7)
    }
}

/// Which neighbouring levels the localization encoding fuses, relative to
/// the level `l` being predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DpeLevels {
    /// `P_{l−1}` (or `C2` at level 3), through the shared downsampling conv.
    pub finer: bool,
    pub same: bool,
    pub coarser: bool,
    pub coarser2: bool,
}

impl Default for DpeLevels {
    fn default() -> Self {
        DpeLevels { finer: true, same: true, coarser: true, coarser2: false }
    }
}

impl DpeLevels {
    /// `{l}`: the localization input is `P_l` unchanged.
    pub const SAME_ONLY: DpeLevels = DpeLevels { finer: false, same: true, coarser: false, coarser2: false };

    pub fn is_identity(&self) -> bool {
        *self == Self::SAME_ONLY
    }
}

impl fmt::Display for DpeLevels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.finer, "l-1"), (self.same, "l"), (self.coarser, "l+1"), (self.coarser2, "l+2")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| *s)
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for DpeLevels {
    type Err = Error;

    /// Parses comma separated offsets such as `"l-1,l,l+1"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = DpeLevels { finer: false, same: false, coarser: false, coarser2: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let slot = match part {
                "l-1" => &mut out.finer,
                "l" => &mut out.same,
                "l+1" => &mut out.coarser,
                "l+2" => &mut out.coarser2,
                other => return Err(Error::Config(format!("unknown dpe level `{other}` (expected l-1, l, l+1, l+2)"))),
            };
            *slot = true;
        }
        if !(out.finer || out.same) {
            return Err(Error::Config(format!("dpe levels `{s}` must include l or l-1")));
        }
        Ok(out)
    }
}

impl Serialize for DpeLevels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DpeLevels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Full description of a head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadVariant {
    pub kind: HeadKind,
    pub num_classes: usize,
    /// The shared tower for `Coupled`.
    pub cls_tower: TowerSpec,
    pub loc_tower: TowerSpec,
    /// `Tscode` only: classification reads the half-resolution encoding.
    /// When off, classification consumes `P_l` directly.
    pub sce: bool,
    pub sce_downsample: SceDownsample,
    pub dpe_levels: DpeLevels,
}

impl HeadVariant {
    /// Baseline towers: `4 × width` for both tasks.
    pub fn decoupled(num_classes: usize, width: usize) -> Self {
        HeadVariant {
            kind: HeadKind::Decoupled,
            num_classes,
            cls_tower: TowerSpec::new(4, width),
            loc_tower: TowerSpec::new(4, width),
            sce: false,
            sce_downsample: SceDownsample::Conv3x3,
            dpe_levels: DpeLevels::SAME_ONLY,
        }
    }

    pub fn coupled(num_classes: usize, width: usize) -> Self {
        HeadVariant { kind: HeadKind::Coupled, ..Self::decoupled(num_classes, width) }
    }

    /// Both encodings on, with a shallow-but-wide `2 × 2·width` classification tower.
    pub fn tscode(num_classes: usize, width: usize) -> Self {
        HeadVariant {
            kind: HeadKind::Tscode,
            num_classes,
            cls_tower: TowerSpec::new(2, 2 * width),
            loc_tower: TowerSpec::new(4, width),
            sce: true,
            sce_downsample: SceDownsample::Conv3x3,
            dpe_levels: DpeLevels::default(),
        }
    }

    /// Classification encoding only; localization reads `P_l`.
    pub fn sce_only(num_classes: usize, width: usize) -> Self {
        HeadVariant { dpe_levels: DpeLevels::SAME_ONLY, ..Self::tscode(num_classes, width) }
    }

    /// Localization encoding only; classification keeps the baseline tower.
    pub fn dpe_only(num_classes: usize, width: usize) -> Self {
        HeadVariant { sce: false, cls_tower: TowerSpec::new(4, width), ..Self::tscode(num_classes, width) }
    }

    /// Default variant of a kind at a given pyramid width.
    pub fn for_kind(kind: HeadKind, num_classes: usize, width: usize) -> Self {
        match kind {
            HeadKind::Coupled => Self::coupled(num_classes, width),
            HeadKind::Decoupled => Self::decoupled(num_classes, width),
            HeadKind::Tscode => Self::tscode(num_classes, width),
        }
    }

    pub fn uses_sce(&self) -> bool {
        self.kind == HeadKind::Tscode && self.sce
    }

    pub fn uses_dpe(&self) -> bool {
        self.kind == HeadKind::Tscode && !self.dpe_levels.is_identity()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        for (name, t) in [("cls_tower", self.cls_tower), ("loc_tower", self.loc_tower)] {
            if t.depth == 0 || t.width == 0 {
                return Err(Error::Config(format!("{name} depth and width must be positive, got {t:?}")));
            }
        }
        if !(self.dpe_levels.finer || self.dpe_levels.same) {
            return Err(Error::Config("dpe levels must include l or l-1".into()));
        }
        Ok(())
    }

    /// Short label such as `tscode`, `sce-only` or `decoupled`.
    pub fn label(&self) -> String {
        match (self.kind, self.uses_sce(), self.uses_dpe()) {
            (HeadKind::Tscode, true, false) => "sce-only".into(),
            (HeadKind::Tscode, false, true) => "dpe-only".into(),
            (kind, _, _) => kind.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dpe_levels_parse_and_print() {
        let d: DpeLevels = "l-1, l, l+1".parse().unwrap();
        assert_eq!(d, DpeLevels::default());
        assert_eq!(d.to_string(), "l-1,l,l+1");
        assert_eq!("l".parse::<DpeLevels>().unwrap(), DpeLevels::SAME_ONLY);
        assert!("l+1".parse::<DpeLevels>().is_err());
        assert!("l+3".parse::<DpeLevels>().is_err());
    }

    #[test]
    fn presets() {
        let t = HeadVariant::tscode(80, 256);
        assert_eq!(t.cls_tower, TowerSpec::new(2, 512));
        assert_eq!(t.loc_tower, TowerSpec::new(4, 256));
        assert_eq!(HeadVariant::decoupled(80, 256).cls_tower, TowerSpec::new(4, 256));
        assert_eq!(HeadVariant::sce_only(80, 256).label(), "sce-only");
        assert_eq!(HeadVariant::dpe_only(80, 256).label(), "dpe-only");
        assert!(HeadVariant { num_classes: 0, ..t }.validate().is_err());
    }
}
