//! Experiment configuration: one TOML document plus dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{DecodeConfig, LossConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::harness::synth::DataConfig;
use crate::heads::{DpeLevels, HeadKind, HeadVariant, SceDownsample, TowerSpec};
use crate::model::ModelConfig;
use crate::pyramid::BackboneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Defaults to on for `tscode`.
    pub sce: Option<bool>,
    pub sce_downsample: SceDownsample,
    /// Defaults to `l-1,l,l+1` for `tscode`.
    pub dpe_levels: Option<DpeLevels>,
    /// Defaults depend on `kind` and the pyramid width.
    pub cls_tower: Option<TowerSpec>,
    pub loc_tower: Option<TowerSpec>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Tscode,
            sce: None,
            sce_downsample: SceDownsample::Conv3x3,
            dpe_levels: None,
            cls_tower: None,
            loc_tower: None,
        }
    }
}

impl HeadConfig {
    pub fn variant(&self, num_classes: usize, fpn_width: usize) -> Result<HeadVariant> {
        let mut v = HeadVariant::for_kind(self.kind, num_classes, fpn_width);
        if self.kind != HeadKind::Tscode && (self.sce == Some(true) || self.dpe_levels.is_some_and(|d| !d.is_identity())) {
            return Err(Error::Config(format!("sce and dpe_levels apply to the tscode head, not `{}`", self.kind)));
        }
        if let Some(sce) = self.sce {
            v.sce = sce;
            if !sce && self.cls_tower.is_none() {
                v.cls_tower = HeadVariant::dpe_only(num_classes, fpn_width).cls_tower;
            }
        }
        v.sce_downsample = self.sce_downsample;
        if let Some(d) = self.dpe_levels {
            v.dpe_levels = d;
        }
        if let Some(t) = self.cls_tower {
            v.cls_tower = t;
        }
        if let Some(t) = self.loc_tower {
            v.loc_tower = t;
        }
        v.validate()?;
        Ok(v)
    }
}

/// Optimizer block. Milestones and warmup follow `steps` unless given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Option<Vec<usize>>,
    pub warmup_steps: Option<usize>,
    pub warmup_factor: f64,
    pub grad_clip: f64,
    pub hflip: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            milestones: None,
            warmup_steps: None,
            warmup_factor: t.warmup_factor,
            grad_clip: t.grad_clip,
            hflip: t.hflip,
        }
    }
}

impl OptimConfig {
    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig::with_steps(self.steps);
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone().unwrap_or(base.milestones),
            warmup_steps: self.warmup_steps.unwrap_or(base.warmup_steps),
            warmup_factor: self.warmup_factor,
            grad_clip: self.grad_clip,
            hflip: self.hflip,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Free-form run label; defaults to the head label.
    pub name: Option<String>,
    pub data: DataConfig,
    pub model: BackboneConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: DecodeConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.train_config().validate()?;
        self.eval.validate()?;
        self.head_variant()?;
        if self.optim.batch_size > self.data.train_images {
            return Err(Error::Config("batch_size exceeds the number of training images".into()));
        }
        Ok(())
    }

    pub fn head_variant(&self) -> Result<HeadVariant> {
        self.head.variant(self.data.num_classes, self.model.fpn_width)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig { backbone: self.model.clone(), head: self.head_variant()? })
    }

    pub fn train_config(&self) -> TrainConfig {
        self.optim.train_config()
    }

    /// Run label: `name`, or the head label.
    pub fn label(&self) -> String {
        match (&self.name, self.head_variant()) {
            (Some(n), _) => n.clone(),
            (None, Ok(v)) => v.label(),
            (None, Err(_)) => self.head.kind.to_string(),
        }
    }

    /// Parses TOML text and applies `key=value` overrides, where keys are
    /// dotted paths (`optim.steps`) and values are TOML literals; bare words
    /// are taken as strings.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for (key, raw) in overrides {
            set_path(&mut table, key, parse_literal(raw))?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("cannot serialize config: {e}")))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    raw.parse::<toml::Value>().unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::parse("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn roundtrip_through_toml() {
        let cfg = ExperimentConfig {
            head: HeadConfig { dpe_levels: Some("l,l+1".parse().unwrap()), ..HeadConfig::default() },
            ..ExperimentConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let cfg = ExperimentConfig::parse(
            "seed = 3\n[optim]\nsteps = 100\n",
            &[o("optim.lr", "0.02"), o("head.kind", "decoupled"), o("seed", "9"), o("head.sce_downsample", "maxpool3x3")],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optim.steps, 100);
        assert_eq!(cfg.optim.lr, 0.02);
        assert_eq!(cfg.head.kind, HeadKind::Decoupled);
        assert_eq!(cfg.train_config().milestones, vec![66, 88]);
        assert_eq!(cfg.head.sce_downsample, SceDownsample::MaxPool3x3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let o = |k: &str, v: &str| vec![(k.to_string(), v.to_string())];
        assert!(ExperimentConfig::parse("bogus = 1", &[]).is_err());
        assert!(ExperimentConfig::parse("", &o("data.image_size", "100")).is_err());
        assert!(ExperimentConfig::parse("", &o("optim.milestones", "[5000]")).is_err());
        assert!(ExperimentConfig::parse("", &o("data.train_images", "0")).is_err());
        assert!(ExperimentConfig::parse("", &o("head.dpe_levels", "l+1")).is_err());
        assert!(ExperimentConfig::parse("[head]\nkind = \"decoupled\"\nsce = true\n", &[]).is_err());
        assert!(ExperimentConfig::parse("", &o("seed.x", "1")).is_err());
    }

    #[test]
    fn head_knobs_map_to_variants() {
        let v = |text: &str| ExperimentConfig::parse(text, &[]).unwrap().head_variant().unwrap();
        let w = BackboneConfig::default().fpn_width;
        assert_eq!(v("[head]\nkind = \"decoupled\""), HeadVariant::decoupled(4, w));
        assert_eq!(v("[head]\ndpe_levels = \"l\""), HeadVariant::sce_only(4, w));
        assert_eq!(v("[head]\nsce = false"), HeadVariant::dpe_only(4, w));
        assert_eq!(v("[head]\ncls_tower = { depth = 3, width = 24 }").cls_tower, TowerSpec::new(3, 24));
    }
}
