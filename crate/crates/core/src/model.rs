//! Backbone + pyramid + head as one trainable detector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Head, HeadOutputs, HeadVariant, Predictions};
use crate::nn::{Bound, ParamStore};
use crate::pyramid::{Backbone, BackboneConfig, FeaturePyramid, Fpn};
use crate::tensor::{Tape, Tensor4, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadVariant,
}

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: ModelConfig,
    backbone: Backbone,
    fpn: Fpn,
    head: Head,
}

impl Detector {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Detector {
            cfg: cfg.clone(),
            backbone: Backbone::new(&cfg.backbone)?,
            fpn: Fpn::new(&cfg.backbone)?,
            head: Head::new(&cfg.head, cfg.backbone.fpn_width)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.head.num_classes
    }

    /// Fresh parameters; identical seeds give bit-identical stores.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, &mut rng);
        self.fpn.init(&mut store, &mut rng);
        self.head.init(&mut store, &mut rng);
        store
    }

    /// Checks that `params` holds exactly this detector's tensors with the right shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let reference = self.init_params(0);
        for (name, t) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("parameters", format!("{name}: expected {}, found {}", t.shape(), got.shape())));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Config(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn pyramid(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<FeaturePyramid> {
        let feats = self.backbone.forward(tape, p, images)?;
        self.fpn.forward(tape, p, &feats)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<HeadOutputs> {
        let pyr = self.pyramid(tape, p, images)?;
        self.head.forward(tape, p, &pyr)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, params: &ParamStore, images: &Tensor4) -> Result<Predictions> {
        let mut tape = Tape::new();
        let p = params.bind_with(&mut tape, |_| false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(out.snapshot(&tape))
    }
}
