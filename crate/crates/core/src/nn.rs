//! Named parameters and the few layer shapes the detector is built from.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{io, ConvParams, Shape, Tape, Tensor4, Var};

/// Ordered name → tensor map holding every learnable value of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor4>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total scalar count, optionally restricted to names with a prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.numel()).sum()
    }

    /// Records every parameter on `tape` as a leaf that requires a gradient.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Records parameters, requiring gradients only where `trainable` holds.
    pub fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k)))).collect();
        Bound { vars }
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        io::save_bundle(stem, self.iter())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in io::load_bundle(stem)? {
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound { vars: iter.into_iter().collect() }
    }
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Gradients that the last backward pass produced, by parameter name.
    /// Parameters the loss never reached are absent.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Tensor4> {
        self.vars
            .iter()
            .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// `k × k` convolution with the padding that keeps `ceil(in / stride)`.
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Conv { name: name.into(), c_in, c_out, kernel, stride, padding: kernel / 2 }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }

    pub fn init(&self, store: &mut ParamStore, init: Init, bias: f64, rng: &mut impl Rng) {
        let std = match init {
            Init::FanIn(gain) => gain / ((self.c_in * self.kernel * self.kernel) as f64).sqrt(),
            Init::Normal(std) => std,
        };
        store.insert(
            self.weight_name(),
            Tensor4::randn(Shape::new(self.c_out, self.c_in, self.kernel, self.kernel), std, rng),
        );
        store.insert(self.bias_name(), Tensor4::full(Shape::new(1, self.c_out, 1, 1), bias));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let params = ConvParams {
            weight: p.get(&self.weight_name())?,
            bias: Some(p.get(&self.bias_name())?),
            stride: self.stride,
            padding: self.padding,
        };
        tape.conv2d(x, params)
    }
}

/// Largest divisor of `channels` that is at most 32 and leaves at least four
/// channels per group (one group below four channels).
pub fn norm_groups(channels: usize) -> usize {
    let cap = (channels / 4).clamp(1, 32);
    (1..=cap).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        GroupNorm { name: name.into(), channels, groups: norm_groups(channels) }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let shape = Shape::new(1, self.channels, 1, 1);
        store.insert(format!("{}.gamma", self.name), Tensor4::full(shape, 1.0));
        store.insert(format!("{}.beta", self.name), Tensor4::zeros(shape));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{}.gamma", self.name))?;
        let beta = p.get(&format!("{}.beta", self.name))?;
        tape.group_norm(x, self.groups, gamma, beta)
    }
}

/// `conv → group_norm → relu`, the unit every tower and stage repeats.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        ConvBlock {
            conv: Conv::new(format!("{name}.conv"), c_in, c_out, kernel, stride),
            norm: GroupNorm::new(format!("{name}.gn"), c_out),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: Init, rng: &mut impl Rng) {
        self.conv.init(store, init, 0.0, rng);
        self.norm.init(store);
    }

    /// Output before the activation.
    pub fn forward_linear(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        self.norm.forward(tape, p, y)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward_linear(tape, p, x)?;
        Ok(tape.relu(y))
    }
}
