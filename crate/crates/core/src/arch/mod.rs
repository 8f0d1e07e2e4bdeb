//! Network blocks: per-input reconstructors, the fusion block, the V-shaped
//! generator with its ablation variants, and the conditional patch
//! discriminator.
//!
//! All blocks are pure functions of a [`ParamStore`] and their inputs; weights
//! are looked up by name, so one store can hold the generator, the
//! reconstructors and the discriminator side by side.

mod discriminator;
mod fusion;
mod generator;
mod reconstructor;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_conv, init_dense, ParamStore};
use crate::tensor::Real;

pub use discriminator::{discriminator_forward, discriminator_plan, DISC_PREFIX};
pub use fusion::{attention_plan, maps_interact, mpfa_forward, mpfa_plan, parameter_attention, MpfaState};
pub use generator::{build_variant, generator_forward, generator_plan, GeneratorOutput, GEN_PREFIX};
pub use reconstructor::{reconstructor_forward, reconstructor_plan, ReconstructorTaps};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Input parameter names in declared order. The subtract fold of the
    /// fusion block runs in this order.
    pub inputs: Vec<String>,
    pub levels: usize,
    pub base_width: usize,
    pub bottleneck: (usize, usize),
    pub attention_ratio: usize,
}

impl NetConfig {
    /// Standard plan for `n_params` inputs named `p1..pn`.
    pub fn new(n_params: usize, base_width: usize) -> Self {
        NetConfig {
            inputs: (1..=n_params).map(|i| format!("p{i}")).collect(),
            levels: 4,
            base_width,
            bottleneck: (16 * base_width, 8 * base_width),
            attention_ratio: 8,
        }
    }

    pub fn n_params(&self) -> usize {
        self.inputs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() > 3 {
            return Err(Error::config(format!(
                "between 1 and 3 input parameters are supported, got {}",
                self.inputs.len()
            )));
        }
        let mut names = self.inputs.clone();
        names.sort();
        names.dedup();
        if names.len() != self.inputs.len() {
            return Err(Error::config("input parameter names must be unique"));
        }
        if self.levels != 4 {
            return Err(Error::config(format!("levels must be 4, got {}", self.levels)));
        }
        if self.attention_ratio == 0 || self.base_width == 0 || self.base_width % self.attention_ratio != 0 {
            return Err(Error::config(format!(
                "base_width {} must be a positive multiple of the attention ratio {}",
                self.base_width, self.attention_ratio
            )));
        }
        if self.bottleneck.0 == 0 || self.bottleneck.1 == 0 {
            return Err(Error::config("bottleneck widths must be positive"));
        }
        Ok(())
    }

    /// Channels of encoder level `l` (1-based): base · 2^(l−1).
    pub fn down_width(&self, l: usize) -> usize {
        self.base_width << (l - 1)
    }

    /// Channels of decoder level `m` (1-based), mirroring the encoder:
    /// the level-m up tap matches the level-(levels−m) down tap; the last
    /// level stays at base width.
    pub fn up_width(&self, m: usize) -> usize {
        self.down_width((self.levels - m).max(1))
    }

    /// Spatial sizes must survive `levels` halvings.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.levels;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::config(format!(
                "image size {h}×{w} must be divisible by {f}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    /// Single encoder-decoder over channel-stacked inputs.
    Mp,
    /// Reconstructors + fusion without attention or skip connections.
    Mpf,
    /// `Mpf` plus parameter attention.
    Mpfa,
    /// The complete network.
    Full,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [VariantKind::Mp, VariantKind::Mpf, VariantKind::Mpfa, VariantKind::Full];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Mp => "mp",
            VariantKind::Mpf => "mpf",
            VariantKind::Mpfa => "mpfa",
            VariantKind::Full => "full",
        }
    }

    pub fn has_reconstructors(self) -> bool {
        self != VariantKind::Mp
    }

    pub fn has_attention(self) -> bool {
        matches!(self, VariantKind::Mpfa | VariantKind::Full)
    }

    pub fn has_skips(self) -> bool {
        self == VariantKind::Full
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp" => Ok(VariantKind::Mp),
            "mpf" => Ok(VariantKind::Mpf),
            "mpfa" => Ok(VariantKind::Mpfa),
            "full" => Ok(VariantKind::Full),
            other => Err(Error::config(format!(
                "unknown variant kind {other:?} (expected mp, mpf, mpfa or full)"
            ))),
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One trainable layer in a plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { name: String, c_in: usize, c_out: usize, k: usize },
    Dense { name: String, c_in: usize, c_out: usize },
}

impl Layer {
    pub(crate) fn conv(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        Layer::Conv {
            name: name.into(),
            c_in,
            c_out,
            k,
        }
    }

    pub(crate) fn dense(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Layer::Dense {
            name: name.into(),
            c_in,
            c_out,
        }
    }
}

/// He-normal weights and zero biases for every layer of `plan`.
pub fn init_layers<T: Real>(plan: &[Layer], seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for layer in plan {
        match layer {
            Layer::Conv { name, c_in, c_out, k } => init_conv(&mut store, name, *c_in, *c_out, *k, seed),
            Layer::Dense { name, c_in, c_out } => init_dense(&mut store, name, *c_in, *c_out, seed),
        }
    }
    store
}

/// Convolution with weights `{name}.w` / `{name}.b` from `store`; 3×3
/// kernels use padding 1, 1×1 kernels none.
pub(crate) fn conv<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = store.bind(g, &format!("{name}.w"))?;
    let b = store.bind(g, &format!("{name}.b"))?;
    let k = g.value(w).shape()[2];
    g.conv2d(x, w, b, stride, k / 2)
}

pub(crate) fn conv_relu<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let y = conv(g, store, name, x, 1)?;
    g.relu(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(NetConfig::new(3, 16).validate().is_ok());
        assert!(NetConfig::new(3, 12).validate().is_err());
        assert!(NetConfig::new(4, 16).validate().is_err());
        let mut c = NetConfig::new(2, 16);
        c.levels = 5;
        assert!(c.validate().is_err());
        assert!(c.check_spatial(32, 32).is_ok());
        assert!(matches!(c.check_spatial(24, 32), Err(Error::Config(_))));
    }

    #[test]
    fn width_plan_at_base_64_reaches_1024_bottleneck() {
        let c = NetConfig::new(3, 64);
        assert_eq!(c.bottleneck, (1024, 512));
        let c = NetConfig::new(3, 16);
        assert_eq!((1..=4).map(|l| c.down_width(l)).collect::<Vec<_>>(), [16, 32, 64, 128]);
        assert_eq!((1..=4).map(|m| c.up_width(m)).collect::<Vec<_>>(), [64, 32, 16, 16]);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("mpfa".parse::<VariantKind>().unwrap(), VariantKind::Mpfa);
        assert!(matches!("unet".parse::<VariantKind>(), Err(Error::Config(_))));
    }
}
