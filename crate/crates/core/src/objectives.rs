//! Training objectives: reconstruction L1, generator adversarial + L1,
//! discriminator, multi-layer perceptual distance, and their weighted total.
//!
//! All per-image norms are taken as per-pixel means so the weights do not
//! depend on image size.

use serde::{Deserialize, Serialize};

use crate::arch::{init_layers, Layer};
use crate::autodiff::{Activation, Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const PERCEPTUAL_SEED: u64 = 0xC0FFEE;
pub const PERCEPTUAL_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];
pub const DEFAULT_ALPHA: [f64; 5] = [1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Generator L1 weight.
    pub lambda1: f64,
    /// Reconstruction weight.
    pub lambda2: f64,
    /// Perceptual weight.
    pub lambda3: f64,
    /// Per-layer perceptual weights.
    pub alpha: [f64; 5],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 100.0,
            lambda2: 25.0,
            lambda3: 200.0,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3].into_iter().chain(self.alpha);
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss weights must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    /// Minimize mean log(1 − D(fake)).
    #[default]
    Saturating,
    /// Minimize −mean log D(fake).
    NonSaturating,
}

/// Frozen random feature extractor: five [conv3×3 + relu + max-pool 2]
/// blocks with widths 8, 16, 32, 64, 64, He-normal weights from a fixed seed.
#[derive(Clone, Debug)]
pub struct PerceptualNet<T = f32> {
    weights: ParamStore<T>,
}

impl<T: Real> Default for PerceptualNet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> PerceptualNet<T> {
    pub fn new() -> Self {
        let mut plan = Vec::new();
        let mut c = 1;
        for (j, &w) in PERCEPTUAL_WIDTHS.iter().enumerate() {
            plan.push(Layer::conv(format!("percep.b{}", j + 1), c, w, 3));
            c = w;
        }
        PerceptualNet {
            weights: init_layers(&plan, PERCEPTUAL_SEED),
        }
    }

    pub fn weights(&self) -> &ParamStore<T> {
        &self.weights
    }

    /// Activations after each of the five pooling stages. Weights enter the
    /// graph as constants; gradients flow only to `x`.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<[Var; 5]> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 1 {
            return Err(Error::contract(format!("perceptual net expects 1 channel, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "perceptual loss needs spatial size divisible by 32, got {h}×{w}"
            )));
        }
        let mut out = Vec::with_capacity(5);
        let mut hcur = x;
        for j in 1..=5 {
            let wt = g.input(self.weights.get(&format!("percep.b{j}.w"))?.clone());
            let b = g.input(self.weights.get(&format!("percep.b{j}.b"))?.clone());
            hcur = g.conv2d(hcur, wt, b, 1, 1)?;
            hcur = g.relu(hcur)?;
            hcur = g.pool(hcur, PoolKind::Max, 2, 2)?;
            out.push(hcur);
        }
        Ok(out.try_into().expect("five stages"))
    }
}

fn mean_abs_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.activation(d, Activation::Abs)?;
    g.mean(d)
}

/// Σᵢ mean|pᵢ − Rᵢ(pᵢ)| over the given (input, reconstruction) pairs.
pub fn loss_reconstruction<T: Real>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(p, r) in pairs {
        if g.value(p).shape() != g.value(r).shape() {
            return Err(Error::contract("reconstruction pair shapes differ"));
        }
        terms.push(mean_abs_diff(g, p, r)?);
    }
    let mut it = terms.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::contract("reconstruction loss needs at least one pair"))?;
    it.try_fold(first, |acc, t| g.add(acc, t))
}

/// Generator objective split into its two terms.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    /// Adversarial term (mean over patches).
    pub adversarial: Var,
    /// Unweighted mean |y − ŷ|.
    pub l1: Var,
    /// adversarial + λ1 · l1.
    pub total: Var,
}

/// Adversarial term on discriminator probabilities for generated images.
pub fn adversarial_term<T: Real>(g: &mut Graph<T>, fake_prob: Var, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::Saturating => {
            let q = g.affine(fake_prob, -1.0, 1.0)?;
            let l = g.activation(q, Activation::Log)?;
            g.mean(l)
        }
        GanMode::NonSaturating => {
            let l = g.activation(fake_prob, Activation::Log)?;
            let m = g.mean(l)?;
            g.scale(m, -1.0)
        }
    }
}

pub fn loss_generator<T: Real>(
    g: &mut Graph<T>,
    fake_prob: Var,
    y_hat: Var,
    y: Var,
    lambda1: f64,
    mode: GanMode,
) -> Result<GeneratorLoss> {
    if g.value(y_hat).shape() != g.value(y).shape() {
        return Err(Error::contract("synthesis and target shapes differ"));
    }
    let adversarial = adversarial_term(g, fake_prob, mode)?;
    let l1 = mean_abs_diff(g, y, y_hat)?;
    let weighted = g.scale(l1, lambda1)?;
    let total = g.add(adversarial, weighted)?;
    Ok(GeneratorLoss { adversarial, l1, total })
}

/// −[mean log D(real) + mean log(1 − D(fake))].
pub fn loss_discriminator<T: Real>(g: &mut Graph<T>, real_prob: Var, fake_prob: Var) -> Result<Var> {
    let lr = g.activation(real_prob, Activation::Log)?;
    let lr = g.mean(lr)?;
    let q = g.affine(fake_prob, -1.0, 1.0)?;
    let lf = g.activation(q, Activation::Log)?;
    let lf = g.mean(lf)?;
    let s = g.add(lr, lf)?;
    g.scale(s, -1.0)
}

/// `(Σⱼ αⱼ·mean|φⱼ(y) − φⱼ(ŷ)|, per-layer means)`.
pub fn loss_perceptual<T: Real>(
    g: &mut Graph<T>,
    net: &PerceptualNet<T>,
    y: Var,
    y_hat: Var,
    alpha: &[f64; 5],
) -> Result<(Var, [Var; 5])> {
    if g.value(y).shape() != g.value(y_hat).shape() {
        return Err(Error::contract("perceptual loss inputs differ in shape"));
    }
    let fy = net.features(g, y)?;
    let fh = net.features(g, y_hat)?;
    let mut layers = Vec::with_capacity(5);
    for j in 0..5 {
        layers.push(mean_abs_diff(g, fy[j], fh[j])?);
    }
    let layers: [Var; 5] = layers.try_into().expect("five layers");
    let total = weighted_layer_sum(g, alpha, &layers)?;
    Ok((total, layers))
}

/// Σⱼ αⱼ·layerⱼ over scalar layer terms.
pub fn weighted_layer_sum<T: Real>(g: &mut Graph<T>, alpha: &[f64; 5], layers: &[Var; 5]) -> Result<Var> {
    let mut total = g.scale(layers[0], alpha[0])?;
    for j in 1..5 {
        let t = g.scale(layers[j], alpha[j])?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Scalar loss components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub g_adv: f64,
    pub l1: f64,
    pub l_d: f64,
    pub l_rec: f64,
    pub l_p: f64,
    pub l_p_layers: [f64; 5],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub g_adv: f64,
    pub l1: f64,
    /// g_adv + λ1 · l1
    pub l_g: f64,
    pub l_d: f64,
    pub l_rec: f64,
    pub l_p: f64,
    pub l_p_layers: [f64; 5],
}

/// total = L_G + L_D + λ2·L_Rec + λ3·L_P with L_G = adversarial + λ1·L1.
pub fn loss_total(c: &LossComponents, w: &LossWeights) -> LossBreakdown {
    let l_g = c.g_adv + w.lambda1 * c.l1;
    LossBreakdown {
        total: l_g + c.l_d + w.lambda2 * c.l_rec + w.lambda3 * c.l_p,
        g_adv: c.g_adv,
        l1: c.l1,
        l_g,
        l_d: c.l_d,
        l_rec: c.l_rec,
        l_p: c.l_p,
        l_p_layers: c.l_p_layers,
    }
}
