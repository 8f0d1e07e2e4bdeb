use super::fusion::mpfa_plan;
use super::reconstructor::{decode, decoder_plan, encode, encoder_plan};
use super::{conv, conv_relu, init_layers, mpfa_forward, reconstructor_forward, reconstructor_plan, Layer, NetConfig, VariantKind};
use crate::autodiff::{Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const GEN_PREFIX: &str = "gen";

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// Synthesized image, N×1×H×W in (0, 1).
    pub y_hat: Var,
    /// `(input, reconstruction)` per input parameter; empty for the `mp` variant.
    pub reconstructions: Vec<(Var, Var)>,
    /// Attention maps of the fusion blocks that have one, in block order.
    pub attention: Vec<Var>,
}

/// Every trainable layer of a generator variant, reconstructors included.
pub fn generator_plan(cfg: &NetConfig, variant: VariantKind) -> Vec<Layer> {
    let n = cfg.n_params();
    let levels = cfg.levels;
    let (b0, b1) = cfg.bottleneck;
    let mut plan = Vec::new();
    if variant == VariantKind::Mp {
        plan.extend(encoder_plan("gen.ed", n, cfg));
        plan.push(Layer::conv("gen.bott.c1", cfg.down_width(levels), b0, 3));
        plan.push(Layer::conv("gen.bott.c2", b0, b1, 3));
        plan.extend(decoder_plan("gen.ed", b1, cfg));
        plan.push(Layer::conv("gen.head", cfg.up_width(levels), 1, 1));
        return plan;
    }
    for i in 0..n {
        plan.extend(reconstructor_plan(i, cfg));
    }
    let ratio = cfg.attention_ratio;
    let att = variant.has_attention();
    for k in 1..=levels {
        let extra = if k == 1 { 0 } else { cfg.down_width(k - 1) };
        plan.extend(mpfa_plan(&format!("gen.mpfa{k}"), n, cfg.down_width(k), extra, att, ratio));
    }
    plan.push(Layer::conv("gen.bott.c1", cfg.down_width(levels), b0, 3));
    plan.push(Layer::conv("gen.bott.c2", b0, b1, 3));
    for m in 1..=levels {
        let prev = if m == 1 { b1 } else { cfg.up_width(m - 1) };
        let skip = match skip_level(cfg, variant, m) {
            Some(k) => cfg.down_width(k),
            None => 0,
        };
        plan.extend(mpfa_plan(
            &format!("gen.mpfa{}", levels + m),
            n,
            cfg.up_width(m),
            prev + skip,
            att,
            ratio,
        ));
    }
    plan.push(Layer::conv("gen.head", cfg.up_width(levels), 1, 1));
    plan
}

/// Analysis level whose output is concatenated into synthesis level `m`:
/// the one at the same spatial size. The last synthesis level runs at full
/// resolution, where no analysis output exists.
fn skip_level(cfg: &NetConfig, variant: VariantKind, m: usize) -> Option<usize> {
    (variant.has_skips() && m < cfg.levels).then(|| cfg.levels - m)
}

/// Validates the configuration and draws initial weights for the variant.
pub fn build_variant<T: Real>(kind: VariantKind, cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    Ok(init_layers(&generator_plan(cfg, kind), seed))
}

/// Full synthesis pass. `inputs` are N×1×H×W images in declared order.
pub fn generator_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &NetConfig,
    variant: VariantKind,
    inputs: &[Var],
) -> Result<GeneratorOutput> {
    if inputs.len() != cfg.n_params() {
        return Err(Error::contract(format!(
            "generator configured for {} inputs, got {}",
            cfg.n_params(),
            inputs.len()
        )));
    }
    let shape = g.value(inputs[0]).shape().to_vec();
    if inputs.iter().any(|&p| g.value(p).shape() != shape.as_slice()) {
        return Err(Error::contract("generator inputs must share one shape"));
    }
    let (_, _, h, w) = g.value(inputs[0]).dims4()?;
    cfg.check_spatial(h, w)?;
    let levels = cfg.levels;

    if variant == VariantKind::Mp {
        let x = g.concat_channels(inputs)?;
        let down = encode(g, store, "gen.ed", x, cfg)?;
        let b = bottleneck(g, store, *down.last().expect("levels ≥ 1"))?;
        let up = decode(g, store, "gen.ed", b, cfg)?;
        let y_hat = head(g, store, *up.last().expect("levels ≥ 1"))?;
        return Ok(GeneratorOutput {
            y_hat,
            reconstructions: Vec::new(),
            attention: Vec::new(),
        });
    }

    let mut recs = Vec::with_capacity(inputs.len());
    for (i, &p) in inputs.iter().enumerate() {
        recs.push(reconstructor_forward(g, store, i, p, cfg)?);
    }
    let ratio = variant.has_attention().then_some(cfg.attention_ratio);
    let mut attention = Vec::new();

    // analysis path
    let mut analysis: Vec<Var> = Vec::with_capacity(levels);
    for k in 1..=levels {
        let taps: Vec<Var> = recs.iter().map(|r| r.down[k - 1]).collect();
        let context = match analysis.last() {
            Some(&prev) => vec![g.pool(prev, PoolKind::Max, 2, 2)?],
            None => Vec::new(),
        };
        let st = mpfa_forward(g, store, &format!("gen.mpfa{k}"), &taps, &context, ratio)?;
        attention.extend(st.attention);
        analysis.push(st.fused);
    }

    let mut prev = bottleneck(g, store, analysis[levels - 1])?;

    // synthesis path
    for m in 1..=levels {
        let taps: Vec<Var> = recs.iter().map(|r| r.up[m - 1]).collect();
        let mut context = vec![g.upsample2x(prev)?];
        if let Some(k) = skip_level(cfg, variant, m) {
            context.push(analysis[k - 1]);
        }
        let st = mpfa_forward(g, store, &format!("gen.mpfa{}", levels + m), &taps, &context, ratio)?;
        attention.extend(st.attention);
        prev = st.fused;
    }

    let y_hat = head(g, store, prev)?;
    Ok(GeneratorOutput {
        y_hat,
        reconstructions: inputs
            .iter()
            .zip(&recs)
            .map(|(&p, r)| (p, r.reconstruction))
            .collect(),
        attention,
    })
}

fn bottleneck<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = conv_relu(g, store, "gen.bott.c1", x)?;
    conv_relu(g, store, "gen.bott.c2", h)
}

fn head<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let logits = conv(g, store, "gen.head", x, 1)?;
    g.sigmoid(logits)
}
