use super::{conv, conv_relu, Layer, NetConfig};
use crate::autodiff::{Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Outputs of one reconstructor pass. `down[l]` has spatial size H/2^(l+1);
/// `up[m]` has H/2^(levels−m−1).
#[derive(Clone, Debug)]
pub struct ReconstructorTaps {
    pub reconstruction: Var,
    pub down: Vec<Var>,
    pub up: Vec<Var>,
}

pub(crate) fn encoder_plan(prefix: &str, c_in: usize, cfg: &NetConfig) -> Vec<Layer> {
    let mut plan = Vec::new();
    let mut c = c_in;
    for l in 1..=cfg.levels {
        let w = cfg.down_width(l);
        plan.push(Layer::conv(format!("{prefix}.enc{l}.c1"), c, w, 3));
        plan.push(Layer::conv(format!("{prefix}.enc{l}.c2"), w, w, 3));
        c = w;
    }
    plan
}

pub(crate) fn decoder_plan(prefix: &str, c_in: usize, cfg: &NetConfig) -> Vec<Layer> {
    let mut plan = Vec::new();
    let mut c = c_in;
    for m in 1..=cfg.levels {
        let w = cfg.up_width(m);
        plan.push(Layer::conv(format!("{prefix}.dec{m}.c1"), c, w, 3));
        plan.push(Layer::conv(format!("{prefix}.dec{m}.c2"), w, w, 3));
        c = w;
    }
    plan
}

/// Layers of the reconstructor for the input at position `index`.
pub fn reconstructor_plan(index: usize, cfg: &NetConfig) -> Vec<Layer> {
    let prefix = reconstructor_prefix(index);
    let mut plan = encoder_plan(&prefix, 1, cfg);
    plan.extend(decoder_plan(&prefix, cfg.down_width(cfg.levels), cfg));
    plan.push(Layer::conv(format!("{prefix}.head"), cfg.up_width(cfg.levels), 1, 1));
    plan
}

pub(crate) fn reconstructor_prefix(index: usize) -> String {
    format!("rec{}", index + 1)
}

/// Per level: conv3×3 + relu, conv3×3 + relu, max-pool 2. Returns the pooled taps.
pub(crate) fn encode<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    cfg: &NetConfig,
) -> Result<Vec<Var>> {
    let mut taps = Vec::with_capacity(cfg.levels);
    let mut h = x;
    for l in 1..=cfg.levels {
        h = conv_relu(g, store, &format!("{prefix}.enc{l}.c1"), h)?;
        h = conv_relu(g, store, &format!("{prefix}.enc{l}.c2"), h)?;
        h = g.pool(h, PoolKind::Max, 2, 2)?;
        taps.push(h);
    }
    Ok(taps)
}

/// Per level: upsample2x, conv3×3 + relu, conv3×3 + relu. Returns the taps.
pub(crate) fn decode<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    cfg: &NetConfig,
) -> Result<Vec<Var>> {
    let mut taps = Vec::with_capacity(cfg.levels);
    let mut h = x;
    for m in 1..=cfg.levels {
        h = g.upsample2x(h)?;
        h = conv_relu(g, store, &format!("{prefix}.dec{m}.c1"), h)?;
        h = conv_relu(g, store, &format!("{prefix}.dec{m}.c2"), h)?;
        taps.push(h);
    }
    Ok(taps)
}

/// Encoder-decoder for one input parameter (`p` is N×1×H×W) with a 1×1
/// sigmoid head producing its reconstruction.
pub fn reconstructor_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    index: usize,
    p: Var,
    cfg: &NetConfig,
) -> Result<ReconstructorTaps> {
    let (_, c, h, w) = g.value(p).dims4()?;
    if c != 1 {
        return Err(Error::contract(format!("reconstructor expects one channel, got {c}")));
    }
    cfg.check_spatial(h, w)?;
    let prefix = reconstructor_prefix(index);
    let down = encode(g, store, &prefix, p, cfg)?;
    let up = decode(g, store, &prefix, *down.last().expect("levels ≥ 1"), cfg)?;
    let logits = conv(g, store, &format!("{prefix}.head"), *up.last().expect("levels ≥ 1"), 1)?;
    let reconstruction = g.sigmoid(logits)?;
    Ok(ReconstructorTaps {
        reconstruction,
        down,
        up,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::init_layers;
    use crate::tensor::Tensor;

    #[test]
    fn tap_shapes_follow_width_plan() {
        let cfg = NetConfig::new(1, 16);
        let store = init_layers::<f32>(&reconstructor_plan(0, &cfg), 3);
        let mut g = Graph::new();
        let p = g.input(Tensor::from_fn(&[1, 1, 32, 32], |i| (i % 7) as f32 / 7.0));
        let taps = reconstructor_forward(&mut g, &store, 0, p, &cfg).unwrap();
        let dims = |v: Var| {
            let s = g.value(v).shape();
            (s[1], s[2], s[3])
        };
        let down: Vec<_> = taps.down.iter().map(|&v| dims(v)).collect();
        assert_eq!(down, [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]);
        let up: Vec<_> = taps.up.iter().map(|&v| dims(v)).collect();
        assert_eq!(up, [(64, 4, 4), (32, 8, 8), (16, 16, 16), (16, 32, 32)]);
        assert_eq!(g.value(taps.reconstruction).shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn zero_head_reconstructs_one_half() {
        let cfg = NetConfig::new(1, 8);
        let mut store = init_layers::<f32>(&reconstructor_plan(0, &cfg), 3);
        store.get_mut("rec1.head.w").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = g.input(Tensor::from_fn(&[1, 1, 16, 16], |i| i as f32 / 256.0));
        let taps = reconstructor_forward(&mut g, &store, 0, p, &cfg).unwrap();
        assert!(g.value(taps.reconstruction).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn indivisible_size_is_config_error() {
        let cfg = NetConfig::new(1, 8);
        let store = init_layers::<f32>(&reconstructor_plan(0, &cfg), 3);
        let mut g = Graph::new();
        let p = g.input(Tensor::zeros(&[1, 1, 24, 24]));
        assert!(matches!(
            reconstructor_forward(&mut g, &store, 0, p, &cfg),
            Err(Error::Config(_))
        ));
    }
}
