use super::{conv, Layer, NetConfig};
use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const DISC_PREFIX: &str = "disc";

/// Four stride-2 3×3 convolutions (widths base·1,2,4,8) plus a 1×1 logit head.
pub fn discriminator_plan(cfg: &NetConfig) -> Vec<Layer> {
    let mut plan = Vec::new();
    let mut c = cfg.n_params() + 1;
    for l in 1..=4 {
        let w = cfg.base_width << (l - 1);
        plan.push(Layer::conv(format!("disc.c{l}"), c, w, 3));
        c = w;
    }
    plan.push(Layer::conv("disc.out", c, 1, 1));
    plan
}

/// Patch logits N×1×(H/16)×(W/16) for candidate `x` conditioned on `inputs`.
pub fn discriminator_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inputs: &[Var],
    x: Var,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if inputs.iter().any(|&p| g.value(p).shape() != shape.as_slice()) {
        return Err(Error::contract(format!(
            "discriminator inputs must match candidate shape {shape:?}"
        )));
    }
    let mut parts = inputs.to_vec();
    parts.push(x);
    let mut h = g.concat_channels(&parts)?;
    for l in 1..=4 {
        h = conv(g, store, &format!("disc.c{l}"), h, 2)?;
        h = g.activation(h, Activation::LeakyRelu)?;
    }
    conv(g, store, "disc.out", h, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::init_layers;
    use crate::tensor::Tensor;

    fn setup(cfg: &NetConfig) -> (Graph<f32>, Vec<Var>) {
        let mut g = Graph::new();
        let ps = (0..cfg.n_params())
            .map(|i| g.input(Tensor::from_fn(&[1, 1, 32, 32], |j| ((i + j) as f32 * 0.1).sin().abs())))
            .collect();
        (g, ps)
    }

    #[test]
    fn logit_grid_is_sixteenth_of_input() {
        let cfg = NetConfig::new(3, 8);
        let store = init_layers::<f32>(&discriminator_plan(&cfg), 5);
        let (mut g, ps) = setup(&cfg);
        let x = g.input(Tensor::full(&[1, 1, 32, 32], 0.3));
        let logits = discriminator_forward(&mut g, &store, &ps, x).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let cfg = NetConfig::new(2, 8);
        let mut store = init_layers::<f32>(&discriminator_plan(&cfg), 5);
        store.get_mut("disc.out.w").unwrap().data_mut().fill(0.0);
        let (mut g, ps) = setup(&cfg);
        let x = g.input(Tensor::full(&[1, 1, 32, 32], 0.3));
        let logits = discriminator_forward(&mut g, &store, &ps, x).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
        let prob = g.sigmoid(logits).unwrap();
        assert!(g.value(prob).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn candidate_reaches_logits() {
        let cfg = NetConfig::new(3, 8);
        let store = init_layers::<f32>(&discriminator_plan(&cfg), 5);
        let (mut g, ps) = setup(&cfg);
        let real = g.input(Tensor::from_fn(&[1, 1, 32, 32], |j| (j as f32 * 0.05).cos().abs()));
        let fake = g.input(Tensor::full(&[1, 1, 32, 32], 0.5));
        let a = discriminator_forward(&mut g, &store, &ps, real).unwrap();
        let b = discriminator_forward(&mut g, &store, &ps, fake).unwrap();
        assert_ne!(g.value(a).data(), g.value(b).data());
        let bad = g.input(Tensor::zeros(&[1, 1, 16, 16]));
        assert!(discriminator_forward(&mut g, &store, &ps, bad).is_err());
    }
}
