//! The multi-parameter fusion block: MAPS interaction (max, average,
//! product, subtract across inputs), channel attention over the stacked
//! features, and two fusion convolutions.

use super::{conv_relu, Layer};
use crate::autodiff::{Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct MpfaState {
    pub fused: Var,
    /// N×C×1×1 attention weights; `None` when attention is disabled.
    pub attention: Option<Var>,
}

/// Elementwise `[max, average, product, subtract]` across `taps`. Subtract is
/// a left fold in the given order: `(t1 − t2) − t3 …`.
pub fn maps_interact<T: Real>(g: &mut Graph<T>, taps: &[Var]) -> Result<[Var; 4]> {
    if taps.len() < 2 {
        return Err(Error::contract(format!(
            "interaction needs at least two inputs, got {}",
            taps.len()
        )));
    }
    let shape = g.value(taps[0]).shape().to_vec();
    if taps.iter().any(|&t| g.value(t).shape() != shape.as_slice()) {
        return Err(Error::contract("interaction inputs must share one shape"));
    }
    let (mut mx, mut sum, mut prod, mut sub) = (taps[0], taps[0], taps[0], taps[0]);
    for &t in &taps[1..] {
        mx = g.max(mx, t)?;
        sum = g.add(sum, t)?;
        prod = g.mul(prod, t)?;
        sub = g.sub(sub, t)?;
    }
    let avg = g.scale(sum, 1.0 / taps.len() as f64)?;
    Ok([mx, avg, prod, sub])
}

pub fn attention_plan(prefix: &str, channels: usize, ratio: usize) -> Vec<Layer> {
    let hidden = channels / ratio;
    vec![
        Layer::dense(format!("{prefix}.att.fc1"), channels, hidden),
        Layer::dense(format!("{prefix}.att.fc2"), hidden, channels),
    ]
}

fn shared_mlp<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = store.bind(g, &format!("{prefix}.att.fc1.w"))?;
    let b1 = store.bind(g, &format!("{prefix}.att.fc1.b"))?;
    let w2 = store.bind(g, &format!("{prefix}.att.fc2.w"))?;
    let b2 = store.bind(g, &format!("{prefix}.att.fc2.b"))?;
    let h = g.dense(x, w1, b1)?;
    let h = g.relu(h)?;
    g.dense(h, w2, b2)
}

/// Returns `(A, P ⊗ A)` with `A = σ(MLP(avgpool(P)) + MLP(maxpool(P)))`;
/// both pooled branches share the MLP weights `{prefix}.att.fc1/fc2`.
pub fn parameter_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    p: Var,
    ratio: usize,
) -> Result<(Var, Var)> {
    let (n, c, _, _) = g.value(p).dims4()?;
    if ratio == 0 || c % ratio != 0 {
        return Err(Error::config(format!(
            "attention input has {c} channels, not divisible by ratio {ratio}"
        )));
    }
    let avg = g.global_pool(p, PoolKind::Average)?;
    let avg = g.reshape(avg, &[n, c])?;
    let mx = g.global_pool(p, PoolKind::Max)?;
    let mx = g.reshape(mx, &[n, c])?;
    let a = shared_mlp(g, store, prefix, avg)?;
    let b = shared_mlp(g, store, prefix, mx)?;
    let summed = g.add(a, b)?;
    let att = g.sigmoid(summed)?;
    let att = g.reshape(att, &[n, c, 1, 1])?;
    let refined = g.mul(p, att)?;
    Ok((att, refined))
}

/// Channels entering the attention / Conv1 stage for `n` inputs of width `c`.
pub(crate) fn concat_width(n: usize, c: usize) -> usize {
    if n >= 2 {
        (n + 4) * c
    } else {
        c
    }
}

pub fn mpfa_plan(
    prefix: &str,
    n: usize,
    c: usize,
    extra_in: usize,
    attention: bool,
    ratio: usize,
) -> Vec<Layer> {
    let total = concat_width(n, c);
    let mut plan = Vec::new();
    if attention {
        plan.extend(attention_plan(prefix, total, ratio));
    }
    plan.push(Layer::conv(format!("{prefix}.conv1"), total, c, 3));
    plan.push(Layer::conv(format!("{prefix}.conv2"), c + extra_in, c, 3));
    plan
}

/// One fusion block.
///
/// `taps` are the per-input features at this scale, `context` the already
/// resampled features that join Conv1's output before Conv2 (previous block
/// output, and on the synthesis path the matching analysis feature). With a
/// single input the interaction step is skipped.
pub fn mpfa_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    taps: &[Var],
    context: &[Var],
    attention: Option<usize>,
) -> Result<MpfaState> {
    let first = *taps
        .first()
        .ok_or_else(|| Error::contract("fusion block needs at least one tap"))?;
    let shape = g.value(first).shape().to_vec();
    if taps.iter().any(|&t| g.value(t).shape() != shape.as_slice()) {
        return Err(Error::contract("fusion taps must share one shape"));
    }
    let p_concat = if taps.len() >= 2 {
        let maps = maps_interact(g, taps)?;
        let all: Vec<Var> = taps.iter().copied().chain(maps).collect();
        g.concat_channels(&all)?
    } else {
        first
    };
    let (att, refined) = match attention {
        Some(ratio) => {
            let (a, r) = parameter_attention(g, store, prefix, p_concat, ratio)?;
            (Some(a), r)
        }
        None => (None, p_concat),
    };
    let merged = g.add(p_concat, refined)?;
    let z = conv_relu(g, store, &format!("{prefix}.conv1"), merged)?;
    let fused_in = if context.is_empty() {
        z
    } else {
        let mut parts = vec![z];
        parts.extend_from_slice(context);
        g.concat_channels(&parts)?
    };
    let fused = conv_relu(g, store, &format!("{prefix}.conv2"), fused_in)?;
    Ok(MpfaState {
        fused,
        attention: att,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::init_layers;
    use crate::tensor::Tensor;

    fn t(data: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn maps_binary_example() {
        let mut g = Graph::new();
        let a = g.input(t(&[1.0, 2.0]));
        let b = g.input(t(&[3.0, 0.0]));
        let [mx, avg, prod, sub] = maps_interact(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(mx).data(), &[3.0, 2.0]);
        assert_eq!(g.value(avg).data(), &[2.0, 1.0]);
        assert_eq!(g.value(prod).data(), &[3.0, 0.0]);
        assert_eq!(g.value(sub).data(), &[-2.0, 2.0]);
    }

    #[test]
    fn maps_identical_and_fold() {
        let mut g = Graph::new();
        let a = g.input(t(&[0.5, -1.5, 2.0]));
        let [mx, avg, prod, sub] = maps_interact(&mut g, &[a, a]).unwrap();
        assert_eq!(g.value(mx).data(), g.value(a).data());
        assert_eq!(g.value(avg).data(), g.value(a).data());
        assert_eq!(g.value(prod).data(), &[0.25, 2.25, 4.0]);
        assert_eq!(g.value(sub).data(), &[0.0; 3]);

        let ones = g.input(Tensor::ones(&[4]));
        let [_, avg, prod, sub] = maps_interact(&mut g, &[ones, ones, ones]).unwrap();
        assert_eq!(g.value(sub).data(), &[-1.0; 4]);
        assert_eq!(g.value(prod).data(), &[1.0; 4]);
        assert_eq!(g.value(avg).data(), &[1.0; 4]);

        assert!(matches!(maps_interact(&mut g, &[a]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_mlp_halves_every_channel() {
        let plan = attention_plan("m", 16, 8);
        let mut store = init_layers::<f32>(&plan, 1);
        for (_, v) in store.iter_mut() {
            v.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = g.input(Tensor::from_fn(&[2, 16, 4, 4], |i| (i as f32 * 0.13).cos()));
        let (a, refined) = parameter_attention(&mut g, &store, "m", p, 8).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));
        let expect: Vec<f32> = g.value(p).data().iter().map(|v| v * 0.5).collect();
        assert_eq!(g.value(refined).data(), &expect[..]);
        let q = g.input(Tensor::zeros(&[1, 12, 2, 2]));
        assert!(matches!(parameter_attention(&mut g, &store, "m", q, 8), Err(Error::Config(_))));
    }

    #[test]
    fn mpfa_output_width_is_tap_width() {
        for n in 1..=3 {
            let plan = mpfa_plan("f", n, 8, 8, true, 8);
            let store = init_layers::<f32>(&plan, 2);
            let mut g = Graph::new();
            let taps: Vec<Var> = (0..n)
                .map(|i| g.input(Tensor::from_fn(&[1, 8, 4, 4], |j| ((i * 31 + j) as f32).sin())))
                .collect();
            let prev = g.input(Tensor::ones(&[1, 8, 4, 4]));
            let st = mpfa_forward(&mut g, &store, "f", &taps, &[prev], Some(8)).unwrap();
            assert_eq!(g.value(st.fused).shape(), &[1, 8, 4, 4]);
        }
    }

    #[test]
    fn zero_conv2_gives_zero_output() {
        let plan = mpfa_plan("f", 2, 8, 0, true, 8);
        let mut store = init_layers::<f32>(&plan, 2);
        store.get_mut("f.conv2.w").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[1, 8, 4, 4], |j| (j as f32).sin()));
        let b = g.input(Tensor::from_fn(&[1, 8, 4, 4], |j| (j as f32).cos()));
        let st = mpfa_forward(&mut g, &store, "f", &[a, b], &[], Some(8)).unwrap();
        assert!(g.value(st.fused).data().iter().all(|&v| v == 0.0));
    }
}
