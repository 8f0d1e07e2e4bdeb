//! Finite-difference checks over every differentiable primitive, the
//! network blocks, the losses and a whole generator, all in f64.

use std::str::FromStr;

use rand::Rng;

use crate::arch::{
    attention_plan, build_variant, discriminator_forward, discriminator_plan, generator_forward, init_layers,
    mpfa_forward, mpfa_plan, parameter_attention, reconstructor_forward, reconstructor_plan, NetConfig, VariantKind,
};
use crate::autodiff::{grad_check, Activation, Elementwise, GradCheckConfig, GradReport, Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::objectives::{
    loss_discriminator, loss_generator, loss_perceptual, loss_reconstruction, GanMode, PerceptualNet, DEFAULT_ALPHA,
};
use crate::params::{named_rng, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Single primitives.
    Op,
    /// Network blocks and loss terms.
    Block,
    /// A complete generator with reconstructors.
    Full,
}

impl Scope {
    pub fn default_tol(self) -> f64 {
        match self {
            Scope::Op => 1e-4,
            Scope::Block | Scope::Full => 1e-3,
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "full" => Ok(Scope::Full),
            other => Err(Error::config(format!("unknown gradcheck scope {other:?} (op, block, full)"))),
        }
    }
}

/// Minimum accepted probes for the full-generator check.
pub const FULL_MIN_PROBES: usize = 200;

/// Uniform tensor in [lo, hi) drawn from the (seed, name) stream.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64, name: &str) -> Tensor<f64> {
    let mut rng = named_rng(seed, name);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Σ r ⊙ out with a fixed random `r`, so every output element matters.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = uniform(g.value(out).shape(), -1.0, 1.0, seed, "projection");
    let r = g.input(r);
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone());
    }
    s
}

fn bind(g: &mut Graph<f64>, s: &ParamStore<f64>, name: &str) -> Result<Var> {
    s.bind(g, name)
}

type Case = (String, ParamStore<f64>, Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>);

fn op_cases(seed: u64) -> Vec<Case> {
    let u = |shape: &[usize], lo: f64, hi: f64, name: &str| uniform(shape, lo, hi, seed, name);
    let mut cases: Vec<Case> = Vec::new();

    for (label, xs, ws, stride, pad) in [
        ("conv2d 3x3 stride 1", [2, 3, 5, 5], [4, 3, 3, 3], 1, 1),
        ("conv2d 3x3 stride 2", [1, 2, 6, 6], [3, 2, 3, 3], 2, 1),
        ("conv2d 1x1", [2, 4, 3, 3], [2, 4, 1, 1], 1, 0),
    ] {
        let s = store(&[
            ("x", u(&xs, -1.0, 1.0, "x")),
            ("w", u(&ws, -0.5, 0.5, "w")),
            ("b", u(&[ws[0]], -0.5, 0.5, "b")),
        ]);
        cases.push((
            label.into(),
            s,
            Box::new(move |g, s| {
                let (x, w, b) = (bind(g, s, "x")?, bind(g, s, "w")?, bind(g, s, "b")?);
                let y = g.conv2d(x, w, b, stride, pad)?;
                project(g, y, seed)
            }),
        ));
    }

    for (label, kind) in [("max pool 2x2", PoolKind::Max), ("average pool 2x2", PoolKind::Average)] {
        cases.push((
            label.into(),
            store(&[("x", u(&[2, 3, 4, 4], -1.0, 1.0, "x"))]),
            Box::new(move |g, s| {
                let x = bind(g, s, "x")?;
                let y = g.pool(x, kind, 2, 2)?;
                project(g, y, seed)
            }),
        ));
    }
    for (label, kind) in [("global max pool", PoolKind::Max), ("global average pool", PoolKind::Average)] {
        cases.push((
            label.into(),
            store(&[("x", u(&[2, 3, 3, 4], -1.0, 1.0, "x"))]),
            Box::new(move |g, s| {
                let x = bind(g, s, "x")?;
                let y = g.global_pool(x, kind)?;
                project(g, y, seed)
            }),
        ));
    }
    cases.push((
        "upsample 2x".into(),
        store(&[("x", u(&[1, 2, 3, 3], -1.0, 1.0, "x"))]),
        Box::new(move |g, s| {
            let x = bind(g, s, "x")?;
            let y = g.upsample2x(x)?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "dense".into(),
        store(&[
            ("x", u(&[3, 5], -1.0, 1.0, "x")),
            ("w", u(&[4, 5], -0.5, 0.5, "w")),
            ("b", u(&[4], -0.5, 0.5, "b")),
        ]),
        Box::new(move |g, s| {
            let (x, w, b) = (bind(g, s, "x")?, bind(g, s, "w")?, bind(g, s, "b")?);
            let y = g.dense(x, w, b)?;
            project(g, y, seed)
        }),
    ));

    for (label, kind, lo) in [
        ("sigmoid", Activation::Sigmoid, -3.0),
        ("relu", Activation::Relu, -1.0),
        ("leaky relu", Activation::LeakyRelu, -1.0),
        ("log", Activation::Log, 0.25),
        ("neg", Activation::Neg, -1.0),
        ("abs", Activation::Abs, -1.0),
    ] {
        let hi = if lo > 0.0 { 2.0 } else { -lo };
        cases.push((
            label.into(),
            store(&[("x", u(&[2, 2, 3, 3], lo, hi, "x"))]),
            Box::new(move |g, s| {
                let x = bind(g, s, "x")?;
                let y = g.activation(x, kind)?;
                project(g, y, seed)
            }),
        ));
    }

    for (label, kind) in [
        ("add", Elementwise::Add),
        ("sub", Elementwise::Sub),
        ("mul", Elementwise::Mul),
        ("max", Elementwise::Max),
    ] {
        cases.push((
            label.into(),
            store(&[("a", u(&[2, 2, 3, 3], -1.0, 1.0, "a")), ("b", u(&[2, 2, 3, 3], -1.0, 1.0, "b"))]),
            Box::new(move |g, s| {
                let (a, b) = (bind(g, s, "a")?, bind(g, s, "b")?);
                let y = g.elementwise(a, b, kind)?;
                project(g, y, seed)
            }),
        ));
    }
    for (label, kind) in [("channel broadcast add", Elementwise::Add), ("channel broadcast mul", Elementwise::Mul)] {
        cases.push((
            label.into(),
            store(&[("a", u(&[2, 3, 3, 3], -1.0, 1.0, "a")), ("b", u(&[2, 3, 1, 1], -1.0, 1.0, "b"))]),
            Box::new(move |g, s| {
                let (a, b) = (bind(g, s, "a")?, bind(g, s, "b")?);
                let y = g.elementwise(a, b, kind)?;
                project(g, y, seed)
            }),
        ));
    }
    cases.push((
        "concat channels".into(),
        store(&[("a", u(&[2, 1, 3, 3], -1.0, 1.0, "a")), ("b", u(&[2, 2, 3, 3], -1.0, 1.0, "b"))]),
        Box::new(move |g, s| {
            let (a, b) = (bind(g, s, "a")?, bind(g, s, "b")?);
            let y = g.concat_channels(&[a, b, a])?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "reshape".into(),
        store(&[("x", u(&[2, 3, 2, 2], -1.0, 1.0, "x"))]),
        Box::new(move |g, s| {
            let x = bind(g, s, "x")?;
            let y = g.reshape(x, &[2, 12])?;
            project(g, y, seed)
        }),
    ));
    cases.push((
        "sum, mean, affine, scale".into(),
        store(&[("x", u(&[2, 3, 2, 2], -1.0, 1.0, "x"))]),
        Box::new(move |g, s| {
            let x = bind(g, s, "x")?;
            let a = g.affine(x, 1.5, -0.25)?;
            let a = project(g, a, seed)?;
            let m = g.mean(x)?;
            let m = g.scale(m, 3.0)?;
            let t = g.sum(x)?;
            let t = g.scale(t, -0.5)?;
            let am = g.add(a, m)?;
            g.add(am, t)
        }),
    ));
    cases
}

fn block_cases(seed: u64) -> Result<Vec<Case>> {
    let u = |shape: &[usize], lo: f64, hi: f64, name: &str| uniform(shape, lo, hi, seed, name);
    let mut cases: Vec<Case> = Vec::new();

    let mut s: ParamStore<f64> = init_layers(&attention_plan("blk", 16, 8), seed);
    s.insert("x", u(&[2, 16, 3, 3], 0.0, 1.0, "x"));
    cases.push((
        "channel attention".into(),
        s,
        Box::new(move |g, s| {
            let x = bind(g, s, "x")?;
            let (att, refined) = parameter_attention(g, s, "blk", x, 8)?;
            let a = project(g, att, seed)?;
            let r = project(g, refined, seed ^ 1)?;
            g.add(a, r)
        }),
    ));

    let mut s: ParamStore<f64> = init_layers(&mpfa_plan("blk", 3, 8, 8, true, 8), seed);
    for name in ["t1", "t2", "t3", "ctx"] {
        s.insert(name, u(&[1, 8, 4, 4], 0.0, 1.0, name));
    }
    cases.push((
        "fusion block".into(),
        s,
        Box::new(move |g, s| {
            let taps = [bind(g, s, "t1")?, bind(g, s, "t2")?, bind(g, s, "t3")?];
            let ctx = bind(g, s, "ctx")?;
            let st = mpfa_forward(g, s, "blk", &taps, &[ctx], Some(8))?;
            project(g, st.fused, seed)
        }),
    ));

    let cfg = NetConfig::new(1, 8);
    let mut s: ParamStore<f64> = init_layers(&reconstructor_plan(0, &cfg), seed);
    s.insert("p", u(&[1, 1, 16, 16], 0.0, 1.0, "p"));
    cases.push((
        "reconstructor".into(),
        s,
        Box::new(move |g, s| {
            let p = bind(g, s, "p")?;
            let taps = reconstructor_forward(g, s, 0, p, &cfg)?;
            project(g, taps.reconstruction, seed)
        }),
    ));

    let cfg = NetConfig::new(2, 8);
    let mut s: ParamStore<f64> = init_layers(&discriminator_plan(&cfg), seed);
    for name in ["p1", "p2", "x"] {
        s.insert(name, u(&[1, 1, 16, 16], 0.0, 1.0, name));
    }
    cases.push((
        "discriminator".into(),
        s,
        Box::new(move |g, s| {
            let (p1, p2, x) = (bind(g, s, "p1")?, bind(g, s, "p2")?, bind(g, s, "x")?);
            let logits = discriminator_forward(g, s, &[p1, p2], x)?;
            project(g, logits, seed)
        }),
    ));

    for mode in [GanMode::Saturating, GanMode::NonSaturating] {
        let s = store(&[
            ("prob", u(&[2, 1, 2, 2], 0.05, 0.95, "prob")),
            ("y_hat", u(&[2, 1, 4, 4], 0.0, 1.0, "y_hat")),
            ("y", u(&[2, 1, 4, 4], 0.0, 1.0, "y")),
        ]);
        cases.push((
            format!("generator loss ({mode:?})"),
            s,
            Box::new(move |g, s| {
                let (p, yh, y) = (bind(g, s, "prob")?, bind(g, s, "y_hat")?, bind(g, s, "y")?);
                Ok(loss_generator(g, p, yh, y, 100.0, mode)?.total)
            }),
        ));
    }
    cases.push((
        "discriminator loss".into(),
        store(&[("real", u(&[2, 1, 2, 2], 0.05, 0.95, "real")), ("fake", u(&[2, 1, 2, 2], 0.05, 0.95, "fake"))]),
        Box::new(|g, s| {
            let (r, f) = (bind(g, s, "real")?, bind(g, s, "fake")?);
            loss_discriminator(g, r, f)
        }),
    ));
    cases.push((
        "reconstruction loss".into(),
        store(&[
            ("p1", u(&[1, 1, 4, 4], 0.0, 1.0, "p1")),
            ("r1", u(&[1, 1, 4, 4], 0.0, 1.0, "r1")),
            ("p2", u(&[1, 1, 4, 4], 0.0, 1.0, "p2")),
            ("r2", u(&[1, 1, 4, 4], 0.0, 1.0, "r2")),
        ]),
        Box::new(|g, s| {
            let v: Vec<Var> = ["p1", "r1", "p2", "r2"]
                .iter()
                .map(|n| bind(g, s, n))
                .collect::<Result<_>>()?;
            loss_reconstruction(g, &[(v[0], v[1]), (v[2], v[3])])
        }),
    ));
    let net = PerceptualNet::<f64>::new();
    cases.push((
        "perceptual loss".into(),
        store(&[("y", u(&[1, 1, 32, 32], 0.0, 1.0, "y")), ("y_hat", u(&[1, 1, 32, 32], 0.0, 1.0, "y_hat"))]),
        Box::new(move |g, s| {
            let (y, yh) = (bind(g, s, "y")?, bind(g, s, "y_hat")?);
            Ok(loss_perceptual(g, &net, y, yh, &DEFAULT_ALPHA)?.0)
        }),
    ));
    Ok(cases)
}

fn full_case(seed: u64) -> Result<Case> {
    let cfg = NetConfig::new(3, 8);
    let mut s: ParamStore<f64> = build_variant(VariantKind::Full, &cfg, seed)?;
    for name in ["in.p1", "in.p2", "in.p3"] {
        s.insert(name, uniform(&[1, 1, 16, 16], 0.0, 1.0, seed, name));
    }
    Ok((
        "full generator".into(),
        s,
        Box::new(move |g, s| {
            let xs = [bind(g, s, "in.p1")?, bind(g, s, "in.p2")?, bind(g, s, "in.p3")?];
            let out = generator_forward(g, s, &cfg, VariantKind::Full, &xs)?;
            let y = project(g, out.y_hat, seed)?;
            let r = loss_reconstruction(g, &out.reconstructions)?;
            g.add(y, r)
        }),
    ))
}

/// Runs every check in `scope` at tolerance `tol`.
pub fn run_suite(scope: Scope, tol: f64, seed: u64) -> Result<Vec<GradReport>> {
    let (cases, probes) = match scope {
        Scope::Op => (op_cases(seed), 64),
        Scope::Block => (block_cases(seed)?, 48),
        Scope::Full => (vec![full_case(seed)?], 256),
    };
    let cfg = GradCheckConfig {
        tol,
        max_probes: probes,
        seed,
        ..GradCheckConfig::default()
    };
    let mut reports = Vec::with_capacity(cases.len());
    for (name, params, f) in cases {
        let mut r = grad_check(&name, &params, f, &cfg)?;
        if scope == Scope::Full && r.probes < FULL_MIN_PROBES {
            r.pass = false;
        }
        reports.push(r);
    }
    Ok(reports)
}
