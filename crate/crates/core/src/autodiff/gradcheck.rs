//! Central finite-difference verification of analytic gradients, run in f64.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Upper bound on the number of accepted probe coordinates.
    pub max_probes: usize,
    pub seed: u64,
    /// A probe is discarded when any ReLU / max / abs decision changes within
    /// this distance of the probe point.
    pub kink_margin: f64,
    /// Multiplier applied to the analytic gradient; 1.0 except when testing
    /// that the checker detects a wrong gradient.
    pub grad_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tol: 1e-4,
            max_probes: 256,
            seed: 0x5eed,
            kink_margin: 1e-4,
            grad_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub pass: bool,
    pub probes: usize,
    pub discarded: usize,
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    g.track_kinks();
    let loss = f(&mut g, params)?;
    Ok((g.value(loss).sum(), g.kink_signature()))
}

/// Compares the analytic gradient of the scalar built by `f` against
/// `(f(x+eps) − f(x−eps)) / (2·eps)` on a seeded subset of the coordinates of
/// `params`.
pub fn grad_check<F>(name: &str, params: &ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    g.track_kinks();
    let loss = f(&mut g, params)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(loss)?;

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.clone(), i)))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let (mut accepted, mut discarded) = (0usize, 0usize);
    for (pname, idx) in coords {
        if accepted >= cfg.max_probes {
            break;
        }
        let x0 = params.get(&pname)?.data()[idx];
        let mut probe = |delta: f64| -> Result<(f64, Option<u64>)> {
            work.get_mut(&pname)?.data_mut()[idx] = x0 + delta;
            let r = evaluate(&f, &work);
            work.get_mut(&pname)?.data_mut()[idx] = x0;
            r
        };
        let (fp, sig_p) = probe(cfg.eps)?;
        let (fm, sig_m) = probe(-cfg.eps)?;
        let mut smooth = sig_p == base_sig && sig_m == base_sig;
        if smooth && cfg.kink_margin > cfg.eps {
            smooth = probe(cfg.kink_margin)?.1 == base_sig && probe(-cfg.kink_margin)?.1 == base_sig;
        }
        if !smooth {
            discarded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let analytic = grads
            .param(&pname)
            .map(|t| t.data()[idx])
            .unwrap_or(0.0)
            * cfg.grad_scale;
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
        accepted += 1;
    }
    Ok(GradReport {
        op: name.to_string(),
        max_rel_error: max_rel,
        pass: accepted > 0 && max_rel < cfg.tol,
        probes: accepted,
        discarded,
    })
}
