//! Paired image-quality metrics: SSIM, PSNR, NMSE, and a per-case report.

use std::fmt::Write as _;

use crate::autodiff::Graph;
use crate::data::gaussian_kernel;
use crate::error::{Error, Result};
use crate::objectives::{loss_perceptual, PerceptualNet};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Short description of the SSIM settings, for logs.
pub const SSIM_SETTINGS: &str = "mean SSIM, 11x11 Gaussian window sigma=1.5, valid region, K1=0.01, K2=0.03, L=1";
pub const CSV_HEADER: &str = "case_id,ssim,psnr_db,nmse,lp";

/// Height and width of a single-image tensor (all leading dims must be 1).
fn image_dims(t: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::contract(format!("expected a single image, got shape {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn paired(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(usize, usize)> {
    let dx = image_dims(x)?;
    if dx != image_dims(y)? {
        return Err(Error::contract(format!(
            "image shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(dx)
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Valid-region correlation with the separable window `k`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * src[i * w + j + t];
            }
            rows[i * wo + j] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * rows[(i + t) * wo + j];
            }
            out[i * wo + j] = acc;
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5),
/// c1 = (0.01·L)², c2 = (0.03·L)² with L = 1.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    let (h, w) = paired(x, y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let k = gaussian_kernel(SSIM_SIGMA);
    debug_assert_eq!(k.len(), SSIM_WINDOW);
    let (xs, ys) = (to_f64(x), to_f64(y));
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let [mx, my, sxx, syy, sxy] = [&xs, &ys, &xx, &yy, &xy].map(|f| filter_valid(f, h, w, &k));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        total += ssim_window(mx[i], my[i], sxx[i], syy[i], sxy[i], c1, c2);
    }
    Ok(total / mx.len() as f64)
}

/// SSIM of one window from its weighted moments E[x], E[y], E[x²], E[y²], E[xy].
pub fn ssim_window(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64, c1: f64, c2: f64) -> f64 {
    let vx = exx - mx * mx;
    let vy = eyy - my * my;
    let cov = exy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// The images are identical.
    Infinite,
}

impl Psnr {
    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum PsnrPeak {
    /// Largest value present in either image.
    #[default]
    ObservedMax,
    /// Fixed data range, e.g. 1.0 for normalized images.
    DataRange(f64),
}

/// 10·log10(peak² / MSE).
pub fn psnr(y: &Tensor<f32>, g: &Tensor<f32>, peak: PsnrPeak) -> Result<Psnr> {
    paired(y, g)?;
    let n = y.numel() as f64;
    let mse = y
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let peak = match peak {
        PsnrPeak::ObservedMax => y
            .data()
            .iter()
            .chain(g.data())
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64)),
        PsnrPeak::DataRange(r) => r,
    };
    Ok(Psnr::Finite(10.0 * (peak * peak / mse).log10()))
}

/// ‖y − g‖² / ‖y‖².
pub fn nmse(y: &Tensor<f32>, g: &Tensor<f32>) -> Result<f64> {
    paired(y, g)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&a, &b) in y.data().iter().zip(g.data()) {
        let (a, b) = (a as f64, b as f64);
        num += (a - b) * (a - b);
        den += a * a;
    }
    if den == 0.0 {
        return Err(Error::contract("NMSE reference image is all zeros"));
    }
    Ok(num / den)
}

/// Perceptual distance between two single-channel images, as a metric.
pub fn perceptual_distance(net: &PerceptualNet<f32>, y: &Tensor<f32>, y_hat: &Tensor<f32>, alpha: &[f64; 5]) -> Result<f64> {
    let (h, w) = paired(y, y_hat)?;
    let mut g = Graph::<f32>::new();
    let a = g.input(y.clone().reshape(vec![1, 1, h, w])?);
    let b = g.input(y_hat.clone().reshape(vec![1, 1, h, w])?);
    let (total, _) = loss_perceptual(&mut g, net, a, b, alpha)?;
    Ok(g.value(total).data()[0] as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub case_id: String,
    pub ssim: f64,
    pub psnr: Psnr,
    pub nmse: f64,
    pub lp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub ssim: f64,
    pub psnr: f64,
    pub nmse: f64,
    pub lp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean: Aggregate,
    /// Population standard deviation.
    pub std: Aggregate,
}

/// `(mean, population std)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("metrics report needs at least one case"));
        }
        let col = |f: fn(&MetricsRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
        let (ssim_m, ssim_s) = mean_std(&col(|r| r.ssim));
        let (nmse_m, nmse_s) = mean_std(&col(|r| r.nmse));
        let (lp_m, lp_s) = mean_std(&col(|r| r.lp));
        // Infinite PSNR rows are left out of the PSNR aggregate; if every
        // row is infinite the aggregate is infinite with zero spread.
        let finite: Vec<f64> = rows.iter().filter_map(|r| match r.psnr {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }).collect();
        let (psnr_m, psnr_s) = if finite.is_empty() {
            (f64::INFINITY, 0.0)
        } else {
            mean_std(&finite)
        };
        Ok(MetricsReport {
            rows,
            mean: Aggregate {
                ssim: ssim_m,
                psnr: psnr_m,
                nmse: nmse_m,
                lp: lp_m,
            },
            std: Aggregate {
                ssim: ssim_s,
                psnr: psnr_s,
                nmse: nmse_s,
                lp: lp_s,
            },
        })
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| {
            if v.is_infinite() && v > 0.0 {
                "inf".to_string()
            } else {
                format!("{v}")
            }
        };
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.case_id, fmt(r.ssim), r.psnr, fmt(r.nmse), fmt(r.lp));
        }
        for (label, a) in [("mean", &self.mean), ("std", &self.std)] {
            let _ = writeln!(s, "{label},{},{},{},{}", fmt(a.ssim), fmt(a.psnr), fmt(a.nmse), fmt(a.lp));
        }
        s
    }
}

/// One row per `(case id, target, synthesis)` triple plus aggregates.
pub fn evaluate_pairs(
    cases: &[(String, Tensor<f32>, Tensor<f32>)],
    net: &PerceptualNet<f32>,
    alpha: &[f64; 5],
    peak: PsnrPeak,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(cases.len());
    for (id, y, y_hat) in cases {
        rows.push(MetricsRow {
            case_id: id.clone(),
            ssim: ssim(y, y_hat)?,
            psnr: psnr(y, y_hat, peak)?,
            nmse: nmse(y, y_hat)?,
            lp: perceptual_distance(net, y, y_hat, alpha)?,
        });
    }
    MetricsReport::from_rows(rows)
}
