//! Metric implementations against slow, direct oracles.

use mpsynth::data::generate_case;
use mpsynth::metrics::{evaluate_pairs, mean_std, nmse, psnr, ssim, Psnr, PsnrPeak};
use mpsynth::objectives::{PerceptualNet, DEFAULT_ALPHA};
use mpsynth::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::ssim_loop_oracle;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[1, h, w], |_| rng.random::<f32>())
}

#[test]
fn ssim_matches_window_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let x = random_image(&mut rng, 24, 20);
        let noise = random_image(&mut rng, 24, 20);
        let y = Tensor::from_fn(&[1, 24, 20], |i| (x.data()[i] + 0.2 * (noise.data()[i] - 0.5)).clamp(0.0, 1.0));
        let got = ssim(&x, &y).unwrap();
        let want = ssim_loop_oracle(&x, &y);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn nmse_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = random_image(&mut rng, 16, 16);
    let g = random_image(&mut rng, 16, 16);
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for i in 0..256 {
        let (a, b) = (y.data()[i] as f64, g.data()[i] as f64);
        num += (a - b).powi(2);
        den += a.powi(2);
    }
    assert!((nmse(&y, &g).unwrap() - num / den).abs() < 1e-9);
    assert!((nmse(&y, &y.map(|v| 0.5 * v)).unwrap() - 0.25).abs() < 1e-9);
}

#[test]
fn psnr_uses_observed_peak_by_default_and_range_on_request() {
    let y = Tensor::full(&[1, 4, 4], 0.8f32);
    let g = Tensor::full(&[1, 4, 4], 0.6f32);
    let mse = (0.8f64 - 0.6).powi(2);
    let observed = 10.0 * (0.8f32 as f64 * 0.8f32 as f64 / ((0.8f32 - 0.6f32) as f64).powi(2)).log10();
    match psnr(&y, &g, PsnrPeak::ObservedMax).unwrap() {
        Psnr::Finite(v) => assert!((v - observed).abs() < 1e-4),
        Psnr::Infinite => panic!("finite expected"),
    }
    let range = psnr(&y, &g, PsnrPeak::DataRange(1.0)).unwrap().value();
    assert!((range - 10.0 * (1.0 / mse).log10()).abs() < 1e-4);
}

#[test]
fn report_aggregates_recompute_from_rows() {
    let net = PerceptualNet::new();
    let cases: Vec<_> = (0..4)
        .map(|s| {
            let c = generate_case(s, 32).unwrap();
            (format!("c{s}"), c.y.clone(), c.p2.clone())
        })
        .collect();
    let r = evaluate_pairs(&cases, &net, &DEFAULT_ALPHA, PsnrPeak::ObservedMax).unwrap();
    let col = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..4).map(f).collect() };
    let (m, s) = mean_std(&col(&|i| r.rows[i].ssim));
    assert!((m - r.mean.ssim).abs() < 1e-12 && (s - r.std.ssim).abs() < 1e-12);
    let lp: Vec<f64> = col(&|i| r.rows[i].lp);
    let mean_lp = lp.iter().sum::<f64>() / 4.0;
    let std_lp = (lp.iter().map(|v| (v - mean_lp).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((mean_lp - r.mean.lp).abs() < 1e-12 && (std_lp - r.std.lp).abs() < 1e-12);
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert!(lines[5].starts_with("mean,") && lines[6].starts_with("std,"));
}
